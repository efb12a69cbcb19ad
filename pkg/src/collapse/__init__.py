"""Encrypted presence histories with group-only statistics.

Users encrypt per-timestep presence bits under their own keys with an
additively homomorphic pad cipher; an untrusted store sums ciphertexts over
any subset, and key plans decide who can decrypt which sums.
"""

from collapse.crypto import (
    DEFAULT_MODULUS,
    DEFAULT_PARAMS,
    CryptoError,
    ModulusParams,
    Nonce,
    SecretKey,
    combine,
    decrypt,
    encrypt,
    generate_key,
    length_match,
    pad,
    pad_sum,
    prf,
)
from collapse.protocols import (
    KeyPlan,
    KeyRing,
    KeyRingError,
    PlanError,
    collusion_audit,
    decrypt_group,
    plan_base,
    plan_chain,
    plan_graph,
    plan_nested,
    required_keys,
    statistics,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_MODULUS",
    "DEFAULT_PARAMS",
    "CryptoError",
    "KeyPlan",
    "KeyRing",
    "KeyRingError",
    "ModulusParams",
    "Nonce",
    "PlanError",
    "SecretKey",
    "collusion_audit",
    "combine",
    "decrypt",
    "decrypt_group",
    "encrypt",
    "generate_key",
    "length_match",
    "pad",
    "pad_sum",
    "plan_base",
    "plan_chain",
    "plan_graph",
    "plan_nested",
    "prf",
    "required_keys",
    "statistics",
]
