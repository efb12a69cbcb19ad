"""Symmetric additively homomorphic cipher over Z_M.

A value ``v`` is encrypted by adding a pad ``h(f_k(n)) mod M`` where ``f`` is
HMAC-SHA-256 keyed with the user's secret and ``h`` folds the 256-bit PRF
block into a residue by summing its ``mu``-bit big-endian words.  Because
pads are plain residues, ciphertexts under different keys can be added
together and decrypted by subtracting the matching sum of pads.
"""

from __future__ import annotations

import hmac
import secrets
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

DEFAULT_MODULUS = 2**32
DEFAULT_SECURITY_PARAM = 128
SUPPORTED_SECURITY_PARAMS = (128, 256)

NUM_STATES = 5
# Nonce state indices 0-4 carry presence bits; 5-9 carry their squares.
SQUARES_OFFSET = NUM_STATES
MAX_STATE_INDEX = 2 * NUM_STATES - 1

_NONCE = struct.Struct(">QB")
_WORDS32 = struct.Struct(">8I")


class CryptoError(Exception):
    """Raised for malformed keys, parameters or ciphertexts."""


@dataclass(frozen=True)
class ModulusParams:
    """Modulus ``M`` (a power of two up to 2**64) and its bit length ``mu``."""

    M: int = DEFAULT_MODULUS

    def __post_init__(self) -> None:
        M = self.M
        if not isinstance(M, int) or M < 2 or M > 2**64 or M & (M - 1):
            raise CryptoError(f"modulus must be a power of two in [2, 2**64], got {M!r}")

    @property
    def mu(self) -> int:
        return self.M.bit_length() - 1

    @property
    def width(self) -> int:
        """Bytes needed to serialize one ciphertext."""
        return (self.mu + 7) // 8


DEFAULT_PARAMS = ModulusParams()


@dataclass(frozen=True)
class SecretKey:
    data: bytes

    def __post_init__(self) -> None:
        if len(self.data) * 8 not in SUPPORTED_SECURITY_PARAMS:
            raise CryptoError(f"key must be 16 or 32 bytes, got {len(self.data)}")

    def __repr__(self) -> str:
        # never leak key material into logs
        return f"SecretKey(<{len(self.data) * 8} bits>)"

    @property
    def bits(self) -> int:
        return len(self.data) * 8

    def hex(self) -> str:
        return self.data.hex()

    @classmethod
    def fromhex(cls, text: str) -> "SecretKey":
        try:
            return cls(bytes.fromhex(text.strip()))
        except ValueError as exc:
            raise CryptoError(f"bad key hex: {exc}") from None


@dataclass(frozen=True, order=True)
class Nonce:
    timestamp: int
    state_index: int

    def __post_init__(self) -> None:
        if not 0 <= self.timestamp < 2**64:
            raise CryptoError(f"timestamp out of range: {self.timestamp}")
        if not 0 <= self.state_index <= MAX_STATE_INDEX:
            raise CryptoError(f"state index out of range: {self.state_index}")

    def to_bytes(self) -> bytes:
        return _NONCE.pack(self.timestamp, self.state_index)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Nonce":
        if len(raw) != _NONCE.size:
            raise CryptoError(f"nonce must be {_NONCE.size} bytes")
        return cls(*_NONCE.unpack(raw))


def generate_key(security_param: int = DEFAULT_SECURITY_PARAM) -> SecretKey:
    if security_param not in SUPPORTED_SECURITY_PARAMS:
        raise CryptoError(f"unsupported security parameter {security_param}")
    return SecretKey(secrets.token_bytes(security_param // 8))


def prf(key: SecretKey, nonce: Nonce) -> bytes:
    """HMAC-SHA-256 of the serialized nonce; a 32-byte block."""
    return hmac.digest(key.data, nonce.to_bytes(), "sha256")


def length_match(block: bytes, params: ModulusParams = DEFAULT_PARAMS) -> int:
    """Sum the consecutive ``mu``-bit big-endian words of *block* modulo M.

    A trailing partial word is zero-padded on the right.
    """
    if params.mu == 32 and len(block) == 32:
        return sum(_WORDS32.unpack(block)) & 0xFFFFFFFF
    mu = params.mu
    nbits = len(block) * 8
    value = int.from_bytes(block, "big") << (-nbits % mu)
    mask = params.M - 1
    total = 0
    while value:
        total += value & mask
        value >>= mu
    return total & mask


def pad(key: SecretKey, nonce: Nonce, params: ModulusParams = DEFAULT_PARAMS) -> int:
    return length_match(prf(key, nonce), params)


def encrypt(v: int, key: SecretKey, nonce: Nonce, params: ModulusParams = DEFAULT_PARAMS) -> int:
    if not 0 <= v < params.M:
        raise CryptoError(f"plaintext {v} outside [0, {params.M})")
    return (v + pad(key, nonce, params)) % params.M


def decrypt(c: int, key: SecretKey, nonce: Nonce, params: ModulusParams = DEFAULT_PARAMS) -> int:
    return (c + params.M - pad(key, nonce, params)) % params.M


def combine(
    ciphertexts: Sequence[int],
    weights: Sequence[int] | None = None,
    params: ModulusParams = DEFAULT_PARAMS,
) -> int:
    """Weighted modular sum of ciphertexts; unit weights when omitted."""
    if weights is None:
        return sum(ciphertexts) % params.M
    if len(weights) != len(ciphertexts):
        raise CryptoError("ciphertexts and weights differ in length")
    if any(w < 0 for w in weights):
        raise CryptoError("weights must be non-negative")
    return sum(w * c for w, c in zip(weights, ciphertexts)) % params.M


def pad_sum(
    keys_and_nonces: Sequence[tuple[SecretKey, Nonce]],
    weights: Sequence[int] | None = None,
    params: ModulusParams = DEFAULT_PARAMS,
) -> int:
    """Weighted sum of pads; subtract it from the matching combined ciphertext."""
    if weights is None:
        weights = [1] * len(keys_and_nonces)
    elif len(weights) != len(keys_and_nonces):
        raise CryptoError("keys_and_nonces and weights differ in length")
    total = 0
    for (key, nonce), w in zip(keys_and_nonces, weights):
        total += w * pad(key, nonce, params)
    return total % params.M


def unpad(c: int, pads: int, params: ModulusParams = DEFAULT_PARAMS) -> int:
    """Remove an aggregated pad from a ciphertext, staying inside [0, M)."""
    return (c + params.M - pads % params.M) % params.M


def ciphertext_to_bytes(c: int, params: ModulusParams = DEFAULT_PARAMS) -> bytes:
    if not 0 <= c < params.M:
        raise CryptoError(f"ciphertext {c} outside [0, {params.M})")
    return c.to_bytes(params.width, "big")


def ciphertext_from_bytes(raw: bytes, params: ModulusParams = DEFAULT_PARAMS) -> int:
    if len(raw) != params.width:
        raise CryptoError(f"ciphertext must be {params.width} bytes, got {len(raw)}")
    c = int.from_bytes(raw, "big")
    if c >= params.M:
        raise CryptoError("ciphertext exceeds modulus")
    return c


def read_golden_vectors(lines: Iterable[str]) -> list[tuple[SecretKey, Nonce, int, int]]:
    """Parse ``key_hex nonce_hex pad_hex cipher_hex`` lines, skipping comments."""
    out = []
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key_hex, nonce_hex, pad_hex, cipher_hex = line.split()
        out.append(
            (
                SecretKey.fromhex(key_hex),
                Nonce.from_bytes(bytes.fromhex(nonce_hex)),
                int(pad_hex, 16),
                int(cipher_hex, 16),
            )
        )
    return out


def write_golden_vectors(
    entries: Iterable[tuple[SecretKey, Nonce]],
    plaintext: int = 1,
    params: ModulusParams = DEFAULT_PARAMS,
) -> list[str]:
    lines = []
    for key, nonce in entries:
        r = pad(key, nonce, params)
        c = encrypt(plaintext, key, nonce, params)
        lines.append(
            f"{key.hex()} {nonce.to_bytes().hex()} "
            f"{ciphertext_to_bytes(r, params).hex()} {ciphertext_to_bytes(c, params).hex()}"
        )
    return lines
