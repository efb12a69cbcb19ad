from collapse.service.client import (
    AnalystClient,
    AnalystSession,
    CancellationError,
    DecryptedBin,
    FuserClient,
    ServiceError,
    decrypt_aggregate,
    encrypt_record,
    precompute_pads,
)
from collapse.service.server import create_app, serve

__all__ = [
    "AnalystClient",
    "AnalystSession",
    "CancellationError",
    "DecryptedBin",
    "FuserClient",
    "ServiceError",
    "create_app",
    "decrypt_aggregate",
    "encrypt_record",
    "precompute_pads",
    "serve",
]
