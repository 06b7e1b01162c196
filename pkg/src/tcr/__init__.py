"""Tamper-evident container repository.

An untrusted service stores container images, build files, and compose
files; a minimal trusted module certifies every state change and query
answer against a single sealed Merkle root, so clients can verify content
integrity, catch improper denials, and keep secrets away from the service.
"""

from .client import (
    RepositoryClient,
    UserCredential,
    Verdict,
    check_info_response,
    content_digest_of,
    unwrap_secret,
    wrap_secret,
    xor_keystream,
)
from .iomt import Geometry, Iomt, Leaf, counter_digest, counter_value, encloses, oracle_root
from .merkle import Side, ZERO_DIGEST, compute_root, hmac_sha256, parent, sha256
from .module import (
    Certificate,
    CertKind,
    ModuleState,
    RequestEnvelope,
    RequestKind,
    RvPair,
    TrustedModule,
    VerifyResponse,
    load_state,
    save_state,
)
from .service import ProtocolError, Service, StepClock
from .storage import BlobSet, ContainerRecord, Storage, VersionRecord, bulk_prepopulate

__version__ = "0.1.0"

__all__ = [
    "BlobSet",
    "Certificate",
    "CertKind",
    "ContainerRecord",
    "Geometry",
    "Iomt",
    "Leaf",
    "ModuleState",
    "ProtocolError",
    "RepositoryClient",
    "RequestEnvelope",
    "RequestKind",
    "RvPair",
    "Service",
    "Side",
    "StepClock",
    "Storage",
    "TrustedModule",
    "UserCredential",
    "Verdict",
    "VerifyResponse",
    "VersionRecord",
    "ZERO_DIGEST",
    "bulk_prepopulate",
    "check_info_response",
    "compute_root",
    "content_digest_of",
    "counter_digest",
    "counter_value",
    "encloses",
    "hmac_sha256",
    "load_state",
    "oracle_root",
    "parent",
    "save_state",
    "sha256",
    "unwrap_secret",
    "wrap_secret",
    "xor_keystream",
]
