"""The trusted module: sealed repository root, certificates, and procedures.

This is the only code that may mutate the repository root or touch the
module secret and user keys.  Everything it emits is either a certificate
(a self-memorandum MACed under the module secret, meaningless to anyone
else) or a user-facing value MACed under that user's shared key.

Certificates are *hypotheticals*: generating one never changes state, and a
procedure that consumes certificates re-verifies each MAC before trusting a
single field.  Rejections return ``None`` and leave the state bit-identical.
"""

from __future__ import annotations

import secrets
import threading
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path
from typing import Optional, Sequence, Union

from .iomt import Leaf, counter_value, encloses, leaf_digest
from .merkle import (
    DIGEST_SIZE,
    FieldValue,
    Side,
    ZERO_DIGEST,
    compute_root,
    encode_fields,
    hmac_sha256,
    macs_equal,
    sha256,
    u64,
)


class CertKind(IntEnum):
    NU = 1  # node update: X under root Y becomes X' under root Y'
    RV = 2  # record verify: leaf (idx, val) exists under root Y
    RU = 3  # record update: leaf value val -> val' moves root Y -> Y'
    EQ = 4  # root equivalence: Y'' is Y plus one placeholder
    CR = 5  # container record seal
    VR = 6  # version record seal


CERT_SCHEMAS: dict[int, tuple[str, ...]] = {
    CertKind.NU: ("d32", "d32", "d32", "d32"),
    CertKind.RV: ("u64", "d32", "d32"),
    CertKind.RU: ("u64", "d32", "d32", "d32", "d32"),
    CertKind.EQ: ("d32", "d32"),
    CertKind.CR: ("u64", "u64", "u64", "d32"),
    CertKind.VR: ("u64", "u64", "d32"),
}

# Leading tags for user-facing MAC bodies, so a tag minted for one purpose
# can never verify as another.
_TAG_REQUEST = 0x20
_TAG_DENIAL = 0x21
_TAG_FULL = 0x22


@dataclass(frozen=True)
class Certificate:
    kind: int
    values: tuple[FieldValue, ...]
    mac: bytes

    def body(self) -> bytes:
        schema = CERT_SCHEMAS.get(self.kind)
        if schema is None:
            raise ValueError(f"unknown certificate kind {self.kind}")
        return encode_fields(("u8",) + schema, (int(self.kind),) + tuple(self.values))


@dataclass(frozen=True)
class RvPair:
    """Existence proof plus the enclosure-derived absence proof it implies.

    One MAC covers both halves; neither half verifies alone.
    """

    existing: Certificate
    absent: Certificate

    @property
    def mac(self) -> bytes:
        return self.existing.mac


Proof = Union[Certificate, RvPair]


class RequestKind(IntEnum):
    CONTAINER = 1
    ACL = 2


@dataclass(frozen=True)
class RequestEnvelope:
    """A user's signed request: ``value`` is the content digest for container
    updates, or the new ACL root for ACL updates and creation."""

    kind: int
    idx: int
    counter: int
    value: bytes
    user_idx: int
    sig: bytes

    def signed_body(self) -> bytes:
        return encode_fields(
            ("u8", "u8", "u64", "u64", "d32"),
            (_TAG_REQUEST, int(self.kind), self.idx, self.counter, self.value),
        )

    def ack_body(self) -> bytes:
        # The trailing zero byte separates acknowledgements from request
        # signatures over the same fields.
        return self.signed_body() + b"\x00"


@dataclass(frozen=True)
class UpdateResult:
    record_cert: Certificate
    version_cert: Optional[Certificate]
    ack: bytes


@dataclass(frozen=True)
class VerifyResponse:
    """Module answer to an information query, MACed under the caller's key.

    A denial (absent container, or the caller has no access: the two are
    indistinguishable) carries only ``idx``, ``nonce``, and ``tag``; the
    optional fields stay ``None``.
    """

    idx: int
    nonce: bytes
    tag: bytes
    counter: Optional[int] = None
    max_version: Optional[int] = None
    requested_version: Optional[int] = None
    acl_root: Optional[bytes] = None
    content_digest: Optional[bytes] = None

    @property
    def denied(self) -> bool:
        return self.counter is None

    def tag_body(self) -> bytes:
        if self.denied:
            return encode_fields(("u8", "u64", "d32"), (_TAG_DENIAL, self.idx, self.nonce))
        return encode_fields(
            ("u8", "u64", "u64", "u64", "u64", "d32", "d32", "d32"),
            (
                _TAG_FULL,
                self.idx,
                self.counter,
                self.max_version,
                self.requested_version,
                self.acl_root,
                self.content_digest,
                self.nonce,
            ),
        )


class StateIntegrityError(Exception):
    """The persisted module state failed its self-MAC."""


_STATE_MAGIC = b"TCRM"
_STATE_VERSION = 1


@dataclass
class ModuleState:
    root: bytes
    secret: bytes
    user_keys: dict[int, bytes]

    @classmethod
    def fresh(cls, user_keys: dict[int, bytes]) -> "ModuleState":
        if not user_keys:
            raise ValueError("at least one user key is required")
        for idx, key in user_keys.items():
            if not 0 <= idx < 1 << 64 or len(key) != DIGEST_SIZE:
                raise ValueError("user keys must map u64 indices to 32-byte keys")
        return cls(root=ZERO_DIGEST, secret=secrets.token_bytes(DIGEST_SIZE), user_keys=dict(user_keys))


def save_state(state: ModuleState, path: Path | str) -> None:
    body = bytearray()
    body += _STATE_MAGIC
    body.append(_STATE_VERSION)
    body += state.root
    body += state.secret
    body += u64(len(state.user_keys))
    for idx in sorted(state.user_keys):
        body += u64(idx) + state.user_keys[idx]
    body += hmac_sha256(bytes(body), state.secret)
    Path(path).write_bytes(bytes(body))


def load_state(path: Path | str) -> ModuleState:
    """Load persisted state, refusing anything whose self-MAC fails.

    Emulates tamper response: a modified file is treated as erased.
    """
    data = Path(path).read_bytes()
    header = len(_STATE_MAGIC) + 1 + 2 * DIGEST_SIZE + 8
    if len(data) < header + DIGEST_SIZE or data[:4] != _STATE_MAGIC or data[4] != _STATE_VERSION:
        raise StateIntegrityError("bad module state header")
    root = data[5 : 5 + DIGEST_SIZE]
    secret = data[5 + DIGEST_SIZE : 5 + 2 * DIGEST_SIZE]
    count = int.from_bytes(data[5 + 2 * DIGEST_SIZE : header], "big")
    if len(data) != header + count * 40 + DIGEST_SIZE:
        raise StateIntegrityError("truncated module state")
    body, mac = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if not macs_equal(mac, hmac_sha256(body, secret)):
        raise StateIntegrityError("module state self-MAC mismatch")
    user_keys: dict[int, bytes] = {}
    offset = header
    for _ in range(count):
        idx = int.from_bytes(data[offset : offset + 8], "big")
        user_keys[idx] = data[offset + 8 : offset + 40]
        offset += 40
    return ModuleState(root=root, secret=secret, user_keys=user_keys)


def secret_commitment(idx: int, secret: bytes) -> bytes:
    """Commitment binding a container's encryption secret to its index."""
    return sha256(u64(idx) + secret)


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


class TrustedModule:
    """Serialized state machine around a :class:`ModuleState`.

    All calls take an internal lock, giving a total order over root
    mutations even with concurrent callers.
    """

    def __init__(self, state: ModuleState) -> None:
        self._state = state
        self._lock = threading.RLock()

    @property
    def root(self) -> bytes:
        """Current repository root; public, but only mutable in here."""
        return self._state.root

    def save(self, path: Path | str) -> None:
        with self._lock:
            save_state(self._state, path)

    # -- certificate plumbing -------------------------------------------------

    def _issue(self, kind: CertKind, values: Sequence[FieldValue]) -> Certificate:
        fields = tuple(values)
        body = Certificate(kind, fields, b"").body()
        return Certificate(kind, fields, hmac_sha256(body, self._state.secret))

    def _cert_ok(self, cert, kind: Optional[CertKind] = None) -> bool:
        if not isinstance(cert, Certificate):
            return False
        if kind is not None and cert.kind != kind:
            return False
        try:
            body = cert.body()
        except (ValueError, TypeError):
            return False
        return macs_equal(cert.mac, hmac_sha256(body, self._state.secret))

    def _pair_ok(self, pair: RvPair) -> bool:
        if not isinstance(pair, RvPair):
            return False
        for half in (pair.existing, pair.absent):
            if not isinstance(half, Certificate) or half.kind != CertKind.RV:
                return False
        try:
            joint = pair.existing.body() + pair.absent.body()
        except (ValueError, TypeError):
            return False
        expected = hmac_sha256(joint, self._state.secret)
        return macs_equal(pair.existing.mac, expected) and macs_equal(pair.absent.mac, expected)

    def certificate_valid(self, proof: Proof) -> bool:
        """Whether a certificate (or enclosure pair) verifies under the module secret."""
        with self._lock:
            if isinstance(proof, RvPair):
                return self._pair_ok(proof)
            return self._cert_ok(proof)

    def _select_rv(self, proof: Proof, idx: int) -> Optional[tuple[int, bytes, bytes]]:
        """Verify an RV proof and return the (idx, val, root) triple about ``idx``."""
        if isinstance(proof, RvPair):
            if not self._pair_ok(proof):
                return None
            for half in (proof.existing, proof.absent):
                if half.values[0] == idx:
                    return half.values  # type: ignore[return-value]
            return None
        if not self._cert_ok(proof, CertKind.RV):
            return None
        if proof.values[0] != idx:
            return None
        return proof.values  # type: ignore[return-value]

    # -- certificate generators -----------------------------------------------

    def certify_node_update(
        self,
        node: bytes,
        new_node: bytes,
        siblings: Sequence[bytes],
        sides: Sequence[Side],
    ) -> Certificate:
        """NU: map a node and its replacement through one sibling path.

        Any path yields a self-consistent certificate; whether the roots it
        names mean anything is decided by whoever consumes it.
        """
        with self._lock:
            root = compute_root(node, siblings, sides)
            new_root = root if node == new_node else compute_root(new_node, siblings, sides)
            return self._issue(CertKind.NU, (node, root, new_node, new_root))

    def certify_record(
        self, node_proof: Certificate, leaf: Optional[Leaf], absent_idx: Optional[int] = None
    ) -> Optional[Proof]:
        """RV: bind a leaf's (idx, val) to the root its node proof names.

        With ``absent_idx`` enclosed by the leaf, also emit the paired
        certificate proving ``absent_idx`` has no leaf under the same root.
        ``leaf=None`` asserts absence in an *empty* tree: only a zero root
        can be free of every index at once, so the node proof must map a
        zero leaf to a zero root.
        """
        with self._lock:
            if not self._cert_ok(node_proof, CertKind.NU):
                return None
            node, root, new_node, new_root = node_proof.values
            if node != new_node or root != new_root:
                return None  # verification demands a no-op node proof
            if leaf is None:
                if absent_idx is None or node != ZERO_DIGEST or root != ZERO_DIGEST:
                    return None
                return self._issue(CertKind.RV, (absent_idx, ZERO_DIGEST, root))
            if node != leaf_digest(leaf):
                return None
            existing = (leaf.idx, leaf.val, root)
            if absent_idx is None or not encloses(leaf.idx, leaf.next_idx, absent_idx):
                return self._issue(CertKind.RV, existing)
            absent = (absent_idx, ZERO_DIGEST, root)
            joint = (
                Certificate(CertKind.RV, existing, b"").body()
                + Certificate(CertKind.RV, absent, b"").body()
            )
            mac = hmac_sha256(joint, self._state.secret)
            return RvPair(
                Certificate(CertKind.RV, existing, mac),
                Certificate(CertKind.RV, absent, mac),
            )

    def certify_record_update(
        self, node_proof: Certificate, leaf: Leaf, new_val: bytes
    ) -> Optional[Certificate]:
        """RU: certify the root movement caused by one leaf value change."""
        with self._lock:
            if not self._cert_ok(node_proof, CertKind.NU):
                return None
            node, root, new_node, new_root = node_proof.values
            if node != leaf_digest(leaf):
                return None
            if new_node != leaf_digest(Leaf(leaf.idx, leaf.next_idx, new_val)):
                return None
            return self._issue(CertKind.RU, (leaf.idx, leaf.val, root, new_val, new_root))

    def certify_root_equivalence(
        self,
        encloser_proof: Optional[Certificate],
        placeholder_proof: Certificate,
        encloser: Optional[Leaf],
        new_idx: int,
    ) -> Optional[Certificate]:
        """EQ: certify that two roots differ by exactly one placeholder.

        The two node proofs must chain: the encloser edit's new root is the
        tree the placeholder is then inserted into.  With no encloser the
        placeholder must be a self-linked first leaf entering an empty tree
        (both the old node and the old root zero), so the certificate can
        only ever bootstrap a genuinely empty repository.
        """
        with self._lock:
            if not self._cert_ok(placeholder_proof, CertKind.NU):
                return None
            p_node, p_root, p_new_node, p_new_root = placeholder_proof.values
            if encloser_proof is None:
                if encloser is not None:
                    return None
                if p_node != ZERO_DIGEST or p_root != ZERO_DIGEST:
                    return None
                if p_new_node != leaf_digest(Leaf(new_idx, new_idx, ZERO_DIGEST)):
                    return None
                return self._issue(CertKind.EQ, (p_root, p_new_root))
            if encloser is None or not self._cert_ok(encloser_proof, CertKind.NU):
                return None
            if not encloses(encloser.idx, encloser.next_idx, new_idx):
                return None
            e_node, e_root, e_new_node, e_new_root = encloser_proof.values
            if e_node != leaf_digest(encloser):
                return None
            if e_new_node != leaf_digest(Leaf(encloser.idx, new_idx, encloser.val)):
                return None
            if p_node != ZERO_DIGEST:
                return None
            if p_new_node != leaf_digest(Leaf(new_idx, encloser.next_idx, ZERO_DIGEST)):
                return None
            if e_new_root != p_root:
                return None  # proofs do not form a chain
            return self._issue(CertKind.EQ, (e_root, p_new_root))

    # -- procedures -------------------------------------------------------------

    def toggle_placeholder(self, equivalence: Certificate) -> Optional[bytes]:
        """Move the sealed root across an EQ certificate, in either direction.

        Deliberately unauthenticated: placeholders carry no record content.
        Returns the new root, or ``None`` (state unchanged) if the current
        root matches neither side.
        """
        with self._lock:
            if not self._cert_ok(equivalence, CertKind.EQ):
                return None
            root, other = equivalence.values
            if self._state.root == root:
                self._state.root = other
                return other
            if self._state.root == other:
                self._state.root = root
                return root
            return None

    def apply_request(
        self,
        request: RequestEnvelope,
        record_update: Certificate,
        acl_proof: Optional[Proof] = None,
        record: Optional[Certificate] = None,
    ) -> Optional[UpdateResult]:
        """Apply a signed user request: creation, content update, or ACL update.

        Creation is an ACL-typed request with counter 0 whose record update
        proves a placeholder turning into counter 1.  Updates additionally
        need the sealed container record and an RV showing the caller's
        access level in that record's ACL tree (2+ to modify content,
        3 to modify the ACL).
        """
        with self._lock:
            key = self._state.user_keys.get(request.user_idx)
            if key is None:
                return None
            if not macs_equal(request.sig, hmac_sha256(request.signed_body(), key)):
                return None
            if not self._cert_ok(record_update, CertKind.RU):
                return None
            ru_idx, val, root, new_val, new_root = record_update.values
            ctr = counter_value(val)
            new_ctr = counter_value(new_val)
            if ctr is None or new_ctr is None or new_ctr != ctr + 1:
                return None  # record update does not reflect a counter increment
            if root != self._state.root:
                return None  # current root does not match
            if ru_idx != request.idx:
                return None
            ack = hmac_sha256(request.ack_body(), key)

            if request.kind == RequestKind.ACL and request.counter == 0:
                if ctr != 0:
                    return None  # creation must start from a placeholder
                record_cert = self._issue(CertKind.CR, (request.idx, 1, 0, request.value))
                self._state.root = new_root
                return UpdateResult(record_cert, None, ack)

            if not self._cert_ok(record, CertKind.CR):
                return None
            c_idx, c_ctr, c_ver, acl_root = record.values
            if c_idx != request.idx or c_ctr != ctr or request.counter != c_ctr:
                return None  # inconsistent certificates
            rv = self._select_rv(acl_proof, request.user_idx) if acl_proof is not None else None
            if rv is None:
                return None
            _, access_digest, rv_root = rv
            if rv_root != acl_root:
                return None
            access = counter_value(access_digest)
            if access is None:
                return None

            if request.kind == RequestKind.CONTAINER and access >= 2:
                record_cert = self._issue(
                    CertKind.CR, (request.idx, c_ctr + 1, c_ver + 1, acl_root)
                )
                version_cert = self._issue(CertKind.VR, (request.idx, c_ver + 1, request.value))
                self._state.root = new_root
                return UpdateResult(record_cert, version_cert, ack)

            if request.kind == RequestKind.ACL and access >= 3:
                # ACL updates bump the counter but leave the version count alone.
                record_cert = self._issue(CertKind.CR, (request.idx, c_ctr + 1, c_ver, request.value))
                self._state.root = new_root
                return UpdateResult(record_cert, None, ack)

            return None  # insufficient permissions

    def verify_container(
        self,
        user_idx: int,
        nonce: bytes,
        requested_version: int,
        container_proof: Proof,
        record: Optional[Certificate] = None,
        acl_proof: Optional[Proof] = None,
        version_cert: Optional[Certificate] = None,
    ) -> Optional[VerifyResponse]:
        """Answer an information query with a MACed response or denial.

        The denial for an absent container and the denial for a caller with
        zero access are built identically, so the caller cannot tell the two
        apart.  ``None`` means the supplied evidence itself was bad, which
        distinguishes service misbehavior from an authenticated denial.
        """
        with self._lock:
            key = self._state.user_keys.get(user_idx)
            if key is None or len(nonce) != DIGEST_SIZE:
                return None
            if isinstance(container_proof, RvPair):
                if not self._pair_ok(container_proof):
                    return None
                idx, val, root = container_proof.absent.values
            else:
                if not self._cert_ok(container_proof, CertKind.RV):
                    return None
                idx, val, root = container_proof.values
            if root != self._state.root:
                return None
            ctr = counter_value(val)
            if ctr is None:
                return None
            if ctr == 0:
                return self._denial(idx, nonce, key)

            if not self._cert_ok(record, CertKind.CR):
                return None
            c_idx, c_ctr, c_ver, acl_root = record.values
            if c_idx != idx or c_ctr != ctr:
                return None
            rv = self._select_rv(acl_proof, user_idx) if acl_proof is not None else None
            if rv is None:
                return None
            _, access_digest, rv_root = rv
            if rv_root != acl_root:
                return None
            access = counter_value(access_digest)
            if access is None:
                return None
            if access == 0:
                return self._denial(idx, nonce, key)

            if not self._cert_ok(version_cert, CertKind.VR):
                return None
            v_idx, version, content_digest = version_cert.values
            if v_idx != idx or version != requested_version:
                return None
            response = VerifyResponse(
                idx=idx,
                nonce=nonce,
                tag=b"",
                counter=c_ctr,
                max_version=c_ver,
                requested_version=requested_version,
                acl_root=acl_root,
                content_digest=content_digest,
            )
            return self._tagged(response, key)

    def _denial(self, idx: int, nonce: bytes, key: bytes) -> VerifyResponse:
        return self._tagged(VerifyResponse(idx=idx, nonce=nonce, tag=b""), key)

    @staticmethod
    def _tagged(response: VerifyResponse, key: bytes) -> VerifyResponse:
        return replace(response, tag=hmac_sha256(response.tag_body(), key))

    def store_secret(
        self, idx: int, counter: int, user_idx: int, wrapped: bytes, commitment: bytes
    ) -> Optional[bytes]:
        """Re-seal a user's container secret under the module secret.

        The user sends the secret XOR-padded under their shared key; the
        commitment lets the module check integrity before re-sealing.
        """
        with self._lock:
            key = self._state.user_keys.get(user_idx)
            if key is None or len(wrapped) != DIGEST_SIZE or len(commitment) != DIGEST_SIZE:
                return None
            pad = hmac_sha256(encode_fields(("u64", "u64"), (idx, counter)), key)
            secret = _xor(wrapped, pad)
            if not macs_equal(commitment, secret_commitment(idx, secret)):
                return None
            return _xor(secret, sha256(commitment + self._state.secret))

    def release_secret(
        self,
        user_idx: int,
        idx: int,
        counter: int,
        version_count: int,
        container_proof: Proof,
        acl_proof: Proof,
        record: Certificate,
        sealed: bytes,
        commitment: bytes,
    ) -> Optional[bytes]:
        """Unseal a stored container secret and re-pad it for an authorized user."""
        with self._lock:
            key = self._state.user_keys.get(user_idx)
            if key is None or len(sealed) != DIGEST_SIZE or len(commitment) != DIGEST_SIZE:
                return None
            rv1 = self._select_rv(container_proof, idx)
            if rv1 is None:
                return None
            _, val, root = rv1
            if root != self._state.root:
                return None
            if counter_value(val) != counter:
                return None
            if not self._cert_ok(record, CertKind.CR):
                return None
            c_idx, c_ctr, c_ver, acl_root = record.values
            if c_idx != idx or c_ctr != counter or c_ver != version_count:
                return None
            rv2 = self._select_rv(acl_proof, user_idx)
            if rv2 is None:
                return None
            _, access_digest, rv_root = rv2
            if rv_root != acl_root:
                return None
            access = counter_value(access_digest)
            if access is None or access < 1:
                return None  # improper privileges
            secret = _xor(sealed, sha256(commitment + self._state.secret))
            if not macs_equal(commitment, secret_commitment(idx, secret)):
                return None
            return _xor(secret, sha256(commitment + key))
