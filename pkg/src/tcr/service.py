"""The untrusted service: assembles certificates, drives the module, persists.

Every pipeline follows the same discipline: build node proofs from the
stored trees, ask the module to certify them, and only persist once the
module has accepted.  If the module rejects anything the enclosing sqlite
transaction rolls back, so the store never holds state it cannot re-prove.

Certificates are cached per root epoch; an entry minted under an older root
is never served again, it is simply rebuilt.
"""

from __future__ import annotations

import threading
import time
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass
from typing import Iterator, Optional

from .iomt import (
    Iomt,
    IndexPresentError,
    Leaf,
    TreeFullError,
    counter_digest,
    counter_value,
    leaf_digest,
    updated_leaf_map,
)
from .merkle import ZERO_DIGEST, sha256
from .module import (
    Certificate,
    Proof,
    RequestEnvelope,
    RequestKind,
    TrustedModule,
    VerifyResponse,
)
from .storage import (
    CONTAINER_TREE,
    BlobSet,
    ContainerRecord,
    DEFAULT_ACL_HEIGHT,
    Storage,
    VersionRecord,
    acl_tree_id,
    bulk_prepopulate,
)


class ProtocolError(Exception):
    """Malformed request or evidence the service cannot assemble.

    Distinct from an authenticated denial: denials are module-tagged
    answers, protocol errors are not.
    """

    def __init__(self, message: str, hints: Optional[dict] = None) -> None:
        super().__init__(message)
        self.hints = hints


class _Rejected(Exception):
    """Internal: module said no; unwind the transaction, then report None."""


class StepClock:
    """Accumulates per-step service time for one operation.

    Uses the monotonic wall clock: the benchmark drives the service as a
    single uncontended in-process caller, where wall time tracks service
    work, and process CPU clocks tick far too coarsely inside containers to
    resolve microsecond steps.
    """

    now = staticmethod(time.perf_counter_ns)

    def __init__(self) -> None:
        self.steps: dict[str, int] = {}

    @contextmanager
    def step(self, label: str) -> Iterator[None]:
        start = self.now()
        try:
            yield
        finally:
            self.steps[label] = self.steps.get(label, 0) + self.now() - start


def _step(clock: Optional[StepClock], label: str):
    return clock.step(label) if clock is not None else nullcontext()


class CertCache:
    """Epoch-tagged certificate cache.

    Entries are only served while the module root still equals the root they
    were minted under; the whole cache is dropped when the epoch moves.
    """

    def __init__(self) -> None:
        self._epoch: bytes = ZERO_DIGEST
        self._entries: dict[tuple, Proof] = {}

    def get(self, key: tuple, epoch: bytes) -> Optional[Proof]:
        if epoch != self._epoch:
            return None
        return self._entries.get(key)

    def put(self, key: tuple, epoch: bytes, proof: Proof) -> None:
        if epoch != self._epoch:
            self._entries.clear()
            self._epoch = epoch
        self._entries[key] = proof


@dataclass(frozen=True)
class CreateResult:
    ack: bytes
    record_cert: Certificate


@dataclass(frozen=True)
class ModifyResult:
    ack: bytes
    record_cert: Certificate
    version_cert: Certificate
    version: int


@dataclass(frozen=True)
class AclResult:
    ack: bytes
    record_cert: Certificate


@dataclass(frozen=True)
class InfoResult:
    response: VerifyResponse
    hints: Optional[dict] = None


@dataclass(frozen=True)
class FetchResult:
    blobs: BlobSet
    version: int
    secret_commitment: bytes
    sealed_for_user: Optional[bytes]
    verify: Optional[InfoResult] = None


class Service:
    """Request pipelines over one storage instance and one trusted module.

    All module interactions and store writes funnel through one lock, so
    pipelines execute in a total order; concurrent wire handlers simply
    queue.
    """

    def __init__(
        self,
        storage: Storage,
        module: TrustedModule,
        height: int,
        acl_height: int = DEFAULT_ACL_HEIGHT,
        use_cert_cache: bool = True,
    ) -> None:
        self.storage = storage
        self.module = module
        self.height = height
        self.acl_height = acl_height
        self._cache = CertCache() if use_cert_cache else None
        self._lock = threading.RLock()

    def _retrying(self, pipeline, *args):
        """Run a mutation pipeline, retrying once if the root moved under it.

        The service serializes its own pipelines, but the placeholder toggle
        is deliberately open to anyone holding the module, so a rejection
        caused by a mid-flight root change is benign and worth one rebuild.
        """
        result = None
        for _ in range(2):
            epoch = self.module.root
            try:
                result = pipeline(*args)
            except _Rejected:
                result = None
            if result is not None or self.module.root == epoch:
                return result
        return result

    def container_tree(self) -> Iomt:
        return Iomt(self.height, self.storage.tree(CONTAINER_TREE))

    def acl_tree(self, container_idx: int) -> Iomt:
        return Iomt(self.acl_height, self.storage.tree(acl_tree_id(container_idx)))

    def prepopulate(self, count: int, owner_idx: int, state, **kwargs) -> bytes:
        with self._lock:
            return bulk_prepopulate(self.storage, self.height, count, owner_idx, state, **kwargs)

    # -- proof assembly ---------------------------------------------------------

    def _verification_proof(self, tree: Iomt, slot: int, leaf: Leaf) -> Certificate:
        path = tree.complement_path(slot)
        siblings = [p[0] for p in path]
        sides = [p[1] for p in path]
        digest = leaf_digest(leaf)
        return self.module.certify_node_update(digest, digest, siblings, sides)

    def _record_proof(self, tree: Iomt, idx: int, cache_key: Optional[tuple]) -> Optional[Proof]:
        """RV for a present index, or an enclosure pair proving its absence."""
        epoch = self.module.root
        if self._cache is not None and cache_key is not None:
            hit = self._cache.get(cache_key, epoch)
            if hit is not None:
                return hit
        found = tree.find_leaf(idx)
        if found is not None:
            slot, leaf = found
            proof = self.module.certify_record(self._verification_proof(tree, slot, leaf), leaf)
        else:
            enclosing = tree.find_encloser(idx)
            if enclosing is not None:
                slot, leaf = enclosing
                proof = self.module.certify_record(
                    self._verification_proof(tree, slot, leaf), leaf, absent_idx=idx
                )
            else:
                # Empty tree: absence is proved directly against the zero root.
                path = tree.complement_path(0)
                node_proof = self.module.certify_node_update(
                    ZERO_DIGEST, ZERO_DIGEST, [p[0] for p in path], [p[1] for p in path]
                )
                proof = self.module.certify_record(node_proof, None, absent_idx=idx)
        if proof is not None and self._cache is not None and cache_key is not None:
            self._cache.put(cache_key, epoch, proof)
        return proof

    def _container_proof(self, idx: int) -> Optional[Proof]:
        return self._record_proof(self.container_tree(), idx, ("container", idx))

    def _acl_proof(self, container_idx: int, user_idx: int) -> Optional[Proof]:
        return self._record_proof(
            self.acl_tree(container_idx), user_idx, ("acl", container_idx, user_idx)
        )

    def _counter_update_cert(
        self, tree: Iomt, slot: int, leaf: Leaf, new_counter: int
    ) -> Optional[Certificate]:
        path = tree.complement_path(slot)
        siblings = [p[0] for p in path]
        sides = [p[1] for p in path]
        new_val = counter_digest(new_counter)
        node_proof = self.module.certify_node_update(
            leaf_digest(leaf), leaf_digest(Leaf(leaf.idx, leaf.next_idx, new_val)), siblings, sides
        )
        return self.module.certify_record_update(node_proof, leaf, new_val)

    def _access_level(self, container_idx: int, user_idx: int) -> int:
        found = self.acl_tree(container_idx).find_leaf(user_idx)
        if found is None:
            return 0
        level = counter_value(found[1].val)
        return level if level is not None else 0

    def _hints(self, record: ContainerRecord) -> dict:
        acl = [
            [slot, leaf.idx, leaf.next_idx, leaf.val.hex()]
            for slot, leaf in self.acl_tree(record.idx).leaves()
        ]
        return {
            "counter": record.counter,
            "max_version": record.version_count,
            "acl_height": self.acl_height,
            "acl": acl,
        }

    # -- mutation pipelines -------------------------------------------------------

    def handle_create(self, req: RequestEnvelope, clock: Optional[StepClock] = None):
        """Create a container: placeholder insertion, then counter 0 -> 1.

        Returns ``None`` (store untouched) when the module rejects.
        """
        if req.kind != RequestKind.ACL or req.counter != 0:
            raise ProtocolError("creation must be an ACL-typed request with counter 0")
        with self._lock:
            return self._retrying(self._create_once, req, clock)

    def _create_once(self, req: RequestEnvelope, clock: Optional[StepClock]):
        tree = self.container_tree()
        module = self.module
        with self.storage.transaction(commit_timer=_step(clock, "persist_records")):
            with _step(clock, "eq_certificate"):
                existing = tree.find_leaf(req.idx)
            if existing is not None:
                # Drive the module anyway: a record update claiming the leaf
                # was a placeholder cannot map to the live root.
                slot, leaf = existing
                fake = Leaf(req.idx, leaf.next_idx, ZERO_DIGEST)
                ru = self._counter_update_cert(tree, slot, fake, 1)
                if ru is not None:
                    module.apply_request(req, ru)
                return None

            with _step(clock, "eq_certificate"):
                try:
                    plan = tree.placeholder_plan(req.idx)
                except (TreeFullError, IndexPresentError) as exc:
                    raise ProtocolError(str(exc)) from exc
                if plan.encloser_slot is None:
                    path = tree.complement_path(plan.placeholder_slot)
                    placeholder_proof = module.certify_node_update(
                        ZERO_DIGEST,
                        leaf_digest(plan.placeholder_leaf),
                        [p[0] for p in path],
                        [p[1] for p in path],
                    )
                    equivalence = module.certify_root_equivalence(
                        None, placeholder_proof, None, req.idx
                    )
                else:
                    enc_path = tree.complement_path(plan.encloser_slot)
                    encloser_proof = module.certify_node_update(
                        leaf_digest(plan.encloser_leaf),
                        leaf_digest(plan.updated_encloser),
                        [p[0] for p in enc_path],
                        [p[1] for p in enc_path],
                    )
                    tree.set_leaf(plan.encloser_slot, plan.updated_encloser)
                    ph_path = tree.complement_path(plan.placeholder_slot)
                    placeholder_proof = module.certify_node_update(
                        ZERO_DIGEST,
                        leaf_digest(plan.placeholder_leaf),
                        [p[0] for p in ph_path],
                        [p[1] for p in ph_path],
                    )
                    equivalence = module.certify_root_equivalence(
                        encloser_proof, placeholder_proof, plan.encloser_leaf, req.idx
                    )
                if equivalence is None:
                    raise ProtocolError("module refused the placeholder equivalence proof")

            with _step(clock, "placeholder_insert"):
                if module.toggle_placeholder(equivalence) is None:
                    raise _Rejected()  # root moved under us; retryable
                tree.set_leaf(plan.placeholder_slot, plan.placeholder_leaf)

            with _step(clock, "ru_certificate"):
                ru = self._counter_update_cert(
                    tree, plan.placeholder_slot, plan.placeholder_leaf, 1
                )

            with _step(clock, "root_update"):
                result = module.apply_request(req, ru) if ru is not None else None
                if result is None:
                    # Undo the toggle so the sealed root matches the rolled-back
                    # store again; the equivalence certificate works both ways.
                    module.toggle_placeholder(equivalence)
                    raise _Rejected()

            with _step(clock, "persist_records"):
                created = Leaf(req.idx, plan.placeholder_leaf.next_idx, counter_digest(1))
                tree.set_leaf(plan.placeholder_slot, created)
                _, counter, version_count, acl_root = result.record_cert.values
                self.storage.record_put(
                    ContainerRecord(req.idx, counter, version_count, acl_root, result.record_cert.mac)
                )
                acl = self.acl_tree(req.idx)
                acl.set_leaf(0, Leaf(req.user_idx, req.user_idx, counter_digest(3)))
                if acl.root != req.value:
                    raise ProtocolError("creation request names an unexpected ACL root")
        return CreateResult(ack=result.ack, record_cert=result.record_cert)

    def handle_modify(
        self,
        req: RequestEnvelope,
        blobs: BlobSet,
        wrapped_secret: Optional[bytes] = None,
        secret_commitment: Optional[bytes] = None,
        clock: Optional[StepClock] = None,
    ):
        """Store a new version: counter bump, version record, content blobs."""
        if req.kind != RequestKind.CONTAINER:
            raise ProtocolError("content updates must be container-typed requests")
        encrypted = wrapped_secret is not None
        if encrypted != (secret_commitment is not None):
            raise ProtocolError("wrapped secret and commitment must come together")
        with self._lock:
            return self._retrying(
                self._modify_once, req, blobs, wrapped_secret, secret_commitment, clock
            )

    def _modify_once(self, req, blobs, wrapped_secret, secret_commitment, clock):
        tree = self.container_tree()
        module = self.module
        with self.storage.transaction(commit_timer=_step(clock, "persist_records")):
            with _step(clock, "record_lookup"):
                record = self.storage.record_get(req.idx)
                found = tree.find_leaf(req.idx)
                if record is None or found is None:
                    return None
                slot, leaf = found

            with _step(clock, "content_digest"):
                commitment = secret_commitment if secret_commitment is not None else ZERO_DIGEST
                image_hash, build_hash, compose_hash = blobs.hashes()
                content_digest = sha256(image_hash + build_hash + compose_hash + commitment)
                if content_digest != req.value:
                    raise ProtocolError("request signature does not cover the supplied content")

            with _step(clock, "certificates"):
                ru = self._counter_update_cert(tree, slot, leaf, record.counter + 1)
                acl_proof = self._acl_proof(req.idx, req.user_idx)
                if ru is None or acl_proof is None:
                    return None

            sealed = None
            if wrapped_secret is not None:
                with _step(clock, "secret_store"):
                    sealed = module.store_secret(
                        req.idx, req.counter, req.user_idx, wrapped_secret, commitment
                    )
                    if sealed is None:
                        return None

            with _step(clock, "root_update"):
                result = module.apply_request(
                    req, ru, acl_proof=acl_proof, record=record.as_certificate()
                )
                if result is None:
                    raise _Rejected()

            with _step(clock, "persist_records"):
                _, counter, version_count, acl_root = result.record_cert.values
                tree.set_leaf(slot, Leaf(leaf.idx, leaf.next_idx, counter_digest(counter)))
                self.storage.record_put(
                    ContainerRecord(req.idx, counter, version_count, acl_root, result.record_cert.mac)
                )
                self.storage.version_put(
                    VersionRecord(
                        idx=req.idx,
                        version=version_count,
                        secret_commitment=commitment,
                        wrapped_secret=sealed if sealed is not None else ZERO_DIGEST,
                        content_digest=content_digest,
                        seal=result.version_cert.mac,
                    )
                )
                self.storage.blob_put(req.idx, version_count, blobs)
        return ModifyResult(
            ack=result.ack,
            record_cert=result.record_cert,
            version_cert=result.version_cert,
            version=version_count,
        )

    def handle_acl_set(
        self,
        req: RequestEnvelope,
        target_user: int,
        level: int,
        clock: Optional[StepClock] = None,
    ):
        """Change ``target_user``'s access level; requester must hold level 3."""
        if req.kind != RequestKind.ACL:
            raise ProtocolError("ACL changes must be ACL-typed requests")
        if level not in (0, 1, 2, 3):
            raise ProtocolError(f"access level {level} out of range")
        with self._lock:
            return self._retrying(self._acl_set_once, req, target_user, level, clock)

    def _acl_set_once(self, req, target_user, level, clock):
        tree = self.container_tree()
        module = self.module
        with self.storage.transaction():
            record = self.storage.record_get(req.idx)
            found = tree.find_leaf(req.idx)
            if record is None or found is None:
                return None
            slot, leaf = found

            acl = self.acl_tree(req.idx)
            current = dict(acl.leaves())
            try:
                updated = updated_leaf_map(
                    current, self.acl_height, target_user, counter_digest(level)
                )
            except TreeFullError as exc:
                raise ProtocolError(str(exc)) from exc

            acl_proof = self._acl_proof(req.idx, req.user_idx)
            ru = self._counter_update_cert(tree, slot, leaf, record.counter + 1)
            if ru is None or acl_proof is None:
                return None

            for changed_slot, changed in updated.items():
                if current.get(changed_slot) != changed:
                    acl.set_leaf(changed_slot, changed)
            if acl.root != req.value:
                raise ProtocolError("request signature names a different ACL root: stale view")

            result = module.apply_request(
                req, ru, acl_proof=acl_proof, record=record.as_certificate()
            )
            if result is None:
                raise _Rejected()

            _, counter, version_count, acl_root = result.record_cert.values
            tree.set_leaf(slot, Leaf(leaf.idx, leaf.next_idx, counter_digest(counter)))
            self.storage.record_put(
                ContainerRecord(req.idx, counter, version_count, acl_root, result.record_cert.mac)
            )
        return AclResult(ack=result.ack, record_cert=result.record_cert)

    # -- query pipelines ----------------------------------------------------------

    def handle_info(
        self,
        idx: int,
        requested_version: int,
        nonce: bytes,
        user_idx: int,
        clock: Optional[StepClock] = None,
    ) -> InfoResult:
        """Assemble proofs and relay the module's answer for one query.

        A version of 0 is resolved here to the latest stored version.  Hints
        (current counter, ACL leaves) ride alongside full responses, and
        alongside protocol errors when the requester holds read access; they
        are never attached to denials, which must stay uninformative.
        """
        with self._lock:
            return self._info_once(idx, requested_version, nonce, user_idx, clock)

    def _info_once(self, idx, requested_version, nonce, user_idx, clock) -> InfoResult:
        module = self.module
        with _step(clock, "record_lookup"):
            record = self.storage.record_get(idx)

        if record is None:
            with _step(clock, "certificates"):
                proof = self._container_proof(idx)
                if proof is None:
                    raise ProtocolError("cannot assemble a consistent absence proof")
            with _step(clock, "module_verify"):
                response = module.verify_container(user_idx, nonce, requested_version, proof)
            if response is None:
                raise ProtocolError("module rejected the assembled evidence")
            return InfoResult(response=response, hints=None)

        hints = self._hints(record)
        resolved = requested_version if requested_version != 0 else record.version_count
        with _step(clock, "record_lookup"):
            version_row = (
                self.storage.version_get(idx, resolved)
                if 1 <= resolved <= record.version_count
                else None
            )

        with _step(clock, "certificates"):
            container_proof = self._container_proof(idx)
            acl_proof = self._acl_proof(idx, user_idx)
            if container_proof is None or acl_proof is None:
                raise ProtocolError("cannot assemble consistent proofs")
            version_cert = version_row.as_certificate() if version_row is not None else None

        with _step(clock, "module_verify"):
            response = module.verify_container(
                user_idx,
                nonce,
                resolved,
                container_proof,
                record=record.as_certificate(),
                acl_proof=acl_proof,
                version_cert=version_cert,
            )
        if response is None:
            # Typically an unattestable version number.  Reveal hints only to
            # callers the service can see hold read access.
            if self._access_level(idx, user_idx) >= 1:
                raise ProtocolError("no proof exists for the requested version", hints=hints)
            raise ProtocolError("no proof exists for the requested version")
        return InfoResult(response=response, hints=None if response.denied else hints)

    def handle_fetch(
        self,
        idx: int,
        version: int,
        user_idx: int,
        nonce: Optional[bytes] = None,
        clock: Optional[StepClock] = None,
    ) -> FetchResult:
        """Phase one of retrieval: content plus, when present, the re-padded secret.

        With ``nonce`` given, verification is folded into the same call,
        reusing the proofs assembled here instead of repeating the lookups.
        """
        with self._lock:
            return self._fetch_once(idx, version, user_idx, nonce, clock)

    def _fetch_once(self, idx, version, user_idx, nonce, clock) -> FetchResult:
        module = self.module
        with _step(clock, "record_lookup"):
            record = self.storage.record_get(idx)
            if record is None:
                raise ProtocolError("no content stored for that index")
            resolved = version if version != 0 else record.version_count
            version_row = self.storage.version_get(idx, resolved)
            blobs = self.storage.blob_get(idx, resolved)
            if version_row is None or blobs is None:
                raise ProtocolError("no content stored for that version")

        with _step(clock, "certificates"):
            container_proof = self._container_proof(idx)
            acl_proof = self._acl_proof(idx, user_idx)
            if container_proof is None or acl_proof is None:
                raise ProtocolError("cannot assemble consistent proofs")

        sealed_for_user = None
        if version_row.wrapped_secret != ZERO_DIGEST:
            with _step(clock, "secret_release"):
                sealed_for_user = module.release_secret(
                    user_idx,
                    idx,
                    record.counter,
                    record.version_count,
                    container_proof,
                    acl_proof,
                    record.as_certificate(),
                    version_row.wrapped_secret,
                    version_row.secret_commitment,
                )
                # None: the caller gets content but no usable secret.

        verify = None
        if nonce is not None:
            with _step(clock, "verify_lookup"):
                pass  # proofs and rows reused from phase one
            with _step(clock, "verify_certificates"):
                version_cert = version_row.as_certificate()
            with _step(clock, "module_verify"):
                response = module.verify_container(
                    user_idx,
                    nonce,
                    resolved,
                    container_proof,
                    record=record.as_certificate(),
                    acl_proof=acl_proof,
                    version_cert=version_cert,
                )
            if response is None:
                raise ProtocolError("module rejected the assembled evidence")
            verify = InfoResult(
                response=response, hints=None if response.denied else self._hints(record)
            )

        return FetchResult(
            blobs=blobs,
            version=resolved,
            secret_commitment=version_row.secret_commitment,
            sealed_for_user=sealed_for_user,
            verify=verify,
        )
