"""Index-ordered Merkle tree (IOMT).

Leaves carry ``(idx, next_idx, val)`` and form a virtual circular linked
list ordered by ``idx``.  Proving that a leaf ``(b, b_next)`` exists under a
root implicitly proves that no leaf exists for any index the pair encloses,
which is what makes authenticated denial possible.

A leaf whose value is the zero digest is a *placeholder*: the index is
initialized but holds no record yet.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Optional, Sequence

from .merkle import DIGEST_SIZE, Side, ZERO_DIGEST, encode_fields, parent, sha256

LEAF_SCHEMA = ("u64", "u64", "d32")


class IomtError(Exception):
    pass


class TreeFullError(IomtError):
    """No free leaf slot remains."""


class IndexPresentError(IomtError):
    """The index is already occupied by a leaf."""


@dataclass(frozen=True)
class Leaf:
    idx: int
    next_idx: int
    val: bytes

    def __post_init__(self) -> None:
        if not 0 <= self.idx < 1 << 64 or not 0 <= self.next_idx < 1 << 64:
            raise ValueError("leaf indices must be u64")
        if len(self.val) != DIGEST_SIZE:
            raise ValueError("leaf value must be a 32-byte digest")

    @property
    def is_placeholder(self) -> bool:
        return self.val == ZERO_DIGEST

    def encode(self) -> bytes:
        return encode_fields(LEAF_SCHEMA, (self.idx, self.next_idx, self.val))


def leaf_digest(leaf: Optional[Leaf]) -> bytes:
    """Node value of a leaf record; an absent slot hashes to the zero digest."""
    if leaf is None:
        return ZERO_DIGEST
    return sha256(leaf.encode())


def counter_digest(value: int) -> bytes:
    """Counter stored as a digest: 64-bit big-endian in the low-order bytes."""
    if not 0 <= value < 1 << 64:
        raise ValueError("counter must be u64")
    return bytes(24) + value.to_bytes(8, "big")


def counter_value(digest: bytes) -> Optional[int]:
    """Inverse of :func:`counter_digest`; ``None`` if the digest is not a counter."""
    if len(digest) != DIGEST_SIZE or digest[:24] != bytes(24):
        return None
    return int.from_bytes(digest[24:], "big")


def encloses(b: int, b_next: int, a: int) -> bool:
    """True iff the span of leaf ``(b, b_next)`` covers the absent index ``a``.

    The second and third clauses handle the wrap-around link from the
    greatest index back to the least; a single self-linked leaf (b == b_next)
    encloses every other index.
    """
    return (b < a < b_next) or (b_next <= b < a) or (a < b_next <= b)


def left_child(pos: int) -> int:
    return 2 * pos + 1


def right_child(pos: int) -> int:
    return 2 * pos + 2


def parent_index(pos: int) -> int:
    if pos == 0:
        raise ValueError("root has no parent")
    return (pos - 1) // 2


@dataclass(frozen=True)
class Geometry:
    """Shape of a fixed-height tree stored as a breadth-first array, root at 0."""

    height: int

    def __post_init__(self) -> None:
        if self.height < 0:
            raise ValueError("height must be non-negative")

    @property
    def leaf_count(self) -> int:
        return 1 << self.height

    @property
    def node_count(self) -> int:
        return 2 * self.leaf_count - 1

    def leaf_node(self, slot: int) -> int:
        """Node position of a leaf slot."""
        if not 0 <= slot < self.leaf_count:
            raise IomtError(f"slot {slot} out of range for height {self.height}")
        return self.leaf_count - 1 + slot


@dataclass(frozen=True)
class PlaceholderPlan:
    """The two-step edit that introduces a placeholder for a new index.

    The encloser fields are ``None`` when the tree is empty and the new leaf
    is simply self-linked.
    """

    encloser_slot: Optional[int]
    encloser_leaf: Optional[Leaf]
    updated_encloser: Optional[Leaf]
    placeholder_slot: int
    placeholder_leaf: Leaf


class MemoryTreeStore:
    """Dict-backed node/leaf store; zero nodes and absent leaves are not kept."""

    def __init__(self) -> None:
        self._nodes: dict[int, bytes] = {}
        self._leaves: dict[int, Leaf] = {}

    def get_node(self, pos: int) -> bytes:
        return self._nodes.get(pos, ZERO_DIGEST)

    def set_node(self, pos: int, digest: bytes) -> None:
        if digest == ZERO_DIGEST:
            self._nodes.pop(pos, None)
        else:
            self._nodes[pos] = digest

    def get_leaf(self, slot: int) -> Optional[Leaf]:
        return self._leaves.get(slot)

    def set_leaf(self, slot: int, leaf: Optional[Leaf]) -> None:
        if leaf is None:
            self._leaves.pop(slot, None)
        else:
            self._leaves[slot] = leaf

    def leaf_items(self) -> Iterator[tuple[int, Leaf]]:
        return iter(sorted(self._leaves.items()))

    def has_leaves(self) -> bool:
        return bool(self._leaves)


class Iomt:
    """An IOMT bound to a node/leaf store.

    Instances are single-writer; concurrent readers are safe between edits.
    The store may provide optimized ``find_encloser``/``first_free_slot``
    hooks (the SQL store does); otherwise leaves are scanned.
    """

    def __init__(self, height: int, store=None) -> None:
        self.geometry = Geometry(height)
        self.store = store if store is not None else MemoryTreeStore()

    @property
    def root(self) -> bytes:
        return self.store.get_node(0)

    def leaf(self, slot: int) -> Optional[Leaf]:
        self.geometry.leaf_node(slot)  # range check
        return self.store.get_leaf(slot)

    def leaves(self) -> Iterator[tuple[int, Leaf]]:
        return self.store.leaf_items()

    def set_leaf(self, slot: int, leaf: Optional[Leaf]) -> bytes:
        """Write a leaf and recompute the path to the root; returns the new root."""
        pos = self.geometry.leaf_node(slot)
        self.store.set_leaf(slot, leaf)
        value = leaf_digest(leaf)
        self.store.set_node(pos, value)
        while pos != 0:
            sibling, side = self._sibling(pos)
            value = parent(self.store.get_node(sibling), value, side)
            pos = parent_index(pos)
            self.store.set_node(pos, value)
        return value

    def complement_path(self, slot: int) -> list[tuple[bytes, Side]]:
        """Sibling digests from the leaf level up, tagged with the sibling's side."""
        pos = self.geometry.leaf_node(slot)
        path: list[tuple[bytes, Side]] = []
        while pos != 0:
            sibling, side = self._sibling(pos)
            path.append((self.store.get_node(sibling), side))
            pos = parent_index(pos)
        return path

    @staticmethod
    def _sibling(pos: int) -> tuple[int, Side]:
        if pos % 2 == 1:  # left child: sibling sits on the right
            return pos + 1, Side.RIGHT
        return pos - 1, Side.LEFT

    def find_leaf(self, idx: int) -> Optional[tuple[int, Leaf]]:
        finder = getattr(self.store, "find_leaf", None)
        if finder is not None:
            return finder(idx)
        for slot, leaf in self.store.leaf_items():
            if leaf.idx == idx:
                return slot, leaf
        return None

    def find_encloser(self, idx: int) -> Optional[tuple[int, Leaf]]:
        """The unique leaf enclosing an absent index; ``None`` if none qualifies."""
        finder = getattr(self.store, "find_encloser", None)
        if finder is not None:
            return finder(idx)
        for slot, leaf in self.store.leaf_items():
            if encloses(leaf.idx, leaf.next_idx, idx):
                return slot, leaf
        return None

    def first_free_slot(self) -> Optional[int]:
        finder = getattr(self.store, "first_free_slot", None)
        if finder is not None:
            slot = finder()
        else:
            used = {s for s, _ in self.store.leaf_items()}
            slot = next((s for s in range(self.geometry.leaf_count) if s not in used), None)
        if slot is None or slot >= self.geometry.leaf_count:
            return None
        return slot

    def placeholder_plan(self, new_idx: int) -> PlaceholderPlan:
        """Plan the encloser edit plus placeholder insertion for ``new_idx``."""
        if self.find_leaf(new_idx) is not None:
            raise IndexPresentError(f"index {new_idx} already present")
        slot = self.first_free_slot()
        if slot is None:
            raise TreeFullError(f"all {self.geometry.leaf_count} slots used")
        if not self.store.has_leaves():
            return PlaceholderPlan(None, None, None, slot, Leaf(new_idx, new_idx, ZERO_DIGEST))
        found = self.find_encloser(new_idx)
        if found is None:
            raise IomtError(f"no encloser for {new_idx}: circular linkage broken")
        enc_slot, enc = found
        return PlaceholderPlan(
            encloser_slot=enc_slot,
            encloser_leaf=enc,
            updated_encloser=Leaf(enc.idx, new_idx, enc.val),
            placeholder_slot=slot,
            placeholder_leaf=Leaf(new_idx, enc.next_idx, ZERO_DIGEST),
        )

    def insert_placeholder(self, new_idx: int) -> bytes:
        plan = self.placeholder_plan(new_idx)
        if plan.encloser_slot is not None:
            self.set_leaf(plan.encloser_slot, plan.updated_encloser)
        return self.set_leaf(plan.placeholder_slot, plan.placeholder_leaf)

    def remove_placeholder(self, idx: int) -> bytes:
        """Exact inverse of :meth:`insert_placeholder`."""
        found = self.find_leaf(idx)
        if found is None:
            raise IomtError(f"index {idx} not present")
        slot, leaf = found
        if not leaf.is_placeholder:
            raise IomtError(f"index {idx} is not a placeholder")
        if leaf.idx == leaf.next_idx:
            return self.set_leaf(slot, None)
        for pred_slot, pred in self.store.leaf_items():
            if pred.next_idx == idx and pred_slot != slot:
                self.set_leaf(pred_slot, Leaf(pred.idx, leaf.next_idx, pred.val))
                return self.set_leaf(slot, None)
        raise IomtError(f"no predecessor links to {idx}: circular linkage broken")


def oracle_root(leaves: Mapping[int, Leaf] | Sequence[Optional[Leaf]], height: int) -> bytes:
    """Root by full bottom-up recomputation, with no incremental shortcuts.

    Test oracle: independent of the path-update code in :class:`Iomt`.
    """
    geo = Geometry(height)
    if isinstance(leaves, Mapping):
        slots = dict(leaves)
    else:
        if len(leaves) > geo.leaf_count:
            raise IomtError("more leaves than slots")
        slots = {i: leaf for i, leaf in enumerate(leaves) if leaf is not None}
    nodes = [ZERO_DIGEST] * geo.node_count
    for slot, leaf in slots.items():
        nodes[geo.leaf_node(slot)] = leaf_digest(leaf)
    for pos in range(geo.leaf_count - 2, -1, -1):
        nodes[pos] = parent(nodes[left_child(pos)], nodes[right_child(pos)], Side.LEFT)
    return nodes[0]


def updated_leaf_map(
    leaves: Mapping[int, Leaf], height: int, idx: int, val: bytes
) -> dict[int, Leaf]:
    """Leaf map after setting ``idx`` to ``val``, inserting the leaf if absent.

    Pure function shared by the service and by clients that must predict a
    tree root before signing for it; both sides apply the same deterministic
    edit (lowest free slot for new leaves).
    """
    geo = Geometry(height)
    out = dict(leaves)
    for slot, leaf in out.items():
        if leaf.idx == idx:
            out[slot] = Leaf(leaf.idx, leaf.next_idx, val)
            return out
    slot = next((s for s in range(geo.leaf_count) if s not in out), None)
    if slot is None:
        raise TreeFullError(f"all {geo.leaf_count} slots used")
    if not out:
        out[slot] = Leaf(idx, idx, val)
        return out
    encloser = next(
        ((s, l) for s, l in out.items() if encloses(l.idx, l.next_idx, idx)), None
    )
    if encloser is None:
        raise IomtError(f"no encloser for {idx}: circular linkage broken")
    enc_slot, enc = encloser
    out[enc_slot] = Leaf(enc.idx, idx, enc.val)
    out[slot] = Leaf(idx, enc.next_idx, val)
    return out
