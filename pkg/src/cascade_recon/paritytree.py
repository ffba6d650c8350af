"""Flat complete-binary-tree bit stores for block parities and comparisons.

Each block of length k (a power of two) gets a 2k-bit store. Nodes follow
heap addressing: node 1 is the block parity, node i has children 2i and
2i+1, nodes k..2k-1 are the leaves. Node 0 is repurposed: on a parity tree
it caches the latest root comparison result, on a comparison tree it is the
backtracking lock flag. Adjacent blocks of one pass live contiguously in a
single store at bit offset block_index * 2k.
"""

from __future__ import annotations

import numpy as np

from .bitframe import BitVector


def _is_pow2(k: int) -> bool:
    return k >= 1 and not (k & (k - 1))


class ParityTree:
    """View of one block's parity tree inside a (possibly shared) store."""

    __slots__ = ("store", "block_len", "base_offset", "bit_base")

    def __init__(self, store: BitVector, block_len: int, base_offset: int, bit_base: int = 0):
        self.store = store
        self.block_len = block_len
        self.base_offset = base_offset
        self.bit_base = bit_base

    def node(self, i: int) -> int:
        return self.store[self.bit_base + i]

    def set_node(self, i: int, value: int) -> None:
        self.store[self.bit_base + i] = value

    def root_parity(self) -> int:
        return self.node(1)

    def leaf(self, pos: int) -> int:
        return self.node(self.block_len + pos)

    def flip_leaf_path(self, leaf_pos: int) -> None:
        """Flip a leaf and every ancestor up to the root (node 1)."""
        if not 0 <= leaf_pos < self.block_len:
            raise IndexError(f"leaf {leaf_pos} out of range [0, {self.block_len})")
        i = self.block_len + leaf_pos
        while i >= 1:
            self.store.flip(self.bit_base + i)
            i >>= 1

    def set_root_comparison(self, mismatch: int) -> None:
        self.store[self.bit_base] = mismatch

    def get_root_comparison(self) -> int:
        return self.store[self.bit_base]


class ParityComparisonTree(ParityTree):
    """Companion tree of match results; node 0 doubles as the lock flag."""

    def lock(self) -> int:
        prev = self.store[self.bit_base]
        self.store[self.bit_base] = 1
        return prev

    def unlock(self) -> None:
        self.store[self.bit_base] = 0

    def is_locked(self) -> bool:
        return bool(self.store[self.bit_base])


def init_parity_tree(bits: BitVector, base: int, k: int) -> ParityTree:
    """Build a single block's parity tree from bits[base : base+k]."""
    if not _is_pow2(k):
        raise ValueError(f"block length {k} is not a power of two")
    if base < 0 or base + k > bits.n:
        raise ValueError("block range outside the bit vector")
    leaves = bits.unpack()[base : base + k]
    forest = ParityForest.build(leaves, k)
    return ParityTree(forest.store, k, base)


def init_comparison_tree(k: int) -> ParityComparisonTree:
    """Fresh comparison tree: internal nodes marked 1, leaves and node 0 zero."""
    if not _is_pow2(k):
        raise ValueError(f"block length {k} is not a power of two")
    forest = ComparisonForest.create(1, k)
    return ParityComparisonTree(forest.store, k, 0)


class ParityForest:
    """All parity trees of one pass, stored contiguously.

    Bit addressing is block_index * 2k + node_index; the bulk operations
    below are what the protocol engine uses on its hot path.
    """

    __slots__ = ("store", "block_len", "num_blocks")

    def __init__(self, store: BitVector, block_len: int, num_blocks: int):
        self.store = store
        self.block_len = block_len
        self.num_blocks = num_blocks

    @classmethod
    def build(cls, leaves: np.ndarray, k: int) -> "ParityForest":
        """Vectorized construction from the pass's permuted leaf bits."""
        if not _is_pow2(k):
            raise ValueError(f"block length {k} is not a power of two")
        leaves = np.asarray(leaves, dtype=np.uint8)
        if leaves.size % k:
            raise ValueError("leaf count is not a multiple of the block length")
        nb = leaves.size // k
        m = np.zeros((nb, 2 * k), dtype=np.uint8)
        m[:, k:] = leaves.reshape(nb, k)
        s = k // 2
        while s >= 1:
            m[:, s : 2 * s] = m[:, 2 * s : 4 * s : 2] ^ m[:, 2 * s + 1 : 4 * s : 2]
            s //= 2
        return cls(BitVector.from_bits(m.reshape(-1)), k, nb)

    def tree(self, block: int) -> ParityTree:
        k = self.block_len
        return ParityTree(self.store, k, block * k, block * 2 * k)

    def node_bits(self, blocks: np.ndarray, nodes) -> np.ndarray:
        return self.store.get_many(
            np.asarray(blocks, dtype=np.int64) * (2 * self.block_len) + nodes
        )

    def root_parities(self) -> np.ndarray:
        blocks = np.arange(self.num_blocks, dtype=np.int64)
        return self.node_bits(blocks, 1)

    def set_root_comparisons(self, blocks: np.ndarray, values: np.ndarray) -> None:
        idx = np.asarray(blocks, dtype=np.int64) * (2 * self.block_len)
        self.store.set_many(idx, values)

    def toggle_root_comparisons(self, blocks: np.ndarray) -> None:
        idx = np.asarray(blocks, dtype=np.int64) * (2 * self.block_len)
        self.store.flip_many(idx)

    def root_comparison(self, block: int) -> int:
        return self.store[block * 2 * self.block_len]

    def flip_leaf_paths(self, leaf_positions: np.ndarray) -> None:
        """Flip leaves and all ancestors for many corrections at once.

        leaf_positions are pass-global (block * k + offset). Node 0 is never
        touched. Duplicate positions flip repeatedly, preserving XOR parity.
        """
        pos = np.asarray(leaf_positions, dtype=np.int64)
        if pos.size == 0:
            return
        k = self.block_len
        base = (pos // k) * (2 * k)
        node = k + (pos % k)
        while True:
            idx = base + node
            np.bitwise_xor.at(
                self.store.buf, idx >> 3, (1 << (idx & 7)).astype(np.uint8)
            )
            if (node == 1).all():
                break
            node >>= 1

    def total_bits(self) -> int:
        return self.store.n


class ComparisonForest(ParityForest):
    """All comparison trees of one pass (allocated for passes 1 and 2 only)."""

    @classmethod
    def create(cls, num_blocks: int, k: int) -> "ComparisonForest":
        if not _is_pow2(k):
            raise ValueError(f"block length {k} is not a power of two")
        m = np.zeros((num_blocks, 2 * k), dtype=np.uint8)
        m[:, 1:k] = 1
        return cls(BitVector.from_bits(m.reshape(-1)), k, num_blocks)

    def tree(self, block: int) -> ParityComparisonTree:
        k = self.block_len
        return ParityComparisonTree(self.store, k, block * k, block * 2 * k)

    def lock_bit(self, block: int) -> int:
        return self.store[block * 2 * self.block_len]

    def set_lock(self, block: int) -> None:
        self.store[block * 2 * self.block_len] = 1

    def clear_lock(self, block: int) -> None:
        self.store[block * 2 * self.block_len] = 0

    def set_nodes(self, blocks: np.ndarray, nodes, values) -> None:
        idx = np.asarray(blocks, dtype=np.int64) * (2 * self.block_len) + nodes
        self.store.set_many(idx, np.broadcast_to(np.asarray(values, dtype=np.uint8), idx.shape))

    def set_paths(self, leaf_positions: np.ndarray, value: int) -> None:
        """Set the mark of a leaf and all its ancestors up to node 1.

        Used to re-open (1) or resolve (0) whole root-to-leaf paths when a
        bit inside a block changes or a search retires.
        """
        pos = np.asarray(leaf_positions, dtype=np.int64)
        if pos.size == 0:
            return
        k = self.block_len
        base = (pos // k) * (2 * k)
        node = k + (pos % k)
        while True:
            self.store.fill_many(base + node, value)
            if (node == 1).all():
                break
            node >>= 1
