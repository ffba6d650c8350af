"""Packed bit vectors, key frames, and shared shuffling permutations.

Bits are stored 8 per byte with the lowest bit index in the least
significant bit of each byte, which is also the wire layout used by the
transport codec.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FRAME_BITS = 65536

# Bitwise XOR of all bits in a byte, indexed by byte value.
_BYTE_PARITY = np.array(
    [bin(v).count("1") & 1 for v in range(256)], dtype=np.uint8
)


class BitVector:
    """Fixed-length sequence of bits packed into a numpy uint8 buffer."""

    __slots__ = ("buf", "n")

    def __init__(self, buf: np.ndarray, n: int):
        if n <= 0:
            raise ValueError("BitVector length must be positive")
        if buf.dtype != np.uint8 or len(buf) != (n + 7) // 8:
            raise ValueError("buffer does not match bit length")
        self.buf = buf
        self.n = n

    @classmethod
    def zeros(cls, n: int) -> "BitVector":
        return cls(np.zeros((n + 7) // 8, dtype=np.uint8), n)

    @classmethod
    def from_bits(cls, bits) -> "BitVector":
        """Build from an iterable/array of 0-1 values."""
        arr = np.asarray(bits, dtype=np.uint8)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("expected a non-empty 1-D bit array")
        return cls(np.packbits(arr, bitorder="little"), arr.size)

    @classmethod
    def from_bytes(cls, data: bytes, n: int) -> "BitVector":
        buf = np.frombuffer(data, dtype=np.uint8).copy()
        return cls(buf, n)

    def to_bytes(self) -> bytes:
        return self.buf.tobytes()

    def unpack(self) -> np.ndarray:
        """Return the bits as a uint8 array of 0/1 values."""
        return np.unpackbits(self.buf, count=self.n, bitorder="little")

    def copy(self) -> "BitVector":
        return BitVector(self.buf.copy(), self.n)

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitVector):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.buf, other.buf)

    def __getitem__(self, i: int) -> int:
        if not 0 <= i < self.n:
            raise IndexError(f"bit index {i} out of range [0, {self.n})")
        return (int(self.buf[i >> 3]) >> (i & 7)) & 1

    def __setitem__(self, i: int, value: int) -> None:
        if not 0 <= i < self.n:
            raise IndexError(f"bit index {i} out of range [0, {self.n})")
        mask = np.uint8(1 << (i & 7))
        if value & 1:
            self.buf[i >> 3] |= mask
        else:
            self.buf[i >> 3] &= np.uint8(~mask & 0xFF)

    def flip(self, i: int) -> None:
        if not 0 <= i < self.n:
            raise IndexError(f"bit index {i} out of range [0, {self.n})")
        self.buf[i >> 3] ^= np.uint8(1 << (i & 7))

    def flip_many(self, idx: np.ndarray) -> None:
        """Flip several bit positions at once (duplicates flip repeatedly)."""
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            return
        if idx.min() < 0 or idx.max() >= self.n:
            raise IndexError("bit index out of range")
        np.bitwise_xor.at(self.buf, idx >> 3, (1 << (idx & 7)).astype(np.uint8))

    def get_many(self, idx: np.ndarray) -> np.ndarray:
        """Gather several bits at once, returned as a uint8 0/1 array."""
        idx = np.asarray(idx, dtype=np.int64)
        return (self.buf[idx >> 3] >> (idx & 7).astype(np.uint8)) & 1

    def set_many(self, idx: np.ndarray, values: np.ndarray) -> None:
        """Scatter 0/1 values into several distinct bit positions."""
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            return
        current = self.get_many(idx)
        delta = (current ^ (np.asarray(values, dtype=np.uint8) & 1)) != 0
        sel = idx[delta]
        np.bitwise_xor.at(self.buf, sel >> 3, (1 << (sel & 7)).astype(np.uint8))

    def fill_many(self, idx: np.ndarray, value: int) -> None:
        """Set several bit positions to one constant; duplicates are fine."""
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            return
        masks = (1 << (idx & 7)).astype(np.uint8)
        if value & 1:
            np.bitwise_or.at(self.buf, idx >> 3, masks)
        else:
            np.bitwise_and.at(self.buf, idx >> 3, ~masks)


def range_parity(v: BitVector, start: int, length: int) -> int:
    """XOR of the bits in [start, start+length)."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if start < 0 or start + length > v.n:
        raise ValueError("range outside the bit vector")
    stop = start + length
    first, last = start >> 3, (stop - 1) >> 3
    chunk = v.buf[first : last + 1].copy()
    # Mask off bits below start in the first byte and above stop in the last.
    chunk[0] &= np.uint8((0xFF << (start & 7)) & 0xFF)
    tail = stop & 7
    if tail:
        chunk[-1] &= np.uint8(0xFF >> (8 - tail))
    acc = int(np.bitwise_xor.reduce(chunk))
    return int(_BYTE_PARITY[acc])


@dataclass
class Frame:
    """One fixed-length segment of sifted key held by a single party."""

    frame_id: int
    bits: BitVector

    @property
    def n(self) -> int:
        return self.bits.n


@dataclass(frozen=True)
class PermutationTable:
    """Shared deterministic shuffle; forward scatters, inverse gathers.

    Applying forward places input bit i at output position forward[i].
    Both parties derive identical tables from (seed, n).
    """

    forward: np.ndarray
    inverse: np.ndarray
    seed: int

    @property
    def n(self) -> int:
        return len(self.forward)


def build_permutation(seed: int, n: int) -> PermutationTable:
    if n <= 0:
        raise ValueError("permutation size must be positive")
    rng = np.random.default_rng(seed)
    forward = rng.permutation(n).astype(np.int64)
    inverse = np.empty(n, dtype=np.int64)
    inverse[forward] = np.arange(n, dtype=np.int64)
    return PermutationTable(forward=forward, inverse=inverse, seed=seed)


def apply_permutation(
    v: BitVector, table: PermutationTable, direction: str = "forward"
) -> BitVector:
    """Permute a bit vector; out[forward[i]] = in[i], inverse undoes it."""
    if v.n != table.n:
        raise ValueError(
            f"vector length {v.n} does not match table size {table.n}"
        )
    bits = v.unpack()
    if direction == "forward":
        out = np.empty_like(bits)
        out[table.forward] = bits
    elif direction == "inverse":
        out = bits[table.forward]
    else:
        raise ValueError("direction must be 'forward' or 'inverse'")
    return BitVector.from_bits(out)


def generate_bsc_pair(
    n_bits: int, qber: float, seed: int
) -> tuple[BitVector, BitVector]:
    """Simulate correlated sifted keys over a binary symmetric channel.

    Returns (A, B): A uniform random, B differing from A independently per
    bit with probability qber. Deterministic in the seed.
    """
    if n_bits <= 0:
        raise ValueError("n_bits must be positive")
    if not 0.0 <= qber < 0.5:
        raise ValueError(f"qber must be in [0, 0.5), got {qber}")
    rng = np.random.default_rng(seed)
    n_bytes = (n_bits + 7) // 8
    a_buf = rng.integers(0, 256, size=n_bytes, dtype=np.uint8)
    if n_bits & 7:
        a_buf[-1] &= np.uint8(0xFF >> (8 - (n_bits & 7)))
    a = BitVector(a_buf, n_bits)
    b = a.copy()
    if qber > 0.0:
        # Chunked so huge streams do not allocate n_bits float64s at once.
        chunk = 1 << 22
        for lo in range(0, n_bits, chunk):
            hi = min(lo + chunk, n_bits)
            flips = np.nonzero(rng.random(hi - lo) < qber)[0] + lo
            b.flip_many(flips)
    return a, b


def segment(stream: BitVector, first_frame_id: int = 0):
    """Split a key stream into full frames plus the unconsumed remainder."""
    n_frames = stream.n // FRAME_BITS
    bits = stream.unpack()
    frames = []
    for i in range(n_frames):
        lo = i * FRAME_BITS
        frames.append(
            Frame(
                frame_id=first_frame_id + i,
                bits=BitVector.from_bits(bits[lo : lo + FRAME_BITS]),
            )
        )
    rem_bits = stream.n - n_frames * FRAME_BITS
    remainder = (
        BitVector.from_bits(bits[n_frames * FRAME_BITS :]) if rem_bits else None
    )
    return frames, remainder
