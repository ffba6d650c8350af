import numpy as np
import pytest

from cascade_recon.bitframe import (
    FRAME_BITS,
    BitVector,
    apply_permutation,
    build_permutation,
    generate_bsc_pair,
    range_parity,
    segment,
)


def naive_range_parity(bits01, start, length):
    acc = 0
    for i in range(start, start + length):
        acc ^= int(bits01[i])
    return acc


class TestBitVector:
    def test_roundtrip_bits(self):
        rng = np.random.default_rng(0)
        bits = rng.integers(0, 2, 1000, dtype=np.uint8)
        v = BitVector.from_bits(bits)
        assert len(v) == 1000
        assert np.array_equal(v.unpack(), bits)

    def test_single_bit_ops(self):
        v = BitVector.zeros(16)
        v[3] = 1
        assert v[3] == 1 and v[2] == 0
        v.flip(3)
        assert v[3] == 0

    def test_out_of_range_access_raises(self):
        v = BitVector.zeros(8)
        with pytest.raises(IndexError):
            v[8]
        with pytest.raises(IndexError):
            v[-1] = 1
        with pytest.raises(IndexError):
            v.flip(100)

    def test_byte_packing_lsb_first(self):
        # Bit i sits at byte i//8, bit position i%8.
        v = BitVector.from_bits([1, 0, 0, 0, 0, 0, 0, 0, 1])
        assert v.to_bytes() == b"\x01\x01"

    def test_flip_many_duplicates_cancel(self):
        v = BitVector.zeros(32)
        v.flip_many(np.array([5, 5, 7]))
        assert v[5] == 0 and v[7] == 1

    def test_get_set_many(self):
        rng = np.random.default_rng(1)
        bits = rng.integers(0, 2, 257, dtype=np.uint8)
        v = BitVector.from_bits(bits)
        idx = rng.choice(257, 40, replace=False)
        assert np.array_equal(v.get_many(idx), bits[idx])
        vals = rng.integers(0, 2, 40, dtype=np.uint8)
        v.set_many(idx, vals)
        bits[idx] = vals
        assert np.array_equal(v.unpack(), bits)

    def test_fill_many_with_duplicates(self):
        v = BitVector.zeros(16)
        v.fill_many(np.array([3, 3, 4]), 1)
        assert v[3] == 1 and v[4] == 1
        v.fill_many(np.array([3, 3]), 0)
        assert v[3] == 0 and v[4] == 1


class TestRangeParity:
    def test_small_examples(self):
        v = BitVector.from_bits([0, 1, 1, 0])
        assert range_parity(v, 0, 4) == 0
        assert range_parity(v, 1, 2) == 0
        assert range_parity(v, 0, 2) == 1

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(2)
        bits = rng.integers(0, 2, FRAME_BITS, dtype=np.uint8)
        v = BitVector.from_bits(bits)
        for _ in range(1000):
            start = int(rng.integers(0, FRAME_BITS - 1))
            length = int(rng.integers(1, min(FRAME_BITS - start, 300) + 1))
            assert range_parity(v, start, length) == naive_range_parity(
                bits, start, length
            )

    def test_range_validation(self):
        v = BitVector.zeros(8)
        with pytest.raises(ValueError):
            range_parity(v, 0, 0)
        with pytest.raises(ValueError):
            range_parity(v, 4, 5)


class TestPermutation:
    def test_bijection(self):
        t = build_permutation(3, 4)
        assert sorted(t.forward.tolist()) == [0, 1, 2, 3]
        assert all(t.inverse[t.forward[i]] == i for i in range(4))

    def test_determinism(self):
        a = build_permutation(9, 256)
        b = build_permutation(9, 256)
        assert np.array_equal(a.forward, b.forward)

    def test_roundtrip_large(self):
        rng = np.random.default_rng(4)
        v = BitVector.from_bits(rng.integers(0, 2, FRAME_BITS, dtype=np.uint8))
        t = build_permutation(11, FRAME_BITS)
        out = apply_permutation(apply_permutation(v, t, "forward"), t, "inverse")
        assert out == v

    def test_forward_scatter_rule(self):
        # out[forward[i]] = in[i] on a hand-built table.
        from cascade_recon.bitframe import PermutationTable

        fwd = np.array([2, 0, 3, 1])
        inv = np.empty(4, dtype=np.int64)
        inv[fwd] = np.arange(4)
        t = PermutationTable(fwd, inv, seed=0)
        v = BitVector.from_bits([1, 0, 0, 0])
        out = apply_permutation(v, t, "forward")
        assert out.unpack().tolist() == [0, 0, 1, 0]

    def test_length_mismatch(self):
        t = build_permutation(0, 8)
        with pytest.raises(ValueError):
            apply_permutation(BitVector.zeros(16), t)


class TestBscPair:
    def test_zero_qber_identical(self):
        a, b = generate_bsc_pair(8, 0.0, 5)
        assert a == b

    def test_error_rate_within_3_sigma(self):
        a, b = generate_bsc_pair(FRAME_BITS, 0.01, seed=1)
        distance = int((a.unpack() ^ b.unpack()).sum())
        sigma = (0.01 * 0.99 / FRAME_BITS) ** 0.5
        assert abs(distance / FRAME_BITS - 0.01) < 3 * sigma

    def test_qber_bounds(self):
        generate_bsc_pair(64, 0.5 - 1e-9, 0)
        with pytest.raises(ValueError):
            generate_bsc_pair(64, 0.5, 0)
        with pytest.raises(ValueError):
            generate_bsc_pair(64, -0.1, 0)
        with pytest.raises(ValueError):
            generate_bsc_pair(0, 0.1, 0)

    def test_deterministic(self):
        a1, b1 = generate_bsc_pair(1024, 0.05, 7)
        a2, b2 = generate_bsc_pair(1024, 0.05, 7)
        assert a1 == a2 and b1 == b2

    def test_mean_rate_over_many_pairs(self):
        rates = []
        for seed in range(100):
            a, b = generate_bsc_pair(4096, 0.02, seed)
            rates.append((a.unpack() ^ b.unpack()).mean())
        sigma = (0.02 * 0.98 / (4096 * 100)) ** 0.5
        assert abs(np.mean(rates) - 0.02) < 3 * sigma


class TestSegment:
    def test_exact_frames(self):
        v = BitVector.zeros(2 * FRAME_BITS)
        frames, remainder = segment(v)
        assert len(frames) == 2 and remainder is None
        assert [f.frame_id for f in frames] == [0, 1]
        assert all(f.n == FRAME_BITS for f in frames)

    def test_remainder_not_padded(self):
        v = BitVector.zeros(70000)
        frames, remainder = segment(v)
        assert len(frames) == 1
        assert remainder.n == 70000 - FRAME_BITS

    def test_short_stream(self):
        v = BitVector.zeros(FRAME_BITS - 1)
        frames, remainder = segment(v)
        assert frames == [] and remainder.n == FRAME_BITS - 1

    def test_content_preserved(self):
        rng = np.random.default_rng(6)
        bits = rng.integers(0, 2, FRAME_BITS + 100, dtype=np.uint8)
        frames, remainder = segment(BitVector.from_bits(bits))
        assert np.array_equal(frames[0].bits.unpack(), bits[:FRAME_BITS])
        assert np.array_equal(remainder.unpack(), bits[FRAME_BITS:])
