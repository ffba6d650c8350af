"""Acceptance suite: every criterion prints one [PASS]/[FAIL] line.

Run with `pytest tests/test_acceptance.py -s` to see the lines as the
criteria execute. The heavy reconciliation sweeps are shared between
criteria through session-scoped fixtures.
"""

import itertools

import numpy as np
import pytest

from cascade_recon.bitframe import BitVector, Frame, generate_bsc_pair, segment
from cascade_recon.cascade import (
    FrameSession,
    Role,
    Status,
    lockstep_reconcile,
    shared_permutations,
)
from cascade_recon.metrics import FrameRecord, aggregate, efficiency, efficiency_fer, efficiency_rate_form
from cascade_recon.params import (
    CombinationMode,
    binary_entropy,
    build_schedule,
    compute_k2,
    compute_k_init,
    custom_schedule,
)
from cascade_recon.pipeline import PipelineConfig, run_pair
from cascade_recon.transport import ChannelConfig, simulated_link

SESSION_SEED = 20240811


def _report(criterion, ok, detail):
    marker = "PASS" if ok else "FAIL"
    print(f"[{marker}] criterion {criterion}: {detail}")
    return ok


def run_sweep(
    eps_actual,
    n_frames,
    mode=CombinationMode.HIGH_EFFICIENCY,
    seed=1,
    eps_estimated=None,
    collision_detection=True,
):
    """Reconcile n_frames dual-role in process; returns per-frame results."""
    schedule = build_schedule(eps_estimated or eps_actual, mode=mode)
    perms = shared_permutations(SESSION_SEED, schedule.n, schedule.num_passes)
    stream_a, stream_b = generate_bsc_pair(65536 * n_frames, eps_actual, seed)
    frames_a, _ = segment(stream_a)
    frames_b, _ = segment(stream_b)
    results = []
    for fa, fb in zip(frames_a, frames_b):
        ref = FrameSession(
            fa, Role.REFERENCE, schedule, SESSION_SEED, permutations=perms,
            collision_detection=collision_detection,
        )
        cor = FrameSession(
            fb, Role.CORRECTING, schedule, SESSION_SEED, permutations=perms,
            collision_detection=collision_detection,
        )
        lockstep_reconcile(ref, cor)
        results.append(
            {
                "verified": cor.status is Status.VERIFIED,
                "equal": fa.bits == fb.bits,
                "m_star": cor.m_star,
                "rounds": cor.round_counter,
                "searchlist_calls": cor.searchlist_calls,
                "collisions_avoided": cor.collisions_avoided,
                "bits": cor.frame.bits.copy(),
            }
        )
    return results


@pytest.fixture(scope="session")
def he_sweeps():
    """1000 frames per QBER in high-efficiency mode (criteria 1 and 2)."""
    return {
        eps: run_sweep(eps, 1000, seed=101) for eps in (0.01, 0.03, 0.05)
    }


@pytest.fixture(scope="session")
def ht_sweep_1pct():
    return run_sweep(0.01, 200, mode=CombinationMode.HIGH_THROUGHPUT, seed=101)


def mean_f(results, eps):
    ms = [r["m_star"] for r in results if r["verified"]]
    return float(np.mean([efficiency(m, 65536, eps) for m in ms]))


class TestCriterion1Correctness:
    def test_verified_frames_identical_and_fer_bounded(self, he_sweeps):
        details, ok = [], True
        for eps, results in he_sweeps.items():
            mismatched = sum(1 for r in results if r["verified"] and not r["equal"])
            fer = sum(1 for r in results if not r["verified"]) / len(results)
            ok &= mismatched == 0 and fer <= 5e-3
            details.append(f"qber={eps:g}: oracle-mismatches={mismatched} FER={fer:.4f}")
        assert _report(1, ok, "; ".join(details) + " (need 0 mismatches, FER <= 5e-3)")


class TestCriterion2Efficiency:
    def test_mean_efficiency_bounds(self, he_sweeps):
        f1 = mean_f(he_sweeps[0.01], 0.01)
        f3 = mean_f(he_sweeps[0.03], 0.03)
        ok = f1 <= 1.06 and f3 <= 1.07
        assert _report(
            2,
            ok,
            f"mean f(1%)={f1:.4f} (bound 1.06, paper 1.026); "
            f"mean f(3%)={f3:.4f} (bound 1.07, paper 1.032)",
        )


class TestCriterion3ModeTradeoff:
    def test_throughput_mode_leaks_more_but_rounds_fewer(self, he_sweeps, ht_sweep_1pct):
        he = he_sweeps[0.01][:200]
        ht = ht_sweep_1pct
        f_he, f_ht = mean_f(he, 0.01), mean_f(ht, 0.01)
        r_he = np.mean([r["rounds"] for r in he if r["verified"]])
        r_ht = np.mean([r["rounds"] for r in ht if r["verified"]])
        ok = f_ht > f_he and r_ht < r_he
        assert _report(
            3,
            ok,
            f"f: HT {f_ht:.4f} > HE {f_he:.4f}; rounds: HT {r_ht:.0f} < HE {r_he:.0f}",
        )


def timed_pipeline_run(stages, latency_ms, n_frames, seed, mode):
    schedule = build_schedule(0.01, mode=mode)
    stream_a, stream_b = generate_bsc_pair(65536 * n_frames, 0.01, seed)
    frames_a, _ = segment(stream_a)
    frames_b, _ = segment(stream_b)
    cfg = PipelineConfig(workers=1, stages_per_worker=stages)
    link = ChannelConfig(latency_ms, 0.0, seed)
    stats, records, wall = run_pair(
        frames_a, frames_b, schedule, SESSION_SEED, lambda: simulated_link(link), cfg
    )
    bits_ok = sum(r.n for r in records if r.verified)
    return bits_ok / wall, records


class TestCriterion4PipelineSpeedup:
    def test_four_stages_beat_stop_and_wait(self):
        tput4, rec4 = timed_pipeline_run(4, 1.0, 8, 11, CombinationMode.HIGH_EFFICIENCY)
        tput1, rec1 = timed_pipeline_run(1, 1.0, 8, 11, CombinationMode.HIGH_EFFICIENCY)
        identical = {(r.frame_id, r.verified, r.m_star) for r in rec4} == {
            (r.frame_id, r.verified, r.m_star) for r in rec1
        }
        ratio = tput4 / tput1
        ok = ratio >= 1.1 and identical
        assert _report(
            4,
            ok,
            f"stages=4 vs 1 at RTT=2ms: {ratio:.2f}x (need >= 1.1); "
            f"measured {tput4 / 1e6:.3f} vs {tput1 / 1e6:.3f} Mbps "
            f"(informational; paper reports 570 Mbps on its hardware); "
            f"identical-results={identical}",
        )


class TestCriterion5LatencyAdaptation:
    def test_high_efficiency_declines_faster(self):
        declines = {}
        for mode, label in (
            (CombinationMode.HIGH_EFFICIENCY, "he"),
            (CombinationMode.HIGH_THROUGHPUT, "ht"),
        ):
            tput_1ms, _ = timed_pipeline_run(4, 1.0, 8, 13, mode)
            tput_5ms, _ = timed_pipeline_run(4, 5.0, 8, 13, mode)
            declines[label] = 1.0 - tput_5ms / tput_1ms
        ok = declines["he"] > declines["ht"]
        assert _report(
            5,
            ok,
            f"throughput decline 1ms->5ms: HE {declines['he']:.1%} > "
            f"HT {declines['ht']:.1%} (paper prose: 70% vs 30%)",
        )


class TestCriterion6CollisionDetection:
    def test_searchlist_reduction_at_8pct(self):
        on = run_sweep(0.08, 60, seed=17, collision_detection=True)
        off = run_sweep(0.08, 60, seed=17, collision_detection=False)
        identical = all(
            a["verified"] == b["verified"] and a["bits"] == b["bits"]
            for a, b in zip(on, off)
        )
        calls_on = sum(r["searchlist_calls"] for r in on)
        calls_off = sum(r["searchlist_calls"] for r in off)
        ratio = calls_on / calls_off
        ok = ratio <= 0.5 and identical
        assert _report(
            6,
            ok,
            f"SearchList calls with lock bit: {calls_on} vs baseline {calls_off} "
            f"({ratio:.1%}, need <= 50%); identical-output={identical}",
        )


class TestCriterion7Formulas:
    def test_efficiency_forms_and_block_lengths(self):
        rng = np.random.default_rng(0)
        max_gap = 0.0
        for _ in range(500):
            n = int(rng.integers(1000, 200_000))
            m = int(rng.integers(0, n))
            eps = float(rng.uniform(0.001, 0.499))
            gap = abs(efficiency(m, n, eps) - efficiency_rate_form(1 - m / n, eps))
            max_gap = max(max_gap, gap)
        fer_zero_ok = all(
            abs(
                efficiency_fer(r, 0.0, e) - efficiency_rate_form(r, e)
            ) < 1e-12
            for r, e in [(0.8, 0.01), (0.5, 0.2), (0.99, 0.45)]
        )
        k_init = compute_k_init(0.01, 65536)
        k2 = compute_k2(0.01, 7, 65536)
        ok = max_gap < 1e-12 and fer_zero_ok and k_init == 128 and k2 == 512
        assert _report(
            7,
            ok,
            f"|Eq1-Eq2| max={max_gap:.2e} (<1e-12); Eq3(FER=0)==Eq2: {fer_zero_ok}; "
            f"k_init(1%)={k_init} (need 128); k2(1%)={k2} (need 512)",
        )


class TestCriterion8Structures:
    def test_tree_invariants_and_codec_fuzz(self):
        from cascade_recon.paritytree import ParityForest
        from cascade_recon.transport import PacketDecodeError, decode_packet, encode_packet

        rng = np.random.default_rng(1)
        k = 64
        leaves = rng.integers(0, 2, 16 * k, dtype=np.uint8)
        forest = ParityForest.build(leaves, k)
        xor_ok = True
        for _ in range(10_000):
            forest.flip_leaf_paths(rng.integers(0, 16 * k, size=1))
        for b in range(16):
            t = forest.tree(b)
            for i in range(1, k):
                if t.node(i) != t.node(2 * i) ^ t.node(2 * i + 1):
                    xor_ok = False

        schedule = build_schedule(0.01)
        perms = shared_permutations(SESSION_SEED, 65536, schedule.num_passes)
        a, b = generate_bsc_pair(65536, 0.01, 3)
        ref = FrameSession(Frame(0, a), Role.REFERENCE, schedule, SESSION_SEED, permutations=perms)
        cor = FrameSession(Frame(0, b), Role.CORRECTING, schedule, SESSION_SEED, permutations=perms)
        lockstep_reconcile(ref, cor)
        trees = len(cor.parity_forests) + len(cor.comparison_forests)

        misparses = 0
        for _ in range(100_000):
            buf = rng.integers(0, 256, int(rng.integers(0, 48)), dtype=np.uint8).tobytes()
            try:
                pkt, used = decode_packet(buf)
                if encode_packet(pkt) != buf[:used]:
                    misparses += 1
            except PacketDecodeError:
                pass
        ok = xor_ok and trees == 8 and misparses == 0
        assert _report(
            8,
            ok,
            f"XOR invariant after 1e4 flips: {xor_ok}; trees/frame={trees} "
            f"(need 8); codec fuzz misparses={misparses}/1e5",
        )


class TestCriterion9ExhaustiveOracle:
    def test_all_patterns_up_to_three_errors(self):
        n = 16
        schedule = custom_schedule(0.1, n, (2, 4, 8))
        rng = np.random.default_rng(5)
        base = rng.integers(0, 2, n, dtype=np.uint8)
        silent = failed = 0
        patterns = [()]
        patterns += [(i,) for i in range(n)]
        patterns += list(itertools.combinations(range(n), 2))
        patterns += list(itertools.combinations(range(n), 3))
        for pattern in patterns:
            b = base.copy()
            for i in pattern:
                b[i] ^= 1
            fa = Frame(0, BitVector.from_bits(base))
            fb = Frame(0, BitVector.from_bits(b))
            ref = FrameSession(fa, Role.REFERENCE, schedule, 23, allow_small=True)
            cor = FrameSession(fb, Role.CORRECTING, schedule, 23, allow_small=True)
            lockstep_reconcile(ref, cor)
            if cor.status is Status.VERIFIED:
                if not fa.bits == fb.bits:
                    silent += 1
            elif cor.status is Status.FAILED:
                failed += 1
            else:
                silent += 1  # non-termination counts against us
        ok = silent == 0
        assert _report(
            9,
            ok,
            f"{len(patterns)} patterns (<=3 errors, n=16): silent-mismatches={silent}, "
            f"explicit-failures={failed}",
        )


class TestCriterion10Misestimation:
    def test_one_point_misestimates_converge(self):
        runs = {
            est: run_sweep(0.02, 200, seed=29, eps_estimated=est)
            for est in (0.01, 0.02, 0.03)
        }
        fers = {
            est: sum(1 for r in results if not r["verified"]) / len(results)
            for est, results in runs.items()
        }
        fs = {est: mean_f(results, 0.02) for est, results in runs.items()}
        ok = all(fers[est] <= 1e-2 for est in (0.01, 0.03)) and all(
            abs(fs[est] - fs[0.02]) <= 0.05 for est in (0.01, 0.03)
        )
        assert _report(
            10,
            ok,
            f"actual 2%: est 1%: f={fs[0.01]:.4f} FER={fers[0.01]:.3f}; "
            f"est 2%: f={fs[0.02]:.4f}; est 3%: f={fs[0.03]:.4f} FER={fers[0.03]:.3f} "
            f"(need FER <= 1e-2, |f - matched| <= 0.05)",
        )
