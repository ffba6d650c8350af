"""Reconciliation efficiency, frame error rate, and throughput accounting."""

from __future__ import annotations

from dataclasses import dataclass

from .params import binary_entropy


def efficiency(m: float, n: float, eps: float) -> float:
    """Leaked bits relative to the Shannon minimum n*h(eps)."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must be in (0, 0.5), got {eps}")
    return m / (n * binary_entropy(eps))


def efficiency_rate_form(rate: float, eps: float) -> float:
    """Same efficiency written through the code rate R = 1 - m/n."""
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must be in (0, 0.5), got {eps}")
    return (1.0 - rate) / binary_entropy(eps)


def efficiency_fer(rate: float, fer: float, eps: float) -> float:
    """Efficiency penalized for discarded frames."""
    if not 0.0 <= fer <= 1.0:
        raise ValueError(f"FER must be in [0, 1], got {fer}")
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must be in (0, 0.5), got {eps}")
    return ((1.0 - fer) * (1.0 - rate) + fer) / binary_entropy(eps)


@dataclass(frozen=True)
class FrameRecord:
    """Outcome of one frame's reconciliation, as seen by the Correcting side."""

    frame_id: int
    verified: bool
    n: int
    m_star: int
    rounds: int
    collisions_avoided: int = 0
    searchlist_calls: int = 0


@dataclass
class ReconStats:
    n_total: int
    m_star: int
    rate: float
    f: float
    f_fer: float
    fer: float
    rounds_mean: float
    throughput_bps: float
    frames_total: int
    frames_verified: int
    collisions_avoided: int
    searchlist_calls: int


def aggregate(
    records: list[FrameRecord], eps: float, wall_seconds: float
) -> ReconStats:
    """Merge per-frame records; order independent.

    Leak and efficiency figures come from Verified frames only. Failed
    frames count toward FER and contribute nothing to throughput.
    """
    if not records:
        raise ValueError("no frame records to aggregate")
    verified = [r for r in records if r.verified]
    failed = len(records) - len(verified)
    n_total = sum(r.n for r in verified)
    m_star = sum(r.m_star for r in verified)
    fer = failed / len(records)
    if n_total:
        rate = 1.0 - m_star / n_total
        f = efficiency(m_star, n_total, eps)
        f_fer = efficiency_fer(rate, fer, eps)
    else:
        rate, f, f_fer = 0.0, 0.0, 0.0
    rounds_mean = (
        sum(r.rounds for r in verified) / len(verified) if verified else 0.0
    )
    throughput = n_total / wall_seconds if wall_seconds > 0 else 0.0
    return ReconStats(
        n_total=n_total,
        m_star=m_star,
        rate=rate,
        f=f,
        f_fer=f_fer,
        fer=fer,
        rounds_mean=rounds_mean,
        throughput_bps=throughput,
        frames_total=len(records),
        frames_verified=len(verified),
        collisions_avoided=sum(r.collisions_avoided for r in records),
        searchlist_calls=sum(r.searchlist_calls for r in records),
    )
