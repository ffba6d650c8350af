"""Binary entropy and the adaptive per-pass block-length schedule.

The first two pass lengths derive from the QBER estimate; the remaining
four are fixed fractions of the frame length. Four combination modes trade
efficiency against round count by optionally halving the first two lengths.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

FRAME_BITS = 65536


class CombinationMode(enum.Enum):
    HIGH_EFFICIENCY = "he"
    MEDIUM_EFFICIENCY = "me"
    MEDIUM_THROUGHPUT = "mt"
    HIGH_THROUGHPUT = "ht"

    @property
    def halve_k1(self) -> bool:
        return self in (
            CombinationMode.MEDIUM_THROUGHPUT,
            CombinationMode.HIGH_THROUGHPUT,
        )

    @property
    def halve_k2(self) -> bool:
        return self in (
            CombinationMode.MEDIUM_EFFICIENCY,
            CombinationMode.HIGH_THROUGHPUT,
        )


def binary_entropy(eps: float) -> float:
    """Shannon entropy of a binary variable, h(0) = h(1) = 0 by continuity."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must be in [0, 1], got {eps}")
    if eps == 0.0 or eps == 1.0:
        return 0.0
    return -eps * math.log2(eps) - (1.0 - eps) * math.log2(1.0 - eps)


def _round_half_up(x: float) -> int:
    # Bracket notation rounds to the nearest integer, halves upward.
    return math.floor(x + 0.5)


def compute_k_init(eps: float, n: int = FRAME_BITS) -> int:
    """First-pass block length: nearest power of two to 1/eps, capped at n/2."""
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must be in (0, 0.5), got {eps}")
    return min(1 << _round_half_up(math.log2(1.0 / eps)), n // 2)


def compute_epsilon_bit(eps: float, k_prime: int) -> float:
    """Residual per-bit error rate after a pass of block length 2**k_prime."""
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must be in (0, 0.5), got {eps}")
    if k_prime < 1:
        raise ValueError("k_prime must be >= 1")
    block = 1 << k_prime
    base = 1.0 - 2.0 * eps
    return eps * (1.0 - base ** (block - 1)) / (1.0 + base**block)


def compute_k2(eps: float, k_prime: int, n: int = FRAME_BITS) -> int:
    """Second-pass block length from the residual error rate, capped at n/2."""
    eps_bit = compute_epsilon_bit(eps, k_prime)
    return min(1 << _round_half_up(math.log2(4.0 / eps_bit)), n // 2)


@dataclass(frozen=True)
class BlockSchedule:
    """Per-pass block lengths plus the quantities they were derived from."""

    epsilon: float
    n: int
    k: tuple[int, ...]
    k_init: int
    k2_base: int
    k_prime: int
    epsilon_bit: float
    mode: CombinationMode | None = None

    @property
    def num_passes(self) -> int:
        return len(self.k)

    def __post_init__(self):
        for ki in self.k:
            if ki < 1 or ki & (ki - 1):
                raise ValueError(f"block length {ki} is not a power of two")
            if self.n % ki:
                raise ValueError(
                    f"block length {ki} does not divide frame length {self.n}"
                )

    def describe(self) -> dict:
        """Plain-dict summary used by the handshake and CSV reporting."""
        return {
            "epsilon": self.epsilon,
            "n": self.n,
            "k": list(self.k),
            "mode": self.mode.value if self.mode else "custom",
        }


def build_schedule(
    eps: float, n: int = FRAME_BITS, mode: CombinationMode = CombinationMode.HIGH_EFFICIENCY
) -> BlockSchedule:
    """Six-pass schedule: adaptive k1, k2 then n/16, n/8, n/4, n/2."""
    if n != FRAME_BITS:
        raise ValueError(f"schedules are defined for {FRAME_BITS}-bit frames")
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must be in (0, 0.5), got {eps}")
    k_init = compute_k_init(eps, n)
    k1 = k_init // 2 if mode.halve_k1 else k_init
    if k1 < 2:
        raise ValueError(
            f"QBER {eps} too high for mode {mode.value}: first block < 2 bits"
        )
    k_prime = k1.bit_length() - 1
    k2_base = compute_k2(eps, k_prime, n)
    k2 = k2_base // 2 if mode.halve_k2 else k2_base
    if k2 < 2:
        raise ValueError(
            f"QBER {eps} too high for mode {mode.value}: second block < 2 bits"
        )
    return BlockSchedule(
        epsilon=eps,
        n=n,
        k=(k1, k2, n // 16, n // 8, n // 4, n // 2),
        k_init=k_init,
        k2_base=k2_base,
        k_prime=k_prime,
        epsilon_bit=compute_epsilon_bit(eps, k_prime),
        mode=mode,
    )


def original_cascade_schedule(eps: float, n: int = FRAME_BITS) -> BlockSchedule:
    """Classic four-pass baseline: k1 near 0.73/eps, doubling each pass."""
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must be in (0, 0.5), got {eps}")
    k1 = min(1 << _round_half_up(math.log2(0.73 / eps)), n // 2)
    k1 = max(k1, 2)
    k = tuple(min(k1 << i, n // 2) for i in range(4))
    return BlockSchedule(
        epsilon=eps,
        n=n,
        k=k,
        k_init=k1,
        k2_base=k[1],
        k_prime=k1.bit_length() - 1,
        epsilon_bit=compute_epsilon_bit(eps, k1.bit_length() - 1),
        mode=None,
    )


def custom_schedule(eps: float, n: int, k: tuple[int, ...]) -> BlockSchedule:
    """Explicit block lengths, used for reduced-scale testing."""
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must be in (0, 0.5), got {eps}")
    if n < 2 or n & (n - 1):
        raise ValueError("frame length must be a power of two >= 2")
    return BlockSchedule(
        epsilon=eps,
        n=n,
        k=tuple(k),
        k_init=k[0],
        k2_base=k[1] if len(k) > 1 else k[0],
        k_prime=max(k[0].bit_length() - 1, 1),
        epsilon_bit=eps,
        mode=None,
    )
