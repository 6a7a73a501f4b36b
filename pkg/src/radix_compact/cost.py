"""Analytical compression and speedup model.

All internal arithmetic is exact (fractions.Fraction); callers round only
at presentation time so table-matching tests control the rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import DegenerateBatch


@dataclass(frozen=True)
class CostInputs:
    d: int
    d_int: int
    L: int
    B: int
    P: int
    S: int

    def __post_init__(self):
        for name in ("d", "d_int", "L", "B"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.P < 0 or self.S < 0:
            raise ValueError("P and S must be non-negative")


@dataclass(frozen=True)
class SpeedupPrediction:
    f_c: float
    r: float
    gamma: float
    predicted_speedup: float

    def to_json(self) -> dict:
        return {
            "f_c": self.f_c,
            "r": self.r,
            "gamma": self.gamma,
            "predicted_speedup": self.predicted_speedup,
        }


def compression_ratio(B: int, P: int, S: int) -> Fraction:
    """r = N/N' = B(P+S) / (P + B*S) for a shared-prefix batch."""
    denom = P + B * S
    if B < 1 or P < 0 or S < 0 or denom <= 0:
        raise DegenerateBatch(f"B={B}, P={P}, S={S}")
    return Fraction(B * (P + S), denom)


def positionwise_fraction(d: int, d_int: int, L: int) -> Fraction:
    """Per-token FLOP proxy for the position-wise share of a forward pass.

    Projections and MLP contribute 8d^2 + 6*d*d_int, attention 4Ld; norm
    and rotary terms are lower-order and omitted.
    """
    if d < 1 or d_int < 1 or L < 1:
        raise ValueError("d, d_int, L must be positive")
    pw = 8 * d * d + 6 * d * d_int
    return Fraction(pw, pw + 4 * L * d)


def predicted_speedup(f_c, r) -> Fraction:
    """Amdahl bound: 1 / ((1 - f_c) + f_c / r)."""
    f = Fraction(f_c).limit_denominator(10**12) if not isinstance(f_c, Fraction) else f_c
    rr = Fraction(r).limit_denominator(10**12) if not isinstance(r, Fraction) else r
    if not 0 <= f <= 1:
        raise ValueError("f_c must lie in [0, 1]")
    if rr < 1:
        raise ValueError("r must be >= 1")
    return 1 / ((1 - f) + f / rr)


def predict(inputs: CostInputs, f_c=None) -> SpeedupPrediction:
    """Full prediction for a synthetic shared-prefix configuration.

    ``f_c`` may be supplied directly (e.g. sourced from a published model
    config); otherwise it is derived from d, d_int and L.
    """
    f = Fraction(f_c).limit_denominator(10**12) if f_c is not None else positionwise_fraction(
        inputs.d, inputs.d_int, inputs.L
    )
    r = compression_ratio(inputs.B, inputs.P, inputs.S)
    return SpeedupPrediction(
        f_c=float(f),
        r=float(r),
        gamma=float(1 / r),
        predicted_speedup=float(predicted_speedup(f, r)),
    )


_MAX_CROSSOVER_PREFIX = 2**20


def crossover_prefix(
    d: int,
    d_int: int,
    B: int,
    S: int,
    overhead_per_token: Fraction | float,
    positionwise_time_per_token: Fraction | float,
) -> int | None:
    """Smallest prefix length P where compaction wins over its overhead.

    Compaction saves (N - N') * t_pw of position-wise time and pays
    2 * t_overhead * N for the scatter+gather copies. Returns the first P
    (inclusive at exact breakeven) or None if none qualifies up to 2^20.
    """
    t_ov = Fraction(overhead_per_token).limit_denominator(10**12)
    t_pw = Fraction(positionwise_time_per_token).limit_denominator(10**12)
    if t_ov < 0 or t_pw <= 0 or B < 1 or S < 0:
        raise ValueError("rates must be positive, B >= 1, S >= 0")

    def wins(p: int) -> bool:
        n = B * (p + S)
        n_compact = p + B * S
        return (n - n_compact) * t_pw >= 2 * t_ov * n and n > n_compact

    # saved - cost is linear in P, so the predicate is monotone once true
    if not wins(_MAX_CROSSOVER_PREFIX):
        return None
    lo, hi = 0, _MAX_CROSSOVER_PREFIX
    while lo < hi:
        mid = (lo + hi) // 2
        if wins(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo
