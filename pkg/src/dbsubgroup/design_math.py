"""Closed-form allocation quantities for subgroups under complete randomization.

Under complete randomization of ``n1`` of ``n`` units, the number of subgroup
members landing in the treatment arm is hypergeometric. Everything here is
computed exactly from that law (log-space masses, no sampling).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class AllocationLaw:
    n: int
    n1: int
    n_k: int

    def __post_init__(self):
        if not (self.n >= 2 and 1 <= self.n1 <= self.n - 1 and 1 <= self.n_k <= self.n):
            raise DomainError(f"invalid allocation law {self}")

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def support(self) -> range:
        return range(max(0, self.n_k - self.n0), min(self.n_k, self.n1) + 1)

    def pmf(self) -> tuple[np.ndarray, np.ndarray]:
        """Support values of the treated subgroup count and their masses."""
        return _pmf(self.n, self.n1, self.n_k)


def _lchoose(a: int, b: int) -> float:
    return math.lgamma(a + 1) - math.lgamma(b + 1) - math.lgamma(a - b + 1)


@lru_cache(maxsize=256)
def _pmf(n: int, n1: int, n_k: int) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = max(0, n_k - (n - n1)), min(n_k, n1)
    ks = np.arange(lo, hi + 1)
    denom = _lchoose(n, n1)
    logp = np.array([_lchoose(n_k, k) + _lchoose(n - n_k, n1 - k) - denom for k in ks])
    mass = np.exp(logp - logp.max())
    mass /= mass.sum()
    ks.setflags(write=False)
    mass.setflags(write=False)
    return ks, mass


def split_probability(law: AllocationLaw) -> float:
    """P(both arms receive at least one subgroup member)."""
    if law.n_k == law.n:
        return 1.0
    ks, mass = law.pmf()
    keep = (ks > 0) & (ks < law.n_k)
    return float(min(1.0, mass[keep].sum()))


def relative_deviation_probability(law: AllocationLaw, arm: int, c: float) -> float:
    """P(|pi_k^t - pi_k| / pi_k <= c) for the arm's realized subgroup share."""
    if c < 0:
        raise DomainError("c must be nonnegative")
    ks, mass = law.pmf()
    # |k/n_t - n_k/n| <= c n_k/n  <=>  |k n - n_k n_t| <= c n_k n_t, in exact arithmetic
    n_t = law.n1 if arm == 1 else law.n0
    counts = ks if arm == 1 else law.n_k - ks
    cf = Fraction(repr(float(c)))
    bound = cf * law.n_k * n_t
    ok = np.array([abs(int(k) * law.n - law.n_k * n_t) <= bound for k in counts])
    return float(min(1.0, mass[ok].sum()))


def phi_correction(n_k: int, pi_k: float) -> float:
    """Finite-sample factor (n_k - 1)/(n_k - pi_k) from the shared treatment indicator."""
    if n_k < 2 or not (0 < pi_k <= 1):
        raise DomainError("need n_k >= 2 and 0 < pi_k <= 1")
    return (n_k - 1) / (n_k - pi_k)


def expected_inverse_arm_size(law: AllocationLaw, arm: int) -> float:
    """E(1/n_k^arm) over the allocation law truncated to both arms nonempty."""
    if law.n_k == law.n:
        return 1.0 / (law.n1 if arm == 1 else law.n0)
    if law.n_k < 2:
        raise DomainError("subgroup of size 1 cannot be split across arms")
    ks, mass = law.pmf()
    keep = (ks > 0) & (ks < law.n_k)
    if not keep.any():
        raise DomainError(f"no allocation of {law} leaves both arms nonempty")
    counts = ks[keep] if arm == 1 else law.n_k - ks[keep]
    m = mass[keep]
    return float(np.sum(m / counts) / m.sum())


def expected_inverse_binomial(n_k: int, p: float, arm: int) -> float:
    """Bernoulli-trial analogue: E(1/n_k^arm) with n_k^1 ~ Bin(n_k, p) truncated to 1..n_k-1."""
    if n_k < 2 or not (0 < p < 1):
        raise DomainError("need n_k >= 2 and 0 < p < 1")
    ks = np.arange(1, n_k)
    logp = np.array([_lchoose(n_k, int(k)) for k in ks]) + ks * math.log(p) + (n_k - ks) * math.log1p(-p)
    m = np.exp(logp - logp.max())
    counts = ks if arm == 1 else n_k - ks
    return float(np.sum(m / counts) / m.sum())


def se_ratio_actual_vs_expected(
    n_k: int, p: float, delta1: float, phi_var: float, theta_het: float
) -> float:
    """SE ratio of the subgroup variance at realized vs expected arm sizes.

    Control-arm residual variance is the unit; the treatment arm has
    ``phi_var`` times it and the effect heterogeneity ``theta_het`` times it.
    """
    if n_k < 2 or not (0 < p < 1) or phi_var <= 0 or theta_het < 0:
        raise DomainError("invalid SE-ratio parameters")
    a1 = n_k * p + delta1
    a0 = n_k - a1
    if a1 < 1 or a0 < 1:
        raise DomainError(f"delta1 = {delta1} leaves an arm with fewer than one unit")
    actual = phi_var / a1 + 1.0 / a0 - theta_het / n_k
    expected = phi_var / (n_k * p) + 1.0 / (n_k * (1 - p)) - theta_het / n_k
    if actual <= 0 or expected <= 0:
        raise DomainError("heterogeneity exceeds the arm variances")
    return math.sqrt(actual / expected)


def deviation_curve(law: AllocationLaw, grid) -> list[tuple[float, float, float]]:
    """Rows of (c, P_treatment, P_control) for the probability panel."""
    return [
        (float(c), relative_deviation_probability(law, 1, c), relative_deviation_probability(law, 0, c))
        for c in grid
    ]


def se_ratio_curve(
    n_k: int, p: float, phi_var: float, theta_het: float, c_max: float = 0.2
) -> list[tuple[int, float, float]]:
    """Rows of (delta1, delta1 / (.5 n_k), ratio) over realizable treated counts.

    The grid covers every integer treated count with |delta1| <= c_max * .5 n_k.
    """
    centre = n_k * p
    half = c_max * 0.5 * n_k
    rows = []
    for a1 in range(math.ceil(centre - half - 1e-9), math.floor(centre + half + 1e-9) + 1):
        d = a1 - centre
        if a1 < 1 or n_k - a1 < 1:
            continue
        rows.append((d, d / (0.5 * n_k), se_ratio_actual_vs_expected(n_k, p, d, phi_var, theta_het)))
    return rows
