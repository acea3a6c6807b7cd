"""Confidence intervals, per-subgroup tests and the test of equal subgroup effects."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats


class StatisticKind(str, enum.Enum):
    T = "t"
    Z = "z"
    F = "F"
    CHISQ = "chisq"


@dataclass(frozen=True)
class TestResult:
    __test__ = False

    statistic: float
    df: float | tuple[float, float] | None
    p_value: float
    kind: StatisticKind
    ci: tuple[float, float] | None = None
    degenerate: bool = False

    def rejects(self, alpha: float = 0.05) -> bool:
        return self.p_value <= alpha


def _quantile(kind: StatisticKind, df, level: float) -> float:
    if kind is StatisticKind.Z or df is None or math.isinf(df):
        return float(stats.norm.ppf(level))
    return float(stats.t.ppf(level, df))


def subgroup_test(
    estimate: float,
    se: float,
    df: float | None = None,
    null_value: float = 0.0,
    kind: StatisticKind = StatisticKind.T,
    alpha: float = 0.05,
) -> TestResult:
    """Two-sided test of ``estimate == null_value`` with the matching CI.

    Infinite or missing ``df`` falls back to the normal reference. A zero
    standard error yields a flagged degenerate result.
    """
    kind = StatisticKind(kind)
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if se < 0 or not math.isfinite(se):
        raise ValueError(f"invalid standard error {se}")
    if kind is StatisticKind.T and df is not None and not df > 0:
        raise ValueError(f"t test needs df > 0, got {df}")
    if se == 0:
        differs = estimate != null_value
        return TestResult(
            math.copysign(math.inf, estimate - null_value) if differs else 0.0,
            df, 0.0 if differs else 1.0, kind, (estimate, estimate), True,
        )
    stat = (estimate - null_value) / se
    if kind is StatisticKind.Z or df is None or math.isinf(df):
        p = 2.0 * stats.norm.sf(abs(stat))
    else:
        p = 2.0 * stats.t.sf(abs(stat), df)
    q = _quantile(kind, df, 1 - alpha / 2)
    return TestResult(float(stat), df, float(min(1.0, p)), kind, (estimate - q * se, estimate + q * se))


@dataclass(frozen=True)
class EqualEffectsResult:
    chisq: TestResult
    f: TestResult


def equal_effects_test(estimates, offsets=None) -> EqualEffectsResult:
    """Wald test that all subgroup effects are equal, using independent estimates.

    ``estimates`` is a sequence of ``(tau_hat, se, df)``. ``offsets`` shifts
    each estimate before testing, which tests equality of the contrasts to
    known values (e.g. the realized finite-population effects).
    """
    arr = np.asarray(estimates, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError("equal-effects test needs at least two subgroups")
    tau, se, df = arr[:, 0], arr[:, 1], arr[:, 2]
    if np.any(se <= 0):
        raise ValueError("all standard errors must be positive")
    if offsets is not None:
        tau = tau - np.asarray(offsets, dtype=float)
    prec = 1.0 / se ** 2
    centre = np.sum(prec * tau) / np.sum(prec)
    w = float(np.sum(prec * (tau - centre) ** 2))
    q = len(tau) - 1
    chi = TestResult(w, float(q), float(stats.chi2.sf(w, q)), StatisticKind.CHISQ)
    den = float(np.sum(df))
    if math.isinf(den):
        fp = chi.p_value
    else:
        fp = float(stats.f.sf(w / q, q, den))
    return EqualEffectsResult(chi, TestResult(w / q, (float(q), den), fp, StatisticKind.F))
