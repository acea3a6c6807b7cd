"""Design-based and robust variance estimators for subgroup effects."""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data_model import Mechanism
from .design_math import AllocationLaw, expected_inverse_arm_size, expected_inverse_binomial
from .linear_fit import FitResult, solve_least_squares


class InsufficientCellError(ValueError):
    pass


class Sizes(str, enum.Enum):
    ACTUAL = "actual"
    EXPECTED = "expected"


class DfRule(str, enum.Enum):
    DESIGN_BASED = "design_based"
    BELL_MCCAFFREY = "bell_mccaffrey"
    NORMAL = "normal"


@dataclass(frozen=True)
class VarianceOptions:
    sizes: Sizes = Sizes.ACTUAL
    phi_adjust: bool = False
    heterogeneity_bound: bool = False
    r2_adjust: bool = False
    df_rule: DfRule = DfRule.DESIGN_BASED


@dataclass(frozen=True)
class VarianceResult:
    variance: float
    df: float
    flags: tuple[str, ...] = ()
    detail: dict = field(default_factory=dict, compare=False)

    @property
    def se(self) -> float:
        return math.sqrt(self.variance)


@dataclass(frozen=True)
class ArmResidualStats:
    s2: float
    df_denominator: float
    cell_size: int


def arm_stats(resid, scale=None, penalty: float = 0.0, share: float | None = None) -> ArmResidualStats:
    """Residual variance of one arm with the design-based df denominator.

    The denominator is ``cell_size - penalty - 1``; passing ``share`` replaces
    the trailing 1 by that arm's subgroup share (the phi-corrected form).
    ``scale`` multiplies each residual (normalized weights).
    """
    e = np.asarray(resid, dtype=float)
    if scale is not None:
        e = e * scale
    n = e.shape[0]
    den = n - penalty - (1.0 if share is None else share)
    if den <= 0:
        raise InsufficientCellError(f"df denominator {den:.4g} <= 0 for a cell of {n} units")
    return ArmResidualStats(float(e @ e) / den, float(den), int(n))


def bell_mccaffrey_df(n_k1, n_k0, V, p, pi_k1, pi_k0) -> float:
    """Welch-type degrees of freedom weighting the smaller arm more heavily."""
    d1 = n_k1 - V * p * pi_k1 - 1
    d0 = n_k0 - V * (1 - p) * pi_k0 - 1
    if d1 <= 0 or d0 <= 0:
        raise InsufficientCellError("nonpositive df denominator")
    num = (n_k1 + n_k0) ** 2 * d1 * d0
    return float(num / (n_k1 ** 2 * d1 + n_k0 ** 2 * d0))


def _cell_variance(
    e1, e0, a1, a0, p, penalty_scale, pi1, pi0, exp1, exp0, n_het, opts: VarianceOptions
) -> tuple[float, ArmResidualStats, ArmResidualStats, tuple[str, ...]]:
    """Core of the Eq.-12 family for one estimation cell."""
    st1 = arm_stats(e1, a1, penalty_scale * p * pi1, pi1 if opts.phi_adjust else None)
    st0 = arm_stats(e0, a0, penalty_scale * (1 - p) * pi0, pi0 if opts.phi_adjust else None)
    if opts.sizes is Sizes.EXPECTED:
        d1, d0 = exp1, exp0
    else:
        d1, d0 = st1.cell_size, st0.cell_size
    var = st1.s2 / d1 + st0.s2 / d0
    flags: tuple[str, ...] = ()
    if opts.heterogeneity_bound:
        var -= (math.sqrt(st1.s2) - math.sqrt(st0.s2)) ** 2 / n_het
        if var < 0:
            warnings.warn("variance negative after heterogeneity bound; clamped to 0", stacklevel=3)
            var, flags = 0.0, ("clamped",)
    return var, st1, st0, flags


def _subgroup_parts(fit: FitResult, k: int):
    d = fit.design
    cells = d.cells_of(k)
    if len(cells) != 1:
        raise ValueError("subgroup spans several blocks; use var_blocked")
    (c,) = cells
    sel = d.cell == c
    return d, c, sel


def r2_treatment_on_covariates(fit: FitResult, column: int) -> float:
    """R^2 of the cell treatment column regressed on every other design column."""
    d = fit.design
    z = d.X[:, column]
    others = np.delete(d.X, column, axis=1)
    _, resid, _ = solve_least_squares(others, z, d.w)
    w = d.w
    zbar = np.sum(w * z) / np.sum(w)
    sst = np.sum(w * (z - zbar) ** 2)
    return float(1.0 - np.sum(w * resid ** 2) / sst)


def var_design_based(fit: FitResult, k: int, opts: VarianceOptions = VarianceOptions()) -> VarianceResult:
    """Plug-in design-based variance for subgroup ``k`` (heterogeneity term dropped).

    Residuals are the model residuals of the cell; treated units have
    y - alpha - (1-p) tau - x beta and controls y - alpha + p tau - x beta.
    """
    d, c, sel = _subgroup_parts(fit, k)
    if opts.r2_adjust and d.V < 1:
        raise ValueError("r2_adjust requires covariates")
    t = d.t
    p = float(d.p_unit[sel][0])
    n1_all, n0_all = int(np.sum(t == 1)), int(np.sum(t == 0))
    m1, m0 = sel & (t == 1), sel & (t == 0)
    nk1, nk0 = int(m1.sum()), int(m0.sum())
    nk = nk1 + nk0
    pi1, pi0 = nk1 / n1_all, nk0 / n0_all
    var, st1, st0, flags = _cell_variance(
        fit.residuals[m1], fit.residuals[m0], None, None, p, d.V, pi1, pi0,
        nk * p, nk * (1 - p), nk, opts,
    )
    detail = {"s2_1": st1.s2, "s2_0": st0.s2}
    if opts.r2_adjust:
        r2 = r2_treatment_on_covariates(fit, int(d.tau_col[c]))
        var /= 1.0 - r2
        detail["r2"] = r2
    pi_k = nk / d.n
    if opts.df_rule is DfRule.BELL_MCCAFFREY:
        df = bell_mccaffrey_df(nk1, nk0, d.V, p, pi1, pi0)
    elif opts.df_rule is DfRule.NORMAL:
        df = math.inf
    else:
        df = nk - d.V * pi_k - 2
    return VarianceResult(float(var), float(df), flags, detail)


def var_huber_white(fit: FitResult, k: int) -> VarianceResult:
    """Heteroskedasticity-robust sandwich with the n/(n - l) correction."""
    d = fit.design
    (c,) = d.cells_of(k)
    j = int(d.tau_col[c])
    n, l = d.X.shape
    Xe = d.X * (d.w * fit.residuals)[:, None]
    a = fit.bread[j] @ Xe.T
    var = (n / (n - l)) * float(a @ a)
    return VarianceResult(var, float(n - l))


def var_blocked(fit: FitResult, k: int, opts: VarianceOptions = VarianceOptions(), weighted: bool = False) -> VarianceResult:
    """Pooled variance (1/n_k^2) sum_b n_bk^2 Var_bk over included blocks.

    Each block variance follows the design-based formula at block level with
    df denominators n_bk^t - V q_b p_b^t pi_bk^t - 1. With ``weighted`` the
    cell residuals carry normalized nonresponse weights.
    """
    d = fit.design
    cells = [c for c in d.cells_of(k) if d.included[c]]
    t = d.t
    n = d.n
    pieces, failed = [], []
    n_tot = 0
    for c in cells:
        bb = d.cells[c][0]
        inb = d.b == bb
        sel = d.cell == c
        p = float(d.p_unit[sel][0])
        nb1, nb0 = int(np.sum(inb & (t == 1))), int(np.sum(inb & (t == 0)))
        m1, m0 = sel & (t == 1), sel & (t == 0)
        nbk1, nbk0 = int(m1.sum()), int(m0.sum())
        nbk = nbk1 + nbk0
        q = inb.sum() / n
        a1 = a0 = None
        if weighted:
            wbar = d.w[sel].mean()
            a1, a0 = d.w[m1] / wbar, d.w[m0] / wbar
        try:
            v, *_ = _cell_variance(
                fit.residuals[m1], fit.residuals[m0], a1, a0, p, d.V * q,
                nbk1 / nb1, nbk0 / nb0, nbk * p, nbk * (1 - p), nbk, opts,
            )
        except InsufficientCellError as exc:
            failed.append((d.cells[c][0], str(exc)))
            continue
        pieces.append((nbk, v))
        n_tot += nbk
    if failed:
        raise InsufficientCellError(f"blocks without a computable variance: {failed}")
    var = sum((nb / n_tot) ** 2 * v for nb, v in pieces)
    pi_k = n_tot / n
    h = len(cells)
    if opts.df_rule is DfRule.NORMAL:
        df = math.inf
    else:
        df = n_tot - d.V * pi_k - 2 * h
    return VarianceResult(float(var), float(df), (), {"blocks": h})


def _cluster_means(fit: FitResult, k: int, cluster_ids):
    """Per-cluster (mean residual, subgroup count, arm) for subgroup k."""
    d = fit.design
    cid = np.asarray(cluster_ids)
    _, cidx = np.unique(cid, return_inverse=True)
    m = cidx.max() + 1
    sel = d.g == k
    n_jk = np.bincount(cidx[sel], minlength=m).astype(float)
    sum_e = np.bincount(cidx[sel], weights=fit.residuals[sel], minlength=m)
    ebar = np.divide(sum_e, n_jk, out=np.zeros(m), where=n_jk > 0)
    arm = np.zeros(m, dtype=np.int64)
    arm[cidx] = d.t
    return ebar, n_jk, arm, m


def var_cluster_design_based(
    fit: FitResult, k: int, cluster_ids, opts: VarianceOptions = VarianceOptions(), equal_clusters: bool = False
) -> VarianceResult:
    """Design-based variance from cluster-level residual means.

    Cluster residuals are scaled by w_jk / mean(w_jk) over all clusters, where
    w_jk = n_jk (or 1 for subgroup-present clusters under equal weighting).
    Test df: m_k - V m_k/m - 2.
    """
    d = fit.design
    ebar, n_jk, arm, m = _cluster_means(fit, k, cluster_ids)
    wjk = (n_jk > 0).astype(float) if equal_clusters else n_jk
    R = wjk / wjk.mean() * ebar
    p = float(d.p_unit[0])
    m1, m0 = int(np.sum(arm == 1)), int(np.sum(arm == 0))
    if m1 < 2 or m0 < 2:
        raise InsufficientCellError("need at least two clusters per arm")
    mk1 = int(np.sum((arm == 1) & (n_jk > 0)))
    mk0 = int(np.sum((arm == 0) & (n_jk > 0)))
    pi1, pi0 = mk1 / m1, mk0 / m0
    st1 = arm_stats(R[arm == 1], None, d.V * p * pi1, pi1 if opts.phi_adjust else None)
    st0 = arm_stats(R[arm == 0], None, d.V * (1 - p) * pi0, pi0 if opts.phi_adjust else None)
    if opts.sizes is Sizes.EXPECTED:
        var = st1.s2 / (m * p) + st0.s2 / (m * (1 - p))
    else:
        var = st1.s2 / m1 + st0.s2 / m0
    mk = mk1 + mk0
    df = math.inf if opts.df_rule is DfRule.NORMAL else mk - d.V * (mk / m) - 2
    return VarianceResult(float(var), float(df), (), {"m": m, "m_k": mk})


def var_crse(fit: FitResult, k: int, cluster_ids) -> VarianceResult:
    """Cluster-robust sandwich with g = m/(m-1) (n-1)/(n-l); df = m - 1."""
    d = fit.design
    (c,) = d.cells_of(k)
    j = int(d.tau_col[c])
    _, cidx = np.unique(np.asarray(cluster_ids), return_inverse=True)
    m = cidx.max() + 1
    if m < 2:
        raise InsufficientCellError("need at least two clusters")
    n, l = d.X.shape
    # score contribution of each unit to the tau_k coefficient
    u = (d.X @ fit.bread[j]) * d.w * fit.residuals
    s = np.bincount(cidx, weights=u, minlength=m)
    g = (m / (m - 1)) * ((n - 1) / (n - l))
    return VarianceResult(g * float(s @ s), float(m - 1))


def var_cluster_level_subgroup(
    fit: FitResult, k: int, cluster_ids, opts: VarianceOptions = VarianceOptions(sizes=Sizes.EXPECTED),
    equal_clusters: bool = False,
) -> VarianceResult:
    """Variance when the subgroup is a cluster attribute (random cluster counts).

    phi_clus [Om(1)/(m_k p) + Om(0)/(m_k (1-p))], with cluster residuals
    weighted by w_j / sqrt(mean w_j^2) and w_j = n_j (1 under equal weighting).
    """
    d = fit.design
    ebar, n_jk, arm, m = _cluster_means(fit, k, cluster_ids)
    ink = n_jk > 0
    mk = int(ink.sum())
    wj = np.where(ink, 1.0 if equal_clusters else n_jk, 0.0)
    wbar2 = np.sum(wj[ink] ** 2) / mk
    R = wj / math.sqrt(wbar2) * ebar
    p = float(d.p_unit[0])
    sel1, sel0 = ink & (arm == 1), ink & (arm == 0)
    mk1, mk0 = int(sel1.sum()), int(sel0.sum())
    if mk1 < 1 or mk0 < 1:
        raise InsufficientCellError("subgroup lacks a treated or control cluster")
    m1, m0 = int(np.sum(arm == 1)), int(np.sum(arm == 0))
    pi1, pi0 = mk1 / m1, mk0 / m0
    st1 = arm_stats(R[sel1], None, d.V * p * pi1, pi1 if opts.phi_adjust else None)
    st0 = arm_stats(R[sel0], None, d.V * (1 - p) * pi0, pi0 if opts.phi_adjust else None)
    pi_clus = mk / m
    phi = (mk - 1) / (mk - pi_clus)
    if opts.sizes is Sizes.EXPECTED:
        var = phi * (st1.s2 / (mk * p) + st0.s2 / (mk * (1 - p)))
    else:
        var = phi * (st1.s2 / mk1 + st0.s2 / mk0)
    df = math.inf if opts.df_rule is DfRule.NORMAL else mk - d.V * pi_clus - 2
    return VarianceResult(float(var), float(df), (), {"phi": phi, "m_k": mk})


def nonresponse_variance_from_residuals(
    e1, e0, w1, w0, n_k: int, p: float, response_rate: float, V: int = 0,
    pi1: float = 0.0, pi0: float = 0.0, opts: VarianceOptions = VarianceOptions(sizes=Sizes.EXPECTED),
) -> tuple[float, ArmResidualStats, ArmResidualStats]:
    """Weighted-respondent variance with expected respondent sizes n_k p r and n_k (1-p) r."""
    w1 = np.asarray(w1, dtype=float)
    w0 = np.asarray(w0, dtype=float)
    wbar = np.concatenate([w1, w0]).mean()
    var, st1, st0, _ = _cell_variance(
        e1, e0, w1 / wbar, w0 / wbar, p, V, pi1, pi0,
        n_k * p * response_rate, n_k * (1 - p) * response_rate, n_k * response_rate, opts,
    )
    return var, st1, st0


def var_nonresponse(
    fit: FitResult, k: int, n_k_all: int, opts: VarianceOptions = VarianceOptions(sizes=Sizes.EXPECTED)
) -> VarianceResult:
    """Variance for the nonresponse-weighted estimator.

    ``fit`` is the weighted respondent fit; ``n_k_all`` counts every subgroup
    member, respondent or not, so that n_k r_k is the respondent count.
    """
    d, c, sel = _subgroup_parts(fit, k)
    t = d.t
    p = float(d.p_unit[sel][0])
    m1, m0 = sel & (t == 1), sel & (t == 0)
    nr1, nr0 = int(m1.sum()), int(m0.sum())
    rate = (nr1 + nr0) / n_k_all
    var, st1, st0 = nonresponse_variance_from_residuals(
        fit.residuals[m1], fit.residuals[m0], d.w[m1], d.w[m0], n_k_all, p, rate, d.V,
        nr1 / int(np.sum(t == 1)), nr0 / int(np.sum(t == 0)), opts,
    )
    nr = nr1 + nr0
    if opts.df_rule is DfRule.NORMAL:
        df = math.inf
    elif opts.df_rule is DfRule.BELL_MCCAFFREY:
        df = bell_mccaffrey_df(nr1, nr0, d.V, p, nr1 / int(np.sum(t == 1)), nr0 / int(np.sum(t == 0)))
    else:
        df = nr - d.V * (nr / d.n) - 2
    return VarianceResult(float(var), float(df), (), {"response_rate": rate})


def var_finite_sample(
    fit: FitResult, k: int, opts: VarianceOptions = VarianceOptions(), mechanism: Mechanism = Mechanism.COMPLETE
) -> VarianceResult:
    """E_A(1/n_k^1) s2(1) + E_A(1/n_k^0) s2(0) over the truncated allocation law."""
    d, c, sel = _subgroup_parts(fit, k)
    t = d.t
    p = float(d.p_unit[sel][0])
    n1_all = int(np.sum(t == 1))
    m1, m0 = sel & (t == 1), sel & (t == 0)
    nk1, nk0 = int(m1.sum()), int(m0.sum())
    nk = nk1 + nk0
    pi1, pi0 = nk1 / n1_all, nk0 / (d.n - n1_all)
    st1 = arm_stats(fit.residuals[m1], None, d.V * p * pi1, pi1 if opts.phi_adjust else None)
    st0 = arm_stats(fit.residuals[m0], None, d.V * (1 - p) * pi0, pi0 if opts.phi_adjust else None)
    inv1, inv0 = expected_inverse_sizes(d.n, n1_all, nk, p, mechanism)
    var = inv1 * st1.s2 + inv0 * st0.s2
    df = math.inf if opts.df_rule is DfRule.NORMAL else nk - d.V * (nk / d.n) - 2
    return VarianceResult(float(var), float(df), (), {"E_inv1": inv1, "E_inv0": inv0})


def expected_inverse_sizes(n: int, n1: int, n_k: int, p: float, mechanism: Mechanism = Mechanism.COMPLETE):
    if mechanism is Mechanism.BERNOULLI:
        return expected_inverse_binomial(n_k, p, 1), expected_inverse_binomial(n_k, p, 0)
    law = AllocationLaw(n, n1, n_k)
    return expected_inverse_arm_size(law, 1), expected_inverse_arm_size(law, 0)


# report names for the variance menu
VARIANTS: dict[str, VarianceOptions | str] = {
    "db_actual_phi1": VarianceOptions(Sizes.ACTUAL),
    "db_expected_phi1": VarianceOptions(Sizes.EXPECTED),
    "db_actual_phik": VarianceOptions(Sizes.ACTUAL, phi_adjust=True),
    "db_expected_phik": VarianceOptions(Sizes.EXPECTED, phi_adjust=True),
    "fp_het": VarianceOptions(Sizes.ACTUAL, heterogeneity_bound=True),
    "r2": VarianceOptions(Sizes.ACTUAL, r2_adjust=True),
    "bm_df": VarianceOptions(Sizes.ACTUAL, df_rule=DfRule.BELL_MCCAFFREY),
    "fs": "fs",
    "hw": "hw",
}


def compute_variant(name: str, fit: FitResult, k: int, mechanism: Mechanism = Mechanism.COMPLETE) -> VarianceResult:
    """Evaluate one named entry of :data:`VARIANTS` for subgroup ``k`` of an unblocked fit."""
    try:
        spec = VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variance variant {name!r}; choose from {sorted(VARIANTS)}") from None
    if spec == "hw":
        return var_huber_white(fit, k)
    if spec == "fs":
        return var_finite_sample(fit, k, VarianceOptions(), mechanism)
    return var_design_based(fit, k, spec)
