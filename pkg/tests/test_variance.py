import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from dbsubgroup.data_model import Dataset, DesignSpec, Structure
from dbsubgroup.design_math import se_ratio_actual_vs_expected
from dbsubgroup.estimators import blocked_estimates, covariate_adjusted, nonresponse_weighted
from dbsubgroup.linear_fit import Covariates, ModelSpec, design_from_arrays, fit
from dbsubgroup.variance import (
    DfRule,
    InsufficientCellError,
    Sizes,
    VARIANTS,
    VarianceOptions,
    _cell_variance,
    bell_mccaffrey_df,
    compute_variant,
    var_blocked,
    var_cluster_design_based,
    var_cluster_level_subgroup,
    var_crse,
    var_design_based,
    var_finite_sample,
    var_huber_white,
    var_nonresponse,
)
from oracles import design_based_variance, normal_equations, subgroup_model_matrix


def _fit(seed, n=60, V=2, K=2, p=0.5):
    rng = np.random.default_rng(seed)
    g = np.arange(n) % K
    t = np.zeros(n, dtype=int)
    t[rng.permutation(n)[: int(n * p)]] = 1
    x = rng.normal(size=(n, V))
    y = g + t * (1 + g) + (x.sum(axis=1) if V else 0) + rng.normal(size=n) * (1 + t)
    spec = ModelSpec(Covariates.POOLED if V else Covariates.NONE)
    return fit(design_from_arrays(y, t, g, K, p, x, spec=spec)), (y, t, g, x)


def _ok(t, g, K=2):
    return all(np.sum((g == k) & (t == a)) >= 3 for k in range(K) for a in (0, 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([0, 1, 2]))
def test_design_based_matches_oracle(seed, V):
    f, (y, t, g, x) = _fit(seed, V=V)
    if not _ok(t, g):
        return
    X = subgroup_model_matrix(t, g, 2, 0.5, x if V else None)
    _, resid, _ = normal_equations(X, y)
    for k in range(2):
        r = var_design_based(f, k)
        assert math.isclose(r.variance, design_based_variance(resid, t, g, k, 0.5, V), rel_tol=1e-9)
        pi_k = np.mean(g == k)
        assert math.isclose(r.df, np.sum(g == k) - V * pi_k - 2)


def test_expected_sizes_and_phi_adjust():
    f, (y, t, g, x) = _fit(4)
    for k in range(2):
        base = var_design_based(f, k)
        s1, s0 = base.detail["s2_1"], base.detail["s2_0"]
        nk = np.sum(g == k)
        exp = var_design_based(f, k, VarianceOptions(Sizes.EXPECTED))
        assert math.isclose(exp.variance, s1 / (nk * 0.5) + s0 / (nk * 0.5), rel_tol=1e-12)
        phi = var_design_based(f, k, VarianceOptions(phi_adjust=True))
        sel1, sel0 = (g == k) & (t == 1), (g == k) & (t == 0)
        a1, a0 = sel1.sum(), sel0.sum()
        p1, p0 = a1 / np.sum(t == 1), a0 / np.sum(t == 0)
        e = f.residuals
        ref = (np.sum(e[sel1] ** 2) / (a1 - 2 * 0.5 * p1 - p1)) / a1 + (np.sum(e[sel0] ** 2) / (a0 - 2 * 0.5 * p0 - p0)) / a0
        assert math.isclose(phi.variance, ref, rel_tol=1e-12)
        assert phi.variance < base.variance


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_actual_over_expected_ratio_equals_design_math(seed):
    f, (y, t, g, x) = _fit(seed, V=0)
    if not _ok(t, g):
        return
    for k in range(2):
        act = var_design_based(f, k)
        exp = var_design_based(f, k, VarianceOptions(Sizes.EXPECTED))
        nk = int(np.sum(g == k))
        delta = int(np.sum((g == k) & (t == 1))) - nk * 0.5
        phi = act.detail["s2_1"] / act.detail["s2_0"]
        ratio = se_ratio_actual_vs_expected(nk, 0.5, delta, phi, 0.0)
        assert math.isclose(act.se / exp.se, ratio, rel_tol=1e-12)


def test_heterogeneity_bound_subtracts_and_flags_clamp():
    f, _ = _fit(9)
    base = var_design_based(f, 0)
    het = var_design_based(f, 0, VarianceOptions(heterogeneity_bound=True))
    s1, s0 = math.sqrt(base.detail["s2_1"]), math.sqrt(base.detail["s2_0"])
    assert math.isclose(het.variance, base.variance - (s1 - s0) ** 2 / 30, rel_tol=1e-12)
    e1 = np.array([10.0, -10.0, 10.0])
    e0 = np.array([0.01, -0.01, 0.01])
    with pytest.warns(UserWarning, match="clamped"):
        var, *_, flags = _cell_variance(e1, e0, None, None, 0.5, 0, 0.5, 0.5, 1e6, 1e6, 1, VarianceOptions(heterogeneity_bound=True))
    assert var == 0.0 and flags == ("clamped",)


def test_huber_white_matches_sandwich_oracle():
    f, (y, t, g, x) = _fit(12)
    X = f.design.X
    coef, e, inv = normal_equations(X, y)
    n, l = X.shape
    meat = (X * e[:, None] ** 2).T @ X
    cov = n / (n - l) * inv @ meat @ inv
    for k in range(2):
        r = var_huber_white(f, k)
        assert math.isclose(r.variance, cov[k, k], rel_tol=1e-9)
        assert r.df == n - l


@given(st.integers(2, 50))
def test_bell_mccaffrey_balanced(m):
    assert bell_mccaffrey_df(m, m, 0, 0.5, 0.5, 0.5) == 2 * (m - 1)


@given(st.integers(3, 200), st.integers(3, 200))
def test_bell_mccaffrey_between_min_cell_and_total(a, b):
    df = bell_mccaffrey_df(a, b, 0, 0.5, 0.5, 0.5)
    assert min(a, b) - 1 <= df <= a + b - 2 + 1e-9


def test_r2_adjust_uses_collinearity_of_treatment_column():
    f, (y, t, g, x) = _fit(21, n=40)
    base = var_design_based(f, 0)
    r = var_design_based(f, 0, VarianceOptions(r2_adjust=True))
    X = f.design.X
    z, others = X[:, 0], X[:, 1:]
    resid = z - others @ np.linalg.lstsq(others, z, rcond=None)[0]
    r2 = 1 - np.sum(resid ** 2) / np.sum((z - z.mean()) ** 2)
    assert math.isclose(r.detail["r2"], r2, rel_tol=1e-8, abs_tol=1e-12)
    assert math.isclose(r.variance, base.variance / (1 - r2), rel_tol=1e-10)


def test_r2_adjust_requires_covariates():
    f, _ = _fit(1, V=0)
    with pytest.raises(ValueError, match="r2_adjust requires covariates"):
        var_design_based(f, 0, VarianceOptions(r2_adjust=True))


def test_finite_sample_uses_truncated_hypergeometric():
    f, (y, t, g, x) = _fit(5, V=0, n=40)
    for k in range(2):
        base = var_design_based(f, k)
        r = var_finite_sample(f, k)
        nk = int(np.sum(g == k))
        law = stats.hypergeom(40, nk, 20)
        a = np.arange(1, nk)
        w = law.pmf(a) / law.pmf(a).sum()
        ref = np.sum(w / a) * base.detail["s2_1"] + np.sum(w / (nk - a)) * base.detail["s2_0"]
        assert math.isclose(r.variance, ref, rel_tol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([20, 40, 100]), st.sampled_from([0, 2]))
def test_finite_sample_dominates_expected_sizes_when_balanced(seed, n, V):
    f, (y, t, g, x) = _fit(seed, n=n, V=V)
    if not _ok(t, g):
        return
    for k in range(2):
        assert var_finite_sample(f, k).variance >= var_design_based(f, k, VarianceOptions(Sizes.EXPECTED)).variance


def test_insufficient_cell():
    y = np.array([1.0, 2, 3, 4, 5, 6])
    t = np.array([1, 0, 0, 1, 0, 1])
    g = np.zeros(6, dtype=int)
    f = fit(design_from_arrays(y, t, g, 1, 0.5, spec=ModelSpec(Covariates.NONE)))
    assert var_design_based(f, 0).variance > 0
    y2, t2 = np.array([1.0, 2, 3, 4]), np.array([1, 0, 0, 0])
    f2 = fit(design_from_arrays(y2, t2, np.zeros(4, dtype=int), 1, 0.5, spec=ModelSpec(Covariates.NONE)))
    with pytest.raises(InsufficientCellError):
        var_design_based(f2, 0)


def test_variant_registry():
    f, _ = _fit(3)
    for name in VARIANTS:
        r = compute_variant(name, f, 0)
        assert r.variance > 0 and r.df > 0
    with pytest.raises(ValueError):
        compute_variant("nope", f, 0)


def test_df_rules():
    f, (y, t, g, x) = _fit(2)
    assert var_design_based(f, 0, VarianceOptions(df_rule=DfRule.NORMAL)).df == math.inf
    bm = var_design_based(f, 0, VarianceOptions(df_rule=DfRule.BELL_MCCAFFREY)).df
    a1 = np.sum((g == 0) & (t == 1))
    a0 = np.sum((g == 0) & (t == 0))
    assert math.isclose(bm, bell_mccaffrey_df(a1, a0, 2, 0.5, a1 / 30, a0 / 30))


def _clustered(seed, m=40, size=3, K=2):
    rng = np.random.default_rng(seed)
    cl = np.repeat(np.arange(m), size)
    arm = np.zeros(m, dtype=int)
    arm[rng.permutation(m)[: m // 2]] = 1
    t = arm[cl]
    g = rng.integers(0, K, m * size)
    y = rng.normal(size=m * size) + rng.normal(size=m)[cl] + t
    return y, t, g, cl


def test_crse_matches_cluster_sum_oracle():
    y, t, g, cl = _clustered(3)
    f = fit(design_from_arrays(y, t, g, 2, 0.5, spec=ModelSpec(Covariates.NONE)))
    X = f.design.X
    _, e, inv = normal_equations(X, y)
    n, l = X.shape
    m = cl.max() + 1
    meat = sum(np.outer(X[cl == j].T @ e[cl == j], X[cl == j].T @ e[cl == j]) for j in range(m))
    cov = (m / (m - 1)) * ((n - 1) / (n - l)) * inv @ meat @ inv
    for k in range(2):
        r = var_crse(f, k, cl)
        assert math.isclose(r.variance, cov[k, k], rel_tol=1e-9)
        assert r.df == m - 1


def test_cluster_design_based_formula():
    y, t, g, cl = _clustered(8)
    f = fit(design_from_arrays(y, t, g, 2, 0.5, spec=ModelSpec(Covariates.NONE)))
    m = cl.max() + 1
    arm = np.array([t[cl == j][0] for j in range(m)])
    for k in range(2):
        njk = np.array([np.sum((cl == j) & (g == k)) for j in range(m)], float)
        eb = np.array([f.residuals[(cl == j) & (g == k)].mean() if njk[j] else 0.0 for j in range(m)])
        R = njk / njk.mean() * eb
        m1, m0 = np.sum(arm == 1), np.sum(arm == 0)
        s1 = np.sum(R[arm == 1] ** 2) / (m1 - 1)
        s0 = np.sum(R[arm == 0] ** 2) / (m0 - 1)
        r = var_cluster_design_based(f, k, cl)
        assert math.isclose(r.variance, s1 / m1 + s0 / m0, rel_tol=1e-12)
        mk = np.sum(njk > 0)
        assert r.df == mk - 2


def test_cluster_level_subgroup_formula():
    rng = np.random.default_rng(4)
    m, size = 30, 2
    cl = np.repeat(np.arange(m), size)
    gc = np.arange(m) % 2
    arm = np.zeros(m, dtype=int)
    for k in range(2):
        idx = np.flatnonzero(gc == k)
        arm[rng.choice(idx, len(idx) // 2 + (k == 0), replace=False)] = 1
    y = rng.normal(size=m * size) + arm[cl]
    f = fit(design_from_arrays(y, arm[cl], gc[cl], 2, 0.5, spec=ModelSpec(Covariates.NONE)))
    for k in range(2):
        inc = gc == k
        nj = np.full(m, float(size))
        eb = np.array([f.residuals[cl == j].mean() for j in range(m)])
        wbar2 = np.mean(nj[inc] ** 2)
        R = nj / np.sqrt(wbar2) * eb
        mk = inc.sum()
        s1 = np.sum(R[inc & (arm == 1)] ** 2) / (np.sum(inc & (arm == 1)) - 1)
        s0 = np.sum(R[inc & (arm == 0)] ** 2) / (np.sum(inc & (arm == 0)) - 1)
        phi = (mk - 1) / (mk - mk / m)
        ref = phi * (s1 / (mk * 0.5) + s0 / (mk * 0.5))
        r = var_cluster_level_subgroup(f, k, cl)
        assert math.isclose(r.variance, ref, rel_tol=1e-12)


def test_nonresponse_variance_formula():
    rng = np.random.default_rng(6)
    n = 80
    g = np.arange(n) % 2
    t = np.zeros(n, dtype=int)
    t[rng.permutation(n)[:40]] = 1
    resp = (rng.random(n) < 0.75).astype(int)
    w = rng.uniform(0.5, 2.0, n)
    y = np.where(resp == 1, rng.normal(size=n) + t, np.nan)
    ds = Dataset.from_arrays(y, t, g, responded=resp, w_r=w)
    ests = nonresponse_weighted(ds, ModelSpec(Covariates.NONE))
    for e in ests:
        f = e.fit
        d = f.design
        sel = d.g == e.k
        wbar = d.w[sel].mean()
        m1, m0 = sel & (d.t == 1), sel & (d.t == 0)
        s1 = np.sum((d.w[m1] / wbar * f.residuals[m1]) ** 2) / (m1.sum() - 1)
        s0 = np.sum((d.w[m0] / wbar * f.residuals[m0]) ** 2) / (m0.sum() - 1)
        nk_all = np.sum(ds.g == e.k)
        r_k = sel.sum() / nk_all
        ref = s1 / (nk_all * 0.5 * r_k) + s0 / (nk_all * 0.5 * r_k)
        res = var_nonresponse(f, e.k, nk_all)
        assert math.isclose(res.variance, ref, rel_tol=1e-12)


def test_blocked_variance_pools_block_variances():
    rng = np.random.default_rng(10)
    y, t, g, b = [], [], [], []
    for bb, size in enumerate((20, 30)):
        gg = np.arange(size) % 2
        tt = np.zeros(size, dtype=int)
        tt[rng.permutation(size)[: size // 2]] = 1
        y.extend(rng.normal(size=size) + tt)
        t.extend(tt), g.extend(gg), b.extend([bb] * size)
    ds = Dataset.from_arrays(y, t, g, block=b, design=DesignSpec(structure=Structure.BLOCKED))
    _, pooled = blocked_estimates(ds, ModelSpec(Covariates.NONE))
    f = pooled[0].fit
    k = pooled[0].k
    parts = []
    for bb in range(2):
        sel = (ds.b == bb) & (ds.g == k)
        e = f.residuals
        a1, a0 = np.sum(sel & (ds.t == 1)), np.sum(sel & (ds.t == 0))
        v = np.sum(e[sel & (ds.t == 1)] ** 2) / (a1 - 1) / a1 + np.sum(e[sel & (ds.t == 0)] ** 2) / (a0 - 1) / a0
        parts.append((sel.sum(), v))
        nk = sum(p[0] for p in parts)
    ref = sum(nb ** 2 * v for nb, v in parts) / nk ** 2
    r = var_blocked(f, k)
    assert math.isclose(r.variance, ref, rel_tol=1e-12)
    assert r.df == nk - 4
