"""Independent reference computations used only by the tests.

Each routine takes a different route from the package code: brute-force
enumeration, scipy's distributions or dense normal equations.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import stats


def random_population(rng: np.random.Generator, n: int, K: int):
    """Potential outcomes and subgroup labels with every subgroup of size >= 2."""
    while True:
        g = rng.integers(0, K, n)
        if np.all(np.bincount(g, minlength=K) >= 2):
            break
    y0 = rng.normal(0, 1, n) + g
    y1 = y0 + rng.normal(0.5, 1.0, n)
    return y0, y1, g


def enumerate_subgroup_estimates(y0, y1, g, k: int, n1: int):
    """All difference-in-means values for subgroup k over every assignment of n1 treated.

    Assignments leaving subgroup k's treatment or control cell empty are
    dropped, which renormalizes the uniform weights.
    """
    n = len(y0)
    out = []
    for treated in itertools.combinations(range(n), n1):
        t = np.zeros(n, dtype=int)
        t[list(treated)] = 1
        sel = g == k
        if t[sel].sum() == 0 or t[sel].sum() == sel.sum():
            continue
        out.append((t, y1[sel & (t == 1)].mean() - y0[sel & (t == 0)].mean()))
    return out


def exact_subgroup_variance(y0, y1, g, k: int, n1: int) -> float:
    """E(1/n_k1) S2(1) + E(1/n_k0) S2(0) - S2(tau)/n_k with scipy's hypergeometric law."""
    n = len(y0)
    sel = g == k
    n_k = int(sel.sum())
    law = stats.hypergeom(n, n_k, n1)
    a = np.arange(1, n_k)
    w = law.pmf(a)
    w = w / w.sum()
    e1 = float(np.sum(w / a))
    e0 = float(np.sum(w / (n_k - a)))
    s1 = np.var(y1[sel], ddof=1)
    s0 = np.var(y0[sel], ddof=1)
    st = np.var(y1[sel] - y0[sel], ddof=1)
    return e1 * s1 + e0 * s0 - st / n_k


def split_probability_exact(n: int, n1: int, n_k: int) -> float:
    """P(0 < n_k1 < n_k) from integer binomial coefficients."""
    total = math.comb(n, n1)
    bad = math.comb(n - n_k, n1) + math.comb(n - n_k, n1 - n_k) if n_k <= n1 else math.comb(n - n_k, n1)
    return 1 - bad / total


def normal_equations(X, y, w=None):
    """Weighted least squares via an explicit inverse of X'WX."""
    w = np.ones(len(y)) if w is None else np.asarray(w, float)
    XtWX = X.T @ (X * w[:, None])
    inv = np.linalg.inv(XtWX)
    coef = inv @ (X.T @ (w * y))
    return coef, y - X @ coef, inv


def subgroup_model_matrix(t, g, K, p, x=None):
    """Columns G_k (T - p), G_k, then covariates centered within subgroup."""
    n = len(t)
    G = np.eye(K)[g]
    cols = [G * (t - p)[:, None], G]
    if x is not None and np.size(x):
        x = np.asarray(x, float).reshape(n, -1)
        means = np.array([x[g == k].mean(axis=0) for k in range(K)])
        cols.append(x - means[g])
    return np.hstack(cols)


def design_based_variance(resid, t, g, k, p, V):
    """Actual-size design-based variance built from per-arm residual sums."""
    sel = g == k
    n1, n0 = int(np.sum(t == 1)), int(np.sum(t == 0))
    a1, a0 = int(np.sum(sel & (t == 1))), int(np.sum(sel & (t == 0)))
    ss1 = float(np.sum(resid[sel & (t == 1)] ** 2))
    ss0 = float(np.sum(resid[sel & (t == 0)] ** 2))
    s1 = ss1 / (a1 - V * p * (a1 / n1) - 1)
    s0 = ss0 / (a0 - V * (1 - p) * (a0 / n0) - 1)
    return s1 / a1 + s0 / a0
