"""Design matrices for the subgroup regression models and a QR least-squares solver."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

RANK_TOL = 1e-10


class EmptyCellError(ValueError):
    """A (subgroup[, block]) cell has no treated or no control units."""


class SingularDesignError(np.linalg.LinAlgError):
    def __init__(self, message: str, columns: tuple[str, ...] = ()):
        super().__init__(message)
        self.columns = columns


class Covariates(str, enum.Enum):
    NONE = "none"
    POOLED = "pooled"
    INTERACTED = "interacted"


class Centering(str, enum.Enum):
    CENTERED = "centered"
    RAW = "raw"


@dataclass(frozen=True)
class ModelSpec:
    covariates: Covariates = Covariates.POOLED
    blocked: bool = False
    centering: Centering = Centering.CENTERED


@dataclass(frozen=True, eq=False)
class Design:
    """A built design matrix plus the unit-level context the variance code needs.

    A *cell* is a (block, subgroup) pair with at least one unit; unblocked
    designs have exactly one cell per subgroup, in subgroup order.
    """

    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    columns: tuple[str, ...]
    spec: ModelSpec
    t: np.ndarray
    g: np.ndarray
    b: np.ndarray
    p_unit: np.ndarray
    K: int
    V: int
    n_blocks: int
    cells: tuple[tuple[int, int], ...]
    cell: np.ndarray
    included: np.ndarray
    tau_col: np.ndarray
    alpha_col: np.ndarray
    beta_cols: slice
    xbar: np.ndarray
    x: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_cols(self) -> int:
        return self.X.shape[1]

    def cells_of(self, k: int) -> list[int]:
        return [c for c, (_, kk) in enumerate(self.cells) if kk == k]


def design_from_arrays(
    y,
    t,
    g,
    K: int,
    p_unit,
    x=None,
    *,
    spec: ModelSpec = ModelSpec(),
    b=None,
    n_blocks: int = 1,
    w=None,
    labels: tuple[str, ...] | None = None,
) -> Design:
    """Build the subgroup regression design from unit arrays.

    Columns: cell-by-treatment terms (included cells only), cell intercepts,
    then covariate columns. Covariates are centered at their cell means, and
    the treatment indicator at the design rate ``p_unit``, unless the spec asks
    for the raw parameterization.
    """
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=np.int64)
    g = np.asarray(g, dtype=np.int64)
    n = y.shape[0]
    p_unit = np.broadcast_to(np.asarray(p_unit, dtype=float), (n,))
    x = np.zeros((n, 0)) if x is None else np.asarray(x, dtype=float).reshape(n, -1)
    V = x.shape[1]
    b = np.zeros(n, dtype=np.int64) if b is None else np.asarray(b, dtype=np.int64)
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    labels = labels or tuple(str(k) for k in range(K))
    if spec.covariates is Covariates.NONE:
        x_used = np.zeros((n, 0))
    else:
        x_used = x

    key = g * n_blocks + b
    present = np.bincount(key, minlength=K * n_blocks) > 0
    n_treat = np.bincount(key, weights=t, minlength=K * n_blocks)
    n_all = np.bincount(key, minlength=K * n_blocks)
    cells = tuple((int(kb % n_blocks), int(kb // n_blocks)) for kb in np.flatnonzero(present))
    cell_id = np.full(K * n_blocks, -1, dtype=np.int64)
    cell_id[np.flatnonzero(present)] = np.arange(len(cells))
    cell = cell_id[key]
    flat = np.flatnonzero(present)
    included = (n_treat[flat] > 0) & (n_treat[flat] < n_all[flat])
    if not spec.blocked:
        missing = [k for k in range(K) if not present[k * n_blocks:(k + 1) * n_blocks].any()]
        if missing:
            raise EmptyCellError(f"subgroup {labels[missing[0]]} has no units")
    if not included.all():
        bad = [cells[c] for c in np.flatnonzero(~included)]
        if not spec.blocked:
            bb, kk = bad[0]
            arm = "treatment" if n_treat[flat][cells.index(bad[0])] == 0 else "control"
            raise EmptyCellError(f"subgroup {labels[kk]}: empty {arm} cell")
        warnings.warn(
            f"cells (block, subgroup) {bad} lack a treated or control unit; excluded from pooling",
            stacklevel=2,
        )

    n_cells = len(cells)
    onehot = np.zeros((n, n_cells))
    onehot[np.arange(n), cell] = 1.0
    tvar = t - p_unit if spec.centering is Centering.CENTERED else t.astype(float)
    inc_idx = np.flatnonzero(included)
    tau_cols = onehot[:, inc_idx] * tvar[:, None]

    wsum = np.bincount(cell, weights=w, minlength=n_cells)
    xbar = np.zeros((n_cells, V))
    for v in range(V):
        xbar[:, v] = np.bincount(cell, weights=w * x[:, v], minlength=n_cells) / wsum
    if spec.covariates is Covariates.NONE:
        cov_cols = np.zeros((n, 0))
        cov_names: list[str] = []
    else:
        xc = x - xbar[cell] if spec.centering is Centering.CENTERED else x
        if spec.covariates is Covariates.POOLED:
            cov_cols = xc
            cov_names = [f"x{v + 1}" for v in range(V)]
        else:
            parts, cov_names = [], []
            for arm in (0, 1):
                armmask = (t == arm).astype(float)
                for k in range(K):
                    gk = (g == k).astype(float) * armmask
                    parts.append(xc * gk[:, None])
                    cov_names += [f"x{v + 1}:g{labels[k]}:t{arm}" for v in range(V)]
            cov_cols = np.hstack(parts) if parts else np.zeros((n, 0))

    def cname(c):
        bb, kk = cells[c]
        return f"g{labels[kk]}" + (f":b{bb}" if spec.blocked else "")

    columns = tuple(
        [f"tau:{cname(c)}" for c in inc_idx]
        + [f"alpha:{cname(c)}" for c in range(n_cells)]
        + cov_names
    )
    X = np.hstack([tau_cols, onehot, cov_cols])
    tau_col = np.full(n_cells, -1, dtype=np.int64)
    tau_col[inc_idx] = np.arange(len(inc_idx))
    alpha_col = len(inc_idx) + np.arange(n_cells)
    beta_start = len(inc_idx) + n_cells
    return Design(
        X=X,
        y=y,
        w=w,
        columns=columns,
        spec=spec,
        t=t,
        g=g,
        b=b,
        p_unit=np.array(p_unit),
        K=K,
        V=V if spec.covariates is not Covariates.NONE else 0,
        n_blocks=n_blocks,
        cells=cells,
        cell=cell,
        included=included,
        tau_col=tau_col,
        alpha_col=alpha_col,
        beta_cols=slice(beta_start, X.shape[1]),
        xbar=xbar,
        x=x_used,
    )


def build_design(dataset, spec: ModelSpec = ModelSpec(), weights=None) -> Design:
    """Design for ``dataset``'s estimation sample (respondents only, if flagged).

    ``weights`` are per-record analysis weights (e.g. nonresponse weights);
    nonrespondents are dropped before the design is built.
    """
    if spec.blocked and not dataset.design.structure.blocked:
        raise ValueError("blocked model requested for a dataset without block labels")
    keep = dataset.responded == 1
    w = None if weights is None else np.asarray(weights, dtype=float)[keep]
    n_blocks = len(dataset.block_levels) if spec.blocked else 1
    return design_from_arrays(
        dataset.y[keep],
        dataset.t[keep],
        dataset.g[keep],
        dataset.K,
        dataset.p_unit[keep],
        dataset.x[keep],
        spec=spec,
        b=dataset.b[keep] if spec.blocked else None,
        n_blocks=max(n_blocks, 1),
        w=w,
        labels=tuple(dataset.subgroup_levels),
    )


@dataclass(frozen=True, eq=False)
class FitResult:
    design: Design
    coef: np.ndarray
    residuals: np.ndarray
    R: np.ndarray = field(repr=False)

    @cached_property
    def cell_tau(self) -> np.ndarray:
        """Per-cell effect estimates (NaN for excluded cells)."""
        d = self.design
        out = np.full(len(d.cells), np.nan)
        inc = d.tau_col >= 0
        out[inc] = self.coef[d.tau_col[inc]]
        if d.spec.centering is Centering.RAW and d.spec.covariates is Covariates.INTERACTED and d.V:
            # raw interacted slopes shift the effect to x = 0; move it back to the cell mean
            for c, (_, k) in enumerate(d.cells):
                if inc[c]:
                    b1, b0 = self.arm_slopes(k)
                    out[c] += d.xbar[c] @ (b1 - b0)
        return out

    @property
    def tau_hat(self) -> np.ndarray:
        return self.cell_tau

    @property
    def alpha_hat(self) -> np.ndarray:
        return self.coef[self.design.alpha_col]

    @property
    def beta_hat(self) -> np.ndarray:
        return self.coef[self.design.beta_cols]

    def arm_slopes(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """(treatment, control) covariate slopes for subgroup k in the interacted model."""
        d = self.design
        V, K = d.V, d.K
        beta = self.beta_hat
        if d.spec.covariates is not Covariates.INTERACTED:
            return beta, beta
        b0 = beta[k * V:(k + 1) * V]
        b1 = beta[(K + k) * V:(K + k + 1) * V]
        return b1, b0

    @cached_property
    def bread(self) -> np.ndarray:
        """(X'WX)^{-1}."""
        Rinv = scipy.linalg.solve_triangular(self.R, np.eye(self.R.shape[0]))
        return Rinv @ Rinv.T

    @property
    def column_map(self) -> tuple[str, ...]:
        return self.design.columns


def solve_least_squares(X, y, w=None, columns: tuple[str, ...] | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Weighted least squares through a thin QR of sqrt(w) X.

    Returns ``(coef, residuals, R)``; residuals are on the unweighted scale.
    Raises :class:`SingularDesignError` when the smallest singular value is
    below ``RANK_TOL`` times the largest.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if w is None:
        Xw, yw = X, y
    else:
        sw = np.sqrt(np.asarray(w, dtype=float))
        Xw, yw = X * sw[:, None], y * sw
    if X.shape[1] == 0:
        return np.zeros(0), y.copy(), np.zeros((0, 0))
    if X.shape[0] < X.shape[1]:
        raise SingularDesignError("more columns than observations", tuple(columns or ()))
    Q, R = np.linalg.qr(Xw)
    sv = np.linalg.svd(R, compute_uv=False)
    if not sv[-1] >= RANK_TOL * sv[0]:
        names = columns or tuple(f"col{j}" for j in range(X.shape[1]))
        bad = _deficient_columns(Xw, names)
        raise SingularDesignError(f"design is rank deficient; offending column(s): {', '.join(bad)}", bad)
    coef = scipy.linalg.solve_triangular(R, Q.T @ yw)
    return coef, y - X @ coef, R


def _deficient_columns(Xw: np.ndarray, names) -> tuple[str, ...]:
    _, R, piv = scipy.linalg.qr(Xw, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    bad = piv[d < RANK_TOL * max(d[0], 1e-300)]
    return tuple(names[j] for j in sorted(bad))


def fit(design: Design) -> FitResult:
    coef, resid, R = solve_least_squares(design.X, design.y, design.w, design.columns)
    return FitResult(design, coef, resid, R)
