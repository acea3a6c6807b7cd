"""Subgroup average-treatment-effect point estimators."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .data_model import ClusterWeighting, Dataset, Structure, UnitRecord
from .linear_fit import Covariates, FitResult, ModelSpec, build_design, fit


class EstimationError(ValueError):
    pass


@dataclass(frozen=True)
class SEEntry:
    se: float
    df: float
    ci: tuple[float, float] | None = None
    p_value: float | None = None
    flags: tuple[str, ...] = ()


@dataclass
class SubgroupEstimate:
    subgroup: str
    tau_hat: float
    n_k1: int
    n_k0: int
    pi_k: float
    estimator_kind: str
    se_menu: dict[str, SEEntry] = field(default_factory=dict)
    fit: FitResult | None = field(default=None, repr=False)
    k: int = -1
    meta: dict = field(default_factory=dict)

    @property
    def n_k(self) -> int:
        return self.n_k1 + self.n_k0

    def primary(self, variant: str | None = None) -> SEEntry | None:
        if not self.se_menu:
            return None
        return self.se_menu[variant] if variant else next(iter(self.se_menu.values()))

    @property
    def ci(self):
        e = self.primary()
        return None if e is None else e.ci

    @property
    def p_value(self):
        e = self.primary()
        return None if e is None else e.p_value


@dataclass(frozen=True)
class BlockEstimate:
    block: str
    subgroup: str
    tau_hat_bk: float
    n_bk: int
    n_bk1: int
    n_bk0: int
    included: bool


def _arm_counts(t, g, k):
    in_k = g == k
    n1 = int(np.sum(t[in_k] == 1))
    return n1, int(np.sum(in_k)) - n1


def diff_in_means(dataset: Dataset, k: int) -> SubgroupEstimate:
    """Treatment minus control mean outcome within subgroup ``k`` (respondents only)."""
    keep = dataset.responded == 1
    y, t, g = dataset.y[keep], dataset.t[keep], dataset.g[keep]
    sel = g == k
    y1, y0 = y[sel & (t == 1)], y[sel & (t == 0)]
    if len(y1) == 0 or len(y0) == 0:
        raise EstimationError(f"subgroup {dataset.subgroup_levels[k]}: empty treatment or control cell")
    return SubgroupEstimate(
        subgroup=dataset.subgroup_levels[k],
        tau_hat=float(y1.mean() - y0.mean()),
        n_k1=len(y1),
        n_k0=len(y0),
        pi_k=float(np.sum(dataset.g == k) / dataset.n),
        estimator_kind="diff_in_means",
        k=k,
    )


def _from_fit(dataset: Dataset, f: FitResult, kind: str, pi_full: bool = True) -> list[SubgroupEstimate]:
    d = f.design
    out = []
    for k, label in enumerate(dataset.subgroup_levels):
        (c,) = d.cells_of(k)
        n1, n0 = _arm_counts(d.t, d.g, k)
        out.append(
            SubgroupEstimate(
                subgroup=label,
                tau_hat=float(f.cell_tau[c]),
                n_k1=n1,
                n_k0=n0,
                pi_k=float(np.sum(dataset.g == k) / dataset.n),
                estimator_kind=kind,
                fit=f,
                k=k,
            )
        )
    return out


def _estimate(dataset, spec, weights, kind):
    try:
        f = fit(build_design(dataset, spec, weights))
    except ValueError as exc:
        raise EstimationError(str(exc)) from exc
    return _from_fit(dataset, f, kind)


def covariate_adjusted(dataset: Dataset, spec: ModelSpec = ModelSpec()) -> list[SubgroupEstimate]:
    """Regression-adjusted subgroup effects from the pooled-slope model.

    With no covariates this reproduces the subgroup difference in means.
    """
    if spec.covariates is Covariates.INTERACTED:
        return interacted_adjusted(dataset, spec)
    kind = "covariate_adjusted" if spec.covariates is Covariates.POOLED and dataset.V else "diff_in_means"
    return _estimate(dataset, replace(spec, blocked=False), None, kind)


def interacted_adjusted(dataset: Dataset, spec: ModelSpec | None = None) -> list[SubgroupEstimate]:
    """Effects from the model with subgroup-by-arm covariate slopes."""
    spec = replace(spec or ModelSpec(), covariates=Covariates.INTERACTED, blocked=False)
    keep = dataset.responded == 1
    t, g, V = dataset.t[keep], dataset.g[keep], dataset.V
    for k, label in enumerate(dataset.subgroup_levels):
        small = min(np.sum((g == k) & (t == 1)), np.sum((g == k) & (t == 0)))
        if V and small < V + 2:
            warnings.warn(f"subgroup {label}: arm cell with {small} units for {V} slopes", stacklevel=2)
    return _estimate(dataset, spec, None, "interacted")


def blocked_estimates(
    dataset: Dataset, spec: ModelSpec = ModelSpec(), weights=None
) -> tuple[list[BlockEstimate], list[SubgroupEstimate]]:
    """Per-(block, subgroup) effects and their subgroup-size-weighted pools.

    Cells lacking a treated or control unit are excluded from the pool and
    from its denominator.
    """
    if not dataset.design.structure.blocked:
        raise EstimationError("blocked estimator needs a blocked design")
    spec = replace(spec, blocked=True)
    try:
        f = fit(build_design(dataset, spec, weights))
    except ValueError as exc:
        raise EstimationError(str(exc)) from exc
    d = f.design
    blocks: list[BlockEstimate] = []
    for c, (bb, kk) in enumerate(d.cells):
        sel = d.cell == c
        n1 = int(np.sum(d.t[sel]))
        blocks.append(
            BlockEstimate(
                block=dataset.block_levels[bb],
                subgroup=dataset.subgroup_levels[kk],
                tau_hat_bk=float(f.cell_tau[c]),
                n_bk=int(sel.sum()),
                n_bk1=n1,
                n_bk0=int(sel.sum()) - n1,
                included=bool(d.included[c]),
            )
        )
    pooled = []
    for k, label in enumerate(dataset.subgroup_levels):
        cs = [c for c in d.cells_of(k) if d.included[c]]
        if not cs:
            raise EstimationError(f"subgroup {label}: no block has both arms represented")
        wts = np.array([blocks[c].n_bk for c in cs], dtype=float)
        tau = float(np.sum(wts / wts.sum() * f.cell_tau[cs]))
        n1 = sum(blocks[c].n_bk1 for c in cs)
        n0 = sum(blocks[c].n_bk0 for c in cs)
        excluded = [blocks[c].block for c in d.cells_of(k) if not d.included[c]]
        pooled.append(
            SubgroupEstimate(
                subgroup=label,
                tau_hat=tau,
                n_k1=n1,
                n_k0=n0,
                pi_k=float(np.sum(dataset.g == k) / dataset.n),
                estimator_kind="blocked_pooled",
                fit=f,
                k=k,
                meta={"excluded_blocks": excluded, "blocks": len(cs)},
            )
        )
    return blocks, pooled


def blocked_restricted(dataset: Dataset, spec: ModelSpec = ModelSpec(), weights=None) -> list[SubgroupEstimate]:
    """Precision-weighted pool of block effects, weights n_bk p_bk (1 - p_bk).

    ``p_bk`` is the realized treated share of the cell. Point estimates only.
    """
    blocks, pooled = blocked_estimates(dataset, spec, weights)
    out = []
    for e in pooled:
        cells = [be for be in blocks if be.subgroup == e.subgroup and be.included]
        w = np.array([be.n_bk * (be.n_bk1 / be.n_bk) * (1 - be.n_bk1 / be.n_bk) for be in cells])
        tau = np.array([be.tau_hat_bk for be in cells])
        out.append(replace(e, tau_hat=float(np.sum(w * tau) / w.sum()), estimator_kind="blocked_restricted",
                           se_menu={}, fit=None))
    return out


def cluster_weights(dataset: Dataset) -> np.ndarray:
    """Per-unit analysis weights implementing the cluster weighting policy."""
    if dataset.design.cluster_weighting is ClusterWeighting.EQUAL_CLUSTER:
        keep = dataset.responded == 1
        key = dataset.c * dataset.K + dataset.g
        counts = np.bincount(key[keep], minlength=key.max() + 1)
        w = np.zeros(dataset.n)
        w[keep] = 1.0 / counts[key[keep]]
        return w
    return np.ones(dataset.n)


def _cluster_summaries(dataset: Dataset, k: int) -> dict:
    keep = (dataset.responded == 1) & (dataset.g == k)
    c = dataset.c[keep]
    labels = [dataset.cluster_levels[j] for j in np.unique(c)] if dataset.cluster_levels else []
    sizes = np.bincount(c)
    ybar = np.bincount(c, weights=dataset.y[keep]) / np.maximum(sizes, 1)
    present = sizes > 0
    xbar = np.column_stack(
        [np.bincount(c, weights=dataset.x[keep][:, v]) / np.maximum(sizes, 1) for v in range(dataset.V)]
    ) if dataset.V else np.zeros((len(sizes), 0))
    return {
        "clusters": labels,
        "n_jk": sizes[present].tolist(),
        "ybar_jk": ybar[present].tolist(),
        "xbar_jk": xbar[present].tolist(),
    }


def clustered_individual(dataset: Dataset, spec: ModelSpec = ModelSpec()) -> list[SubgroupEstimate]:
    """Effects for individual-level subgroups in a cluster-randomized trial."""
    if not dataset.design.structure.clustered:
        raise EstimationError("clustered estimator needs cluster labels")
    spec = replace(spec, blocked=False)
    ests = _estimate(dataset, spec, cluster_weights(dataset), "clustered_individual")
    for e in ests:
        e.meta.update(_cluster_summaries(dataset, e.k))
        e.meta["cluster_weighting"] = dataset.design.cluster_weighting.value
        keep = (dataset.responded == 1) & (dataset.g == e.k)
        m_k = len(np.unique(dataset.c[keep]))
        if m_k < len(dataset.cluster_levels):
            e.meta["absent_from_some_clusters"] = True
    return ests


def clustered_cluster_level(dataset: Dataset, spec: ModelSpec = ModelSpec()) -> list[SubgroupEstimate]:
    """Effects for subgroups defined by a cluster-level characteristic."""
    if not dataset.design.structure.clustered:
        raise EstimationError("clustered estimator needs cluster labels")
    owner: dict = {}
    for r in dataset.records:
        if owner.setdefault(r.cluster, r.subgroup) != r.subgroup:
            raise EstimationError(f"cluster {r.cluster!r} spans several subgroups")
    keep = dataset.responded == 1
    for k, label in enumerate(dataset.subgroup_levels):
        cl = dataset.c[keep & (dataset.g == k)]
        tt = dataset.t[keep & (dataset.g == k)]
        if len(np.unique(cl[tt == 1])) == 0 or len(np.unique(cl[tt == 0])) == 0:
            raise EstimationError(f"subgroup {label}: no treated or no control cluster")
    ests = _estimate(dataset, replace(spec, blocked=False), cluster_weights(dataset), "clustered_cluster_level")
    for e in ests:
        sel = keep & (dataset.g == e.k)
        e.meta["m_k1"] = int(len(np.unique(dataset.c[sel & (dataset.t == 1)])))
        e.meta["m_k0"] = int(len(np.unique(dataset.c[sel & (dataset.t == 0)])))
    return ests


def nonresponse_weighted(dataset: Dataset, spec: ModelSpec = ModelSpec()) -> list[SubgroupEstimate]:
    """Weighted least squares on respondents with nonresponse weights."""
    ests = _estimate(dataset, replace(spec, blocked=False), dataset.w_r, "nonresponse_weighted")
    resp = dataset.responded == 1
    for e in ests:
        in_k = dataset.g == e.k
        e.meta["response_rate"] = float(resp[in_k].mean())
        e.meta["mean_weight"] = float(dataset.w_r[in_k & resp].mean())
        e.meta["n_k_all"] = int(in_k.sum())
    return ests


def poststratified_overall(estimates: list[SubgroupEstimate], dataset: Dataset) -> SubgroupEstimate:
    """Share-weighted average of subgroup effects; variances add by independence."""
    by_label = {e.subgroup: e for e in estimates}
    missing = [lab for lab in dataset.subgroup_levels if lab not in by_label]
    if missing:
        raise EstimationError(f"missing subgroup estimates for {missing}")
    ests = [by_label[lab] for lab in dataset.subgroup_levels]
    counts = np.bincount(dataset.g, minlength=dataset.K)
    pi = counts / counts.sum()
    tau = float(np.sum(pi * np.array([e.tau_hat for e in ests])))
    menu = {}
    shared = set.intersection(*(set(e.se_menu) for e in ests)) if ests else set()
    for name in (v for v in ests[0].se_menu if v in shared):
        var = sum(p ** 2 * e.se_menu[name].se ** 2 for p, e in zip(pi, ests))
        df = sum(e.se_menu[name].df for e in ests)
        menu[name] = SEEntry(se=float(np.sqrt(var)), df=float(df))
    return SubgroupEstimate(
        subgroup="overall",
        tau_hat=tau,
        n_k1=sum(e.n_k1 for e in ests),
        n_k0=sum(e.n_k0 for e in ests),
        pi_k=1.0,
        estimator_kind="poststratified",
        se_menu=menu,
    )


def aggregate_to_clusters(dataset: Dataset) -> Dataset:
    """Collapse respondents to one record per (cluster, subgroup).

    Outcomes and covariates become weighted means; the record weight is the
    summed unit weight, so per-person weighting carries through. The result
    drops the cluster structure (a clustered design becomes simple, a
    blocked-clustered one becomes blocked).
    """
    structure = dataset.design.structure
    if not structure.clustered:
        raise EstimationError("dataset has no clusters to aggregate")
    groups: dict = {}
    for r in dataset.records:
        if r.responded == 0:
            continue
        groups.setdefault((r.cluster, r.subgroup), []).append(r)
    recs = []
    for (cl, sg), members in groups.items():
        w = np.array([m.w_r if (m.w_r is not None) else 1.0 for m in members])
        y = float(np.sum(w * np.array([m.y for m in members])) / w.sum())
        xs = np.array([m.x for m in members], dtype=float).reshape(len(members), -1)
        xm = tuple(float(v) for v in (w @ xs) / w.sum())
        recs.append(
            UnitRecord(
                id=f"{cl}:{sg}",
                y=y,
                t=members[0].t,
                subgroup=sg,
                block=members[0].block,
                x=xm,
                responded=1,
                w_r=float(w.sum()),
            )
        )
    new_structure = Structure.BLOCKED if structure.blocked else Structure.SIMPLE
    design = replace(dataset.design, structure=new_structure)
    return Dataset(tuple(recs), dataset.subgroup_levels, design)
