"""Command-line front end: ``analyze``, ``simulate`` and ``probe``.

Exit codes: 0 success, 2 invalid input or configuration, 3 estimation failure.
Reports go to files under ``--out``; diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import math
import os
import sys
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .data_model import (
    ClusterWeighting,
    ColumnSchema,
    ConfigError,
    DataError,
    Dataset,
    DesignSpec,
    Mechanism,
    ParseError,
    Structure,
    read_csv,
    validate,
)
from .design_math import (
    AllocationLaw,
    DomainError,
    deviation_curve,
    se_ratio_curve,
    split_probability,
)
from .estimators import (
    EstimationError,
    SEEntry,
    SubgroupEstimate,
    aggregate_to_clusters,
    blocked_estimates,
    blocked_restricted,
    clustered_cluster_level,
    clustered_individual,
    covariate_adjusted,
    nonresponse_weighted,
    poststratified_overall,
)
from .inference import equal_effects_test, subgroup_test
from .linear_fit import Centering, Covariates, ModelSpec, SingularDesignError
from .simulation import ErrorDist, SimConfig, run_simulation, write_reports
from .variance import (
    VARIANTS,
    DfRule,
    InsufficientCellError,
    Sizes,
    VarianceOptions,
    compute_variant,
    var_blocked,
    var_cluster_design_based,
    var_cluster_level_subgroup,
    var_crse,
    var_design_based,
    var_huber_white,
    var_nonresponse,
)

EXIT_OK, EXIT_INVALID, EXIT_ESTIMATION = 0, 2, 3
REPORT_SCHEMA_VERSION = "1"


class EstimationFailure(Exception):
    pass


# ---------------------------------------------------------------- config files


@dataclass
class DataSection:
    y: str = "y"
    t: str = "t"
    subgroup: str = "subgroup"
    id: str | None = None
    block: str | None = None
    cluster: str | None = None
    responded: str | None = None
    weight: str | None = None
    covariates: list[str] = field(default_factory=list)
    subgroup_levels: list[str] | None = None


@dataclass
class DesignSection:
    mechanism: str = "complete"
    structure: str = "simple"
    p: float | dict = 0.5
    cluster_weighting: str = "subgroup_size"


@dataclass
class ModelSection:
    estimator: str = "auto"
    covariates: str = "pooled"
    centering: str = "centered"
    aggregate_clusters: bool = False
    subgroup_level: str = "individual"


@dataclass
class VarianceSection:
    variants: list[str] | None = None
    sizes: str = "actual"
    phi_adjust: bool = False
    heterogeneity_bound: bool = False
    r2_adjust: bool = False
    df_rule: str = "design_based"


@dataclass
class InferenceSection:
    alpha: float = 0.05
    equal_effects: bool = True


@dataclass
class ReportSection:
    format: str = "both"


@dataclass
class AnalyzeConfig:
    data: DataSection = field(default_factory=DataSection)
    design: DesignSection = field(default_factory=DesignSection)
    model: ModelSection = field(default_factory=ModelSection)
    variance: VarianceSection = field(default_factory=VarianceSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    report: ReportSection = field(default_factory=ReportSection)


@dataclass
class SimulateSection:
    n: int | list = 100
    pi1: float | list = 0.5
    p: float = 0.5
    V: int | list = 0
    error_dist: str | list = "normal"
    n_draws: int = 5
    n_reps: int = 10_000
    variance_variants: list[str] = field(default_factory=lambda: ["db_actual_phi1", "db_expected_phi1", "hw"])
    seed: int = 20240101
    alpha: float = 0.05
    min_cell: int = 2
    chunk: int = 500


@dataclass
class SimulateConfig:
    simulate: SimulateSection = field(default_factory=SimulateSection)
    report: ReportSection = field(default_factory=ReportSection)


@dataclass
class PanelASection:
    n: int = 100
    p: float = 0.5
    n_k: int | list = field(default_factory=lambda: [10, 25, 50])
    c_max: float = 0.5
    c_step: float = 0.01


@dataclass
class PanelBSection:
    n_k: int = 50
    p: float = 0.5
    phi_var: float = 1.1
    theta_het: float = 0.05
    c_max: float = 0.2


@dataclass
class ProbeConfig:
    panel_a: PanelASection = field(default_factory=PanelASection)
    panel_b: PanelBSection = field(default_factory=PanelBSection)


def _check_type(value, annotation: str, where: str):
    kinds = {
        "str": str, "bool": bool, "int": int, "float": (int, float),
        "list": list, "dict": dict, "None": type(None),
    }
    allowed = []
    for part in annotation.replace(" ", "").split("|"):
        base = part.split("[")[0]
        allowed.append(kinds[base])
    flat = tuple(itertools.chain.from_iterable(a if isinstance(a, tuple) else (a,) for a in allowed))
    if isinstance(value, bool) and bool not in flat:
        raise ConfigError(f"{where}: expected {annotation}, got a boolean")
    if not isinstance(value, flat):
        raise ConfigError(f"{where}: expected {annotation}, got {type(value).__name__}")
    return float(value) if annotation == "float" else value


def build_config(cls, raw: dict, where: str = ""):
    """Instantiate a nested config dataclass, rejecting unknown keys and wrong types."""
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in [{where or 'top level'}]; allowed: {sorted(known)}")
    kwargs = {}
    for name, value in raw.items():
        f = known[name]
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(f.default_factory() if f.default_factory is not dataclasses.MISSING else None):
            if not isinstance(value, dict):
                raise ConfigError(f"[{path}] must be a table")
            kwargs[name] = build_config(f.default_factory().__class__, value, path)
        else:
            kwargs[name] = _check_type(value, f.type, path)
    return cls(**kwargs)


def load_config(path: str, cls):
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    return build_config(cls, raw)


def _enum(enum_cls, value, what):
    try:
        return enum_cls(value)
    except ValueError:
        raise ConfigError(f"{what} must be one of {[e.value for e in enum_cls]}, got {value!r}") from None


def _as_list(v):
    return list(v) if isinstance(v, list) else [v]


# ---------------------------------------------------------------- analyze


def _design_spec(cfg: DesignSection) -> DesignSpec:
    p = cfg.p
    rates = {str(k): float(v) for k, v in p.items()} if isinstance(p, dict) else {None: float(p)}
    return DesignSpec(
        mechanism=_enum(Mechanism, cfg.mechanism, "design.mechanism"),
        structure=_enum(Structure, cfg.structure, "design.structure"),
        p=rates,
        cluster_weighting=_enum(ClusterWeighting, cfg.cluster_weighting, "design.cluster_weighting"),
    )


def _reorder_levels(ds: Dataset, levels) -> Dataset:
    if levels is None:
        return ds
    levels = tuple(str(v) for v in levels)
    extra = sorted(set(r.subgroup for r in ds.records) - set(levels))
    if extra:
        raise ConfigError(f"data contains subgroup labels {extra} missing from data.subgroup_levels")
    return Dataset(ds.records, levels, ds.design)


def load_dataset(data_path: str, cfg: AnalyzeConfig) -> Dataset:
    d = cfg.data
    schema = ColumnSchema(
        y=d.y, t=d.t, subgroup=d.subgroup, id=d.id, block=d.block, cluster=d.cluster,
        responded=d.responded, weight=d.weight, covariates=tuple(d.covariates),
    )
    ds = read_csv(data_path, schema, _design_spec(cfg.design))
    return _reorder_levels(ds, d.subgroup_levels)


def _custom_options(v: VarianceSection) -> VarianceOptions:
    return VarianceOptions(
        sizes=_enum(Sizes, v.sizes, "variance.sizes"),
        phi_adjust=v.phi_adjust,
        heterogeneity_bound=v.heterogeneity_bound,
        r2_adjust=v.r2_adjust,
        df_rule=_enum(DfRule, v.df_rule, "variance.df_rule"),
    )


DEFAULT_MENU = ("db_actual_phi1", "db_expected_phi1", "db_actual_phik", "db_expected_phik", "hw", "fs", "fp_het", "bm_df")


def resolve_estimator(cfg: AnalyzeConfig, ds: Dataset) -> str:
    est = cfg.model.estimator
    structure = ds.design.structure
    choices = {"auto", "regression", "interacted", "blocked", "blocked_restricted", "clustered",
               "cluster_level", "nonresponse"}
    if est not in choices:
        raise ConfigError(f"model.estimator must be one of {sorted(choices)}, got {est!r}")
    if est != "auto":
        return est
    if structure.clustered and not cfg.model.aggregate_clusters:
        if structure.blocked:
            raise ConfigError("blocked-clustered data need model.aggregate_clusters = true")
        return "cluster_level" if cfg.model.subgroup_level == "cluster" else "clustered"
    if structure.blocked:
        return "blocked"
    if ds.has_response or cfg.model.aggregate_clusters:
        return "nonresponse"
    return "interacted" if cfg.model.covariates == "interacted" else "regression"


def _entry(res, tau: float, alpha: float) -> SEEntry:
    tr = subgroup_test(tau, res.se, res.df, alpha=alpha)
    return SEEntry(se=res.se, df=res.df, ci=tr.ci, p_value=tr.p_value, flags=res.flags)


def _fill(est: SubgroupEstimate, name: str, thunk, alpha: float, notes: list[str]):
    try:
        est.se_menu[name] = _entry(thunk(), est.tau_hat, alpha)
    except InsufficientCellError as exc:
        notes.append(f"subgroup {est.subgroup}, variant {name}: {exc}")


def analyze_dataset(ds: Dataset, cfg: AnalyzeConfig) -> dict:
    """Estimate every subgroup effect and its variance menu; returns the report body."""
    notes: list[str] = []
    model = cfg.model
    cov = _enum(Covariates, model.covariates, "model.covariates")
    spec = ModelSpec(covariates=cov, centering=_enum(Centering, model.centering, "model.centering"))
    vsec = cfg.variance
    alpha = cfg.inference.alpha
    if not 0 < alpha < 1:
        raise ConfigError("inference.alpha must lie in (0, 1)")
    if model.subgroup_level not in ("individual", "cluster"):
        raise ConfigError("model.subgroup_level must be 'individual' or 'cluster'")
    if vsec.r2_adjust and (ds.V == 0 or cov is Covariates.NONE):
        raise ConfigError("r2_adjust requires covariates")
    menu = list(vsec.variants) if vsec.variants is not None else list(DEFAULT_MENU)
    bad = [v for v in menu if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variance variants {bad}; choose from {sorted(VARIANTS)}")
    if "r2" in menu and ds.V == 0:
        raise ConfigError("r2_adjust requires covariates")
    custom = _custom_options(vsec)

    problems = validate(ds)
    if problems:
        raise DataError("; ".join(problems))
    if model.aggregate_clusters:
        ds = aggregate_to_clusters(ds)
        notes.append(f"aggregated to {ds.n} cluster-by-subgroup records")
    estimator = resolve_estimator(cfg, ds)
    blocks_out = []
    restricted = None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if estimator == "regression":
            ests = covariate_adjusted(ds, spec)
        elif estimator == "interacted":
            ests = covariate_adjusted(ds, dataclasses.replace(spec, covariates=Covariates.INTERACTED))
        elif estimator in ("blocked", "blocked_restricted"):
            weights = ds.w_r if ds.has_response else None
            blocks_out, ests = blocked_estimates(ds, spec, weights)
            restricted = blocked_restricted(ds, spec, weights)
        elif estimator == "clustered":
            ests = clustered_individual(ds, spec)
        elif estimator == "cluster_level":
            ests = clustered_cluster_level(ds, spec)
        else:
            ests = nonresponse_weighted(ds, spec)

        for e in ests:
            f = e.fit
            if estimator in ("regression", "interacted"):
                for name in menu:
                    if name in ("fs",) and cov is Covariates.INTERACTED:
                        continue
                    _fill(e, name, lambda name=name: compute_variant(name, f, e.k, ds.design.mechanism), alpha, notes)
                if vsec.r2_adjust or custom != VarianceOptions():
                    _fill(e, "custom", lambda: var_design_based(f, e.k, custom), alpha, notes)
            elif estimator in ("blocked", "blocked_restricted"):
                for name in [m for m in menu if isinstance(VARIANTS[m], VarianceOptions) and m != "r2"]:
                    opts = VARIANTS[name]
                    _fill(e, name, lambda opts=opts: var_blocked(f, e.k, opts, weighted=ds.has_response),
                          alpha, notes)
            elif estimator == "clustered":
                cid = ds.c[ds.responded == 1]
                eq = ds.design.cluster_weighting is ClusterWeighting.EQUAL_CLUSTER
                _fill(e, "db_cluster", lambda: var_cluster_design_based(f, e.k, cid, custom, eq), alpha, notes)
                _fill(e, "crse", lambda: var_crse(f, e.k, cid), alpha, notes)
            elif estimator == "cluster_level":
                cid = ds.c[ds.responded == 1]
                eq = ds.design.cluster_weighting is ClusterWeighting.EQUAL_CLUSTER
                opts = dataclasses.replace(custom, sizes=Sizes.EXPECTED)
                _fill(e, "db_cluster_level", lambda: var_cluster_level_subgroup(f, e.k, cid, opts, eq), alpha, notes)
                _fill(e, "crse", lambda: var_crse(f, e.k, cid), alpha, notes)
            else:
                opts = dataclasses.replace(custom, sizes=Sizes.EXPECTED)
                _fill(e, "db_nonresponse", lambda: var_nonresponse(f, e.k, e.meta["n_k_all"], opts), alpha, notes)
                _fill(e, "hw", lambda: var_huber_white(f, e.k), alpha, notes)
        if estimator == "blocked_restricted":
            ests = restricted
    notes.extend(str(w.message) for w in caught)

    primary = _primary_variant(ests)
    equal = None
    if cfg.inference.equal_effects and len(ests) >= 2 and primary is not None:
        rows = [(e.tau_hat, e.se_menu[primary].se, e.se_menu[primary].df) for e in ests]
        if all(r[1] > 0 for r in rows):
            res = equal_effects_test(rows)
            equal = {
                "variant": primary,
                "chisq": {"statistic": res.chisq.statistic, "df": res.chisq.df, "p_value": res.chisq.p_value},
                "F": {"statistic": res.f.statistic, "df": list(res.f.df), "p_value": res.f.p_value},
            }
    overall = None
    if primary is not None and estimator != "blocked_restricted":
        o = poststratified_overall(ests, ds)
        for name, entry in list(o.se_menu.items()):
            tr = subgroup_test(o.tau_hat, entry.se, entry.df, alpha=alpha)
            o.se_menu[name] = dataclasses.replace(entry, ci=tr.ci, p_value=tr.p_value)
        overall = _estimate_json(o)
    return {
        "estimator": estimator,
        "dataset": {"n": ds.n, "K": ds.K, "V": ds.V, "structure": ds.design.structure.value,
                    "subgroup_levels": list(ds.subgroup_levels)},
        "subgroups": [_estimate_json(e) for e in ests],
        "overall": overall,
        "equal_effects": equal,
        "blocks": [dataclasses.asdict(b) for b in blocks_out],
        "restricted": [{"subgroup": r.subgroup, "tau_hat": r.tau_hat} for r in (restricted or [])],
        "diagnostics": notes,
    }


def _primary_variant(ests) -> str | None:
    common = [v for v in ests[0].se_menu if all(v in e.se_menu for e in ests)] if ests else []
    return common[0] if common else None


def _num(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def _estimate_json(e: SubgroupEstimate) -> dict:
    return {
        "subgroup": e.subgroup,
        "tau_hat": e.tau_hat,
        "n_k1": e.n_k1,
        "n_k0": e.n_k0,
        "pi_k": e.pi_k,
        "estimator_kind": e.estimator_kind,
        "se": {
            name: {"se": s.se, "df": _num(s.df), "ci": list(s.ci) if s.ci else None,
                   "p_value": s.p_value, "flags": list(s.flags)}
            for name, s in e.se_menu.items()
        },
        "meta": {k: v for k, v in e.meta.items() if not isinstance(v, np.ndarray)},
    }


def _write_analyze(report: dict, out: str, fmt: str) -> None:
    os.makedirs(out, exist_ok=True)
    if fmt in ("json", "both"):
        with open(os.path.join(out, "analysis.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, default=_json_default)
            fh.write("\n")
    if fmt in ("csv", "both"):
        with open(os.path.join(out, "analysis.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subgroup", "tau_hat", "n_k1", "n_k0", "variant", "se", "df", "ci_lo", "ci_hi", "p_value"])
            rows = report["subgroups"] + ([report["overall"]] if report["overall"] else [])
            for s in rows:
                for name, v in s["se"].items():
                    ci = v["ci"] or [None, None]
                    w.writerow([s["subgroup"], repr(s["tau_hat"]), s["n_k1"], s["n_k0"], name,
                                repr(v["se"]), v["df"], ci[0], ci[1], v["p_value"]])


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o).__name__)


def _check_format(fmt: str) -> str:
    if fmt not in ("json", "csv", "both"):
        raise ConfigError("report.format must be 'json', 'csv' or 'both'")
    return fmt


def cmd_analyze(args) -> int:
    cfg = load_config(args.config, AnalyzeConfig)
    fmt = _check_format(cfg.report.format)
    ds = load_dataset(args.data, cfg)
    try:
        body = analyze_dataset(ds, cfg)
    except (EstimationError, SingularDesignError, InsufficientCellError) as exc:
        raise EstimationFailure(str(exc)) from exc
    for line in body["diagnostics"]:
        print(f"note: {line}", file=sys.stderr)
    report = {"schema_version": REPORT_SCHEMA_VERSION, "version": __version__, "command": "analyze",
              "seed": None, "config": dataclasses.asdict(cfg), "data_path": args.data, **body}
    _write_analyze(report, args.out, fmt)
    return EXIT_OK


# ---------------------------------------------------------------- simulate


def sim_configs(sec: SimulateSection) -> list[SimConfig]:
    out = []
    for n, pi1, V, dist in itertools.product(_as_list(sec.n), _as_list(sec.pi1), _as_list(sec.V),
                                             _as_list(sec.error_dist)):
        out.append(SimConfig(
            n=int(n), pi1=float(pi1), p=sec.p, V=int(V), n_draws=sec.n_draws, n_reps=sec.n_reps,
            error_dist=_enum(ErrorDist, dist, "simulate.error_dist"),
            variance_variants=tuple(sec.variance_variants), seed=sec.seed, alpha=sec.alpha,
            min_cell=sec.min_cell,
        ))
    return out


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, SimulateConfig)
    _check_format(cfg.report.format)
    configs = sim_configs(cfg.simulate)
    reports = []
    for c in configs:
        try:
            reports.append(run_simulation(c, threads=args.threads, chunk=cfg.simulate.chunk, progress=True))
        except RuntimeError as exc:
            raise EstimationFailure(str(exc)) from exc
    meta = {"schema_version": REPORT_SCHEMA_VERSION, "version": __version__, "command": "simulate",
            "seed": cfg.simulate.seed, "config": dataclasses.asdict(cfg)}
    csv_path, json_path = write_reports(reports, args.out, meta)
    if cfg.report.format == "csv":
        os.remove(json_path)
    elif cfg.report.format == "json":
        os.remove(csv_path)
    return EXIT_OK


# ---------------------------------------------------------------- probe


def _grid(c_max: float, step: float) -> list[float]:
    if step <= 0 or c_max < 0:
        raise ConfigError("c_step must be positive and c_max nonnegative")
    m = int(round(c_max / step))
    return [round(i * step, 12) for i in range(m + 1)]


def cmd_probe(args) -> int:
    cfg = load_config(args.config, ProbeConfig)
    a, b = cfg.panel_a, cfg.panel_b
    os.makedirs(args.out, exist_ok=True)
    summary = {"schema_version": REPORT_SCHEMA_VERSION, "version": __version__, "command": "probe",
               "seed": None, "config": dataclasses.asdict(cfg), "split_probability": {}}
    n1 = a.n * a.p
    if abs(n1 - round(n1)) > 1e-9:
        raise ConfigError("panel_a: n * p must be an integer")
    grid = _grid(a.c_max, a.c_step)
    with open(os.path.join(args.out, "panel_a.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "n_k", "p", "c", "prob_treatment", "prob_control", "split_probability"])
        for n_k in _as_list(a.n_k):
            law = AllocationLaw(a.n, int(round(n1)), int(n_k))
            sp = split_probability(law)
            summary["split_probability"][str(n_k)] = sp
            for c, pt, pc in deviation_curve(law, grid):
                w.writerow([a.n, n_k, a.p, c, repr(pt), repr(pc), repr(sp)])
    rows = se_ratio_curve(b.n_k, b.p, b.phi_var, b.theta_het, b.c_max)
    with open(os.path.join(args.out, "panel_b.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_k", "p", "phi", "theta", "delta1", "delta1_rel", "ratio"])
        for d, rel, r in rows:
            w.writerow([b.n_k, b.p, b.phi_var, b.theta_het, repr(float(d)), repr(float(rel)), repr(r)])
    ratios = [r for *_, r in rows]
    summary["panel_b"] = {"max_ratio": max(ratios), "min_ratio": min(ratios)}
    with open(os.path.join(args.out, "probe.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dbsubgroup", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    an = sub.add_parser("analyze", help="estimate subgroup effects for a trial dataset")
    an.add_argument("--data", required=True)
    an.add_argument("--config", required=True)
    an.add_argument("--out", required=True)
    an.set_defaults(func=cmd_analyze)
    si = sub.add_parser("simulate", help="run the Monte Carlo study")
    si.add_argument("--config", required=True)
    si.add_argument("--out", required=True)
    si.add_argument("--threads", type=int, default=1, help="worker processes (0 = one per CPU)")
    si.set_defaults(func=cmd_simulate)
    pr = sub.add_parser("probe", help="allocation probabilities and SE-ratio curves")
    pr.add_argument("--config", required=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_probe)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DataError, DomainError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except EstimationFailure as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
