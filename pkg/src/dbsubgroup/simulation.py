"""Finite-population Monte Carlo engine for subgroup effect estimators.

Potential outcomes are drawn once per *draw*; each *replication* then
re-randomizes treatment, refits the subgroup regression and evaluates the
requested variance variants. Every random stream is keyed by
``(seed, stream, draw, rep)`` through a counter-based generator, so results do
not depend on execution order or on the number of worker processes.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data_model import ConfigError
from .inference import equal_effects_test
from .linear_fit import ModelSpec, Covariates, design_from_arrays, fit
from .variance import VARIANTS, compute_variant
from scipy import stats

MAX_REJECTIONS = 10 ** 6
POPULATION_STREAM = 0
ASSIGNMENT_STREAM = 1
CSV_COLUMNS = (
    "n", "pi1", "p", "V", "error_dist", "variant", "subgroup",
    "bias", "coverage", "true_se", "mean_est_se", "type1_t", "type1_f", "type1_chisq",
    "kept", "rejected",
)
DEFAULT_VARIANTS = ("db_actual_phi1", "db_expected_phi1", "hw")


class ErrorDist(str, enum.Enum):
    NORMAL = "normal"
    CHISQ_MATCHED = "chisq_matched"


@dataclass(frozen=True)
class SimConfig:
    n: int = 100
    pi1: float = 0.5
    p: float = 0.5
    V: int = 0
    n_draws: int = 5
    n_reps: int = 10_000
    error_dist: ErrorDist = ErrorDist.NORMAL
    variance_variants: tuple[str, ...] = DEFAULT_VARIANTS
    seed: int = 20240101
    alpha: float = 0.05
    min_cell: int = 2
    effect_heterogeneity: bool = True

    def __post_init__(self):
        object.__setattr__(self, "error_dist", ErrorDist(self.error_dist))
        object.__setattr__(self, "variance_variants", tuple(self.variance_variants))
        if self.V not in (0, 2):
            raise ConfigError("V must be 0 or 2")
        if not (0 < self.p < 1 and 0 < self.pi1 < 1):
            raise ConfigError("p and pi1 must lie in (0, 1)")
        for name, val in (("n*p", self.n * self.p), ("n*pi1", self.n * self.pi1)):
            if abs(val - round(val)) > 1e-9:
                raise ConfigError(f"{name} = {val} is not an integer")
        if self.n_draws < 1 or self.n_reps < 1:
            raise ConfigError("n_draws and n_reps must be positive")
        unknown = [v for v in self.variance_variants if v not in VARIANTS]
        if unknown:
            raise ConfigError(f"unknown variance variants {unknown}; choose from {sorted(VARIANTS)}")
        if not self.variance_variants:
            raise ConfigError("at least one variance variant is required")
        if "r2" in self.variance_variants and self.V == 0:
            raise ConfigError("r2_adjust requires covariates")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")

    @property
    def n1(self) -> int:
        return round(self.n * self.p)

    @property
    def n_sub1(self) -> int:
        return round(self.n * self.pi1)


@dataclass(frozen=True, eq=False)
class FinitePopulation:
    y0: np.ndarray
    y1: np.ndarray
    x: np.ndarray
    g: np.ndarray

    @property
    def tau(self) -> np.ndarray:
        d = self.y1 - self.y0
        return np.array([d[self.g == k].mean() for k in range(2)])


def rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=tuple(key))))


def _noise(rng: np.random.Generator, dist: ErrorDist, size) -> np.ndarray:
    if dist is ErrorDist.NORMAL:
        return rng.standard_normal(size)
    return (rng.chisquare(1, size) - 1.0) / math.sqrt(2.0)


def generate_population(config: SimConfig, draw: int) -> FinitePopulation:
    """Potential outcomes for one draw; the first ``n * pi1`` units form subgroup 1."""
    rng = rng_for(config.seed, POPULATION_STREAM, draw)
    n = config.n
    g = np.zeros(n, dtype=np.int64)
    g[config.n_sub1:] = 1
    x = _noise(rng, config.error_dist, (n, 2))
    e = _noise(rng, config.error_dist, n)
    theta = rng.standard_normal((n, 2)) * np.sqrt([0.5, 0.4])
    if not config.effect_heterogeneity:
        theta[:] = 0.0
    g1, g2 = (g == 0).astype(float), (g == 1).astype(float)
    y0 = (
        g1 + 2 * g2
        + g1 * (0.4 * x[:, 0] + 0.8 * x[:, 1])
        + g2 * (0.7 * x[:, 0] + 0.5 * x[:, 1])
        + e
    )
    y1 = y0 + g1 * theta[:, 0] + g2 * theta[:, 1]
    return FinitePopulation(y0, y1, x, g)


def draw_assignment(population: FinitePopulation, config: SimConfig, draw: int, rep: int) -> tuple[np.ndarray, int]:
    """Uniform size-``n p`` treatment set, redrawn until every subgroup-arm cell is large enough.

    Returns the treatment vector and the number of rejected draws.
    """
    rng = rng_for(config.seed, ASSIGNMENT_STREAM, draw, rep)
    n, n1 = config.n, config.n1
    g = population.g
    for rejected in range(MAX_REJECTIONS + 1):
        t = np.zeros(n, dtype=np.int64)
        t[rng.permutation(n)[:n1]] = 1
        treated_k = np.bincount(g, weights=t, minlength=2)
        size_k = np.bincount(g, minlength=2)
        if treated_k.min() >= config.min_cell and (size_k - treated_k).min() >= config.min_cell:
            return t, rejected
    raise ConfigError(f"more than {MAX_REJECTIONS} consecutive rejected randomizations (draw {draw}, rep {rep})")


def _run_chunk(args):
    config, draw, start, stop = args
    pop = generate_population(config, draw)
    tau = pop.tau
    spec = ModelSpec(covariates=Covariates.POOLED if config.V else Covariates.NONE)
    nv = len(config.variance_variants)
    reps = stop - start
    tau_hat = np.empty((reps, 2))
    se = np.empty((reps, nv, 2))
    df = np.empty((reps, nv, 2))
    rejected = np.empty(reps, dtype=np.int64)
    for i, rep in enumerate(range(start, stop)):
        t, rej = draw_assignment(pop, config, draw, rep)
        rejected[i] = rej
        y = np.where(t == 1, pop.y1, pop.y0)
        try:
            f = fit(design_from_arrays(y, t, pop.g, 2, config.p, pop.x, spec=spec))
            tau_hat[i] = f.cell_tau
            for j, name in enumerate(config.variance_variants):
                for k in range(2):
                    r = compute_variant(name, f, k)
                    se[i, j, k] = r.se
                    df[i, j, k] = r.df
        except (ValueError, ArithmeticError) as exc:
            raise RuntimeError(f"estimation failed in draw {draw}, replication {rep}: {exc}") from exc
    return draw, start, tau_hat, se, df, rejected, tau


@dataclass(frozen=True)
class VariantMetrics:
    variant: str
    subgroup: int
    bias: float
    coverage: float
    true_se: float
    mean_est_se: float
    type1_t: float
    type1_f: float
    type1_chisq: float


@dataclass
class SimulationReport:
    config: SimConfig
    metrics: list[VariantMetrics]
    kept: int
    rejected: int
    draw_tau: list[list[float]] = field(default_factory=list)

    def get(self, variant: str, subgroup: int = 0) -> VariantMetrics:
        for m in self.metrics:
            if m.variant == variant and m.subgroup == subgroup:
                return m
        raise KeyError((variant, subgroup))

    def rows(self) -> list[dict]:
        c = self.config
        base = {"n": c.n, "pi1": c.pi1, "p": c.p, "V": c.V, "error_dist": c.error_dist.value}
        out = []
        for m in self.metrics:
            row = dict(base, **asdict(m), kept=self.kept, rejected=self.rejected)
            row["subgroup"] = m.subgroup + 1
            out.append({k: row[k] for k in CSV_COLUMNS})
        return out

    def to_dict(self) -> dict:
        cfg = asdict(self.config)
        cfg["error_dist"] = self.config.error_dist.value
        cfg["variance_variants"] = list(self.config.variance_variants)
        return {
            "config": cfg,
            "kept": self.kept,
            "rejected": self.rejected,
            "draw_tau": self.draw_tau,
            "metrics": [dict(asdict(m), subgroup=m.subgroup + 1) for m in self.metrics],
        }


def _chunks(config: SimConfig, size: int):
    for d in range(config.n_draws):
        for s in range(0, config.n_reps, size):
            yield config, d, s, min(s + size, config.n_reps)


def resolve_threads(threads: int) -> int:
    return os.cpu_count() or 1 if threads == 0 else max(1, threads)


def run_simulation(config: SimConfig, threads: int = 1, chunk: int = 500, progress: bool = False) -> SimulationReport:
    """Run every draw and replication and summarize per variant and subgroup.

    Metrics are computed per draw and then averaged over draws. Per-replication
    results are placed by replication index before any reduction, so the
    report is identical for every ``threads`` setting.
    """
    nv = len(config.variance_variants)
    R, D = config.n_reps, config.n_draws
    tau_hat = np.empty((D, R, 2))
    se = np.empty((D, R, nv, 2))
    df = np.empty((D, R, nv, 2))
    rejected = np.empty((D, R), dtype=np.int64)
    tau = np.empty((D, 2))
    work = list(_chunks(config, chunk))
    workers = resolve_threads(threads)
    if workers == 1:
        results = map(_run_chunk, work)
        pool = None
    else:
        pool = ProcessPoolExecutor(max_workers=workers)
        results = pool.map(_run_chunk, work)
    try:
        for i, (d, s, th, sv, dv, rj, tv) in enumerate(results):
            e = s + th.shape[0]
            tau_hat[d, s:e], se[d, s:e], df[d, s:e], rejected[d, s:e] = th, sv, dv, rj
            tau[d] = tv
            if progress:
                print(f"\rsimulate n={config.n} pi1={config.pi1} V={config.V}: {i + 1}/{len(work)} chunks",
                      end="", file=sys.stderr)
    finally:
        if pool is not None:
            pool.shutdown()
    if progress:
        print(file=sys.stderr)
    return _summarize(config, tau_hat, se, df, rejected, tau)


def _summarize(config, tau_hat, se, df, rejected, tau) -> SimulationReport:
    alpha = config.alpha
    metrics = []
    D = tau.shape[0]
    for j, name in enumerate(config.variance_variants):
        # equal-effects test per replication, against each draw's realized contrast
        f_rej = np.empty(tau_hat.shape[:2], dtype=bool)
        c_rej = np.empty_like(f_rej)
        for d in range(D):
            for r in range(tau_hat.shape[1]):
                res = equal_effects_test(
                    np.column_stack([tau_hat[d, r], se[d, r, j], df[d, r, j]]), offsets=tau[d]
                )
                f_rej[d, r] = res.f.p_value <= alpha
                c_rej[d, r] = res.chisq.p_value <= alpha
        for k in range(2):
            err = tau_hat[:, :, k] - tau[:, k][:, None]
            s = se[:, :, j, k]
            q = stats.t.ppf(1 - alpha / 2, df[:, :, j, k])
            covered = np.abs(err) <= q * s
            metrics.append(
                VariantMetrics(
                    variant=name,
                    subgroup=k,
                    bias=float(err.mean(axis=1).mean()),
                    coverage=float(covered.mean(axis=1).mean()),
                    true_se=float(tau_hat[:, :, k].std(axis=1, ddof=1).mean()) if tau_hat.shape[1] > 1 else 0.0,
                    mean_est_se=float(s.mean(axis=1).mean()),
                    type1_t=float((~covered).mean(axis=1).mean()),
                    type1_f=float(f_rej.mean(axis=1).mean()),
                    type1_chisq=float(c_rej.mean(axis=1).mean()),
                )
            )
    return SimulationReport(
        config, metrics, kept=int(rejected.size), rejected=int(rejected.sum()),
        draw_tau=[[float(v) for v in row] for row in tau],
    )


def write_reports(reports: list[SimulationReport], out_dir: str, meta: dict | None = None) -> tuple[str, str]:
    """Write ``simulation.csv`` (one row per spec, variant and subgroup) and ``simulation.json``."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "simulation.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for rep in reports:
            for row in rep.rows():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    json_path = os.path.join(out_dir, "simulation.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump({**(meta or {}), "specs": [r.to_dict() for r in reports]}, fh, indent=2)
        fh.write("\n")
    return csv_path, json_path
