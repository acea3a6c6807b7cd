"""Trial datasets, design specifications, validation and CSV ingestion."""

from __future__ import annotations

import csv
import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed input files or inconsistent datasets."""


class ParseError(DataError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.row = row
        self.column = column


class ConfigError(DataError):
    pass


class Mechanism(str, enum.Enum):
    COMPLETE = "complete"
    BERNOULLI = "bernoulli"


class Structure(str, enum.Enum):
    SIMPLE = "simple"
    BLOCKED = "blocked"
    CLUSTERED = "clustered"
    BLOCKED_CLUSTERED = "blocked_clustered"

    @property
    def blocked(self) -> bool:
        return self in (Structure.BLOCKED, Structure.BLOCKED_CLUSTERED)

    @property
    def clustered(self) -> bool:
        return self in (Structure.CLUSTERED, Structure.BLOCKED_CLUSTERED)


class ClusterWeighting(str, enum.Enum):
    SUBGROUP_SIZE = "subgroup_size"
    EQUAL_CLUSTER = "equal_cluster"


@dataclass(frozen=True)
class UnitRecord:
    id: str
    y: float
    t: int
    subgroup: str
    block: str | None = None
    cluster: str | None = None
    x: tuple[float, ...] = ()
    responded: int | None = None
    w_r: float | None = None


@dataclass(frozen=True)
class DesignSpec:
    """Randomization mechanism and design structure.

    ``p`` maps block label to assignment rate. Unblocked designs use a single
    entry; the key is irrelevant (``None`` by convention).
    """

    mechanism: Mechanism = Mechanism.COMPLETE
    structure: Structure = Structure.SIMPLE
    p: Mapping[str | None, float] = field(default_factory=lambda: {None: 0.5})
    cluster_weighting: ClusterWeighting = ClusterWeighting.SUBGROUP_SIZE

    def rate(self, block: str | None = None) -> float:
        if len(self.p) == 1:
            return float(next(iter(self.p.values())))
        try:
            return float(self.p[block])
        except KeyError:
            raise DataError(f"no assignment rate declared for block {block!r}") from None


@dataclass(frozen=True)
class Dataset:
    records: tuple[UnitRecord, ...]
    subgroup_levels: tuple[str, ...]
    design: DesignSpec = field(default_factory=DesignSpec)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "subgroup_levels", tuple(self.subgroup_levels))

    @classmethod
    def from_arrays(
        cls,
        y,
        t,
        subgroup,
        *,
        x=None,
        block=None,
        cluster=None,
        responded=None,
        w_r=None,
        design: DesignSpec | None = None,
        subgroup_levels: Sequence[str] | None = None,
    ) -> "Dataset":
        """Convenience constructor from parallel columns."""
        n = len(y)
        labels = [str(s) for s in subgroup]
        xs = np.zeros((n, 0)) if x is None else np.asarray(x, dtype=float).reshape(n, -1)
        recs = []
        for i in range(n):
            recs.append(
                UnitRecord(
                    id=str(i),
                    y=float(y[i]),
                    t=int(t[i]),
                    subgroup=labels[i],
                    block=None if block is None else str(block[i]),
                    cluster=None if cluster is None else str(cluster[i]),
                    x=tuple(float(v) for v in xs[i]),
                    responded=None if responded is None else int(responded[i]),
                    w_r=None if w_r is None else float(w_r[i]),
                )
            )
        levels = tuple(subgroup_levels) if subgroup_levels is not None else _first_appearance(labels)
        return cls(tuple(recs), levels, design or DesignSpec())

    # -- array views -----------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def K(self) -> int:
        return len(self.subgroup_levels)

    @cached_property
    def V(self) -> int:
        return len(self.records[0].x) if self.records else 0

    @cached_property
    def y(self) -> np.ndarray:
        return np.array([r.y for r in self.records], dtype=float)

    @cached_property
    def t(self) -> np.ndarray:
        return np.array([r.t for r in self.records], dtype=np.int64)

    @cached_property
    def x(self) -> np.ndarray:
        return np.array([r.x for r in self.records], dtype=float).reshape(self.n, self.V)

    @cached_property
    def g(self) -> np.ndarray:
        """Dense subgroup index per unit (order of ``subgroup_levels``)."""
        lookup = {lab: k for k, lab in enumerate(self.subgroup_levels)}
        return np.array([lookup[r.subgroup] for r in self.records], dtype=np.int64)

    @cached_property
    def block_levels(self) -> tuple[str, ...]:
        return _first_appearance([r.block for r in self.records if r.block is not None])

    @cached_property
    def b(self) -> np.ndarray:
        if not self.block_levels:
            return np.zeros(self.n, dtype=np.int64)
        lookup = {lab: j for j, lab in enumerate(self.block_levels)}
        return np.array([lookup[r.block] for r in self.records], dtype=np.int64)

    @cached_property
    def cluster_levels(self) -> tuple[str, ...]:
        return _first_appearance([r.cluster for r in self.records if r.cluster is not None])

    @cached_property
    def c(self) -> np.ndarray:
        if not self.cluster_levels:
            return np.arange(self.n, dtype=np.int64)
        lookup = {lab: j for j, lab in enumerate(self.cluster_levels)}
        return np.array([lookup[r.cluster] for r in self.records], dtype=np.int64)

    @cached_property
    def has_response(self) -> bool:
        return any(r.responded is not None for r in self.records)

    @cached_property
    def responded(self) -> np.ndarray:
        return np.array([1 if r.responded is None else r.responded for r in self.records], dtype=np.int64)

    @cached_property
    def w_r(self) -> np.ndarray:
        return np.array(
            [1.0 if (r.w_r is None or not r.responded) else r.w_r for r in self.records], dtype=float
        )

    @cached_property
    def p_unit(self) -> np.ndarray:
        """Design assignment rate for each unit's block."""
        if self.design.structure.blocked:
            rates = np.array([self.design.rate(lab) for lab in self.block_levels])
            return rates[self.b]
        return np.full(self.n, self.design.rate())

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask, dtype=bool)
        return Dataset(tuple(r for r, keep in zip(self.records, mask) if keep), self.subgroup_levels, self.design)

    def replace_outcomes(self, y) -> "Dataset":
        from dataclasses import replace

        recs = tuple(replace(r, y=float(v)) for r, v in zip(self.records, y))
        return Dataset(recs, self.subgroup_levels, self.design)


def _first_appearance(labels) -> tuple:
    seen: dict = {}
    for lab in labels:
        if lab not in seen:
            seen[lab] = None
    return tuple(seen)


# -- validation ---------------------------------------------------------


def validate(dataset: Dataset) -> list[str]:
    """Return every violated invariant; an empty list means the data are usable."""
    out: list[str] = []
    design = dataset.design
    structure = design.structure
    recs = dataset.records
    if not recs:
        return ["dataset has no records"]

    for lab, rate in design.p.items():
        if not (0.0 < rate < 1.0):
            out.append(f"assignment rate for block {lab!r} must lie in (0, 1), got {rate}")

    dims = {len(r.x) for r in recs}
    if len(dims) > 1:
        out.append(f"records carry differing covariate dimensions {sorted(dims)}")

    levels = set(dataset.subgroup_levels)
    for r in recs:
        if r.t not in (0, 1):
            out.append(f"unit {r.id}: treatment indicator must be 0 or 1, got {r.t}")
        if r.subgroup not in levels:
            out.append(f"unit {r.id}: subgroup {r.subgroup!r} not among declared levels")
        if structure.blocked and r.block is None:
            out.append(f"unit {r.id}: block label required by {structure.value} design")
        if not structure.blocked and r.block is not None:
            out.append(f"unit {r.id}: block label given for unblocked design")
        if structure.clustered and r.cluster is None:
            out.append(f"unit {r.id}: cluster label required by {structure.value} design")
        if not structure.clustered and r.cluster is not None:
            out.append(f"unit {r.id}: cluster label given for non-clustered design")
        if r.responded not in (None, 0, 1):
            out.append(f"unit {r.id}: response flag must be 0 or 1")
        if r.responded == 1 and not (r.w_r is not None and r.w_r > 0):
            out.append(f"unit {r.id}: respondent needs a positive nonresponse weight")
        if any(not math.isfinite(v) for v in r.x):
            out.append(f"unit {r.id}: covariates must be finite")
        if r.responded != 0 and not math.isfinite(r.y):
            out.append(f"unit {r.id}: outcome must be finite")
    if out:
        return out

    counts = Counter(r.subgroup for r in recs)
    for lab in dataset.subgroup_levels:
        if counts[lab] == 0:
            out.append(f"subgroup {lab!r}: no units (n_k = 0)")

    if structure.clustered:
        arms: dict = {}
        for r in recs:
            arms.setdefault(r.cluster, set()).add(r.t)
        for lab, ts in arms.items():
            if len(ts) > 1:
                out.append(f"cluster {lab!r}: members carry different treatment indicators")

    if design.mechanism is Mechanism.COMPLETE:
        units = _randomization_units(dataset)
        for lab, size in units.items():
            rate = design.rate(lab)
            arm = size * rate
            if abs(arm - round(arm)) > 1e-9:
                what = "clusters" if structure.clustered else "units"
                out.append(
                    f"non-integral arm size: block {lab!r} has {size} {what} and p = {rate:g}"
                )

    cell = Counter(
        (r.subgroup, r.t) for r in recs if r.responded in (None, 1)
    )
    for lab in dataset.subgroup_levels:
        for arm, name in ((1, "treatment"), (0, "control")):
            c = cell[(lab, arm)]
            if c == 0:
                out.append(f"subgroup {lab!r}: empty {name} cell (n_k^{arm} = 0)")
            elif c == 1:
                out.append(f"subgroup {lab!r}: single-unit {name} cell blocks variance estimation")
    return out


def _randomization_units(dataset: Dataset) -> dict:
    """Number of randomized units (persons or clusters) per block."""
    blocked = dataset.design.structure.blocked
    if dataset.design.structure.clustered:
        seen = {}
        for r in dataset.records:
            seen[r.cluster] = r.block if blocked else None
        return Counter(seen.values())
    return Counter(r.block if blocked else None for r in dataset.records)


# -- CSV ----------------------------------------------------------------


@dataclass(frozen=True)
class ColumnSchema:
    """Binds CSV columns to unit fields."""

    y: str
    t: str
    subgroup: str
    id: str | None = None
    block: str | None = None
    cluster: str | None = None
    responded: str | None = None
    weight: str | None = None
    covariates: tuple[str, ...] = ()


def read_csv(path, schema: ColumnSchema, design: DesignSpec | None = None) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("file is empty") from None
        index = {h: j for j, h in enumerate(header)}

        def col(name: str | None) -> int | None:
            if name is None:
                return None
            if name not in index:
                raise ConfigError(f"column {name!r} not found in {Path(path).name} header {header}")
            return index[name]

        iy, it, ig = col(schema.y), col(schema.t), col(schema.subgroup)
        iid, ib, ic = col(schema.id), col(schema.block), col(schema.cluster)
        ir, iw = col(schema.responded), col(schema.weight)
        ix = [col(c) for c in schema.covariates]

        records = []
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", rownum)
            cell = lambda j: row[j].strip()  # noqa: E731
            responded = None if ir is None else _binary(cell(ir), rownum, schema.responded)
            if responded == 0 and cell(iy) == "":
                y = math.nan
            else:
                y = _real(cell(iy), rownum, schema.y)
            w = None
            if iw is not None and cell(iw) != "":
                w = _real(cell(iw), rownum, schema.weight)
            records.append(
                UnitRecord(
                    id=cell(iid) if iid is not None else str(rownum - 1),
                    y=y,
                    t=_binary(cell(it), rownum, schema.t),
                    subgroup=cell(ig),
                    block=None if ib is None else cell(ib),
                    cluster=None if ic is None else cell(ic),
                    x=tuple(_real(cell(j), rownum, name) for j, name in zip(ix, schema.covariates)),
                    responded=responded,
                    w_r=w,
                )
            )
    levels = _first_appearance([r.subgroup for r in records])
    return Dataset(tuple(records), levels, design or DesignSpec())


def write_csv(dataset: Dataset, path, covariate_names: Sequence[str] | None = None) -> ColumnSchema:
    """Write ``dataset`` and return the schema that reads it back."""
    recs = dataset.records
    names = tuple(covariate_names or (f"x{v + 1}" for v in range(dataset.V)))
    has_block = any(r.block is not None for r in recs)
    has_cluster = any(r.cluster is not None for r in recs)
    has_resp = any(r.responded is not None for r in recs)
    has_w = any(r.w_r is not None for r in recs)
    header = ["id", "y", "t", "subgroup"]
    header += ["block"] * has_block + ["cluster"] * has_cluster
    header += ["responded"] * has_resp + ["weight"] * has_w + list(names)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in recs:
            row = [r.id, "" if math.isnan(r.y) else repr(r.y), r.t, r.subgroup]
            if has_block:
                row.append(r.block)
            if has_cluster:
                row.append(r.cluster)
            if has_resp:
                row.append("" if r.responded is None else r.responded)
            if has_w:
                row.append("" if r.w_r is None else repr(r.w_r))
            row += [repr(v) for v in r.x]
            w.writerow(row)
    return ColumnSchema(
        y="y",
        t="t",
        subgroup="subgroup",
        id="id",
        block="block" if has_block else None,
        cluster="cluster" if has_cluster else None,
        responded="responded" if has_resp else None,
        weight="weight" if has_w else None,
        covariates=names,
    )


def _real(text: str, row: int, column: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"not a number: {text!r}", row, column) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {text!r}", row, column)
    return v


def _binary(text: str, row: int, column: str) -> int:
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"expected 0 or 1, got {text!r}", row, column) from None
    if v not in (0.0, 1.0):
        raise ParseError(f"expected 0 or 1, got {text!r}", row, column)
    return int(v)
