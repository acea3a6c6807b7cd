from __future__ import annotations

import csv

import numpy as np
import pytest

from dbsubgroup.data_model import Dataset, DesignSpec, Structure


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running Monte Carlo reproductions")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_simple(rng, n=60, K=2, V=1, p=0.5):
    """Completely randomized trial with K subgroups and V covariates."""
    g = np.repeat(np.arange(K), n // K)
    t = np.zeros(n, dtype=int)
    for k in range(K):
        idx = np.flatnonzero(g == k)
        t[rng.choice(idx, int(round(len(idx) * p)), replace=False)] = 1
    x = rng.normal(size=(n, V))
    y = 1.0 + g + 0.7 * t + (x @ np.linspace(0.5, 1.0, V) if V else 0) + rng.normal(size=n)
    return Dataset.from_arrays(y, t, [f"s{k}" for k in g], x=x if V else None,
                               design=DesignSpec(p={None: p}))


@pytest.fixture
def simple_dataset(rng):
    return make_simple(rng)


def write_voucher_csv(path, seed: int = 7):
    """Synthetic data shaped like a family-randomized voucher study.

    Families (clusters) are randomized within lottery blocks; children carry
    an ethnicity subgroup shared within family, a baseline score, a follow-up
    response flag and a nonresponse weight.
    """
    rng = np.random.default_rng(seed)
    rows = []
    fam = 0
    for b in range(4):
        n_fam = 20
        treated = rng.permutation(n_fam) < n_fam // 2
        for f in range(n_fam):
            fam += 1
            size = int(rng.integers(1, 4))
            sg = "AA" if rng.random() < 0.5 else "LA"
            for c in range(size):
                base = rng.normal(50, 10)
                resp = int(rng.random() < 0.8)
                y = base * 0.6 + 20 + 3 * treated[f] * (sg == "AA") + rng.normal(0, 8)
                rows.append({
                    "child": f"c{fam}_{c}", "score": f"{y:.4f}" if resp else "",
                    "voucher": int(treated[f]), "ethnicity": sg, "lottery": f"L{b}",
                    "family": f"F{fam}", "baseline": f"{base:.4f}", "followed": resp,
                    "weight": f"{rng.uniform(0.8, 1.6):.4f}" if resp else "",
                })
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path


VOUCHER_CONFIG = """
[data]
y = "score"
t = "voucher"
subgroup = "ethnicity"
id = "child"
block = "lottery"
cluster = "family"
responded = "followed"
weight = "weight"
covariates = ["baseline"]

[design]
structure = "blocked_clustered"
p = 0.5

[model]
aggregate_clusters = true
"""


@pytest.fixture
def voucher_files(tmp_path):
    data = write_voucher_csv(tmp_path / "voucher.csv")
    cfg = tmp_path / "voucher.toml"
    cfg.write_text(VOUCHER_CONFIG)
    return data, cfg
