"""Simulated fixtures with fixed seeds.

None of these are real data. ``epil_like`` mimics the layout of a
longitudinal seizure-count trial (patients, four visits, treatment and
baseline covariates) but every value is drawn from the generator below.
"""

import numpy as np
import pandas as pd


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


def oneway_normal(g=6, n=4, mu=10.0, lam=2.0, phi=1.0, seed=1) -> pd.DataFrame:
    rng = _rng(seed)
    group = np.repeat(np.arange(1, g + 1), n)
    v = rng.normal(0.0, np.sqrt(lam), g)
    y = mu + v[group - 1] + rng.normal(0.0, np.sqrt(phi), g * n)
    return pd.DataFrame({"group": group, "y": y})


def poisson_clusters(g=5, n=3, beta=0.5, lam=0.5, seed=3) -> pd.DataFrame:
    rng = _rng(seed)
    group = np.repeat(np.arange(1, g + 1), n)
    v = rng.normal(0.0, np.sqrt(lam), g)
    y = rng.poisson(np.exp(beta + v[group - 1]))
    return pd.DataFrame({"group": group, "y": y})


def epil_like(n_patients=59, seed=7) -> pd.DataFrame:
    """Simulated seizure-style counts: 4 visits per patient, patient and
    observation-level normal random effects on the log scale."""
    rng = _rng(seed)
    pid = np.repeat(np.arange(1, n_patients + 1), 4)
    visit = np.tile(np.arange(1, 5), n_patients)
    trt = (np.arange(n_patients) >= n_patients // 2).astype(float)
    lbase = np.log(rng.gamma(4.0, 8.0, n_patients) / 4.0)
    lage = np.log(rng.uniform(18, 42, n_patients))
    lbase_c, lage_c = lbase - lbase.mean(), lage - lage.mean()
    v4 = (visit == 4).astype(float)
    beta = {"intercept": 1.6, "lbase": 0.9, "trt": -0.9, "lbase_trt": 0.35, "lage": 0.5, "v4": -0.1}
    u = rng.normal(0.0, 0.5, n_patients)
    e = rng.normal(0.0, 0.35, pid.size)
    i = pid - 1
    eta = (beta["intercept"] + beta["lbase"] * lbase_c[i] + beta["trt"] * trt[i]
           + beta["lbase_trt"] * lbase_c[i] * trt[i] + beta["lage"] * lage_c[i]
           + beta["v4"] * v4 + u[i] + e)
    return pd.DataFrame({
        "y": rng.poisson(np.exp(eta)), "id": pid, "obs": np.arange(1, pid.size + 1),
        "visit": visit, "lbase": lbase_c[i], "trt": trt[i], "lbase_trt": lbase_c[i] * trt[i],
        "lage": lage_c[i], "v4": v4,
    })


EPIL_CONFIG = {
    "response": "y",
    "covariates": ["lbase", "trt", "lbase_trt", "lage", "v4"],
    "family": "poisson",
    "random": {"structure": "iid", "groups": ["id", "obs"]},
}
