import numpy as np
import pandas as pd
import pytest

from hglik import build_model, datasets
from hglik.hlik import ParamState

ACCEPTANCE_LINES = {}


def record_acceptance(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def oneway_df():
    return datasets.oneway_normal()


@pytest.fixture(scope="session")
def oneway_model(oneway_df):
    return build_model(oneway_df, {"response": "y", "group": "group"})


@pytest.fixture(scope="session")
def clusters_df():
    return datasets.poisson_clusters()


@pytest.fixture(scope="session")
def clusters_model(clusters_df):
    return build_model(clusters_df, {"response": "y", "group": "group", "family": "poisson"})


def family_model(kind, seed=0, g=4, n=5):
    """Small random-intercept model with one covariate for the given family."""
    rng = np.random.default_rng(seed)
    group = np.repeat(np.arange(g), n)
    x = rng.normal(size=g * n)
    v = rng.normal(scale=0.7, size=g)[group]
    eta = 0.3 + 0.5 * x + v
    cfg = {"response": "y", "covariates": ["x"], "group": "group", "family": kind}
    if kind == "normal":
        y = eta + rng.normal(scale=0.5, size=eta.size)
    elif kind == "poisson":
        y = rng.poisson(np.exp(eta)).astype(float)
    else:
        trials = rng.integers(1, 6, size=eta.size)
        y = rng.binomial(trials, 1 / (1 + np.exp(-eta))).astype(float)
        cfg["trials"] = "m"
    df = pd.DataFrame({"y": y, "x": x, "group": group})
    if kind == "binomial":
        df["m"] = trials
    return build_model(df, cfg)


def random_state(model, rng):
    disp = {}
    for name in model.dispersion_names:
        disp[name] = float(rng.uniform(0.3, 2.0))
    return ParamState(rng.normal(scale=0.5, size=model.p), rng.normal(scale=0.8, size=model.k), disp)
