import json

import numpy as np
import pandas as pd
import pytest

from hglik import FitOptions, build_model, datasets, eval_h, fit, laplace_marginal, restricted_lik
from hglik.errors import ConfigError
from hglik.oracle import anova_oneway, quad_marginal, quad_ml
from hglik.uncert import var_decomp


@pytest.fixture(scope="module")
def oneway_fit(oneway_model):
    return fit(oneway_model)


def test_anova_identities(oneway_df, oneway_fit):
    mu, msw, lam = anova_oneway(oneway_df.y, oneway_df.group)
    d = oneway_fit.state.dispersion
    assert oneway_fit.converged
    assert d["phi"] == pytest.approx(msw, rel=1e-6)
    assert d["lambda"] == pytest.approx(max(0.0, lam), rel=1e-6)
    assert oneway_fit.state.beta[0] == pytest.approx(mu, abs=1e-8)


@pytest.mark.parametrize("seed", [11, 12, 13])
def test_anova_identities_other_seeds(seed):
    df = datasets.oneway_normal(g=5, n=3, lam=1.0, seed=seed)
    r = fit(build_model(df, {"response": "y", "group": "group"}))
    _, msw, lam = anova_oneway(df.y, df.group)
    if lam > 0:
        assert r.state.dispersion["lambda"] == pytest.approx(lam, rel=1e-6)
        assert r.state.dispersion["phi"] == pytest.approx(msw, rel=1e-6)
    else:
        assert "lambda" in r.boundary


def test_stationarity_at_return(clusters_model):
    r = fit(clusters_model)
    assert r.converged
    assert r.diagnostics["marginal_grad_norm"] < 1e-6
    assert r.diagnostics["restricted_grad_norm"] < 1e-6


def test_poisson_normal_against_quadrature_ml():
    df = datasets.poisson_clusters(g=10, n=4, beta=0.5, lam=0.3, seed=21)
    m = build_model(df, {"response": "y", "group": "group", "family": "poisson"})
    r = fit(m)
    assert r.converged
    lam = r.state.dispersion["lambda"]
    b_q, _, _ = quad_ml(m, r.state.beta, {"lambda": lam}, order=32, free=[])
    assert abs(r.state.beta[0] - b_q[0]) < 0.02
    assert abs(r.state.beta[0] - b_q[0]) < 3 * r.se_beta[0]


def test_zero_between_group_variation_hits_boundary():
    df = pd.DataFrame({"y": np.tile([1.0, 2.0, 3.0], 4), "g": np.repeat([1, 2, 3, 4], 3)})
    r = fit(build_model(df, {"response": "y", "group": "g"}))
    assert "lambda" in r.boundary
    assert r.state.dispersion["lambda"] <= 1e-8
    assert "lambda" not in r.se_dispersion


def test_refit_is_idempotent(clusters_model):
    r = fit(clusters_model)
    again = fit(clusters_model, init=r.state)
    assert again.converged and again.iterations <= 2
    np.testing.assert_allclose(again.state.beta, r.state.beta, atol=1e-7)


def test_scale_equivariance(oneway_df, oneway_fit):
    c = 3.0
    r = fit(build_model(oneway_df.assign(y=c * oneway_df.y), {"response": "y", "group": "group"}))
    np.testing.assert_allclose(r.state.beta, c * oneway_fit.state.beta, rtol=1e-6)
    np.testing.assert_allclose(r.state.v, c * oneway_fit.state.v, rtol=1e-6)
    for k in ("phi", "lambda"):
        assert r.state.dispersion[k] == pytest.approx(c ** 2 * oneway_fit.state.dispersion[k], rel=1e-6)
    np.testing.assert_allclose(r.se_beta, c * oneway_fit.se_beta, rtol=1e-6)


def test_criteria_are_reproducible(clusters_model):
    r = fit(clusters_model)
    st = r.state
    assert eval_h(clusters_model, st) == pytest.approx(r.h_value, abs=1e-10)
    assert laplace_marginal(clusters_model, st.beta, st.dispersion).value == pytest.approx(r.marginal_aphl, abs=1e-10)
    assert restricted_lik(clusters_model, st.dispersion).value == pytest.approx(r.restricted_aphl, abs=1e-10)


def test_trace_records_each_cycle(clusters_model):
    r = fit(clusters_model)
    assert len(r.trace) == r.iterations
    for t in r.trace:
        assert t["marginal_aphl"] >= t["marginal_before_beta_step"] - 1e-12 * max(1, abs(t["marginal_aphl"]))


def test_non_convergence_is_reported(clusters_model):
    r = fit(clusters_model, FitOptions(max_outer=1))
    assert not r.converged and len(r.trace) == 1


def test_fixed_dispersion_is_respected(clusters_model):
    r = fit(clusters_model, FitOptions(fixed={"lambda": 0.5}))
    assert r.state.dispersion["lambda"] == 0.5
    with pytest.raises(ConfigError):
        fit(clusters_model, FitOptions(fixed={"nope": 1.0}))


def test_too_few_observations():
    df = pd.DataFrame({"y": [1.0, 2.0], "g": [1, 2]})
    with pytest.raises(ConfigError):
        fit(build_model(df, {"response": "y", "group": "g"}))


@pytest.mark.parametrize("kind", ["normal", "poisson", "binomial"])
def test_schur_inequality_on_fits(kind):
    from conftest import family_model
    m = family_model(kind, seed=3, g=6, n=6)
    r = fit(m)
    d = var_decomp(m, r)
    assert np.all(d.hlik_var >= d.eb_var - 1e-12)


def test_json_document(oneway_model, oneway_fit):
    doc = json.loads(oneway_fit.to_json(oneway_model, var_decomp(oneway_model, oneway_fit)))
    assert set(doc) >= {"estimates", "se", "criteria", "convergence", "options"}
    assert set(doc["estimates"]["dispersion"]) == {"phi", "lambda"}
    assert len(doc["random_effects"]["se_hlik"]) == 6
