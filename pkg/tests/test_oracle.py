import numpy as np
import pandas as pd
import pytest
from scipy import integrate, optimize

from hglik import build_model, glm_fit, plugin_predictive, profile_predictive, tv_distance, v_mode
from hglik.errors import DomainError
from hglik.oracle import (UnsupportedStructure, bayarri_closed_forms, gauss_hermite, gaussian_conditional,
                          gaussian_marginal, jeffreys_predictive, quad_marginal, quad_posterior_moments)
from hglik.structures import neighborhood_from_adjacency
from hglik.uncert import car_poisson_model

Y = [3, 2, 5, 0, 4]


def test_rule_is_exact_for_polynomials():
    from math import gamma
    r = gauss_hermite(8)
    assert np.all(r.weights > 0)
    for deg in range(0, 16, 2):
        exact = gamma((deg + 1) / 2)
        assert r.weights @ r.nodes ** deg == pytest.approx(exact, abs=1e-12 * max(1, exact))
    with pytest.raises(ValueError):
        gauss_hermite(0)


@pytest.mark.parametrize("order", [1, 3, 32])
def test_gaussian_exactness(oneway_model, order):
    m = oneway_model
    beta, phi, lam = np.array([9.7]), 0.8, 1.6
    q = quad_marginal(m, beta, {"phi": phi, "lambda": lam}, order=order)
    ref = gaussian_marginal(m.y, m.designs.X, m.designs.Z, beta, phi, lam * np.eye(m.k))
    assert q == pytest.approx(ref, abs=1e-10)


def test_gaussian_posterior_moments(oneway_model):
    m = oneway_model
    beta, phi, lam = np.array([10.2]), 1.1, 0.7
    mean, cov = gaussian_conditional(m.y, m.designs.X, m.designs.Z, beta, phi, lam * np.eye(m.k))
    for c in range(m.k):
        mu, var = quad_posterior_moments(m, beta, {"phi": phi, "lambda": lam}, c, order=5)
        assert mu == pytest.approx(mean[c], abs=1e-10)
        assert var == pytest.approx(cov[c, c], abs=1e-10)


def test_vanishing_variance_is_glm(clusters_model):
    from scipy.stats import poisson
    beta = glm_fit(clusters_model)
    q = quad_marginal(clusters_model, beta, {"lambda": 1e-10})
    assert q == pytest.approx(poisson.logpmf(clusters_model.y, np.exp(clusters_model.designs.X @ beta)).sum(),
                              abs=1e-6)


@pytest.mark.parametrize("b,lam", [(0.5, 0.5), (1.1, 0.2), (0.0, 2.0)])
def test_self_convergence(clusters_model, b, lam):
    a = quad_marginal(clusters_model, np.array([b]), {"lambda": lam}, order=32)
    c = quad_marginal(clusters_model, np.array([b]), {"lambda": lam}, order=64)
    assert abs(a - c) < 1e-8


def test_matches_scipy_quad_on_one_cluster():
    df = pd.DataFrame({"y": [2.0, 0.0, 5.0], "g": [1, 1, 1]})
    m = build_model(df, {"response": "y", "group": "g", "family": "poisson"})
    from scipy.stats import norm, poisson
    beta, lam = 0.4, 0.8
    f = lambda v: np.exp(poisson.logpmf(df.y, np.exp(beta + v)).sum() + norm.logpdf(v, 0, np.sqrt(lam)))
    ref = np.log(integrate.quad(f, -12, 12, epsabs=1e-14, epsrel=1e-13)[0])
    assert quad_marginal(m, np.array([beta]), {"lambda": lam}, order=40) == pytest.approx(ref, abs=1e-10)


def test_mode_within_posterior_sds():
    df = pd.DataFrame({"y": [4.0, 6.0, 3.0], "g": [1, 1, 1]})
    m = build_model(df, {"response": "y", "group": "g", "family": "poisson"})
    beta, disp = np.array([0.8]), {"lambda": 0.6}
    mean, var = quad_posterior_moments(m, beta, disp, 0)
    assert abs(v_mode(m, beta, disp)[0] - mean) < 3 * np.sqrt(var)


def test_correlated_effects_are_unsupported():
    nb = neighborhood_from_adjacency([(1, 2), (2, 3)], 3)
    m = car_poisson_model(nb, [100.0, 200.0, 300.0], np.array([3.0, 5.0, 9.0]))
    with pytest.raises(UnsupportedStructure):
        quad_marginal(m, np.array([-4.0]), {"sigma2": 1.0, "car_lambda": 0.5})


@pytest.mark.parametrize("y", [1.0, 2.0])
def test_bayarri_record(y):
    r = bayarri_closed_forms(y, y)
    assert r.theta_hat == y and r.var_theta_hat == 2 * y ** 2
    assert r.u_hat_at_mle == pytest.approx(1 / y) and r.cmse == pytest.approx(1 / y ** 2)
    assert r.eb_var == pytest.approx(1 / (2 * y ** 2))
    assert np.linalg.det(r.hessian) == pytest.approx(1.0, abs=1e-12)
    dm = lambda t: (bayarri_closed_forms(y, t + 1e-5).m - bayarri_closed_forms(y, t - 1e-5).m) / 2e-5
    assert optimize.brentq(dm, 0.1 * y, 10 * y, xtol=1e-14) == pytest.approx(y, abs=1e-8)


def test_bayarri_posterior_by_integration():
    y, theta = 1.5, 0.7
    r = bayarri_closed_forms(y, theta)
    # f(u | y) is proportional to u exp(-u (theta + y))
    dens = lambda u: u * np.exp(-u * (theta + y))
    z = integrate.quad(dens, 0, np.inf)[0]
    m1 = integrate.quad(lambda u: u * dens(u), 0, np.inf)[0] / z
    m2 = integrate.quad(lambda u: u * u * dens(u), 0, np.inf)[0] / z
    assert m1 == pytest.approx(r.post_mean, rel=1e-10)
    assert m2 - m1 ** 2 == pytest.approx(r.post_var, rel=1e-8)


def test_bayarri_rejects_nonpositive():
    with pytest.raises(DomainError):
        bayarri_closed_forms(0.0, 1.0)


def test_jeffreys_properties():
    j, p = jeffreys_predictive(Y), plugin_predictive(Y)
    assert j.mass.sum() == pytest.approx(1.0, abs=1e-12)
    assert j.tail(8) > p.tail(8)
    assert tv_distance(profile_predictive(Y), j) < 0.05
    y = np.full(10_000, 3)
    assert tv_distance(jeffreys_predictive(y), plugin_predictive(y)) < 0.01
