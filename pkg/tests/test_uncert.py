import json

import numpy as np
import pandas as pd
import pytest

from hglik import BlockFactor, CoverageConfig, build_model, coverage_sim, fit, v_mode, var_decomp, wald_intervals
from hglik.hlik import ParamState
from hglik.oracle import BayarriModel, bayarri_closed_forms, blup_pev
from hglik.uncert import VarDecomp, delta_method


def _u_scale_blocks(y):
    m = BayarriModel(y)
    r = fit(m)
    H = m.hess_u(r.state)
    return r, BlockFactor(H[:1, :1], H[:1, 1:], H[1:, 1:])


@pytest.mark.parametrize("y", [1.0, 2.0, 0.3])
def test_bayarri_golden_identities(y):
    rec = bayarri_closed_forms(y, y)
    r, fac = _u_scale_blocks(y)
    assert r.state.beta[0] == pytest.approx(rec.theta_hat, abs=1e-8)
    assert np.linalg.inv(fac.schur)[0, 0] == pytest.approx(rec.var_theta_hat, rel=1e-10)
    assert fac.full_inverse_vv()[0, 0] == pytest.approx(rec.cmse, rel=1e-10)
    assert fac.vv_inverse()[0, 0] == pytest.approx(rec.eb_var, rel=1e-10)
    H = BayarriModel(y).hess_u(r.state)
    assert np.linalg.det(H) == pytest.approx(1.0, abs=1e-10)


def test_bayarri_at_y1_matches_printed_values():
    r, fac = _u_scale_blocks(1.0)
    assert fac.vv_inverse()[0, 0] == pytest.approx(0.5, abs=1e-8)
    assert fac.full_inverse_vv()[0, 0] == pytest.approx(1.0, abs=1e-8)


def test_bayarri_v_scale_decomp_by_delta_method():
    y = 2.0
    m = BayarriModel(y)
    r = fit(m)
    d = var_decomp(m, r)
    u = np.exp(r.state.v)
    # on the v scale the Jacobian term changes the curvature, so the u-scale EB value is not a plain delta map
    assert d.hlik_var[0] >= d.eb_var[0]
    np.testing.assert_allclose(delta_method(d.eb_var, u), u ** 2 * d.eb_var)


def test_no_fixed_effects_gives_equal_variances():
    H_vv = np.array([[2.0, 0.3], [0.3, 1.5]])
    fac = BlockFactor(np.zeros((0, 0)), np.zeros((0, 2)), H_vv)
    np.testing.assert_allclose(fac.full_inverse_vv(), fac.vv_inverse(), atol=0)
    np.testing.assert_allclose(fac.vv_inverse(), np.linalg.inv(H_vv), atol=1e-14)


def test_oneway_hlik_var_is_blup_pev(oneway_model):
    r = fit(oneway_model)
    d = var_decomp(oneway_model, r)
    disp = r.state.dispersion
    np.testing.assert_allclose(d.hlik_var, blup_pev(4, 6, disp["phi"], disp["lambda"]), rtol=1e-8)
    np.testing.assert_allclose(d.eb_var, disp["phi"] * disp["lambda"] / (4 * disp["lambda"] + disp["phi"]),
                               rtol=1e-8)


def test_schur_inequality_and_inflation(clusters_model):
    r = fit(clusters_model)
    d = var_decomp(clusters_model, r)
    assert np.all(d.hlik_var >= d.eb_var - 1e-12)
    assert np.all(d.inflation >= -1e-12)


def _dummy_fit(v):
    return type("F", (), {"state": ParamState(np.zeros(1), np.asarray(v, dtype=float), {})})()


def test_wald_standard_normal():
    w = wald_intervals(VarDecomp(np.array([1.0]), np.array([1.0])), _dummy_fit([0.0]))
    assert w.lower[0] == pytest.approx(-1.959963984540054, abs=1e-12)
    assert w.upper[0] == pytest.approx(1.959963984540054, abs=1e-12)


def test_wald_nesting():
    d = VarDecomp(np.array([0.4, 1.0]), np.array([0.6, 1.0]))
    f = _dummy_fit([0.3, -1.0])
    hl, eb = wald_intervals(d, f, kind="hlik"), wald_intervals(d, f, kind="eb")
    assert np.all(hl.lower <= eb.lower) and np.all(hl.upper >= eb.upper)
    narrow, wide = wald_intervals(d, f, 0.5), wald_intervals(d, f, 0.95)
    assert np.all(narrow.lower > wide.lower) and np.all(narrow.upper < wide.upper)
    with pytest.raises(ValueError):
        wald_intervals(d, f, 1.0)


def test_default_truth():
    cfg = CoverageConfig(n_sims=1)
    assert (cfg.beta, cfg.sigma2, cfg.car_lambda) == (-4.920, 2.0, 0.62)


def test_coverage_single_replicate_is_deterministic():
    a = coverage_sim(CoverageConfig(n_sims=1, seed=5))
    b = coverage_sim(CoverageConfig(n_sims=1, seed=5))
    assert a.to_csv() == b.to_csv() and a.meta_json() == b.meta_json()
    assert sum(a.bin_counts) == 20 * (a.n_sims - a.failures)
    assert all(0 <= c <= 1 for c in a.eb_coverage + a.hlik_coverage)


def test_coverage_outputs():
    rep = coverage_sim(CoverageConfig(n_sims=2, seed=9))
    lines = rep.to_csv().splitlines()
    assert lines[0] == "bin,n_range,eb_coverage,hlik_coverage,count"
    assert len(lines) == 1 + 4
    meta = json.loads(rep.meta_json())
    assert meta["seed"] == 9 and meta["config"]["sigma2"] == 2.0
    assert rep.schur_violations == 0


def test_oracle_mode_coverage_is_nominal():
    rep = coverage_sim(CoverageConfig(n_sims=100, seed=3, oracle_mode=True))
    n = sum(rep.bin_counts)
    total = sum(c * k for c, k in zip(rep.hlik_coverage, rep.bin_counts)) / n
    assert abs(total - 0.95) <= 3 * np.sqrt(0.95 * 0.05 / n)


def test_invalid_config():
    with pytest.raises(ValueError):
        CoverageConfig(n_sims=0)
    with pytest.raises(ValueError):
        CoverageConfig(n_regions=3, populations=[1.0, 2.0], n_sims=1)
