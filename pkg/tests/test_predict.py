import io
import math

import numpy as np
import pytest

from hglik import plugin_predictive, profile_predictive, tv_distance
from hglik.errors import DomainError
from hglik.predict import write_csv

Y = [3, 2, 5, 0, 4]


def test_plugin_rate_and_mass():
    d = plugin_predictive(Y)
    assert d.mean == pytest.approx(2.8, abs=1e-10)
    assert d.mass[0] == pytest.approx(0.0608100626252180, abs=1e-13)
    for i in range(16):
        assert d.mass[i] == pytest.approx(math.exp(-2.8) * 2.8 ** i / math.factorial(i), abs=1e-12)


def test_plugin_zero_rate():
    d = plugin_predictive([0, 0, 0])
    assert d.mass[0] == 1.0 and d.mass.sum() == 1.0


def test_profile_rate_at_four():
    # the profile weight at v = 4 uses theta(4) = 18 / 6
    from hglik.predict import _profile_logw
    from scipy.stats import poisson
    direct = sum(poisson.logpmf(k, 3.0) for k in Y + [4])
    assert _profile_logw(14.0, 5, 4.0) == pytest.approx(direct + sum(math.lgamma(k + 1) for k in Y), abs=1e-12)


@pytest.mark.parametrize("method", [plugin_predictive, profile_predictive])
def test_proper(method):
    d = method(Y)
    assert np.all(d.mass >= 0)
    assert d.mass.sum() == pytest.approx(1.0, abs=1e-12)
    assert d.truncation_mass < 1e-8


def test_profile_is_more_dispersed():
    assert profile_predictive(Y).var > plugin_predictive(Y).var


def test_profile_depends_on_sum_and_n_only():
    a, b = profile_predictive(Y), profile_predictive([5, 4, 3, 2, 0])
    c = profile_predictive([14, 0, 0, 0, 0])
    np.testing.assert_array_equal(a.mass, b.mass)
    np.testing.assert_allclose(a.mass, c.mass, atol=1e-15)


def test_methods_converge_as_n_grows():
    tv = [tv_distance(plugin_predictive(np.full(n, 3)), profile_predictive(np.full(n, 3)))
          for n in (5, 50, 500, 5000)]
    assert all(b < a for a, b in zip(tv, tv[1:]))


def test_large_sample_agreement():
    y = np.full(10_000, 3)
    assert tv_distance(plugin_predictive(y), profile_predictive(y)) < 0.01


def test_explicit_vmax():
    d = profile_predictive(Y, v_max=6)
    assert d.support[-1] == 6 and d.truncation_mass > 0
    assert d.mass.sum() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("bad", [[], [-1, 2], [1.5]])
def test_bad_counts(bad):
    with pytest.raises(DomainError):
        plugin_predictive(bad)
    with pytest.raises(DomainError):
        profile_predictive(bad)


def test_csv_layout():
    buf = io.StringIO()
    write_csv(buf, [plugin_predictive(Y), profile_predictive(Y)])
    lines = buf.getvalue().splitlines()
    assert lines[0] == "v,plugin_mass,profile_mass"
    assert lines[1].startswith("0,0.0608100626")
