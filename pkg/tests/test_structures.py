import numpy as np
import pandas as pd
import pytest

from hglik import build_model, eval_h
from hglik.errors import DomainError
from hglik.hlik import ParamState
from hglik.structures import (ar1_precision, car_precision, factor_loading_cov, iid_precision,
                              lattice_adjacency, neighborhood_from_adjacency, random_adjacency,
                              read_edge_csv)


def test_two_region_neighborhood():
    q = neighborhood_from_adjacency([(1, 2)], 2)
    np.testing.assert_array_equal(q.q_matrix, [[1, -1], [-1, 1]])


def test_path_neighborhood():
    q = neighborhood_from_adjacency([(1, 2), (2, 3), (2, 1)], 3)
    np.testing.assert_array_equal(q.q_matrix, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])


def test_isolated_region():
    q = neighborhood_from_adjacency([(1, 2)], 3)
    assert not q.q_matrix[2].any() and not q.q_matrix[:, 2].any()


@pytest.mark.parametrize("edges", [[(1, 1)], [(1, 4)], [(0, 2)]])
def test_bad_edges(edges):
    with pytest.raises((DomainError, ValueError)):
        neighborhood_from_adjacency(edges, 3)


def test_car_two_regions():
    q = neighborhood_from_adjacency([(1, 2)], 2)
    np.testing.assert_allclose(car_precision(q, 0.5, 1.0).matrix, [[1, -0.5], [-0.5, 1]])
    np.testing.assert_allclose(car_precision(q, 0.5, 2.0).matrix, [[0.5, -0.25], [-0.25, 0.5]])


def test_car_lambda_zero_is_identity():
    q = neighborhood_from_adjacency(lattice_adjacency(2, 3), 6)
    np.testing.assert_allclose(car_precision(q, 0.0, 1.0).matrix, np.eye(6))


def test_intrinsic_car_rank_and_null_basis():
    q = neighborhood_from_adjacency([(1, 2), (2, 3)], 3)
    s = car_precision(q, 1.0, 1.0)
    assert s.rank == 2 and s.singular
    nb = s.null_basis[:, 0]
    np.testing.assert_allclose(np.abs(nb), np.full(3, 1 / np.sqrt(3)), atol=1e-12)
    np.testing.assert_allclose(s.matrix @ s.null_basis, 0, atol=1e-10)


def test_car_lambda_out_of_range():
    q = neighborhood_from_adjacency([(1, 2)], 2)
    with pytest.raises((DomainError, ValueError)):
        car_precision(q, 1.2, 1.0)
    with pytest.raises((DomainError, ValueError)):
        car_precision(q, 0.5, 0.0)


def test_car_spectrum_monotone_in_lambda():
    rng = np.random.default_rng(11)
    for _ in range(5):
        q = neighborhood_from_adjacency(random_adjacency(12, rng), 12)
        tops = [np.linalg.eigvalsh(car_precision(q, lam, 1.0).matrix).max()
                for lam in np.linspace(0, 1, 20)]
        assert np.all(np.diff(tops) >= -1e-12)


def test_ar1_rho_zero():
    np.testing.assert_allclose(ar1_precision(4, 0.0, 2.0).matrix, np.eye(4) / 2.0)


def test_random_walk():
    s = ar1_precision(3, 1.0, 2.0)
    np.testing.assert_allclose(s.matrix, np.array([[1, -1, 0], [-1, 2, -1], [0, -1, 1]]) / 2.0)
    assert s.rank == 2


@pytest.mark.parametrize("rho", [0.5, -0.5, 0.9])
@pytest.mark.parametrize("n", [4, 17, 50])
def test_ar1_inverse_is_stationary_covariance(rho, n):
    lam = 1.7
    cov = np.linalg.inv(ar1_precision(n, rho, lam).matrix)
    t = np.arange(n)
    direct = lam * rho ** np.abs(t[:, None] - t[None, :]) / (1 - rho ** 2)
    np.testing.assert_allclose(cov, direct, atol=1e-10 * np.abs(direct).max())


def test_ar1_rho_out_of_range():
    with pytest.raises((DomainError, ValueError)):
        ar1_precision(4, 1.5, 1.0)


def test_factor_loadings():
    cov, L = factor_loading_cov([1, 1, 1], 1.0)
    np.testing.assert_allclose(cov, np.ones((3, 3)))
    assert np.linalg.matrix_rank(cov) == 1
    cov, L = factor_loading_cov([1, 0, 0], 2.0)
    assert np.count_nonzero(cov) == 1 and cov[0, 0] == 2.0
    np.testing.assert_allclose(L.ravel(), [1, 0, 0])


def test_unit_loadings_reproduce_random_intercept_model():
    rng = np.random.default_rng(5)
    subjects, items = 6, 3
    df = pd.DataFrame({
        "y": rng.integers(0, 2, subjects * items).astype(float),
        "subject": np.repeat(np.arange(subjects), items),
        "item": np.tile(np.arange(items), subjects),
    })
    rasch = build_model(df, {"response": "y", "group": "subject", "family": "binomial"})
    two_pl = build_model(df, {"response": "y", "group": "subject", "family": "binomial",
                              "random": {"structure": "factor", "item": "item", "loadings": [1, 1, 1]}})
    for _ in range(5):
        beta = rng.normal(size=1)
        r = rng.normal(size=subjects)
        lam = float(rng.uniform(0.3, 2))
        a = eval_h(rasch, ParamState(beta, r, {"lambda": lam}))
        b = eval_h(two_pl, ParamState(beta, r, {"lambda": lam}))
        assert abs(a - b) < 1e-10


def _invariants(s):
    M = s.matrix
    np.testing.assert_allclose(M, M.T, atol=1e-12)
    ev = np.linalg.eigvalsh(M)
    assert ev.min() >= -1e-10 * ev.max()
    assert np.sum(ev <= 1e-10 * ev.max()) == s.q - s.rank
    if s.rank < s.q:
        np.testing.assert_allclose(M @ s.null_basis, 0, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_builders_satisfy_invariants(seed):
    rng = np.random.default_rng(seed)
    q = neighborhood_from_adjacency(random_adjacency(10, rng), 10)
    for s in [car_precision(q, float(rng.uniform()), float(rng.uniform(0.5, 3))),
              car_precision(q, 1.0, 1.0),
              ar1_precision(8, float(rng.uniform(-0.9, 0.9)), 1.3),
              ar1_precision(8, 1.0, 1.3),
              iid_precision(rng.uniform(0.5, 2, 5))]:
        _invariants(s)
        s.check()


def test_edge_csv(tmp_path):
    p = tmp_path / "edges.csv"
    p.write_text("region_a,region_b\n1,2\n2,3\n")
    assert [tuple(e) for e in read_edge_csv(p)] == [(1, 2), (2, 3)]


def test_lattice_edges():
    edges = lattice_adjacency(2, 2)
    assert len(edges) == 4
    q = neighborhood_from_adjacency(edges, 4)
    np.testing.assert_array_equal(np.diag(q.q_matrix), [2, 2, 2, 2])
