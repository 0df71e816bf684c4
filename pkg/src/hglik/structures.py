"""Precision and covariance builders for structured random effects.

Every builder returns a :class:`PrecisionStructure` whose declared rank is
checked against its spectrum at construction time, so a wrong construction
fails loudly instead of producing a silently improper prior.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay

from .errors import ConfigError, DomainError

EIG_TOL = 1e-10


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PrecisionStructure:
    """Symmetric PSD precision matrix with a declared rank.

    ``null_basis`` holds an orthonormal basis of the null space when the
    matrix is singular (``rank < q``).
    """

    matrix: np.ndarray
    rank: int
    null_basis: Optional[np.ndarray] = None
    params: dict = field(default_factory=dict)
    diagonal: bool = False

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen(self.matrix))
        if self.null_basis is not None:
            nb = np.atleast_2d(np.asarray(self.null_basis, dtype=float))
            if nb.shape[0] != self.q:
                nb = nb.T
            object.__setattr__(self, "null_basis", _frozen(nb))
        self.check()

    @property
    def q(self) -> int:
        return self.matrix.shape[0]

    @property
    def singular(self) -> bool:
        return self.rank < self.q

    def eigvals(self):
        if self.diagonal:
            return np.sort(np.diag(self.matrix))
        return np.linalg.eigvalsh(self.matrix)

    def check(self, tol=EIG_TOL):
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DomainError(f"precision must be square, got shape {m.shape}")
        scale = max(1.0, np.abs(m).max(initial=0.0))
        if not np.allclose(m, m.T, rtol=0, atol=1e-12 * scale):
            raise DomainError("precision matrix is not symmetric")
        ev = self.eigvals()
        top = max(ev.max(initial=0.0), 0.0)
        if top <= 0:
            raise DomainError("precision matrix has no positive eigenvalue")
        if ev.min() < -tol * top:
            raise DomainError(f"precision matrix is not PSD (min eigenvalue {ev.min():.3g})")
        n_zero = int(np.sum(ev <= tol * top))
        if n_zero != self.q - self.rank:
            raise DomainError(
                f"declared rank {self.rank} but spectrum shows {self.q - n_zero}")
        if self.rank < self.q:
            if self.null_basis is None or self.null_basis.shape[1] != self.q - self.rank:
                raise DomainError("singular precision requires a null basis of matching size")
            resid = np.abs(m @ self.null_basis).max()
            if resid > tol * max(1.0, top):
                raise DomainError(f"null basis not annihilated (residual {resid:.3g})")

    def logdet(self) -> float:
        """Log determinant, over the nonzero eigenvalues when singular."""
        if self.diagonal:
            d = np.diag(self.matrix)
            return float(np.sum(np.log(d[d > EIG_TOL * d.max()])))
        if not self.singular:
            sign, ld = np.linalg.slogdet(self.matrix)
            return float(ld)
        ev = np.linalg.eigvalsh(self.matrix)
        return float(np.sum(np.log(ev[ev > EIG_TOL * ev.max()])))

    def row_basis(self):
        """Orthonormal basis (q x rank) of the row space; ``None`` if full rank."""
        if not self.singular:
            return None
        nb = self.null_basis
        proj = np.eye(self.q) - nb @ nb.T
        u, s, _ = np.linalg.svd(proj)
        return u[:, : self.rank]

    def null_component(self, v):
        if not self.singular:
            return np.zeros(0)
        return self.null_basis.T @ np.asarray(v, dtype=float)


@dataclass(frozen=True)
class NeighborhoodMatrix:
    """Graph Laplacian of a region adjacency: degree on the diagonal, -1 per edge."""

    q_matrix: np.ndarray

    def __post_init__(self):
        qm = np.array(self.q_matrix, dtype=np.int64)
        qm.setflags(write=False)
        object.__setattr__(self, "q_matrix", qm)
        if qm.ndim != 2 or qm.shape[0] != qm.shape[1]:
            raise DomainError("neighborhood matrix must be square")
        if not np.array_equal(qm, qm.T):
            raise DomainError("neighborhood matrix must be symmetric")
        off = qm - np.diag(np.diag(qm))
        if not np.all(np.isin(off, (0, -1))):
            raise DomainError("off-diagonal entries must be 0 or -1")
        if np.any(qm.sum(axis=1) != 0):
            raise DomainError("rows of a neighborhood matrix must sum to zero")

    @property
    def n_regions(self) -> int:
        return self.q_matrix.shape[0]

    def components(self):
        adj = sparse.csr_matrix((self.q_matrix < 0).astype(int))
        return connected_components(adj, directed=False)


def neighborhood_from_adjacency(edges: Iterable, n_regions: int) -> NeighborhoodMatrix:
    """Build Q from 1-based region pairs; duplicate pairs are collapsed."""
    n_regions = int(n_regions)
    if n_regions < 1:
        raise ConfigError("n_regions must be positive")
    pairs = set()
    for a, b in edges:
        a, b = int(a), int(b)
        if not (1 <= a <= n_regions and 1 <= b <= n_regions):
            raise ConfigError(f"edge ({a}, {b}) references a region outside 1..{n_regions}")
        if a == b:
            raise ConfigError(f"self-loop at region {a}")
        pairs.add((min(a, b) - 1, max(a, b) - 1))
    q = np.zeros((n_regions, n_regions), dtype=np.int64)
    for i, j in sorted(pairs):
        q[i, j] = q[j, i] = -1
    q[np.diag_indices(n_regions)] = -q.sum(axis=1)
    return NeighborhoodMatrix(q)


def read_edge_csv(path):
    """Read an edge list with header ``region_a,region_b`` (1-based indices)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["region_a", "region_b"]:
            raise ConfigError(f"{path}: expected header 'region_a,region_b'")
        edges = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                edges.append((int(row[0]), int(row[1])))
            except (ValueError, IndexError):
                raise ConfigError(f"{path}:{lineno}: malformed edge row {row!r}") from None
    return edges


def lattice_adjacency(rows: int, cols: int):
    """Rook-neighbour edges of a rows x cols grid, 1-based."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c + 1
            if c + 1 < cols:
                edges.append((k, k + 1))
            if r + 1 < rows:
                edges.append((k, k + cols))
    return edges


def random_adjacency(n_regions: int, rng) -> list:
    """Map-like random graph: Delaunay triangulation of uniform points."""
    pts = rng.uniform(size=(n_regions, 2))
    tri = Delaunay(pts)
    edges = set()
    for simplex in tri.simplices:
        for a in range(3):
            for b in range(a + 1, 3):
                i, j = sorted((int(simplex[a]), int(simplex[b])))
                edges.add((i + 1, j + 1))
    return sorted(edges)


def _component_basis(labels, n_comp):
    basis = np.zeros((labels.size, n_comp))
    for c in range(n_comp):
        idx = labels == c
        basis[idx, c] = 1.0 / np.sqrt(idx.sum())
    return basis


def car_precision(q: NeighborhoodMatrix, lam: float, sigma2: float) -> PrecisionStructure:
    """Precision (lam*Q + (1-lam)*I) / sigma2 of the Leroux CAR model."""
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"CAR lambda must lie in [0, 1], got {lam}")
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    n = q.n_regions
    d = lam * q.q_matrix + (1.0 - lam) * np.eye(n)
    params = {"car_lambda": float(lam), "sigma2": float(sigma2)}
    if lam < 1.0:
        return PrecisionStructure(d / sigma2, rank=n, params=params)
    n_comp, labels = q.components()
    return PrecisionStructure(d / sigma2, rank=n - n_comp,
                              null_basis=_component_basis(labels, n_comp), params=params)


def ar1_precision(n: int, rho: float, lam: float) -> PrecisionStructure:
    """Precision of v_t = rho v_{t-1} + r_t, var(r_t) = lam.

    For |rho| < 1 the first value is drawn from the stationary law
    N(0, lam / (1 - rho^2)). ``rho == 1`` gives the random walk with a free
    level, whose precision has rank n - 1.
    """
    if n < 2:
        raise ConfigError("AR(1) structure needs at least two time points")
    if not -1.0 < rho <= 1.0:
        raise DomainError(f"rho must lie in (-1, 1], got {rho}")
    if not lam > 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    diag = np.full(n, 1.0 + rho * rho)
    diag[0] = diag[-1] = 1.0
    p = np.diag(diag) - rho * (np.eye(n, k=1) + np.eye(n, k=-1))
    params = {"rho": float(rho), "lambda": float(lam)}
    if rho < 1.0:
        return PrecisionStructure(p / lam, rank=n, params=params)
    return PrecisionStructure(p / lam, rank=n - 1,
                              null_basis=np.full((n, 1), 1.0 / np.sqrt(n)), params=params)


def iid_precision(variances) -> PrecisionStructure:
    """Diagonal precision from per-effect variances."""
    variances = np.asarray(variances, dtype=float)
    if np.any(~(variances > 0)):
        raise DomainError("variances must be positive")
    return PrecisionStructure(np.diag(1.0 / variances), rank=variances.size, diagonal=True)


def factor_loading_cov(alpha, lam: float):
    """Rank-one covariance lam * alpha alpha^T and the loading column L = alpha."""
    alpha = np.asarray(alpha, dtype=float).ravel()
    if alpha.size == 0:
        raise ConfigError("alpha must be nonempty")
    L = alpha[:, None]
    return lam * (L @ L.T), L
