"""Independent references for testing.

Adaptive Gauss-Hermite integration for cluster-separable models, closed forms
for Gaussian mixed models, and an analytically tractable one-parameter model
with an exponential latent variable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import optimize
from scipy.special import expit, logsumexp
from scipy.stats import binom, multivariate_normal, nbinom, norm, poisson

from .errors import DomainError, HglikError, NumericalError
from .hlik import HessianBlocks, v_mode
from .model import ModelSpec
from .predict import TAIL, PredictiveDist, _counts

LOG2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray
    order: int
    centers: np.ndarray = None
    scales: np.ndarray = None


def gauss_hermite(order: int) -> QuadratureRule:
    """Rule for integrals against exp(-x^2)."""
    if order < 1:
        raise ValueError("quadrature order must be at least 1")
    x, w = hermgauss(order)
    return QuadratureRule(x, w, order)


# ---------------------------------------------------------------------------
# quadrature for cluster-separable models
# ---------------------------------------------------------------------------


class UnsupportedStructure(HglikError, ValueError):
    pass


def _clusters(model: ModelSpec, dispersion):
    if not isinstance(model, ModelSpec):
        raise UnsupportedStructure("quadrature needs a ModelSpec")
    Z = model.designs.Zeff
    P = model.precision(dispersion).matrix
    if np.any(np.abs(P - np.diag(np.diag(P))) > 0):
        raise UnsupportedStructure("random effects are correlated; quadrature needs independent clusters")
    if np.any(np.count_nonzero(Z, axis=1) > 1):
        raise UnsupportedStructure("an observation loads on several random effects")
    if np.any(np.diag(P) <= 0):
        raise UnsupportedStructure("a random effect has an improper prior")
    return Z, np.diag(P)


def _logdens(model, eta, rows, phi):
    """log f(y_i | eta_i) from scipy distributions, rows x nodes."""
    y = model.y[rows][:, None]
    kind = model.family.kind
    if kind == "normal":
        return norm.logpdf(y, eta, np.sqrt(phi))
    if kind == "poisson":
        return poisson.logpmf(y, np.exp(eta))
    return binom.logpmf(y, model.trials[rows][:, None], expit(eta))


def _cluster_terms(model, beta, dispersion, order):
    Z, prec = _clusters(model, dispersion)
    phi = model.phi(dispersion)
    eta0 = model.designs.X @ beta + model.offset
    vhat = v_mode(model, beta, dispersion)
    x, w = hermgauss(order)
    out = []
    for c in range(model.k):
        rows = np.flatnonzero(Z[:, c])
        zc = Z[rows, c]
        # curvature of the cluster integrand at its mode, by central differences
        def logf(v):
            eta = eta0[rows][:, None] + np.outer(zc, np.atleast_1d(v))
            return (_logdens(model, eta, rows, phi).sum(axis=0)
                    - 0.5 * prec[c] * np.atleast_1d(v) ** 2 + 0.5 * np.log(prec[c]) - 0.5 * LOG2PI)
        m = vhat[c]
        hstep = 1e-4 * max(1.0, abs(m))
        for _ in range(2):
            # second pass: a step matched to the posterior width keeps rounding out of the scale
            f = logf(np.array([m - hstep, m, m + hstep]))
            curv = -(f[0] - 2 * f[1] + f[2]) / hstep ** 2
            if not curv > 0:
                raise NumericalError("non-positive curvature at a cluster mode", block="h_vv")
            hstep = 0.1 / np.sqrt(curv)
        s = np.sqrt(2.0 / curv)
        nodes = m + s * x
        lf = logf(nodes)
        out.append((c, nodes, lf + x ** 2 + np.log(w) + np.log(s), m, s))
    free_rows = np.flatnonzero(~Z.any(axis=1))
    rest = float(_logdens(model, eta0[free_rows][:, None], free_rows, phi).sum()) if free_rows.size else 0.0
    return out, rest


def quad_marginal(model: ModelSpec, beta, dispersion, order=32) -> float:
    """log of the integral of exp(h) over v by adaptive Gauss-Hermite, cluster by cluster."""
    beta = np.asarray(beta, dtype=float)
    terms, rest = _cluster_terms(model, beta, dispersion, order)
    return rest + float(sum(logsumexp(lw) for _, _, lw, _, _ in terms))


def adaptive_rule(model, beta, dispersion, order=32) -> QuadratureRule:
    terms, _ = _cluster_terms(model, np.asarray(beta, dtype=float), dispersion, order)
    x, w = hermgauss(order)
    return QuadratureRule(x, w, order, np.array([t[3] for t in terms]), np.array([t[4] for t in terms]))


def quad_posterior_moments(model, beta, dispersion, cluster: int, order=32):
    """(E(v_c | y), var(v_c | y)) as ratios of quadrature integrals."""
    terms, _ = _cluster_terms(model, np.asarray(beta, dtype=float), dispersion, order)
    _, nodes, lw, _, _ = terms[cluster]
    p = np.exp(lw - logsumexp(lw))
    mean = float(p @ nodes)
    return mean, float(p @ (nodes - mean) ** 2)


def quad_ml(model, beta0, dispersion0, order=32, free=None):
    """Maximize quad_marginal over beta and the log of the free variance components.

    Returns (beta, dispersion, value).
    """
    free = list(dispersion0) if free is None else list(free)
    p = model.p

    def unpack(x):
        d = dict(dispersion0)
        d.update({n: float(np.exp(x[p + i])) for i, n in enumerate(free)})
        return x[:p], d

    def obj(x):
        b, d = unpack(x)
        try:
            return -quad_marginal(model, b, d, order)
        except (HglikError, ValueError):
            return np.inf

    x0 = np.concatenate([np.asarray(beta0, dtype=float), np.log([dispersion0[n] for n in free])])
    res = optimize.minimize(obj, x0, method="BFGS", options={"gtol": 1e-9})
    res = optimize.minimize(obj, res.x, method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 20000})
    b, d = unpack(res.x)
    return b, d, -float(res.fun)


# ---------------------------------------------------------------------------
# Gaussian closed forms
# ---------------------------------------------------------------------------


def gaussian_marginal(y, X, Z, beta, phi, G) -> float:
    V = phi * np.eye(len(y)) + Z @ G @ Z.T
    return float(multivariate_normal.logpdf(y, X @ beta, V))


def gaussian_reml(y, X, Z, phi, G) -> float:
    """Restricted log-likelihood with the log det(X'V^-1 X / 2 pi) convention."""
    n, p = X.shape
    V = phi * np.eye(n) + Z @ G @ Z.T
    Vi = np.linalg.inv(V)
    A = X.T @ Vi @ X
    b = np.linalg.solve(A, X.T @ Vi @ y)
    r = y - X @ b
    return float(-0.5 * (n - p) * LOG2PI - 0.5 * np.linalg.slogdet(V)[1]
                 - 0.5 * np.linalg.slogdet(A)[1] - 0.5 * r @ Vi @ r)


def gaussian_gls(y, X, Z, phi, G):
    V = phi * np.eye(len(y)) + Z @ G @ Z.T
    Vi = np.linalg.inv(V)
    return np.linalg.solve(X.T @ Vi @ X, X.T @ Vi @ y)


def gaussian_conditional(y, X, Z, beta, phi, G):
    """Mean and covariance of v given y at known (beta, phi, G)."""
    C = np.linalg.inv(Z.T @ Z / phi + np.linalg.inv(G))
    return C @ Z.T @ (y - X @ beta) / phi, C


def anova_oneway(y, groups):
    """Balanced one-way ANOVA estimates (mu, phi, lambda) = (grand mean, MSW, (MSB - MSW)/n)."""
    y = np.asarray(y, dtype=float)
    labels, codes = np.unique(groups, return_inverse=True)
    g = labels.size
    n = y.size // g
    if np.any(np.bincount(codes) != n):
        raise ValueError("design is not balanced")
    means = np.bincount(codes, y) / n
    msw = float(np.sum((y - means[codes]) ** 2) / (g * (n - 1)))
    msb = float(n * np.sum((means - y.mean()) ** 2) / (g - 1))
    return float(y.mean()), msw, (msb - msw) / n


def blup_pev(n, g, phi, lam) -> float:
    """Prediction-error variance of a balanced one-way BLUP with the mean estimated."""
    return phi * lam / (n * lam + phi) + n * lam ** 2 / (g * (n * lam + phi))


# ---------------------------------------------------------------------------
# exponential latent-variable model
# ---------------------------------------------------------------------------


class BayarriModel:
    """u ~ exp(theta), y | u ~ exp(u); random effect on the scale v = log u.

    h = 2 v + log(theta) - u (theta + y), including the Jacobian of u = exp(v).
    """

    p = 1
    k = 1
    beta_names = ("theta",)
    dispersion_names = ()
    effect_labels = ("u",)

    def __init__(self, y):
        if not y > 0:
            raise DomainError("y must be positive")
        self.y = float(y)

    def init_beta(self):
        return np.array([1.0])

    def _unpack(self, state):
        theta, v = float(state.beta[0]), float(state.v[0])
        if not theta > 0:
            raise DomainError("theta must be positive")
        return theta, v, np.exp(v)

    def eval_h(self, state):
        theta, v, u = self._unpack(state)
        return 2 * v + np.log(theta) - u * (theta + self.y)

    def grad_h(self, state):
        theta, v, u = self._unpack(state)
        return np.array([1 / theta - u]), np.array([2 - u * (theta + self.y)])

    def hess_h(self, state):
        theta, v, u = self._unpack(state)
        return HessianBlocks(np.array([[1 / theta ** 2]]), np.array([[u]]),
                             np.array([[u * (theta + self.y)]]))

    def hess_u(self, state):
        """Negated Hessian with derivatives taken in u rather than v."""
        theta, v, u = self._unpack(state)
        return np.array([[1 / theta ** 2, 1.0], [1.0, 2 / u ** 2]])


@dataclass(frozen=True)
class BayarriRecord:
    m: float
    theta_hat: float
    var_theta_hat: float
    u_hat: float
    u_hat_at_mle: float
    post_mean: float
    post_var: float
    eb_var: float
    cmse: float
    hessian: np.ndarray


def bayarri_closed_forms(y, theta) -> BayarriRecord:
    if not (y > 0 and theta > 0):
        raise DomainError("y and theta must be positive")
    y, theta = float(y), float(theta)
    return BayarriRecord(
        m=np.log(theta) - 2 * np.log(theta + y),
        theta_hat=y,
        var_theta_hat=2 * y ** 2,
        u_hat=2 / (theta + y),
        u_hat_at_mle=1 / y,
        post_mean=2 / (theta + y),
        post_var=2 / (y + theta) ** 2,
        eb_var=1 / (2 * y ** 2),
        cmse=1 / y ** 2,
        hessian=np.array([[1 / theta ** 2, 1.0], [1.0, (y + theta) ** 2 / 2]]),
    )


def jeffreys_predictive(y, v_max=None) -> PredictiveDist:
    """Negative binomial induced by the gamma(sum(y) + 1/2, n) posterior of the rate."""
    y = _counts(y)
    r, q = y.sum() + 0.5, y.size / (y.size + 1.0)
    if v_max is None:
        v_max = int(nbinom.isf(TAIL, r, q))
        while nbinom.sf(v_max, r, q) >= TAIL:
            v_max += 1
    support = np.arange(v_max + 1, dtype=float)
    mass = nbinom.pmf(support, r, q)
    return PredictiveDist(support, mass / mass.sum(), "jeffreys", float(nbinom.sf(v_max, r, q)))
