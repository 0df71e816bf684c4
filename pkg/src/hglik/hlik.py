"""h-likelihood h = log f(y|v) + log f(v): value, derivatives and modes.

Functions accept either a :class:`~hglik.model.ModelSpec` or any object
exposing ``eval_h(state)``, ``grad_h(state)``, ``hess_h(state)`` together
with ``p``, ``k``, ``beta_names``, ``dispersion_names`` and
``init_beta()``; the bespoke Bayarri model in :mod:`hglik.oracle` is one.

For a singular precision (random walk, intrinsic CAR) the random effects
are constrained to the row space of the precision and all Newton work is
done in an orthonormal basis of that space.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import linalg
from scipy.special import expit, gammaln, xlogy

from ._newton import NewtonResult, cholesky_direction, newton_maximize
from .errors import ConvergenceError, DomainError, NumericalError
from .model import ModelSpec, linear_predictor

LOG2PI = np.log(2 * np.pi)
NULL_TOL = 1e-8


@dataclass(frozen=True)
class ParamState:
    """Fixed effects, random effects (fitted scale) and dispersion components."""

    beta: np.ndarray
    v: np.ndarray
    dispersion: Mapping[str, float]

    def __post_init__(self):
        for name in ("beta", "v"):
            a = np.array(getattr(self, name), dtype=float).ravel()
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "dispersion", {k: float(x) for k, x in self.dispersion.items()})

    def replace(self, **changes) -> "ParamState":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class HessianBlocks:
    """Negated second derivatives of h: beta-beta, beta-v and v-v blocks."""

    h_bb: np.ndarray
    h_bv: np.ndarray
    h_vv: np.ndarray

    def full(self):
        return np.block([[self.h_bb, self.h_bv], [self.h_bv.T, self.h_vv]])


# ---------------------------------------------------------------------------
# family terms
# ---------------------------------------------------------------------------


def _loglik_terms(model: ModelSpec, eta, phi):
    """Per-row log f(y|v) minus its saturated value, the score d/deta, and the weight.

    Rows are O(1) near a fit, so sums of them carry far less rounding than
    sums of raw log-likelihoods; ``_saturated`` holds the parameter-free rest.
    """
    y, m = model.y, model.trials
    kind = model.family.kind
    if kind == "normal":
        r = y - eta
        ll = -0.5 * (LOG2PI + np.log(phi)) - r * r / (2 * phi)
        return ll, r / phi, np.full_like(eta, 1.0 / phi)
    if kind == "poisson":
        mu = np.exp(eta)
        ll = np.where(y > 0, y * (eta - np.log(np.where(y > 0, y, 1.0))), 0.0) - (mu - y)
        return ll, y - mu, mu
    p = expit(eta)
    logp, log1mp = -np.logaddexp(0.0, -eta), -np.logaddexp(0.0, eta)
    ps = y / m
    ll = (np.where(y > 0, y * (logp - np.log(np.where(y > 0, ps, 1.0))), 0.0)
          + np.where(m > y, (m - y) * (log1mp - np.log1p(-np.where(m > y, ps, 0.0))), 0.0))
    return ll, y - m * p, m * p * (1 - p)


def _saturated(model: ModelSpec) -> float:
    """Sum over rows of the saturated log-likelihood, with all constants."""
    y, m = model.y, model.trials
    kind = model.family.kind
    if kind == "normal":
        return 0.0
    if kind == "poisson":
        return float(np.sum(xlogy(y, y) - y - gammaln(y + 1)))
    ps = y / m
    return float(np.sum(xlogy(y, ps) + xlogy(m - y, 1 - ps)
                        + gammaln(m + 1) - gammaln(y + 1) - gammaln(m - y + 1)))


class _Problem:
    """Bundles a model with fixed dispersion; caches the precision factorization."""

    def __init__(self, model, dispersion):
        self.model = model
        self.dispersion = dict(dispersion)
        self.glm = isinstance(model, ModelSpec)
        if self.glm:
            model.check_dispersion(self.dispersion)
            self.prec = model.precision(self.dispersion)
            self.P = self.prec.matrix
            self.basis = self.prec.row_basis()
            self.prior_const = 0.5 * self.prec.logdet() - 0.5 * self.prec.rank * LOG2PI
            self.const = self.prior_const + _saturated(model)
            self.phi = model.phi(self.dispersion)
            self.X = model.designs.X
            self.Z = model.designs.Zeff
        else:
            rb = getattr(model, "row_basis", None)
            self.basis = rb(self.dispersion) if rb else None
        self.p = model.p
        self.k = model.k
        self.kc = self.k if self.basis is None else self.basis.shape[1]

    def state(self, beta, v):
        return ParamState(beta, v, self.dispersion)

    def to_v(self, c):
        return c if self.basis is None else self.basis @ c

    def to_c(self, v):
        return v if self.basis is None else self.basis.T @ v

    def check_null(self, v):
        if self.glm and self.prec.singular:
            nc = self.prec.null_component(v)
            if np.max(np.abs(nc)) > NULL_TOL * max(1.0, np.linalg.norm(v)):
                raise DomainError("random effects have a component in the null space of a singular precision")

    def value(self, beta, v):
        if not self.glm:
            return float(self.model.eval_h(self.state(beta, v)))
        eta, _ = linear_predictor(self.model, beta, v)
        ll, _, _ = _loglik_terms(self.model, eta, self.phi)
        return float((ll.sum() - 0.5 * v @ self.P @ v) + self.const)

    def gradient(self, beta, v):
        if not self.glm:
            return self.model.grad_h(self.state(beta, v))
        eta, _ = linear_predictor(self.model, beta, v)
        _, s, _ = _loglik_terms(self.model, eta, self.phi)
        return self.X.T @ s, self.Z.T @ s - self.P @ v

    def derivatives(self, beta, v):
        """Gradient pair and HessianBlocks in one pass."""
        if not self.glm:
            st = self.state(beta, v)
            gb, gv = self.model.grad_h(st)
            return gb, gv, self.model.hess_h(st)
        eta, _ = linear_predictor(self.model, beta, v)
        _, s, w = _loglik_terms(self.model, eta, self.phi)
        X, Z = self.X, self.Z
        XW = X.T * w
        ZW = Z.T * w
        blocks = HessianBlocks(XW @ X, XW @ Z, ZW @ Z + self.P)
        return X.T @ s, Z.T @ s - self.P @ v, blocks

    def sqrt_logdet(self, beta, v, with_beta=True):
        """log det of the (beta, v) or v-only curvature from a QR of its square root.

        The rows [W^1/2 X, W^1/2 Z; 0, R_P] have the curvature as their
        cross-product; working with them squares away the conditioning loss
        that forming the Schur complement of a weakly identified beta suffers.
        """
        eta, _ = linear_predictor(self.model, beta, v)
        _, _, w = _loglik_terms(self.model, eta, self.phi)
        if not hasattr(self, "_rp"):
            Pc = self.P if self.basis is None else self.basis.T @ self.P @ self.basis
            self._rp = linalg.cholesky(Pc, lower=False)
            self._zc = self.Z if self.basis is None else self.Z @ self.basis
        sw = np.sqrt(w)[:, None]
        if with_beta:
            F = np.block([[sw * self._zc, sw * self.X],
                          [self._rp, np.zeros((self.kc, self.p))]])
        else:
            F = np.vstack([sw * self._zc, self._rp])
        r = linalg.qr(F, mode="r", check_finite=False)[0]
        d = np.abs(np.diag(r))
        if np.any(d == 0):
            raise NumericalError("curvature matrix is singular", block="beta")
        return 2.0 * float(np.sum(np.log(d)))

    def reduce(self, gv, blocks):
        """Express the v-gradient and Hessian blocks in row-space coordinates."""
        if self.basis is None:
            return gv, blocks.h_bv, blocks.h_vv
        B = self.basis
        return B.T @ gv, blocks.h_bv @ B, B.T @ blocks.h_vv @ B


class BlockFactor:
    """Cholesky factors of I(beta, v) by elimination of the v block.

    The Schur complement S = h_bb - h_bv h_vv^{-1} h_vb is only p x p, so the
    full (p + k) system is never inverted densely.
    """

    def __init__(self, h_bb, h_bv, h_vv):
        self.p = h_bb.shape[0]
        try:
            self.cv = linalg.cho_factor(h_vv, lower=True)
        except linalg.LinAlgError:
            raise NumericalError("h_vv block is not positive definite", block="h_vv") from None
        self.h_bv = h_bv
        if self.p:
            self.cinv_vb = linalg.cho_solve(self.cv, h_bv.T)
            S = h_bb - h_bv @ self.cinv_vb
            self.schur = 0.5 * (S + S.T)
            try:
                self.cs = linalg.cho_factor(S, lower=True)
            except linalg.LinAlgError:
                raise NumericalError("Schur complement of the beta block is singular",
                                     block="beta") from None
        else:
            self.cinv_vb = np.zeros((h_vv.shape[0], 0))
            self.cs = None
            self.schur = np.zeros((0, 0))

    def solve(self, gb, gv):
        cg = linalg.cho_solve(self.cv, gv)
        if not self.p:
            return np.zeros(0), cg
        db = linalg.cho_solve(self.cs, gb - self.h_bv @ cg)
        return db, cg - self.cinv_vb @ db

    def logdet(self):
        ld = 2.0 * np.sum(np.log(np.diag(self.cv[0])))
        if self.p:
            ld += 2.0 * np.sum(np.log(np.diag(self.cs[0])))
        return float(ld)

    def logdet_vv(self):
        return float(2.0 * np.sum(np.log(np.diag(self.cv[0]))))

    def vv_inverse(self):
        return linalg.cho_solve(self.cv, np.eye(self.cv[0].shape[0]))

    def full_inverse_vv(self):
        """v block of the inverse of the full (beta, v) Hessian."""
        cinv = self.vv_inverse()
        if not self.p:
            return cinv
        sinv = linalg.cho_solve(self.cs, np.eye(self.p))
        return cinv + self.cinv_vb @ sinv @ self.cinv_vb.T

    def full_inverse_bb(self):
        if not self.p:
            return np.zeros((0, 0))
        return linalg.cho_solve(self.cs, np.eye(self.p))


# ---------------------------------------------------------------------------
# public evaluation
# ---------------------------------------------------------------------------


def _check_state(model, state):
    if state.beta.size != model.p or state.v.size != model.k:
        raise DomainError(f"state dimensions (p={state.beta.size}, k={state.v.size}) "
                          f"do not match model (p={model.p}, k={model.k})")


def eval_h(model, state: ParamState) -> float:
    """h-likelihood at ``state`` including every normalizing constant."""
    _check_state(model, state)
    prob = _Problem(model, state.dispersion)
    prob.check_null(state.v)
    return prob.value(state.beta, state.v)


def grad_h(model, state: ParamState):
    """Analytic gradient ``(dh/dbeta, dh/dv)``."""
    _check_state(model, state)
    prob = _Problem(model, state.dispersion)
    prob.check_null(state.v)
    gb, gv = prob.gradient(state.beta, state.v)
    return np.asarray(gb, dtype=float), np.asarray(gv, dtype=float)


def hess_h(model, state: ParamState) -> HessianBlocks:
    """Negated Hessian blocks; for GLM families X'WX, X'WZ and Z'WZ + P."""
    _check_state(model, state)
    prob = _Problem(model, state.dispersion)
    prob.check_null(state.v)
    return prob.derivatives(state.beta, state.v)[2]


# ---------------------------------------------------------------------------
# modes
# ---------------------------------------------------------------------------


def _v_newton(prob: _Problem, beta, v0, **kw) -> NewtonResult:
    beta = np.asarray(beta, dtype=float)

    def f(c):
        return prob.value(beta, prob.to_v(c))

    def step(c):
        _, gv, blocks = prob.derivatives(beta, prob.to_v(c))
        gc, _, hc = prob.reduce(gv, blocks)
        try:
            d = linalg.cho_solve(linalg.cho_factor(hc, lower=True), gc)
        except linalg.LinAlgError:
            d = cholesky_direction(gc, hc)
        return gc, d

    return newton_maximize(f, step, prob.to_c(np.asarray(v0, dtype=float)), **kw)


def v_mode(model, beta, dispersion, v0=None, **kw):
    """Maximize h over v at fixed beta and dispersion."""
    prob = _Problem(model, dispersion)
    v0 = np.zeros(prob.k) if v0 is None else v0
    res = _v_newton(prob, beta, v0, **kw)
    return np.asarray(prob.to_v(res.x), dtype=float)


def _joint_newton(prob: _Problem, beta0, v0, **kw) -> NewtonResult:
    p = prob.p

    def split(x):
        return x[:p], prob.to_v(x[p:])

    def f(x):
        b, v = split(x)
        return prob.value(b, v)

    def step(x):
        b, v = split(x)
        gb, gv, blocks = prob.derivatives(b, v)
        gc, hbc, hc = prob.reduce(gv, blocks)
        fac = BlockFactor(blocks.h_bb, hbc, hc)
        db, dc = fac.solve(gb, gc)
        return np.concatenate([gb, gc]), np.concatenate([db, dc])

    x0 = np.concatenate([np.asarray(beta0, dtype=float), prob.to_c(np.asarray(v0, dtype=float))])
    return newton_maximize(f, step, x0, **kw)


def initial_beta(model):
    return glm_fit(model) if isinstance(model, ModelSpec) else np.asarray(model.init_beta(), dtype=float)


def joint_mode(model, dispersion, init: ParamState = None, full_output=False, **kw):
    """Joint maximizer of h in (beta, v) at fixed dispersion.

    Starts from ``init`` or from a fixed-effect GLM fit with v = 0.
    With ``full_output`` returns ``(state, NewtonResult)``.
    """
    prob = _Problem(model, dispersion)
    if init is None:
        beta0, v0 = initial_beta(model), np.zeros(prob.k)
    else:
        beta0, v0 = init.beta, init.v
    res = _joint_newton(prob, beta0, v0, **kw)
    state = ParamState(res.x[: prob.p], prob.to_v(res.x[prob.p:]), prob.dispersion)
    return (state, res) if full_output else state


def glm_fit(model: ModelSpec, max_iter=100, tol=1e-12):
    """Fixed-effect GLM fit ignoring the random effects (Newton/IRLS)."""
    X = model.designs.X
    if model.p == 0:
        return np.zeros(0)
    y, m = model.y, model.trials
    kind = model.family.kind
    if kind == "normal":
        beta, *_ = np.linalg.lstsq(X, y - model.offset, rcond=None)
        return beta
    if kind == "poisson":
        eta0 = np.log(y + 0.5)
    else:
        eta0 = np.log((y + 0.5) / (m - y + 0.5))
    beta, *_ = np.linalg.lstsq(X, eta0 - model.offset, rcond=None)

    def loglik(b):
        eta, _ = linear_predictor(model, b, np.zeros(model.k))
        return _loglik_terms(model, eta, 1.0)[0].sum()

    def step(b):
        eta, _ = linear_predictor(model, b, np.zeros(model.k))
        _, s, w = _loglik_terms(model, eta, 1.0)
        g = X.T @ s
        return g, cholesky_direction(g, (X.T * w) @ X)

    try:
        return newton_maximize(loglik, step, beta, tol_grad=1e-10, tol_rel=tol,
                               max_iter=max_iter).x
    except ConvergenceError as exc:
        # separation or extreme data; the mode search starts from the last iterate anyway
        return np.asarray(exc.state, dtype=float)
