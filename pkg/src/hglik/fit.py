"""Outer estimation loop.

Three criteria, each estimating its own quantities: the h-likelihood for
v, the Laplace marginal p_v(h) for beta, and the restricted likelihood
p_{beta,v}(h) for the dispersion components. A cycle takes one Newton step
on the dispersion (log / logit / atanh scale, finite-difference
derivatives), one Newton step on beta, then recomputes v.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import _numdiff
from ._newton import cholesky_direction, newton_maximize
from .aphl import AphlValue, laplace_marginal, restricted_lik
from .errors import ConfigError, HglikError
from .hlik import BlockFactor, ParamState, _Problem, eval_h, glm_fit, joint_mode, v_mode
from .model import UNIT, VARIANCE, ModelSpec, linear_predictor

BOUNDARY_ZONE = 1e3


@dataclass(frozen=True)
class FitOptions:
    max_outer: int = 100
    tol_param: float = 1e-8
    tol_crit: float = 1e-10
    tol_stationary: float = 1e-6
    fd_step: float = 1e-5
    fd_hess_step: float = 1e-4
    grad_step: float = 1e-2
    boundary: float = 1e-8
    unit_boundary: float = 1e-5
    max_log_step: float = 3.0
    fixed: Mapping = field(default_factory=dict)
    init_dispersion: Mapping = field(default_factory=dict)

    def replace(self, **changes) -> "FitOptions":
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["fixed"] = dict(self.fixed)
        d["init_dispersion"] = dict(self.init_dispersion)
        return d


@dataclass
class FitResult:
    state: ParamState
    h_value: float
    marginal_aphl: float
    restricted_aphl: float
    se_beta: np.ndarray
    se_dispersion: dict
    iterations: int
    converged: bool
    boundary: tuple = ()
    trace: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    options: FitOptions = field(default_factory=FitOptions)

    def to_dict(self, model, decomp=None):
        st = self.state
        out = {
            "estimates": {
                "beta": dict(zip(model.beta_names, map(float, st.beta))),
                "dispersion": {k: float(v) for k, v in st.dispersion.items()},
            },
            "se": {
                "beta": dict(zip(model.beta_names, map(float, self.se_beta))),
                "dispersion": {k: float(v) for k, v in self.se_dispersion.items()},
            },
            "criteria": {
                "h": self.h_value,
                "marginal_aphl": self.marginal_aphl,
                "restricted_aphl": self.restricted_aphl,
            },
            "convergence": {
                "converged": bool(self.converged),
                "iterations": int(self.iterations),
                "boundary": list(self.boundary),
                **{k: v for k, v in self.diagnostics.items()},
            },
            "options": self.options.to_dict(),
        }
        if decomp is not None:
            out["random_effects"] = {
                "labels": list(model.effect_labels),
                "v_hat": [float(x) for x in st.v],
                "se_eb": [float(x) for x in np.sqrt(decomp.eb_var)],
                "se_hlik": [float(x) for x in np.sqrt(decomp.hlik_var)],
            }
        return out

    def to_json(self, model, decomp=None) -> str:
        return json.dumps(self.to_dict(model, decomp), indent=2, sort_keys=False)


# ---------------------------------------------------------------------------
# parameter transforms for dispersion components
# ---------------------------------------------------------------------------


def _domain(model, name):
    return model.domain(name) if isinstance(model, ModelSpec) else VARIANCE


def _to_s(kind, x):
    if kind == VARIANCE:
        return np.log(x)
    if kind == UNIT:
        return np.log(x) - np.log1p(-x)
    return np.arctanh(x)


def _from_s(kind, s):
    if kind == VARIANCE:
        return np.exp(s)
    if kind == UNIT:
        return 1.0 / (1.0 + np.exp(-s))
    return np.tanh(s)


def _ds(kind, x):
    """d x / d s at x."""
    if kind == VARIANCE:
        return x
    if kind == UNIT:
        return x * (1 - x)
    return 1 - x * x


def _pin(kind, x, options, zone=1.0):
    """Return the boundary value when x has crossed into the boundary layer.

    Variances stop at ``boundary``. Parameters in [0, 1) or (-1, 1) stop
    ``unit_boundary`` short of 1 in absolute value: the open end is
    (near-)intrinsic, where the intercept's curvature is O(1 - x), so pinning
    much closer to 1 leaves beta lost in rounding.
    """
    eps, delta = options.boundary * zone, options.unit_boundary
    if kind == VARIANCE:
        return options.boundary if x < eps else None
    if kind == UNIT:
        if x < eps:
            return 0.0
        return 1.0 - delta if x > 1 - delta * min(zone, 10.0) else None
    if abs(x) > 1 - delta * min(zone, 10.0):
        return float(np.sign(x) * (1.0 - delta))
    return None


def default_dispersion(model):
    if not isinstance(model, ModelSpec):
        return {}
    names = model.dispersion_names
    out = {}
    if model.family.free_dispersion:
        beta = glm_fit(model)
        r = model.y - model.designs.X @ beta - model.offset
        s2 = max(float(np.mean(r * r)), 1e-4)
        n_var = sum(1 for nm in names if model.domain(nm) == VARIANCE)
        var0 = s2 / max(n_var, 1)
    else:
        var0 = 0.5
    for nm in names:
        kind = model.domain(nm)
        out[nm] = var0 if kind == VARIANCE else 0.5
    return out


# ---------------------------------------------------------------------------
# beta: maximize the Laplace marginal
# ---------------------------------------------------------------------------


@dataclass
class MarginalMax:
    value: float
    state: ParamState
    aphl: AphlValue
    iterations: int
    converged: bool


class _MarginalObjective:
    """Laplace marginal as a function of a subset of beta, warm-started in v."""

    def __init__(self, model, beta0, dispersion, free, v0=None):
        self.model = model
        self.beta0 = np.array(beta0, dtype=float)
        self.disp = dict(dispersion)
        self.free = np.arange(model.p) if free is None else np.asarray(free, dtype=int)
        self.v = None if v0 is None else np.array(v0, dtype=float)
        self.last = None

    def beta(self, b):
        full = self.beta0.copy()
        full[self.free] = b
        return full

    def aphl(self, b):
        a = laplace_marginal(self.model, self.beta(b), self.disp, v0=self.v)
        self.v = a.nuisance_at_max
        self.last = a
        return a

    def __call__(self, b):
        try:
            return self.aphl(b).value
        except HglikError:
            return -np.inf


def _curvature(obj, b, step_h, f0=None):
    """Negated Hessian of the marginal in the free beta.

    Uses the Schur complement h_bb - h_bv h_vv^{-1} h_vb at the current v
    mode, which drops only the beta-dependence of the log-determinant term
    (exact for Gaussian models). Falls back to finite differences.
    """
    a = obj.aphl(b) if obj.last is None or not np.array_equal(obj.last.state.beta, obj.beta(b)) else obj.last
    try:
        prob = _Problem(obj.model, obj.disp)
        _, gv, blocks = prob.derivatives(a.state.beta, a.state.v)
        _, hbc, hc = prob.reduce(gv, blocks)
        S = BlockFactor(blocks.h_bb, hbc, hc).schur[np.ix_(obj.free, obj.free)]
        np.linalg.cholesky(S)
        return S
    except (HglikError, np.linalg.LinAlgError):
        return -_numdiff.hessian(obj, b, step_h, f0=f0)


def _marginal_step(obj, step_g, step_h):
    def step(b):
        negH = _curvature(obj, b, step_h)
        g = _numdiff.richardson_gradient(obj, b, step_g)
        return g, cholesky_direction(g, negH)
    return step


def _beta_step(obj, beta, options):
    """One Armijo-damped Newton step; returns (beta, value_before, value_after)."""
    f0 = obj(beta)
    v0 = obj.v
    if beta.size == 0:
        return beta, f0, f0
    negH = _curvature(obj, beta, options.fd_hess_step, f0=f0)
    obj.v = v0
    g = _numdiff.richardson_gradient(obj, beta, options.grad_step)
    d = cholesky_direction(g, negH)
    gain = float(g @ d)
    t = 1.0
    for _ in range(31):
        cand = beta + t * d
        # warm starts from a rejected, far-away candidate can be useless
        obj.v = v0
        fc = obj(cand)
        if np.isfinite(fc) and fc >= f0 + 1e-4 * t * gain - 1e-13 * max(1.0, abs(f0)):
            return cand, f0, fc
        t *= 0.5
    obj.v = v0
    obj(beta)
    return beta, f0, f0


def maximize_marginal(model, beta0, dispersion, free=None, v0=None, max_iter=100,
                      options: FitOptions = None) -> MarginalMax:
    """Maximize p_v(h) over the ``free`` fixed effects at fixed dispersion."""
    options = options or FitOptions()
    obj = _MarginalObjective(model, beta0, dispersion, free, v0)
    b0 = obj.beta0[obj.free]
    if b0.size == 0:
        a = obj.aphl(b0)
        return MarginalMax(a.value, a.state, a, 0, True)
    f0 = obj(b0)
    tol = max(1e-8, 1e-12 * abs(f0))
    res = newton_maximize(obj, _marginal_step(obj, options.grad_step, options.fd_hess_step), b0,
                          tol_grad=tol, max_iter=max_iter, raise_on_fail=False)
    a = obj.aphl(res.x)
    return MarginalMax(a.value, a.state, a, res.iterations, res.converged)


# ---------------------------------------------------------------------------
# the outer loop
# ---------------------------------------------------------------------------


class _Restricted:
    """Restricted likelihood over the free dispersion components (transformed)."""

    def __init__(self, model, names, base_disp, state):
        self.model = model
        self.names = list(names)
        self.kinds = [_domain(model, n) for n in names]
        self.base = dict(base_disp)
        self.state = state

    def disp(self, s):
        d = dict(self.base)
        for n, kind, si in zip(self.names, self.kinds, s):
            d[n] = float(_from_s(kind, si))
        return d

    def s_of(self, disp):
        return np.array([_to_s(kind, disp[n]) for n, kind in zip(self.names, self.kinds)])

    def eval(self, disp):
        a = restricted_lik(self.model, disp, init=self.state)
        self.state = a.state
        return a

    def __call__(self, s):
        try:
            return self.eval(self.disp(s)).value
        except (HglikError, ValueError, FloatingPointError):
            return -np.inf


def fit(model, options: FitOptions = None, init: ParamState = None) -> FitResult:
    """Estimate (beta, v, dispersion) by the three-criterion scheme."""
    options = options or FitOptions()
    names = tuple(model.dispersion_names)
    fixed = dict(getattr(getattr(model, "random", None), "fixed", {}) or {})
    fixed.update(options.fixed)
    unknown = set(fixed) - set(names)
    if unknown:
        raise ConfigError(f"cannot fix unknown dispersion components {sorted(unknown)}")
    n_obs = getattr(model, "n", None)
    if n_obs is not None and n_obs < model.p + len(set(names) - set(fixed)):
        raise ConfigError("need at least p + (number of dispersion components) observations")

    disp = default_dispersion(model)
    if init is not None:
        disp.update(init.dispersion)
    disp.update(options.init_dispersion)
    disp.update(fixed)
    pinned = {}
    for n in names:
        if n not in fixed:
            b = _pin(_domain(model, n), disp[n], options)
            if b is not None:
                disp[n] = b
                pinned[n] = b

    if init is not None and np.size(init.beta) == model.p and np.size(init.v) == model.k:
        # a warm start keeps its beta: the marginal maximizer is not the joint h mode
        beta0 = np.asarray(init.beta, dtype=float)
        state = ParamState(beta0, v_mode(model, beta0, disp, v0=np.asarray(init.v, dtype=float)), disp)
    else:
        state = joint_mode(model, disp, init=init)
    trace = []
    converged = False
    restricted_prev = marginal_prev = None
    cycle = 0
    for cycle in range(1, options.max_outer + 1):
        old = np.concatenate([state.beta, [disp[n] for n in names]])
        free = [n for n in names if n not in fixed and n not in pinned]
        # (1) dispersion: one damped Newton step on the restricted likelihood
        rest = _Restricted(model, free, disp, state)
        if free:
            s0 = rest.s_of(disp)
            r0 = rest(s0)
            g = _numdiff.richardson_gradient(rest, s0, options.grad_step)
            H = _numdiff.hessian(rest, s0, options.fd_hess_step, f0=r0)
            d = cholesky_direction(g, -H)
            big = np.max(np.abs(d))
            if big > options.max_log_step:
                d *= options.max_log_step / big
            t, r_new = 1.0, r0
            for _ in range(31):
                cand = s0 + t * d
                cdisp = rest.disp(cand)
                hit = {n: _pin(_domain(model, n), cdisp[n], options) for n in free}
                hit = {n: b for n, b in hit.items() if b is not None}
                cdisp.update(hit)
                try:
                    rc = rest.eval(cdisp).value
                except (HglikError, ValueError):
                    rc = -np.inf
                if np.isfinite(rc) and rc >= r0 + 1e-4 * t * float(g @ d) - 1e-12 * max(1, abs(r0)):
                    r_new = rc
                    disp = cdisp
                    pinned.update(hit)
                    break
                t *= 0.5
            # close to a bound the criterion is too flat for Newton to finish the approach
            for i, n in enumerate(free):
                b = _pin(_domain(model, n), disp[n], options, BOUNDARY_ZONE)
                if b is None or n in pinned or g[i] * (b - disp[n]) <= 0:
                    continue
                cdisp = dict(disp)
                cdisp[n] = b
                try:
                    rc = rest.eval(cdisp).value
                except (HglikError, ValueError):
                    continue
                if rc >= r_new - 1e-10 * max(1.0, abs(r_new)):
                    disp, r_new = cdisp, rc
                    pinned[n] = b
            restricted_val = r_new
        else:
            restricted_val = rest.eval(disp).value
        # (2) beta: one Newton step on the Laplace marginal at the new dispersion
        obj = _MarginalObjective(model, state.beta, disp, None, state.v)
        beta, marg_before, marginal_val = _beta_step(obj, state.beta, options)
        state = ParamState(beta, obj.v, disp)
        new = np.concatenate([state.beta, [disp[n] for n in names]])
        dpar = float(np.max(np.abs(new - old) / np.maximum(1.0, np.abs(old)), initial=0.0))
        # each criterion's change across its own step
        dcrit = (np.inf if restricted_prev is None else
                 abs(restricted_val - restricted_prev) + abs(marginal_val - marg_before))
        trace.append({
            "cycle": cycle,
            "restricted_aphl": restricted_val,
            "marginal_before_beta_step": marg_before,
            "marginal_aphl": marginal_val,
            "max_rel_change": dpar,
            "beta": [float(b) for b in state.beta],
            "dispersion": dict(disp),
        })
        restricted_prev, marginal_prev = restricted_val, marginal_val
        if dpar < options.tol_param and dcrit < options.tol_crit:
            converged = True
            break

    return _finalize(model, state, disp, names, fixed, pinned, converged, cycle, trace, options)


def _finalize(model, state, disp, names, fixed, pinned, loop_converged, cycles, trace, options):
    marg = laplace_marginal(model, state.beta, disp, v0=state.v)
    state = marg.state
    h = eval_h(model, state)
    rest = restricted_lik(model, disp, init=state)

    obj = _MarginalObjective(model, state.beta, disp, None, state.v)
    if model.p:
        grad_b = _numdiff.richardson_gradient(obj, state.beta, options.grad_step)
        try:
            H = _numdiff.richardson_hessian(obj, state.beta, step=1e-2, levels=3)
            cov = np.linalg.inv(-H)
            se_beta = np.sqrt(np.where(np.diag(cov) > 0, np.diag(cov), np.nan))
        except np.linalg.LinAlgError:
            se_beta = np.full(model.p, np.nan)
    else:
        grad_b = np.zeros(0)
        se_beta = np.zeros(0)

    free = [n for n in names if n not in fixed and n not in pinned]
    se_disp = {}
    grad_s = np.zeros(0)
    if free:
        r = _Restricted(model, free, disp, state)
        s = r.s_of(disp)
        grad_s = _numdiff.richardson_gradient(r, s, options.grad_step)
        Hs = _numdiff.hessian(r, s, options.fd_hess_step)
        try:
            cov_s = np.linalg.inv(-Hs)
            for i, n in enumerate(free):
                if cov_s[i, i] > 0:
                    se_disp[n] = float(_ds(_domain(model, n), disp[n]) * np.sqrt(cov_s[i, i]))
        except np.linalg.LinAlgError:
            pass

    gb = float(np.max(np.abs(grad_b), initial=0.0))
    gs = float(np.max(np.abs(grad_s), initial=0.0))
    stationary = gb < options.tol_stationary and gs < options.tol_stationary
    n_clamped = 0
    if isinstance(model, ModelSpec):
        n_clamped = linear_predictor(model, state.beta, state.v)[1]
    diagnostics = {
        "marginal_grad_norm": gb,
        "restricted_grad_norm": gs,
        "clamped_rows": int(n_clamped),
    }
    return FitResult(
        state=state, h_value=h, marginal_aphl=marg.value, restricted_aphl=rest.value,
        se_beta=se_beta, se_dispersion=se_disp, iterations=cycles,
        converged=bool(loop_converged and stationary), boundary=tuple(sorted(pinned)),
        trace=trace, diagnostics=diagnostics, options=options,
    )
