"""Adjusted profile h-likelihoods.

``p_alpha(l; psi) = [l - 1/2 log det{D(l, alpha) / (2 pi)}]`` evaluated at the
inner maximizer alpha~ of l, where D is the negated Hessian in alpha. The
Laplace marginal eliminates v, the restricted likelihood eliminates
(beta, v), and the random-effect profile eliminates (beta, v_{-i}).
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.integrate import trapezoid

from . import _numdiff
from ._newton import cholesky_direction, newton_maximize
from .errors import ConvergenceError, CurvatureError, HglikError, NumericalError
from .hlik import LOG2PI, BlockFactor, ParamState, _joint_newton, _Problem, _v_newton, initial_beta


@dataclass(frozen=True)
class AphlValue:
    """APHL value; ``value == profiled_max - logdet_adjust`` exactly.

    ``logdet_adjust`` is 1/2 log det(D / 2 pi) at the inner maximizer.
    """

    value: float
    logdet_adjust: float
    profiled_max: float
    nuisance_at_max: np.ndarray
    converged: bool = True
    state: Optional[ParamState] = None


def _half_logdet_2pi(logdet, dim):
    return 0.5 * (logdet - dim * LOG2PI)


def _chol_logdet(D):
    try:
        c = linalg.cho_factor(D, lower=True)
    except linalg.LinAlgError:
        raise CurvatureError("curvature matrix is not positive definite; "
                             "the Laplace adjustment is undefined") from None
    d = np.diag(c[0])
    if d.size and (d.min() / d.max()) ** 2 < 1e-14:
        raise CurvatureError("curvature matrix is numerically singular; "
                             "the Laplace adjustment is undefined")
    return 2.0 * float(np.sum(np.log(d)))


def _compose(lmax, logdet, dim, alpha, converged=True, state=None):
    adj = _half_logdet_2pi(logdet, dim)
    return AphlValue(lmax - adj, adj, lmax, np.asarray(alpha, dtype=float), converged, state)


def adjust_profile(objective, psi, alpha_init, gradient=None, hessian=None, tol_grad=1e-8):
    """Generic APHL of ``objective(alpha, psi)`` over ``alpha``.

    ``gradient``/``hessian`` (same signature, Hessian not negated) default
    to central finite differences.
    """
    alpha0 = np.atleast_1d(np.asarray(alpha_init, dtype=float))

    def f(a):
        return float(objective(a, psi))

    def grad(a):
        return (np.asarray(gradient(a, psi), dtype=float) if gradient
                else _numdiff.richardson_gradient(f, a, step=1e-3, levels=2))

    def hess(a):
        return (np.asarray(hessian(a, psi), dtype=float) if hessian
                else _numdiff.richardson_hessian(f, a, step=1e-2, levels=3))

    def step(a):
        g = grad(a)
        return g, cholesky_direction(g, -np.atleast_2d(hess(a)))

    res = newton_maximize(f, step, alpha0, tol_grad=tol_grad)
    D = -np.atleast_2d(hess(res.x))
    return _compose(res.value, _chol_logdet(D), D.shape[0], res.x, res.converged)


def laplace_marginal(model, beta, dispersion, v0=None) -> AphlValue:
    """p_v(h): Laplace approximation to the marginal log-likelihood."""
    prob = _Problem(model, dispersion)
    beta = np.asarray(beta, dtype=float)
    v0 = np.zeros(prob.k) if v0 is None else v0
    res = _v_newton(prob, beta, v0)
    v = prob.to_v(res.x)
    _, gv, blocks = prob.derivatives(beta, v)
    _, _, hc = prob.reduce(gv, blocks)
    if prob.glm:
        try:
            linalg.cholesky(hc, lower=True)
        except linalg.LinAlgError:
            raise CurvatureError("h_vv is not positive definite", block="h_vv") from None
        logdet = prob.sqrt_logdet(beta, v, with_beta=False)
    else:
        logdet = _chol_logdet(hc)
    return _compose(res.value, logdet, hc.shape[0], v, res.converged,
                    ParamState(beta, v, prob.dispersion))


def restricted_lik(model, dispersion, init: ParamState = None) -> AphlValue:
    """p_{beta,v}(h): adjusted profile eliminating fixed and random effects."""
    prob = _Problem(model, dispersion)
    if init is None:
        beta0, v0 = initial_beta(model), np.zeros(prob.k)
    else:
        beta0, v0 = init.beta, init.v
    res = _joint_newton(prob, beta0, v0)
    beta, v = res.x[: prob.p], prob.to_v(res.x[prob.p:])
    _, gv, blocks = prob.derivatives(beta, v)
    _, hbc, hc = prob.reduce(gv, blocks)
    try:
        fac = BlockFactor(blocks.h_bb, hbc, hc)
        logdet = prob.sqrt_logdet(beta, v) if prob.glm else fac.logdet()
    except (NumericalError, linalg.LinAlgError) as exc:
        raise CurvatureError(str(exc), block=getattr(exc, "block", "h_vv")) from None
    return _compose(res.value, logdet, prob.p + prob.kc, np.concatenate([beta, v]),
                    res.converged, ParamState(beta, v, prob.dispersion))


# ---------------------------------------------------------------------------
# profile curves
# ---------------------------------------------------------------------------


@dataclass
class ProfileCurve:
    param_name: str
    grid: np.ndarray
    values: np.ndarray
    nuisance_trace: np.ndarray
    converged: np.ndarray
    nuisance_names: tuple = ()
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.converged = np.asarray(self.converged, dtype=bool)
        if self.grid.ndim != 1 or np.any(np.diff(self.grid) <= 0):
            raise ValueError("profile grid must be strictly increasing")
        if self.values.shape != self.grid.shape:
            raise ValueError("values and grid differ in length")
        if not np.all(np.isfinite(self.values[self.converged])):
            raise ValueError("converged profile points must be finite")

    def density(self):
        """exp(values) normalized by trapezoid integration over converged points."""
        g, val = self.grid[self.converged], self.values[self.converged]
        w = np.exp(val - val.max())
        return g, w / trapezoid(w, g)

    def moments(self):
        g, d = self.density()
        mean = trapezoid(g * d, g)
        return mean, trapezoid((g - mean) ** 2 * d, g)

    def quadratic_fit(self):
        """Least-squares quadratic in the grid value: (center, variance, R^2)."""
        g, val = self.grid[self.converged], self.values[self.converged]
        c2, c1, c0 = np.polyfit(g, val, 2)
        fitted = np.polyval([c2, c1, c0], g)
        ss_tot = np.sum((val - val.mean()) ** 2)
        r2 = 1.0 - np.sum((val - fitted) ** 2) / ss_tot if ss_tot > 0 else 1.0
        return -c1 / (2 * c2), -1.0 / (2 * c2), r2

    def argmax(self):
        idx = np.flatnonzero(self.converged)
        return self.grid[idx[np.argmax(self.values[idx])]]

    def to_csv(self, fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["param_value", "aphl_value", "converged", *self.nuisance_names])
        for i in range(self.grid.size):
            nz = self.nuisance_trace[i] if self.nuisance_trace.size else []
            writer.writerow([_fmt(self.grid[i]), _fmt(self.values[i]), int(self.converged[i]),
                             *(_fmt(x) for x in nz)])


def _fmt(x):
    return "%.17g" % x


def _run_grid(fn, grid, n_jobs):
    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            return list(ex.map(fn, grid))
    return [fn(t) for t in grid]


def _safe(fn, width):
    def run(t):
        try:
            value, nuis = fn(t)
            return value, np.asarray(nuis, dtype=float), np.isfinite(value)
        except HglikError:
            return np.nan, np.full(width, np.nan), False
    return run


def re_profile(model, fit_result, index: int, grid, n_jobs=1) -> ProfileCurve:
    """p_{v_-i, beta}(h; v_i) with dispersion held at its fitted value.

    Eliminates beta and every other random effect by the Laplace
    adjustment at each grid value of v_i (0-based ``index``).
    """
    disp = fit_result.state.dispersion
    prob = _Problem(model, disp)
    if prob.basis is not None:
        raise NotImplementedError("random-effect profiles need a full-rank precision")
    p, k = prob.p, prob.k
    if not 0 <= index < k:
        raise IndexError(f"effect index {index} outside 0..{k - 1}")
    keep = np.array([j for j in range(p + k) if j != p + index], dtype=int)
    x_fit = np.concatenate([fit_result.state.beta, fit_result.state.v])

    def full(xr, t):
        x = np.empty(p + k)
        x[keep] = xr
        x[p + index] = t
        return x

    def point(t):
        def f(xr):
            x = full(xr, t)
            return prob.value(x[:p], x[p:])

        def step(xr):
            x = full(xr, t)
            gb, gv, blocks = prob.derivatives(x[:p], x[p:])
            g = np.concatenate([gb, gv])[keep]
            H = blocks.full()[np.ix_(keep, keep)]
            return g, cholesky_direction(g, H)

        res = newton_maximize(f, step, x_fit[keep])
        x = full(res.x, t)
        _, _, blocks = prob.derivatives(x[:p], x[p:])
        D = blocks.full()[np.ix_(keep, keep)]
        if D.size == 0:
            return res.value, res.x
        return _compose(res.value, _chol_logdet(D), D.shape[0], res.x).value, res.x

    grid = np.asarray(grid, dtype=float)
    out = _run_grid(_safe(point, keep.size), grid, n_jobs)
    names = tuple(model.beta_names) + tuple(f"v{j + 1}" for j in range(k) if j != index)
    curve = ProfileCurve(f"v{index + 1}", grid, [o[0] for o in out],
                         np.array([o[1] for o in out]).reshape(grid.size, keep.size),
                         [o[2] for o in out], names)
    _check_mass(curve)
    return curve


def _check_mass(curve: ProfileCurve):
    """Flag grids that miss more than 1% of the Gaussian-approximate mass."""
    ok = curve.converged
    if ok.sum() < 3:
        curve.warnings.append("fewer than three converged grid points")
        return
    g, val = curve.grid[ok], curve.values[ok]
    top = int(np.argmax(val))
    lo, hi = max(0, top - 1), min(g.size, top + 2)
    if hi - lo < 3:
        lo, hi = (0, 3) if top == 0 else (g.size - 3, g.size)
    c2 = np.polyfit(g[lo:hi], val[lo:hi], 2)[0]
    if c2 >= 0:
        curve.warnings.append("grid too narrow: profile is not peaked inside the grid")
        return
    total = np.sqrt(np.pi / -c2)
    mass = trapezoid(np.exp(val - val.max()), g) / total
    if mass < 0.99:
        curve.warnings.append(f"grid too narrow: normalization mass {mass:.4f} < 0.99")


def default_grid(estimate, se, domain="real", n=41, width=4.0):
    """41 points spanning +-4 Wald standard errors (log scale for variances)."""
    if not (np.isfinite(se) and se > 0):
        raise ValueError("a default grid needs a finite positive standard error")
    if domain == "variance":
        r = width * se / estimate
        return estimate * np.exp(np.linspace(-r, r, n))
    lo, hi = estimate - width * se, estimate + width * se
    if domain == "unit":
        lo, hi = max(lo, 1e-6), min(hi, 1 - 1e-6)
    elif domain == "corr":
        lo, hi = max(lo, -1 + 1e-6), min(hi, 1 - 1e-6)
    return np.linspace(lo, hi, n)


def param_profile(model, param_name: str, grid=None, fit_result=None, options=None,
                  n_jobs=1) -> ProfileCurve:
    """Profile curve of one fixed effect or dispersion component.

    For a fixed effect: at each grid value the remaining fixed effects
    maximize the Laplace marginal with dispersion at its REML-type
    estimate, and the Laplace marginal is recorded. For a dispersion
    component: the remaining components are re-estimated and the
    restricted likelihood is recorded.
    """
    from .fit import FitOptions, fit, maximize_marginal

    options = options or FitOptions()
    if fit_result is None:
        fit_result = fit(model, options)
    state = fit_result.state
    beta_names = tuple(model.beta_names)
    disp_names = tuple(model.dispersion_names)
    if param_name in beta_names:
        j = beta_names.index(param_name)
        free = np.array([i for i in range(model.p) if i != j], dtype=int)
        if grid is None:
            grid = default_grid(state.beta[j], fit_result.se_beta[j])

        def point(t):
            beta0 = state.beta.copy()
            beta0[j] = t
            res = maximize_marginal(model, beta0, state.dispersion, free=free, v0=state.v)
            return res.value, res.state.beta[free]

        names = tuple(beta_names[i] for i in free)
    elif param_name in disp_names:
        others = tuple(n for n in disp_names if n != param_name)
        if grid is None:
            grid = default_grid(state.dispersion[param_name],
                                fit_result.se_dispersion.get(param_name, np.nan),
                                domain=model.domain(param_name))

        def point(t):
            fixed = dict(options.fixed)
            fixed[param_name] = float(t)
            r = fit(model, options.replace(fixed=fixed), init=state)
            if not r.converged:
                raise ConvergenceError("refit did not converge at this grid point")
            return r.restricted_aphl, [r.state.dispersion[n] for n in others] + list(r.state.beta)

        names = others + beta_names
    else:
        valid = ", ".join(beta_names + disp_names)
        raise KeyError(f"unknown parameter {param_name!r}; valid names: {valid}")
    grid = np.asarray(grid, dtype=float)
    out = _run_grid(_safe(point, len(names)), grid, n_jobs)
    return ProfileCurve(param_name, grid, [o[0] for o in out],
                        np.array([o[1] for o in out]).reshape(grid.size, len(names)),
                        [o[2] for o in out], names)
