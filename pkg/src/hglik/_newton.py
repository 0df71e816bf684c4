"""Damped Newton ascent with Armijo backtracking, shared by every inner solve."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, DomainError, EvaluationError

EPS = np.finfo(float).eps
NOISE = 1e-10


@dataclass
class NewtonResult:
    x: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def newton_maximize(f, step, x0, tol_grad=1e-8, tol_rel=1e-12, max_iter=200,
                    max_halvings=30, shrink=0.5, armijo=1e-4, polish=True, raise_on_fail=True):
    """Maximize ``f`` from ``x0``.

    ``step(x)`` returns ``(g, d)``: the gradient and an ascent direction
    (normally the Newton direction solving -H d = g). Convergence needs the
    gradient sup-norm below ``tol_grad`` and the predicted gain of the next
    Newton step, g.d/2, below ``tol_rel`` relative to |f|. The converged
    point then gets up to three guarded polishing steps, which push the
    stationarity residual down to rounding level; callers that
    finite-difference the optimum rely on this. Trial points outside the
    domain of ``f`` count as rejected steps.
    """
    f0 = f

    def f(z):
        try:
            return f0(z)
        except (DomainError, EvaluationError):
            return -np.inf

    x = np.array(x0, dtype=float)
    fx = float(f(x))
    if not np.isfinite(fx):
        raise ConvergenceError("objective is not finite at the starting point", x, np.inf)
    trace = [fx]
    gn = np.inf
    for it in range(max_iter + 1):
        g, d = step(x)
        gn = float(np.max(np.abs(g), initial=0.0))
        gain = float(g @ d)
        scale = max(1.0, abs(fx))
        if gn < tol_grad and 0.5 * gain <= tol_rel * scale:
            for _ in range(3 if polish else 0):
                if not (d.size and np.all(np.isfinite(d))):
                    break
                xp = x + d
                fp = float(f(xp))
                if not (np.isfinite(fp) and fp >= fx - NOISE * scale):
                    break
                gp, dp = step(xp)
                gpn = float(np.max(np.abs(gp), initial=0.0))
                if gpn > gn:
                    break
                x, fx, gn, d = xp, fp, gpn, dp
                if gn <= 1e3 * EPS * scale:
                    break
            return NewtonResult(x, fx, gn, it, True, trace)
        if it == max_iter:
            break
        t = 1.0
        accepted = False
        if 0.5 * gain <= NOISE * scale:
            # f cannot resolve the predicted gain; judge the full step by the gradient
            xn = x + d
            fn = float(f(xn))
            if np.isfinite(fn) and fn >= fx - NOISE * scale:
                gnew, _ = step(xn)
                if np.max(np.abs(gnew), initial=0.0) < gn:
                    x, fx = xn, fn
                    trace.append(fx)
                    continue
        for _ in range(max_halvings + 1):
            xn = x + t * d
            fn = float(f(xn))
            if np.isfinite(fn) and fn >= fx + armijo * t * gain - 8 * EPS * scale:
                accepted = True
                break
            t *= shrink
        if not accepted:
            if gn < tol_grad:
                # rounding floor reached before the gain test could pass
                return NewtonResult(x, fx, gn, it, True, trace)
            if raise_on_fail:
                raise ConvergenceError("line search failed", x, gn)
            return NewtonResult(x, fx, gn, it, False, trace)
        x, fx = xn, fn
        trace.append(fx)
    if raise_on_fail:
        raise ConvergenceError(f"no convergence after {max_iter} iterations", x, gn)
    return NewtonResult(x, fx, gn, max_iter, False, trace)


def cholesky_direction(g, neg_hess):
    """Newton direction from a negated Hessian; gradient step if not PD."""
    try:
        c = np.linalg.cholesky(neg_hess)
    except np.linalg.LinAlgError:
        # ridge until positive definite; keeps the direction an ascent one
        ev = np.linalg.eigvalsh(neg_hess)
        ridge = abs(ev.min()) + 1e-6 * max(1.0, abs(ev).max())
        c = np.linalg.cholesky(neg_hess + ridge * np.eye(len(g)))
    y = np.linalg.solve(c, g)
    return np.linalg.solve(c.T, y)
