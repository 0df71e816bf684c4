"""Predictive distributions for a future count from an iid poisson sample."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp, xlogy
from scipy.stats import poisson

from .errors import DomainError

TAIL = 1e-10


@dataclass(frozen=True)
class PredictiveDist:
    support: np.ndarray
    mass: np.ndarray
    method: str
    truncation_mass: float

    @property
    def mean(self) -> float:
        return float(self.support @ self.mass)

    @property
    def var(self) -> float:
        return float(((self.support - self.mean) ** 2) @ self.mass)

    def tail(self, v) -> float:
        """P(V >= v) on the truncated support."""
        return float(self.mass[self.support >= v].sum())


def _counts(y):
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        raise DomainError("need at least one observed count")
    if np.any(y < 0) or np.any(y != np.round(y)) or not np.all(np.isfinite(y)):
        raise DomainError("observed counts must be nonnegative integers")
    return y


def _default_vmax(rate):
    m = int(poisson.isf(TAIL, rate))
    while poisson.sf(m, rate) >= TAIL:
        m += 1
    return m


def plugin_predictive(y, v_max=None) -> PredictiveDist:
    y = _counts(y)
    theta = float(y.mean())
    if v_max is None:
        v_max = _default_vmax(theta + 1.0)
    support = np.arange(v_max + 1, dtype=float)
    mass = poisson.pmf(support, theta)
    trunc = float(poisson.sf(v_max, theta))
    return PredictiveDist(support, mass / mass.sum(), "plugin", trunc)


def _profile_logw(s, n, v):
    th = (s + v) / (n + 1)
    return -(n + 1) * th + xlogy(s + v, th) - gammaln(v + 1)


def profile_predictive(y, v_max=None) -> PredictiveDist:
    """Normalized profile likelihood of the future count.

    Depends on y only through (sum, n), with theta_hat(v) = (sum(y) + v) / (n + 1).
    """
    y = _counts(y)
    s, n = float(y.sum()), y.size
    rule = _default_vmax(s / n + 1.0)
    # the profile tail is heavier than the plug-in one, so normalize over a long range
    top = max(2 * rule, 50)
    while True:
        lw = _profile_logw(s, n, np.arange(top + 1, dtype=float))
        if lw[-1] - logsumexp(lw) < np.log(1e-18):
            break
        top *= 2
    p = np.exp(lw - logsumexp(lw))
    if v_max is None:
        tails = np.cumsum(p[::-1])[::-1]
        beyond = np.append(tails[1:], 0.0)
        v_max = max(rule, int(np.argmax(beyond < TAIL)))
    v_max = int(v_max)
    trunc = float(p[v_max + 1:].sum()) if v_max < top else 0.0
    if v_max > top:
        lw = _profile_logw(s, n, np.arange(v_max + 1, dtype=float))
    else:
        lw = lw[:v_max + 1]
    mass = np.exp(lw - logsumexp(lw))
    return PredictiveDist(np.arange(v_max + 1, dtype=float), mass, "profile", trunc)


def tv_distance(a: PredictiveDist, b: PredictiveDist) -> float:
    m = int(max(a.support[-1], b.support[-1])) + 1
    pa, pb = np.zeros(m), np.zeros(m)
    pa[a.support.astype(int)] = a.mass
    pb[b.support.astype(int)] = b.mass
    return 0.5 * float(np.abs(pa - pb).sum())


def write_csv(fh, dists):
    """Columns v and <method>_mass for each distribution, on the union support."""
    m = int(max(d.support[-1] for d in dists)) + 1
    cols = []
    for d in dists:
        col = np.zeros(m)
        col[d.support.astype(int)] = d.mass
        cols.append(col)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["v", *(f"{d.method}_mass" for d in dists)])
    for i in range(m):
        w.writerow([i, *("%.17g" % c[i] for c in cols)])
