"""Central finite differences, with optional Richardson extrapolation."""

import numpy as np


def _steps(x, step):
    return step * np.maximum(1.0, np.abs(x))


def gradient(f, x, step=1e-5):
    x = np.asarray(x, dtype=float)
    h = _steps(x, step)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h[i]
        g[i] = (f(x + e) - f(x - e)) / (2 * h[i])
    return g


def hessian(f, x, step=1e-4, f0=None):
    """Plain central-difference Hessian (O(h^2))."""
    x = np.asarray(x, dtype=float)
    n = x.size
    h = _steps(x, step)
    f0 = f(x) if f0 is None else f0
    H = np.empty((n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej)
                                 - f(x - ei + ej) + f(x - ei - ej)) / (4 * h[i] * h[j])
    return H


def richardson_hessian(f, x, step=1e-2, levels=3):
    """Central-difference Hessian extrapolated over halving steps to O(h^(2*levels))."""
    x = np.asarray(x, dtype=float)
    f0 = f(x)
    table = [hessian(f, x, step / 2 ** m, f0=f0) for m in range(levels)]
    for order in range(1, levels):
        fac = 4.0 ** order
        table = [(fac * table[m + 1] - table[m]) / (fac - 1) for m in range(len(table) - 1)]
    return table[0]


def richardson_gradient(f, x, step=1e-2, levels=3):
    x = np.asarray(x, dtype=float)
    table = [gradient(f, x, step / 2 ** m) for m in range(levels)]
    for order in range(1, levels):
        fac = 4.0 ** order
        table = [(fac * table[m + 1] - table[m]) / (fac - 1) for m in range(len(table) - 1)]
    return table[0]
