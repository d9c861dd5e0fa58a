"""Central finite differences and the delta method."""

from __future__ import annotations

import numpy as np


def fd_steps(x, rel: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return rel * np.maximum(1.0, np.abs(x))


def jacobian(func, x, rel: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector (or scalar) function."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(np.asarray(func(x), dtype=float))
    J = np.zeros((f0.size, x.size))
    h = fd_steps(x, rel)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h[i]
        fp = np.atleast_1d(np.asarray(func(x + e), dtype=float))
        fm = np.atleast_1d(np.asarray(func(x - e), dtype=float))
        J[:, i] = (fp - fm) / (2.0 * h[i])
    return J


def delta_se(func, x, vcov, rel: float = 1e-6):
    """Estimates and first-order standard errors of ``func`` at ``x``.

    Returns ``(estimate, se, jacobian)``; ``se`` entries are NaN where the
    function does not depend on ``x`` at all (fixed quantities).
    """
    est = np.atleast_1d(np.asarray(func(np.asarray(x, dtype=float)), dtype=float))
    if np.size(x) == 0:
        return est, np.full(est.shape, np.nan), np.zeros((est.size, 0))
    J = jacobian(func, x, rel)
    var = np.einsum("ij,jk,ik->i", J, vcov, J)
    se = np.sqrt(np.maximum(var, 0.0))
    se[np.all(J == 0.0, axis=1)] = np.nan
    return est, se, J
