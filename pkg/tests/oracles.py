"""Independent reference solvers used only by the tests."""

import numpy as np
from numba import njit


def condensed(A, B, x0, T, d=None):
    """Stacked states ``X = c + G u`` over stages ``0..T``."""
    n, m = B.shape
    d = np.zeros((T, n)) if d is None else np.asarray(d, dtype=float)
    c = np.zeros((T + 1) * n)
    G = np.zeros(((T + 1) * n, T * m))
    c[:n] = x0
    for k in range(T):
        c[(k + 1) * n:(k + 2) * n] = A @ c[k * n:(k + 1) * n] + d[k]
        G[(k + 1) * n:(k + 2) * n] = A @ G[k * n:(k + 1) * n]
        G[(k + 1) * n:(k + 2) * n, k * m:(k + 1) * m] += B
    return c, G


def box_qp(Q, q, lo, hi, iters=200):
    """Semismooth Newton on ``u = clip(u - (Qu + q))`` for a box-constrained QP."""
    lo = np.broadcast_to(lo, q.shape)
    hi = np.broadcast_to(hi, q.shape)
    u = np.clip(np.linalg.solve(Q, -q), lo, hi)
    prev = None
    for _ in range(iters):
        y = u - (Q @ u + q)
        act_lo, act_hi = y <= lo, y >= hi
        key = (act_lo.tobytes(), act_hi.tobytes())
        if key == prev:
            break
        prev = key
        free = ~(act_lo | act_hi)
        u = np.where(act_lo, lo, np.where(act_hi, hi, 0.0))
        if free.any():
            rhs = -q[free] - Q[np.ix_(free, ~free)] @ u[~free]
            u[free] = np.linalg.solve(Q[np.ix_(free, free)], rhs)
    return u


@njit(cache=True)
def pgd_scalar(a, b, x0, q, r, p, lo, hi, T, iters, step):
    """Projected gradient on ``sum_k q x_k^2 + r u_k^2 + p x_T^2`` for ``x+ = a x + b u``.

    Returns the objective value at the last iterate.
    """
    u = np.zeros(T)
    x = np.zeros(T + 1)
    lam = np.zeros(T + 1)
    for _ in range(iters):
        x[0] = x0
        for k in range(T):
            x[k + 1] = a * x[k] + b * u[k]
        lam[T] = 2.0 * p * x[T]
        for k in range(T - 1, 0, -1):
            lam[k] = 2.0 * q * x[k] + a * lam[k + 1]
        for k in range(T):
            g = 2.0 * r * u[k] + b * lam[k + 1]
            v = u[k] - step * g
            u[k] = min(max(v, lo), hi)
    x[0] = x0
    for k in range(T):
        x[k + 1] = a * x[k] + b * u[k]
    f = p * x[T] ** 2
    for k in range(T):
        f += q * x[k] ** 2 + r * u[k] ** 2
    return f


def adjoint_scalar(a, q, p, x):
    """``nu_{T-1} = 2 p x_T``, ``nu_{k-1} = 2 q x_k + a nu_k``."""
    T = len(x) - 1
    nu = np.zeros(T)
    nu[T - 1] = 2.0 * p * x[T]
    for k in range(T - 1, 0, -1):
        nu[k - 1] = 2.0 * q * x[k] + a * nu[k]
    return nu
