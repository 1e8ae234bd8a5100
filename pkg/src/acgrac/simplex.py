"""Dense two-phase revised simplex with Bland's rule.

Solves  min c.x  s.t.  A x = b, x >= 0  for desk-scale systems.  Bland's
smallest-index entering rule makes the iteration deterministic and cycle
free; phase-1 artificials that stay basic at zero are tolerated (the
constraint systems here are rank deficient by construction).
"""

from __future__ import annotations

import numpy as np


class SimplexError(RuntimeError):
    pass


def solve_lp(c, A, b, max_iter=50000, tol=1e-11):
    """Returns (x, fun).  Raises SimplexError if infeasible or unbounded."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).copy()
    c = np.asarray(c, dtype=float)
    m, n = A.shape
    A = A.copy()
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0

    # phase 1: artificial basis
    T = np.hstack([A, np.eye(m)])
    cost1 = np.concatenate([np.zeros(n), np.ones(m)])
    basis = list(range(n, n + m))
    x, basis = _iterate(T, b, cost1, basis, max_iter, tol, allowed=n + m)
    if x[n:].sum() > 1e-8:
        raise SimplexError("LP infeasible")

    # phase 2: original costs, artificials blocked from entering
    cost2 = np.concatenate([c, np.full(m, 0.0)])
    x, basis = _iterate(T, b, cost2, basis, max_iter, tol, allowed=n)
    return x[:n], float(c @ x[:n])


def _iterate(T, b, cost, basis, max_iter, tol, allowed):
    m = T.shape[0]
    for _ in range(max_iter):
        B = T[:, basis]
        try:
            xb = np.linalg.solve(B, b)
            y = np.linalg.solve(B.T, cost[basis])
        except np.linalg.LinAlgError as e:  # pragma: no cover
            raise SimplexError(f"singular basis: {e}")
        red = cost[:allowed] - y @ T[:, :allowed]
        entering = -1
        for j in range(allowed):
            if j not in basis and red[j] < -tol:
                entering = j
                break
        if entering < 0:
            x = np.zeros(T.shape[1])
            x[basis] = xb
            return x, basis
        d = np.linalg.solve(B, T[:, entering])
        pos = d > tol
        if not np.any(pos):
            raise SimplexError("LP unbounded")
        ratios = np.full(m, np.inf)
        ratios[pos] = xb[pos] / d[pos]
        rmin = ratios.min()
        # Bland: leave the smallest basic index among the ties
        leave = min(
            (basis[i], i) for i in range(m) if pos[i] and ratios[i] <= rmin + tol
        )[1]
        basis[leave] = entering
    raise SimplexError("simplex iteration limit exceeded")


def minimize_l1(A, b, max_iter=50000):
    """min sum |x| s.t. A x = b via the split x = x+ - x-, both >= 0."""
    A = np.asarray(A, dtype=float)
    n = A.shape[1]
    T = np.hstack([A, -A])
    c = np.ones(2 * n)
    z, fun = solve_lp(c, T, b, max_iter=max_iter)
    return z[:n] - z[n:], fun
