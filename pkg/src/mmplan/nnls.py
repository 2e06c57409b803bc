"""Fast nonnegative least squares working on the normal equations.

Active-set method of Lawson and Hanson in the cross-product form of Bro and
de Jong: the routine only needs ``AtA`` and ``Atb``, so repeated solves with
a fixed design and changing targets share one Gram matrix.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from .errors import DimensionError, NumericalFailure


def _solve_passive(AtA, Atb, P):
    idx = np.flatnonzero(P)
    s = np.zeros(Atb.size)
    if idx.size == 0:
        return s
    G = AtA[np.ix_(idx, idx)]
    try:
        c = sla.cho_factor(G, check_finite=False)
        s[idx] = sla.cho_solve(c, Atb[idx], check_finite=False)
    except (np.linalg.LinAlgError, sla.LinAlgError):
        s[idx] = np.linalg.lstsq(G, Atb[idx], rcond=None)[0]
    return s


def fnnls(AtA, Atb, passive=None, tol=None, max_iter=None):
    """Solve ``min ||Ax - b||^2 s.t. x >= 0`` given ``AtA`` and ``Atb``.

    Parameters
    ----------
    AtA : ndarray, shape (n, n)
        Gram matrix ``A.T @ A``.
    Atb : ndarray, shape (n,)
        ``A.T @ b``.
    passive : array_like of bool, optional
        Initial guess of the positive set, e.g. from a previous solve with a
        nearby right-hand side. The result does not depend on it.
    tol : float, optional
        Dual-feasibility tolerance. Defaults to ``10 eps ||AtA||_1 n``.
    max_iter : int, optional
        Cap on passive-set changes; defaults to ``30 n``.

    Returns
    -------
    x : ndarray, shape (n,)
    """
    AtA = np.asarray(AtA, dtype=np.float64)
    Atb = np.asarray(Atb, dtype=np.float64)
    n = Atb.size
    if AtA.shape != (n, n):
        raise DimensionError(f"AtA must be {n}x{n}, got {AtA.shape}")
    if n == 0:
        return np.zeros(0)
    if tol is None:
        tol = 10 * np.finfo(float).eps * max(np.abs(AtA).sum(axis=0).max(), 1e-300) * n
    if max_iter is None:
        max_iter = 30 * n

    P = np.zeros(n, dtype=bool) if passive is None else np.array(passive, dtype=bool)
    x = np.zeros(n)
    it = 0
    # warm start: shrink the guessed set until its least-squares solution is positive
    while P.any():
        s = _solve_passive(AtA, Atb, P)
        neg = P & (s <= 0)
        if not neg.any():
            x = s
            break
        P &= ~neg
        it += 1

    w = Atb - AtA @ x
    while True:
        cand = ~P & (w > tol)
        if not cand.any():
            break
        j = np.flatnonzero(cand)[np.argmax(w[cand])]
        P[j] = True
        s = _solve_passive(AtA, Atb, P)
        while np.any(P & (s <= 0)):
            it += 1
            if it > max_iter:
                raise NumericalFailure("fnnls exceeded its iteration cap", iterations=it)
            mask = np.flatnonzero(P & (s <= 0))
            ratios = x[mask] / (x[mask] - s[mask])
            k = int(np.argmin(ratios))
            x = x + ratios[k] * (s - x)
            x[mask[k]] = 0.0
            P &= x > 1e-15 * np.abs(x).max(initial=0.0)
            x[~P] = 0.0
            s = _solve_passive(AtA, Atb, P)
        x = s
        x[~P] = 0.0
        w = Atb - AtA @ x
        it += 1
        if it > max_iter:
            raise NumericalFailure("fnnls exceeded its iteration cap", iterations=it)
    return x


def nnls(A, b, **kwargs):
    """Nonnegative least squares ``argmin_{x >= 0} ||Ax - b||``."""
    A = A.toarray() if hasattr(A, "toarray") else np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if A.ndim != 2 or b.shape != (A.shape[0],):
        raise DimensionError(f"A is {A.shape}, b is {b.shape}")
    return fnnls(A.T @ A, A.T @ b, **kwargs)


def kkt_residual(AtA, Atb, x):
    """Largest violation of the NNLS optimality conditions.

    Returns ``max(|grad_j| for x_j > 0, max(-grad_j, 0) for x_j == 0)`` where
    ``grad = AtA x - Atb``.
    """
    g = AtA @ x - Atb
    pos = x > 0
    r1 = np.abs(g[pos]).max(initial=0.0)
    r2 = np.maximum(-g[~pos], 0.0).max(initial=0.0)
    return max(r1, r2)
