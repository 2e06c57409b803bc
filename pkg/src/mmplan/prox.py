"""Proximal step for the tumor block and projections onto BE constraint sets."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateConstraint, DegenerateProx, DomainError, NumericalFailure, UnboundedProx


def prox_neg_quadratic(y, B_diag, eta0):
    """Prox of ``-x.Bx`` with step ``eta0`` for diagonal ``B >= 0``.

    Minimizes ``-x.Bx + ||x - y||^2 / (2 eta0)``. The problem is bounded
    only when ``max(B) <= 1/(2 eta0)``; the minimizer is then
    ``y / (1 - 2 eta0 B)`` coordinatewise.

    Raises
    ------
    UnboundedProx
        If some ``B_jj > 1/(2 eta0)``.
    DegenerateProx
        If some ``B_jj == 1/(2 eta0)`` exactly, where the minimizer is not unique.
    """
    y = np.asarray(y, dtype=np.float64)
    B = np.asarray(B_diag, dtype=np.float64)
    if not eta0 > 0:
        raise DomainError(f"eta0 must be positive, got {eta0}")
    if B.shape != y.shape:
        raise DomainError(f"B has shape {B.shape}, y has {y.shape}")
    if B.size == 0:
        return y.copy()
    excess = B - 1.0 / (2.0 * eta0)
    if excess.max() > 0:
        j = int(np.argmax(excess))
        raise UnboundedProx(f"prox unbounded: B[{j}]={B[j]:.6g} exceeds 1/(2 eta0)={0.5 / eta0:.6g}",
                            eta0=eta0, index=j)
    denom = 1.0 - 2.0 * eta0 * B
    if np.any(denom <= 0):
        raise DegenerateProx("eta0 lies exactly on the prox threshold", eta0=eta0)
    return y / denom


def constraint_values(w, gamma, D, seg):
    """``gamma.w + w.D w`` per segment ``seg[i]:seg[i+1]``."""
    if len(seg) < 2:
        return np.zeros(0)
    return np.add.reduceat(gamma * w + D * w * w, seg[:-1])


def project_segments(v, gamma, D, seg, C, rtol=1e-13, max_iter=100):
    """Project each segment of ``v`` onto its set ``{w: gamma.w + w.Dw <= C}``.

    Segment ``i`` covers ``v[seg[i]:seg[i+1]]`` and has tolerance ``C[i]``.
    Coordinates with ``D > 0`` go through the completed-square change of
    variables ``z = gamma/(2 sqrt(D)) + sqrt(D) w``, turning the set into the
    ball ``||z||^2 <= K``; the multiplier ``lam >= 0`` solves
    ``||(Dh^2 + lam I)^-1 Dh l||^2 = K`` with ``Dh = diag(D^-1/2)`` and
    ``l = gamma/(2D) + v``. Coordinates with ``D == 0`` enter linearly and
    move by ``-lam gamma/2``; those with ``gamma == D == 0`` are free.
    """
    v = np.asarray(v, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    seg = np.asarray(seg, dtype=np.int64)
    C = np.asarray(C, dtype=np.float64)
    if np.any(D < 0):
        raise DegenerateConstraint("constraint curvature D must be nonnegative")
    out = v.copy()
    n = C.size
    if n == 0:
        return out
    sizes = np.diff(seg)
    seg_id = np.repeat(np.arange(n), sizes)
    bad = np.flatnonzero(constraint_values(v, gamma, D, seg) > C)
    if bad.size == 0:
        return out

    remap = np.full(n, -1)
    remap[bad] = np.arange(bad.size)
    rows = remap[seg_id] >= 0
    sid = remap[seg_id[rows]]
    nb = bad.size
    vs, gs, Ds = v[rows], gamma[rows], D[rows]
    quad = Ds > 0
    lin = ~quad & (gs != 0)
    has_lin = np.bincount(sid[lin], minlength=nb) > 0
    Dq = np.where(quad, Ds, 1.0)
    K = C[bad] + np.bincount(sid, weights=np.where(quad, gs * gs / (4.0 * Dq), 0.0), minlength=nb)
    lvec = np.where(quad, gs / (2.0 * Dq) + vs, 0.0)
    a = np.where(quad, Ds * lvec * lvec, 0.0)          # z_i(0)^2
    g_lin = np.where(lin, gs, 0.0)
    lin_slope = -0.5 * np.bincount(sid, weights=g_lin * g_lin, minlength=nb)
    rK = K ** -0.5

    lam = np.zeros(nb)
    done = np.zeros(nb, dtype=bool)
    frozen = done.copy()
    last_move = np.full(nb, np.inf)
    for _ in range(max_iter):
        den = 1.0 + lam[sid] * Ds
        S = np.bincount(sid, weights=a / den**2, minlength=nb)
        dS = -2.0 * np.bincount(sid, weights=a * Ds / den**3, minlength=nb)
        with np.errstate(divide="ignore", invalid="ignore"):
            # ball-only sets: Newton on 1/||z|| - 1/sqrt(K), which is nearly linear in lam
            step_ball = (S ** -0.5 - rK) / (-0.5 * S ** -1.5 * dS)
            Lv = np.bincount(sid, weights=g_lin * (vs - 0.5 * lam[sid] * g_lin), minlength=nb)
            step_mix = (S + Lv - K) / (dS + lin_slope)
        step = np.where(has_lin, step_mix, step_ball)
        if not np.all(np.isfinite(step)):
            raise NumericalFailure("projection root-finder produced a non-finite step",
                                   constraints=bad[~np.isfinite(step)].tolist())
        new = np.maximum(lam - step, 0.0)
        # stop once the step is negligible, the residual is at rounding level,
        # or Newton stops contracting on an already tiny residual
        resid = np.abs(np.where(has_lin, S + Lv, S) - K)
        moved = np.abs(new - lam)
        stalled = (moved >= 0.5 * last_move) & (resid <= 1e-10 * K)
        done |= (moved <= rtol * np.maximum(new, 1e-300)) | (resid <= 16 * np.finfo(float).eps * K) | stalled
        last_move = moved
        lam = np.where(frozen, lam, new)
        frozen = done.copy()
        if done.all():
            break
    else:
        raise NumericalFailure("projection root-finder did not converge",
                               max_iter=max_iter, constraints=bad.tolist())

    lam_r = lam[sid]
    out[rows] = (vs - 0.5 * lam_r * gs) / (1.0 + lam_r * Ds)
    return out


def project_constraint(v, gamma_tilde, D_diag, C):
    """Euclidean projection of ``v`` onto ``{w: gamma_tilde.w + w.Dw <= C}``."""
    v = np.asarray(v, dtype=np.float64).ravel()
    gamma_tilde = np.asarray(gamma_tilde, dtype=np.float64).ravel()
    D_diag = np.asarray(D_diag, dtype=np.float64).ravel()
    if not (v.shape == gamma_tilde.shape == D_diag.shape):
        raise DomainError("v, gamma_tilde and D must have the same length")
    if not C > 0:
        raise DomainError(f"tolerance C must be positive, got {C}")
    return project_segments(v, gamma_tilde, D_diag, np.array([0, v.size]), np.array([float(C)]))
