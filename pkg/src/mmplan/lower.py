"""Fluence-map optimization for a fixed fractionation schedule.

The concave tumor objective is split from the dose by auxiliary variables
(``w0`` for the tumor dose, one ``w_i`` per generalized constraint), and the
relaxed problem

    alpha~.w0 - w0.B w0 + ||w0 - Tu||^2 / (2 eta0) + sum_i ||w_i - H_i u||^2 / (2 eta_i)

with ``w_i`` restricted to its BE constraint set is minimized by block
coordinate descent. Step sizes are tuned automatically: constraint steps are
shrunk until the fluence is feasible, then the tumor step is shrunk while the
fluence stays feasible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .errors import InfeasibleProblem, UnboundedProx
from .model import GeneralizedSystem, constraint_be
from .nnls import fnnls
from .prox import project_segments, prox_neg_quadratic

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RelaxationParams:
    """Penalty step sizes and stopping rule of one block-coordinate solve."""

    eta0: float
    eta: np.ndarray
    delta_eta: float = 0.5
    bcd_tol: float = 1e-6
    bcd_max_iters: int = 2000

    def __post_init__(self):
        eta = np.array(self.eta, dtype=np.float64).ravel()
        if not self.eta0 > 0 or np.any(eta <= 0):
            raise ValueError("step sizes must be positive")
        if not 0 < self.delta_eta < 1:
            raise ValueError("delta_eta must lie in (0, 1)")
        object.__setattr__(self, "eta", eta)


@dataclass
class LowerState:
    """Iterate of the block-coordinate descent.

    ``w`` stacks the constraint auxiliaries; constraint ``i`` owns
    ``w[sys.seg[i]:sys.seg[i+1]]``.
    """

    u: np.ndarray
    w0: np.ndarray
    w: np.ndarray
    history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    diverged: bool = False

    @property
    def objective(self) -> float:
        return self.history[-1] if self.history else float("nan")

    def w_list(self, sys: GeneralizedSystem) -> list:
        return [self.w[sys.seg[i]:sys.seg[i + 1]] for i in range(sys.n_constraints)]


@dataclass(frozen=True)
class LowerConfig:
    """Settings of the automatic step-size selection.

    ``eta0_safety`` scales the initial tumor step below the prox threshold
    ``1/(2 max B)``; at the threshold itself the prox is not unique.
    """

    delta_eta: float = 0.5
    bcd_tol: float = 1e-6
    bcd_max_iters: int = 2000
    feas_tol: float = 1e-6
    max_feasibility_decreases: int = 60
    max_optimality_decreases: int = 40
    eta0_safety: float = 0.5
    warm_start: bool = True


def _row_segments(sys):
    return np.repeat(np.arange(sys.n_constraints), np.diff(sys.seg))


def p4_objective(sys, eta0, row_w, u, w0, w, Tu=None, Au=None):
    """Value of the relaxed objective at ``(u, w0, w)``; ``row_w`` is ``1/eta`` per row."""
    Tu = sys.T @ u if Tu is None else Tu
    Au = sys.A @ u if Au is None else Au
    r0 = w0 - Tu
    r = w - Au
    return float(sys.alpha_tilde @ w0 - w0 @ (sys.B * w0)
                 + (r0 @ r0) / (2.0 * eta0) + 0.5 * (row_w @ (r * r)))


def _gram(sys, eta0, row_w):
    T, A = sys.T, sys.A
    G = (T.T @ T) / eta0
    if A.shape[0]:
        G = G + A.T @ sp.diags(row_w) @ A
    return G.toarray() if sp.issparse(G) else np.asarray(G)


def u_update(state: LowerState, sys: GeneralizedSystem, params: RelaxationParams,
             gram=None, passive=None) -> np.ndarray:
    """Fluence minimizing the penalty terms for fixed auxiliaries.

    Equivalent to one NNLS over the stacked system ``[T; H_1; ...]`` with
    rows scaled by ``1/sqrt(eta)``; solved through its normal equations.
    """
    row_w = 1.0 / params.eta[_row_segments(sys)]
    G = _gram(sys, params.eta0, row_w) if gram is None else gram
    rhs = sys.T.T @ state.w0 / params.eta0
    if sys.A.shape[0]:
        rhs = rhs + sys.A.T @ (row_w * state.w)
    return fnnls(G, rhs, passive=passive)


def bcd_solve(sys: GeneralizedSystem, params: RelaxationParams, u_init,
              sink: Optional[Callable] = None) -> LowerState:
    """Block-coordinate descent on the relaxed problem for fixed step sizes.

    One sweep updates the tumor auxiliary by the prox step, every constraint
    auxiliary by projection, then the fluence by NNLS. Stops when the
    relative change of the relaxed objective drops to ``params.bcd_tol``.

    ``sink(sweep, objective, max_violation)`` receives one call per sweep.
    Raises :class:`UnboundedProx` before iterating if ``eta0`` is too large.
    """
    if sys.B.size and params.eta0 > sys.eta0_threshold():
        raise UnboundedProx(f"eta0={params.eta0:.6g} exceeds the threshold "
                            f"{sys.eta0_threshold():.6g}", eta0=params.eta0)
    if params.eta.size != sys.n_constraints:
        raise ValueError(f"need {sys.n_constraints} constraint steps, got {params.eta.size}")
    eta0 = params.eta0
    row_w = 1.0 / params.eta[_row_segments(sys)]
    G = _gram(sys, eta0, row_w)
    u = np.maximum(np.asarray(u_init, dtype=np.float64), 0.0)
    scale = max(1.0, float(u.max(initial=0.0)))
    Tu, Au = sys.T @ u, sys.A @ u
    state = LowerState(u=u, w0=Tu.copy(), w=Au.copy())
    y_shift = -eta0 * sys.alpha_tilde
    prev = None
    for k in range(1, params.bcd_max_iters + 1):
        w0 = prox_neg_quadratic(Tu + y_shift, sys.B, eta0)
        w = project_segments(Au, sys.gamma_tilde, sys.D, sys.seg, sys.C)
        rhs = sys.T.T @ w0 / eta0
        if Au.size:
            rhs = rhs + sys.A.T @ (row_w * w)
        u = fnnls(G, rhs, passive=u > 0)
        Tu, Au = sys.T @ u, sys.A @ u
        J = p4_objective(sys, eta0, row_w, u, w0, w, Tu, Au)
        state.u, state.w0, state.w, state.iterations = u, w0, w, k
        state.history.append(J)
        if sink is not None:
            excess = constraint_be(u, sys) - sys.C
            sink(k, J, float(excess.max(initial=0.0)))
        if not np.isfinite(J) or u.max(initial=0.0) > 1e6 * scale:
            state.diverged = True
            log.debug("bcd diverged after %d sweeps", k)
            break
        if prev is not None and abs(prev - J) <= params.bcd_tol * max(abs(prev), 1e-300):
            state.converged = True
            break
        prev = J
    else:
        log.debug("bcd hit the sweep cap (%d)", params.bcd_max_iters)
    return state


@dataclass
class LowerResult:
    u: np.ndarray
    params: RelaxationParams
    feasible: bool
    solves: int
    feasibility_decreases: int
    optimality_decreases: int
    sweeps: int
    converged: bool
    max_violation: float


def _violated(u, sys, feas_tol):
    if not np.all(np.isfinite(u)):
        return np.arange(sys.n_constraints)
    return np.flatnonzero(constraint_be(u, sys) > sys.C * (1.0 + feas_tol))


def auto_param_solve(sys: GeneralizedSystem, u_init, cfg: LowerConfig = LowerConfig(),
                     sink: Optional[Callable] = None) -> LowerResult:
    """Lower-level solve with automatic step-size selection.

    All steps start at the prox threshold ``1/(2 max B)`` (the tumor step
    scaled by ``cfg.eta0_safety``). Steps of violated constraints are
    multiplied by ``delta_eta`` until the fluence is feasible; then the tumor
    step is multiplied by ``delta_eta`` while the fluence stays feasible.
    The fluence returned is the last feasible one.

    Raises
    ------
    InfeasibleProblem
        When some constraint stays violated after
        ``cfg.max_feasibility_decreases`` decreases of its step.
    """
    thr = sys.eta0_threshold()
    if not np.isfinite(thr):
        thr = 1.0
    params = RelaxationParams(eta0=cfg.eta0_safety * thr, eta=np.full(sys.n_constraints, thr),
                              delta_eta=cfg.delta_eta, bcd_tol=cfg.bcd_tol,
                              bcd_max_iters=cfg.bcd_max_iters)
    u0 = np.asarray(u_init, dtype=np.float64)
    solves = sweeps = 0

    def solve(p, start):
        nonlocal solves, sweeps
        st = bcd_solve(sys, p, start, sink=sink)
        solves += 1
        sweeps += st.iterations
        return st

    state = solve(params, u0)
    counts = np.zeros(sys.n_constraints, dtype=np.int64)
    bad = _violated(state.u, sys, cfg.feas_tol)
    while bad.size:
        if counts[bad].max() >= cfg.max_feasibility_decreases:
            worst = bad[counts[bad] >= cfg.max_feasibility_decreases]
            raise InfeasibleProblem("constraint steps exhausted without reaching feasibility",
                                    violated=[sys.origins[i] for i in worst], fractions=sys.N)
        eta = params.eta.copy()
        eta[bad] *= cfg.delta_eta
        counts[bad] += 1
        params = replace(params, eta=eta)
        start = state.u if cfg.warm_start and not state.diverged else u0
        state = solve(params, start)
        bad = _violated(state.u, sys, cfg.feas_tol)

    best, best_params = state, params
    n_opt = 0
    for _ in range(cfg.max_optimality_decreases):
        params = replace(params, eta0=params.eta0 * cfg.delta_eta)
        start = best.u if cfg.warm_start else u0
        state = solve(params, start)
        n_opt += 1
        if state.diverged or _violated(state.u, sys, cfg.feas_tol).size:
            break
        best, best_params = state, params

    u = best.u.copy()
    for m in np.flatnonzero(sys.N == 0):
        u[sys.modality_slice(m)] = 0.0
    excess = (constraint_be(u, sys) - sys.C) / sys.C if sys.n_constraints else np.zeros(0)
    return LowerResult(u=u, params=best_params, feasible=True, solves=solves,
                       feasibility_decreases=int(counts.sum()), optimality_decreases=n_opt,
                       sweeps=sweeps, converged=best.converged,
                       max_violation=float(excess.max(initial=0.0)))
