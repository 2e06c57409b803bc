"""Fractionation-schedule optimization over the lower-level value function.

The fraction counts are relaxed to real numbers and the value function
``V(N) = F(u*(N), N)`` is minimized by a trust-region method over the
polytope ``{N >= 0, 1 <= sum(N) <= N_max}``. Gradients come from forward
differences of ``V``; the local model is quadratic with a symmetric-rank-one
Hessian estimate. Each start is rounded to integers and re-solved, and the
best integer plan over all starts is returned.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import ConfigError, InfeasibleProblem, NumericalFailure
from .lower import LowerConfig, auto_param_solve
from .model import (FractionationPlan, PlanResult, ProblemSpec, assemble, constraint_be,
                    objective_F, tumor_be)
from .phantom import initial_fluence

log = logging.getLogger(__name__)


def default_initial_guesses(M: int, N_max: int) -> list:
    """Starting schedules: axis extremes, a balanced split and all ones.

    For two modalities the order is ``(1, N_max-1), (N_max-1, 1),
    (floor(N_max/2), ceil(N_max/2)), (1, 1)``. Guesses outside the feasible
    set (possible when ``N_max`` is small) are dropped, duplicates removed.
    """
    if M < 1:
        raise ConfigError("need at least one modality")
    if M == 1:
        cands = [(N_max - 1,), ((N_max + 1) // 2,), (1,)]
    elif M == 2:
        cands = [(1, N_max - 1), (N_max - 1, 1), (N_max // 2, N_max - N_max // 2), (1, 1)]
    else:
        cands = []
        for m in range(M):
            g = [1] * M
            g[m] = N_max - M + 1
            cands.append(tuple(g))
        q, r = divmod(N_max, M)
        cands.append(tuple([q] * (M - r) + [q + 1] * r))
        cands.append((1,) * M)
    out = []
    for c in cands:
        if min(c) >= 0 and 1 <= sum(c) <= N_max and c not in out:
            out.append(c)
    return [FractionationPlan(c) for c in out]


@dataclass(frozen=True)
class UpperConfig:
    """Trust-region and rounding settings.

    ``initial_guesses=None`` uses :func:`default_initial_guesses`;
    ``N_max=None`` takes the value from the problem.
    """

    initial_guesses: Optional[tuple] = None
    tr_max_iters: int = 8
    fd_step: float = 0.25
    round_mode: str = "nearest"
    N_max: Optional[int] = None
    radius0: float = 2.0
    shrink: float = 0.5
    grow: float = 2.0
    accept_ratio: float = 0.1
    min_radius: float = 0.1
    lower: LowerConfig = field(default_factory=LowerConfig)

    def __post_init__(self):
        if self.round_mode != "nearest":
            raise ConfigError(f"unsupported round_mode {self.round_mode!r}")
        if self.fd_step <= 0 or self.radius0 <= 0 or self.tr_max_iters < 1:
            raise ConfigError("fd_step, radius0 and tr_max_iters must be positive")
        if not (0 < self.shrink < 1 < self.grow):
            raise ConfigError("need 0 < shrink < 1 < grow")


@dataclass
class Evaluation:
    N: tuple
    value: float
    u: Optional[np.ndarray]
    lower: object = None
    error: Optional[str] = None
    violated: tuple = ()


class ValueFunction:
    """Memoized ``V(N)``; infeasible schedules evaluate to ``+inf``.

    Every lower-level solve starts from the same ``u_init``, so a value does
    not depend on the order in which schedules are visited.
    """

    def __init__(self, spec: ProblemSpec, u_init=None, lower: LowerConfig = LowerConfig()):
        self.spec = spec
        self.u_init = initial_fluence(spec) if u_init is None else np.asarray(u_init, dtype=float)
        self.lower = lower
        self.cache: dict = {}
        self.solve_time = 0.0

    @staticmethod
    def key(N) -> tuple:
        return tuple(round(float(n), 10) + 0.0 for n in np.ravel(N))

    def evaluate(self, N) -> Evaluation:
        k = self.key(N)
        hit = self.cache.get(k)
        if hit is not None:
            return hit
        plan = FractionationPlan(np.array(k))
        t0 = time.perf_counter()
        sys = assemble(self.spec, plan)
        try:
            res = auto_param_solve(sys, self.u_init, self.lower)
            ev = Evaluation(k, objective_F(res.u, plan, sys, self.spec), res.u, res)
        except (InfeasibleProblem, NumericalFailure) as exc:
            log.info("V%s treated as +inf: %s", k, exc)
            ev = Evaluation(k, math.inf, None, error=f"{type(exc).__name__}: {exc}",
                            violated=tuple(getattr(exc, "violated", ())))
        self.solve_time += time.perf_counter() - t0
        self.cache[k] = ev
        return ev

    def __call__(self, N) -> float:
        return self.evaluate(N).value

    @property
    def n_evaluations(self) -> int:
        return len(self.cache)


def value_function(N, spec: ProblemSpec, u_init=None, cfg: LowerConfig = LowerConfig()) -> float:
    """``F(u*(N), N)`` for a single (possibly fractional) schedule.

    Raises
    ------
    InfeasibleProblem
        If the lower level cannot reach feasibility; ``fractions`` holds ``N``.
    """
    plan = N if isinstance(N, FractionationPlan) else FractionationPlan(N)
    u0 = initial_fluence(spec) if u_init is None else u_init
    sys = assemble(spec, plan)
    res = auto_param_solve(sys, u0, cfg)
    return objective_F(res.u, plan, sys, spec)


# ---------------------------------------------------------------- trust region

def _feasible(x, N_max, tol=1e-9):
    return bool(np.all(x >= -tol) and 1 - tol <= x.sum() <= N_max + tol)


def fd_gradient(V, x, h, N_max):
    """Forward differences of ``V`` at ``x``, stepping backward at a face of the domain."""
    fx = V(x)
    g = np.zeros(x.size)
    for m in range(x.size):
        e = np.zeros(x.size)
        e[m] = h
        if _feasible(x + e, N_max):
            f1, sgn = V(x + e), 1.0
        elif _feasible(x - e, N_max):
            f1, sgn = V(x - e), -1.0
        else:
            # both neighbours leave the domain (e.g. N_max = 1): no usable slope
            continue
        if not math.isfinite(f1) and _feasible(x - sgn * e, N_max):
            f1, sgn = V(x - sgn * e), -sgn
        g[m] = sgn * (f1 - fx) / h if math.isfinite(f1) else 0.0
    return g


def _subproblem(g, H, x, radius, N_max):
    """Minimize ``g.s + s.H s / 2`` over the box ``|s|_inf <= radius`` inside the polytope."""
    M = x.size
    bounds = [(max(-radius, -x[m]), radius) for m in range(M)]
    cons = [{"type": "ineq", "fun": lambda s: N_max - x.sum() - s.sum(), "jac": lambda s: -np.ones(M)},
            {"type": "ineq", "fun": lambda s: x.sum() + s.sum() - 1.0, "jac": lambda s: np.ones(M)}]
    best = None
    # a steepest-descent corner and the origin as starts guard against poor local minima of an indefinite model
    for s0 in (np.zeros(M), np.clip(-np.sign(g) * radius, [b[0] for b in bounds], [b[1] for b in bounds])):
        with warnings.catch_warnings():
            # SLSQP clips trial points to the bounds itself; the result is clipped again below
            warnings.filterwarnings("ignore", "Values in x were outside bounds", RuntimeWarning)
            r = minimize(lambda s: g @ s + 0.5 * s @ H @ s, s0, jac=lambda s: g + H @ s,
                         bounds=bounds, constraints=cons, method="SLSQP",
                         options={"ftol": 1e-12, "maxiter": 200})
        s = np.clip(r.x, [b[0] for b in bounds], [b[1] for b in bounds])
        val = g @ s + 0.5 * s @ H @ s
        if _feasible(x + s, N_max) and (best is None or val < best[1]):
            best = (s, val)
    return best if best is not None else (np.zeros(M), 0.0)


def _sr1(H, s, y):
    r = y - H @ s
    den = r @ s
    if abs(den) > 1e-8 * np.linalg.norm(s) * np.linalg.norm(r):
        H = H + np.outer(r, r) / den
    return H


def trust_region(V, x0, N_max, cfg: UpperConfig):
    """Run one trust-region descent from ``x0``; returns ``(x, V(x), trace)``."""
    x = np.array(x0, dtype=float)
    fx = V(x)
    if not math.isfinite(fx):
        return x, fx, [{"iter": 0, "N": x.tolist(), "V": fx, "radius": cfg.radius0, "status": "start infeasible"}]
    radius = cfg.radius0
    H = np.zeros((x.size, x.size))
    g = fd_gradient(V, x, cfg.fd_step, N_max)
    trace = [{"iter": 0, "N": x.tolist(), "V": fx, "radius": radius, "status": "start"}]
    for it in range(1, cfg.tr_max_iters + 1):
        s, mval = _subproblem(g, H, x, radius, N_max)
        pred = -mval
        if pred <= 1e-12 * max(1.0, abs(fx)) or np.abs(s).max() < 1e-9:
            trace.append({"iter": it, "N": x.tolist(), "V": fx, "radius": radius, "status": "stationary"})
            break
        xt = x + s
        ft = V(xt)
        rho = (fx - ft) / pred if math.isfinite(ft) else -math.inf
        if rho >= cfg.accept_ratio:
            g_new = fd_gradient(V, xt, cfg.fd_step, N_max)
            H = _sr1(H, s, g_new - g)
            x, fx, g = xt, ft, g_new
            if rho > 0.75 and np.abs(s).max() >= 0.99 * radius:
                radius *= cfg.grow
            status = "accepted"
        else:
            radius *= cfg.shrink
            status = "rejected"
        trace.append({"iter": it, "N": xt.tolist(), "V": ft, "rho": rho, "radius": radius, "status": status})
        if radius < cfg.min_radius:
            break
    return x, fx, trace


def round_plan(x, N_max) -> tuple:
    """Nearest integer schedule (ties up), moved back into ``1 <= sum <= N_max``.

    An excess total is removed from the coordinates whose rounding up cost
    the least, a deficit is added where the fractional part is largest.
    """
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    n = np.floor(x + 0.5).astype(np.int64)
    while n.sum() > N_max:
        cost = np.where(n > 0, np.abs(x - (n - 1)) - np.abs(x - n), np.inf)
        n[int(np.argmin(cost))] -= 1
    while n.sum() < 1:
        cost = np.abs(x - (n + 1)) - np.abs(x - n)
        n[int(np.argmin(cost))] += 1
    return tuple(int(k) for k in n)


def _result(spec, ev: Evaluation, diagnostics) -> PlanResult:
    plan = FractionationPlan(ev.N)
    sys = assemble(spec, plan)
    diag = dict(diagnostics)
    if ev.lower is not None:
        lr = ev.lower
        diag["lower"] = {"solves": lr.solves, "sweeps": lr.sweeps,
                         "feasibility_decreases": lr.feasibility_decreases,
                         "optimality_decreases": lr.optimality_decreases,
                         "eta0": lr.params.eta0, "eta_min": float(lr.params.eta.min(initial=np.inf)),
                         "converged": lr.converged, "max_violation": lr.max_violation}
    return PlanResult(plan=plan, u=ev.u, objective=ev.value, tumor_be=tumor_be(ev.u, sys),
                      constraint_values=constraint_be(ev.u, sys), diagnostics=diag)


def optimize_fractionation(spec: ProblemSpec, cfg: UpperConfig = UpperConfig(), u_init=None,
                           vf: Optional[ValueFunction] = None) -> PlanResult:
    """Multi-start trust region over relaxed fraction counts, then rounding.

    For every start the continuous optimum is rounded and re-solved; the
    best integer schedule seen along that start's path (its rounded start
    included) competes as well, so the result is never worse than any
    evaluated starting guess.

    Raises
    ------
    InfeasibleProblem
        If no start yields a feasible integer schedule.
    """
    N_max = spec.N_max if cfg.N_max is None else int(cfg.N_max)
    if N_max < 1:
        raise ConfigError("N_max must be >= 1")
    vf = vf or ValueFunction(spec, u_init, cfg.lower)
    starts = cfg.initial_guesses or default_initial_guesses(spec.M, N_max)
    t0 = time.perf_counter()
    best, runs = None, []
    for st in starts:
        x0 = st.N if isinstance(st, FractionationPlan) else np.asarray(st, dtype=float)
        if x0.size != spec.M or not _feasible(x0, N_max):
            raise ConfigError(f"initial guess {tuple(x0)} is infeasible for N_max={N_max}")
        x, fx, trace = trust_region(vf, x0, N_max, cfg)
        cands = {round_plan(x, N_max)}
        cands |= {k for k, e in vf.cache.items() if all(float(v).is_integer() for v in k)
                  and any(np.allclose(k, t["N"]) for t in trace)}
        evals = [vf.evaluate(np.array(c, dtype=float)) for c in sorted(cands)]
        pick = min(evals, key=lambda e: e.value)
        runs.append({"start": tuple(float(v) for v in x0), "continuous": x.tolist(), "V_continuous": fx,
                     "rounded": round_plan(x, N_max), "integer": pick.N, "V_integer": pick.value,
                     "trace": trace})
        if math.isfinite(pick.value) and (best is None or pick.value < best.value):
            best = pick
    if best is None:
        last = [e for e in vf.cache.values() if e.violated]
        raise InfeasibleProblem("no initial guess led to a feasible integer schedule",
                                violated=last[-1].violated if last else (),
                                fractions=last[-1].N if last else None)
    diag = {"starts": runs, "evaluations": vf.n_evaluations, "solve_seconds": vf.solve_time,
            "seconds": time.perf_counter() - t0}
    return _result(spec, best, diag)


# ----------------------------------------------------------------- brute force

def integer_grid(M: int, N_max: int):
    """All nonnegative integer tuples of length ``M`` with ``1 <= sum <= N_max``."""
    for n in itertools.product(range(N_max + 1), repeat=M):
        if 1 <= sum(n) <= N_max:
            yield n


def grid_size(M: int, N_max: int) -> int:
    return math.comb(N_max + M, M) - 1


@dataclass
class ValueSurface:
    grid: dict
    optimum: tuple
    optimum_value: float

    @classmethod
    def from_grid(cls, grid: dict) -> "ValueSurface":
        if not grid:
            raise ConfigError("empty value surface")
        k = min(sorted(grid), key=lambda t: grid[t])
        return cls(dict(grid), k, grid[k])

    def to_csv(self) -> str:
        M = len(self.optimum)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"N{m + 1}" for m in range(M)] + ["V"])
        for k in sorted(self.grid):
            w.writerow(list(k) + ["%.17g" % self.grid[k]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ValueSurface":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], [r for r in rows[1:] if r]
        M = len(header) - 1
        if M < 1 or header[-1] != "V":
            raise ConfigError("value-surface CSV needs columns N1..NM,V")
        return cls.from_grid({tuple(int(v) for v in r[:M]): float(r[M]) for r in body})

    def summary(self) -> str:
        finite = [v for v in self.grid.values() if math.isfinite(v)]
        return (f"points: {len(self.grid)}\nfeasible: {len(finite)}\n"
                f"optimum: {self.optimum}\nV: {self.optimum_value:.10g}\n")


def _eval_point(args):
    spec, u_init, lower, n = args
    return n, ValueFunction(spec, u_init, lower)(np.array(n, dtype=float))


def brute_force(spec: ProblemSpec, u_init=None, cfg: LowerConfig = LowerConfig(),
                max_points: int = 2000, jobs: int = 1, vf: Optional[ValueFunction] = None) -> ValueSurface:
    """Evaluate ``V`` on every integer schedule and return the surface.

    Raises
    ------
    ConfigError
        If the grid holds more than ``max_points`` schedules.
    """
    size = grid_size(spec.M, spec.N_max)
    if size > max_points:
        raise ConfigError(f"brute force needs {size} lower-level solves, cap is {max_points}")
    vf = vf or ValueFunction(spec, u_init, cfg)
    points = list(integer_grid(spec.M, spec.N_max))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        grid = {n: vf.cache[vf.key(n)].value for n in points if vf.key(n) in vf.cache}
        todo = [n for n in points if n not in grid]
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for n, v in ex.map(_eval_point, [(spec, vf.u_init, vf.lower, n) for n in todo]):
                grid[n] = v
        return ValueSurface.from_grid(grid)
    return ValueSurface.from_grid({n: vf(np.array(n, dtype=float)) for n in points})
