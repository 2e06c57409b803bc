"""Comparison metrics, baseline courses and parameter sweeps."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, PlanningError
from .model import (FractionationPlan, PlanResult, ProblemSpec, assemble, constraint_be,
                    objective_F, proliferation, tumor_be, tumor_be_per_voxel)
from .phantom import ScenarioConfig, scenario
from .upper import UpperConfig, ValueFunction, default_initial_guesses, optimize_fractionation

log = logging.getLogger(__name__)

TOTAL = "total"
PER_VOXEL = "per_voxel"


def pobj_metrics(be_star: float, be_single: float, be_conv: float) -> tuple:
    """Percent of each baseline BE reached by the combined course."""
    if not (be_single > 0 and be_conv > 0):
        raise DomainError(f"baseline BE values must be positive, got {be_single}, {be_conv}")
    return 100.0 * be_star / be_single, 100.0 * be_star / be_conv


def avg_be_per_voxel(result: PlanResult, spec: ProblemSpec, tumor_mask=None,
                     include_proliferation: bool = True) -> float:
    """Average tumor BE per voxel of the evaluation mask(s).

    Each modality's tumor rows are averaged over its own mask: by default
    the voxels its tumor matrix was built on, otherwise ``tumor_mask`` (one
    index array for all modalities, or one per modality). The proliferation
    penalty per voxel is subtracted unless ``include_proliferation`` is off.
    """
    sys = assemble(spec, result.plan)
    per_row = tumor_be_per_voxel(result.u, sys)
    if tumor_mask is None:
        masks = [None] * spec.M
    elif isinstance(tumor_mask, (list, tuple)) and len(tumor_mask) == spec.M and \
            all(np.ndim(m) == 1 for m in tumor_mask):
        masks = list(tumor_mask)
    else:
        masks = [tumor_mask] * spec.M
    total = 0.0
    for m, mod in enumerate(spec.modalities):
        vox = mod.tumor_voxels if mod.tumor_voxels is not None else spec.phantom.tumor
        mask = vox if masks[m] is None else np.asarray(masks[m], dtype=np.int64)
        if mask.size == 0:
            raise DomainError("evaluation mask is empty")
        rows = per_row[sys.tumor_mod == m]
        total += rows[np.isin(vox, mask)].sum() / mask.size
    if include_proliferation:
        total -= proliferation(result.plan.total, spec.T_d, 1)
    return float(total)


def course_value(result: PlanResult, spec: ProblemSpec, metric: str = TOTAL) -> float:
    if metric == TOTAL:
        return result.net_be
    if metric == PER_VOXEL:
        return avg_be_per_voxel(result, spec)
    raise DomainError(f"unknown metric {metric!r}")


def _embed(spec: ProblemSpec, single_spec: ProblemSpec, res: PlanResult) -> PlanResult:
    """Lift a modality-1-only result to the full problem (other modalities at zero)."""
    N = np.zeros(spec.M)
    N[0] = res.plan.N[0]
    plan = FractionationPlan(N)
    u = np.zeros(sum(spec.n_beamlets))
    u[:res.u.size] = res.u
    sys = assemble(spec, plan)
    return PlanResult(plan, u, objective_F(u, plan, sys, spec), tumor_be(u, sys),
                      constraint_be(u, sys), dict(res.diagnostics))


def single_modality(spec: ProblemSpec) -> ProblemSpec:
    return spec.replace(modalities=spec.modalities[:1])


def run_baselines(spec: ProblemSpec, cfg: UpperConfig = UpperConfig(), conv_fractions: int = 25):
    """Conventional and optimally fractionated courses using modality 1 alone.

    The conventional course fixes ``min(conv_fractions, N_max)`` fractions.
    Both results are expressed in the full problem (zero fluence and zero
    fractions for the other modalities).
    """
    one = single_modality(spec)
    vf = ValueFunction(one, lower=cfg.lower)
    n_conv = min(int(conv_fractions), spec.N_max)
    ev = vf.evaluate(np.array([float(n_conv)]))
    if not math.isfinite(ev.value):
        raise PlanningError(f"conventional course infeasible: {ev.error}")
    sys1 = assemble(one, FractionationPlan([n_conv]))
    conv1 = PlanResult(FractionationPlan([n_conv]), ev.u, ev.value, tumor_be(ev.u, sys1),
                       constraint_be(ev.u, sys1), {"evaluations": 1})
    cfg1 = replace(cfg, initial_guesses=None)
    single1 = optimize_fractionation(one, cfg1, vf=vf)
    return _embed(spec, one, conv1), _embed(spec, one, single1)


@dataclass
class ComparisonReport:
    parameter: str
    value: float
    overrides: dict
    metric: str = TOTAL
    dual_plan: Optional[tuple] = None
    single_plan: Optional[int] = None
    conv_plan: Optional[tuple] = None
    be_dual: float = math.nan
    be_single: float = math.nan
    be_conv: float = math.nan
    pobj_single: float = math.nan
    pobj_conv: float = math.nan
    constraint_be: dict = field(default_factory=dict)
    runtimes: dict = field(default_factory=dict)
    evaluations: int = 0
    verified: bool = False
    lower_max_violation: float = math.nan
    error: Optional[str] = None
    courses: dict = field(default_factory=dict, repr=False)

    @property
    def total_fractions(self) -> Optional[int]:
        return None if self.dual_plan is None else int(sum(self.dual_plan))

    @property
    def dominates(self) -> bool:
        return self.pobj_single >= 99.5 and self.pobj_conv >= 99.5


@dataclass(frozen=True)
class SweepSpec:
    """One-parameter sweep; ``fixed`` holds overrides shared by every row."""

    parameter: str
    values: tuple
    fixed: tuple = ()
    metric: str = TOTAL
    name: str = ""


SWEEPS = {
    "T_d": SweepSpec("T_d", (2.0, 5.0, 10.0, 50.0, 100.0), name="T_d"),
    "alpha2": SweepSpec("alpha2", (0.35, 0.55, 0.75), name="alpha2"),
    "r": SweepSpec("r", (0.5, 1.0, 1.5), name="r"),
    "margin_T_d": SweepSpec("T_d", (2.0, 5.0, 10.0, 50.0, 100.0), (("margin", 2),), PER_VOXEL, "margin_T_d"),
    "margin_alpha2": SweepSpec("alpha2", (0.35, 0.55, 0.75), (("margin", 2),), PER_VOXEL, "margin_alpha2"),
    "margin_r": SweepSpec("r", (0.8, 1.0, 1.2), (("margin", 2),), PER_VOXEL, "margin_r"),
}


def _organ_summary(spec, res: PlanResult) -> dict:
    sys = assemble(spec, res.plan)
    out = {}
    for (organ, _), v in zip(sys.origins, res.constraint_values):
        out[organ] = max(out.get(organ, -math.inf), float(v))
    return out


def _verify(spec, res: PlanResult, feas_tol: float) -> bool:
    sys = assemble(spec, res.plan)
    vals = constraint_be(res.u, sys)
    return bool(np.all(res.u >= 0) and np.all(vals <= sys.C * (1.0 + feas_tol)))


def compare(spec: ProblemSpec, cfg: UpperConfig = UpperConfig(), baselines=None,
            metric: str = TOTAL, parameter: str = "", value: float = math.nan,
            overrides: Optional[dict] = None) -> ComparisonReport:
    """Combined-course optimization against both single-modality baselines."""
    rep = ComparisonReport(parameter, value, dict(overrides or {}), metric)
    t0 = time.perf_counter()
    conv, single = baselines if baselines is not None else run_baselines(spec, cfg)
    t1 = time.perf_counter()
    vf = ValueFunction(spec, lower=cfg.lower)
    dual = optimize_fractionation(spec, cfg, vf=vf)
    t2 = time.perf_counter()
    rep.dual_plan = dual.plan.as_tuple()
    rep.single_plan = int(single.plan.N[0])
    rep.conv_plan = conv.plan.as_tuple()
    rep.be_dual = course_value(dual, spec, metric)
    rep.be_single = course_value(single, spec, metric)
    rep.be_conv = course_value(conv, spec, metric)
    rep.pobj_single, rep.pobj_conv = pobj_metrics(rep.be_dual, rep.be_single, rep.be_conv)
    rep.constraint_be = {"dual": _organ_summary(spec, dual), "single": _organ_summary(spec, single),
                         "conv": _organ_summary(spec, conv)}
    rep.evaluations = vf.n_evaluations
    rep.runtimes = {"baselines": t1 - t0, "dual": t2 - t1}
    rep.verified = all(_verify(spec, r, cfg.lower.feas_tol) for r in (dual, single, conv))
    rep.lower_max_violation = _worst_excess(spec, vf)
    rep.courses = {"dual": dual, "single": single, "conv": conv}
    return rep


def _worst_excess(spec: ProblemSpec, vf: ValueFunction) -> float:
    """Largest relative constraint excess over every feasible lower-level solution in ``vf``."""
    worst = 0.0
    for ev in vf.cache.values():
        if ev.u is None:
            continue
        sys = assemble(spec, FractionationPlan(np.array(ev.N)))
        if sys.n_constraints:
            worst = max(worst, float(np.max((constraint_be(ev.u, sys) - sys.C) / sys.C)))
    return worst


def rescore(rep: ComparisonReport, spec: ProblemSpec, metric: str) -> ComparisonReport:
    """Same courses as ``rep`` scored with another metric."""
    if not rep.courses:
        raise PlanningError("report carries no courses to rescore")
    be = {k: course_value(r, spec, metric) for k, r in rep.courses.items()}
    ps, pc = pobj_metrics(be["dual"], be["single"], be["conv"])
    return replace(rep, metric=metric, be_dual=be["dual"], be_single=be["single"], be_conv=be["conv"],
                   pobj_single=ps, pobj_conv=pc)


@dataclass
class SweepResult:
    sweep: SweepSpec
    reports: list

    @property
    def flags(self) -> dict:
        ok = [r for r in self.reports if r.error is None]
        flags = {"all_rows_ok": len(ok) == len(self.reports),
                 "dominance": all(r.dominates for r in ok),
                 "verified": all(r.verified for r in ok)}
        if self.sweep.parameter == "T_d":
            n = [r.total_fractions for r in ok]
            flags["fractions_nondecreasing"] = all(a <= b for a, b in zip(n, n[1:]))
        if self.sweep.parameter == "r":
            p = [r.pobj_single for r in ok]
            flags["pobj_single_nonincreasing"] = all(a >= b for a, b in zip(p, p[1:]))
        return flags

    def to_csv(self) -> str:
        M = max((len(r.dual_plan) for r in self.reports if r.dual_plan), default=2)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.sweep.parameter] + [f"N{m + 1}_dual" for m in range(M)] +
                   ["N1_single", "pobj_single", "pobj_conv", "be_dual", "be_single", "be_conv",
                    "metric", "evaluations", "seconds", "verified", "error"])
        for r in self.reports:
            plan = list(r.dual_plan) if r.dual_plan else [""] * M
            w.writerow([r.value] + plan + [r.single_plan if r.single_plan is not None else "",
                       "%.4f" % r.pobj_single, "%.4f" % r.pobj_conv, "%.10g" % r.be_dual,
                       "%.10g" % r.be_single, "%.10g" % r.be_conv, r.metric, r.evaluations,
                       "%.1f" % sum(r.runtimes.values()), r.verified, r.error or ""])
        return buf.getvalue()

    def to_table(self) -> str:
        head = f"{self.sweep.parameter:>8}  {'combined (N1*, N2*, ...)':<26}{'single N1':>10}" \
               f"{'pObj_single %':>15}{'pObj_conv %':>13}"
        lines = [head, "-" * len(head)]
        for r in self.reports:
            if r.error:
                lines.append(f"{r.value:>8g}  failed: {r.error}")
                continue
            lines.append(f"{r.value:>8g}  {str(r.dual_plan):<26}{r.single_plan:>10d}"
                         f"{r.pobj_single:>15.1f}{r.pobj_conv:>13.1f}")
        return "\n".join(lines) + "\n"


def _row(args):
    sweep, base, cfg, v, baselines = args
    overrides = dict(sweep.fixed)
    overrides[sweep.parameter] = v
    try:
        spec = scenario(base, overrides)
        if baselines is None:
            baselines = run_baselines(spec, cfg)
        conv, single = baselines
        return compare(spec, cfg, (_lift(spec, conv), _lift(spec, single)), sweep.metric,
                       sweep.parameter, float(v), overrides)
    except PlanningError as exc:
        log.warning("sweep row %s=%s failed: %s", sweep.parameter, v, exc)
        return ComparisonReport(sweep.parameter, float(v), overrides, sweep.metric,
                                error=f"{type(exc).__name__}: {exc}")


def _baseline_key(base: ScenarioConfig, overrides: dict):
    cfg = replace(base, **overrides)
    return (cfg.T_d, cfg.N_max, cfg.phantom, cfg.beams[0], cfg.alpha1, cfg.gamma1, cfg.tumor_ab,
            cfg.oar_ratios, cfg.constraints)


def run_sweep(sweep: SweepSpec, base: ScenarioConfig = ScenarioConfig(),
              cfg: UpperConfig = UpperConfig(), baseline_cache: Optional[dict] = None,
              jobs: int = 1) -> SweepResult:
    """Run one sweep row per value; a failing row is recorded and the sweep goes on.

    Baselines depend only on modality 1 and the shared settings, so they
    are computed once per distinct key and reused across rows (and across
    sweeps through ``baseline_cache``). With ``jobs > 1`` the rows run in
    worker processes; reports keep the order of ``sweep.values``.
    """
    cache = {} if baseline_cache is None else baseline_cache
    for v in sweep.values:
        overrides = dict(sweep.fixed, **{sweep.parameter: v})
        key = _baseline_key(base, overrides)
        if key not in cache:
            try:
                cache[key] = run_baselines(scenario(base, overrides), cfg)
            except PlanningError as exc:
                log.warning("baselines for %s=%s failed: %s", sweep.parameter, v, exc)
                continue
    tasks = []
    for v in sweep.values:
        overrides = dict(sweep.fixed, **{sweep.parameter: v})
        tasks.append((sweep, base, cfg, v, cache.get(_baseline_key(base, overrides))))
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as ex:
            reports = list(ex.map(_row, tasks))
    else:
        reports = [_row(t) for t in tasks]
    return SweepResult(sweep, reports)


def _lift(spec: ProblemSpec, res: PlanResult) -> PlanResult:
    """Re-express a cached baseline in ``spec`` (sizes of other modalities may differ)."""
    n1 = spec.modalities[0].n_beamlets
    N = np.zeros(spec.M)
    N[0] = res.plan.N[0]
    plan = FractionationPlan(N)
    u = np.zeros(sum(spec.n_beamlets))
    u[:n1] = res.u[:n1]
    sys = assemble(spec, plan)
    return PlanResult(plan, u, objective_F(u, plan, sys, spec), tumor_be(u, sys),
                      constraint_be(u, sys), res.diagnostics)
