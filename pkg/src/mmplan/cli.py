"""Command-line entry point: ``mmplan {phantom,plan,brute-force,sweep,baselines}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .bench import SWEEPS, run_baselines, run_sweep
from .errors import ConfigError, InfeasibleProblem, NumericalFailure, PlanningError
from .io import (RunConfig, apply_overrides, build_spec, dump_yaml, load_config, to_plain,
                 write_label_grid, write_triplets)
from .model import PlanResult, ProblemSpec, assemble
from .phantom import build_phantom, initial_fluence
from .upper import ValueFunction, ValueSurface, brute_force, optimize_fractionation

log = logging.getLogger("mmplan")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 2, 3, 4


def _manifest(args, cfg: RunConfig, extra=None) -> dict:
    data = {"command": args.command, "version": __version__, "config_file": args.config,
            "overrides": list(args.override or []), "seed": args.seed, "jobs": args.jobs,
            "resolved": to_plain(cfg)}
    if extra:
        data.update(extra)
    return data


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _constraint_rows(spec: ProblemSpec, res: PlanResult):
    sys_ = assemble(spec, res.plan)
    for i, ((organ, voxel), v) in enumerate(zip(sys_.origins, res.constraint_values)):
        yield organ, voxel, float(sys_.C[i]), float(v)


def _write_plan(out: Path, spec: ProblemSpec, res: PlanResult) -> None:
    starts = res.diagnostics.get("starts", [])
    summary = {"plan": list(res.plan.as_tuple()), "objective": res.objective, "net_be": res.net_be,
               "tumor_be": res.tumor_be, "total_fractions": int(res.plan.total),
               "diagnostics": {k: v for k, v in res.diagnostics.items() if k != "starts"},
               "starts": [{k: v for k, v in s.items() if k != "trace"} for s in starts]}
    dump_yaml(out / "plan.yaml", summary)
    with open(out / "fluence.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["modality", "beamlet", "fluence"])
        sys_ = assemble(spec, res.plan)
        for m, mod in enumerate(spec.modalities):
            for j, val in enumerate(res.u[sys_.modality_slice(m)]):
                w.writerow([mod.name, j, "%.17g" % val])
    with open(out / "constraints.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["organ", "voxel", "tolerance", "be", "slack"])
        for organ, voxel, C, v in _constraint_rows(spec, res):
            w.writerow([organ, voxel, "%.10g" % C, "%.10g" % v, "%.10g" % (C - v)])
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["start", "iter", "N", "V", "radius", "status"])
        for k, s in enumerate(starts):
            for t in s["trace"]:
                w.writerow([k, t["iter"], " ".join("%.6g" % n for n in t["N"]), "%.10g" % t["V"],
                            "%.6g" % t["radius"], t["status"]])


def cmd_phantom(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    spec = build_spec(cfg)
    write_label_grid(out / "labels.csv", build_phantom(cfg.scenario.phantom))
    files = []
    for mod in spec.modalities:
        name = out / f"{mod.name}_tumor.txt"
        write_triplets(name, mod.T)
        files.append(name.name)
        for organ, H in mod.H.items():
            name = out / f"{mod.name}_{organ}.txt"
            write_triplets(name, H)
            files.append(name.name)
    dump_yaml(out / "manifest.yaml", _manifest(args, cfg, {"files": ["labels.csv"] + files}))
    print(f"wrote labels.csv and {len(files)} matrix files to {out}")
    return EXIT_OK


def _u_init(spec, cfg: RunConfig):
    return initial_fluence(spec, cfg.scenario.prescription)


def cmd_plan(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    spec = build_spec(cfg)
    dump_yaml(out / "manifest.yaml", _manifest(args, cfg))
    res = optimize_fractionation(spec, cfg.upper, u_init=_u_init(spec, cfg))
    _write_plan(out, spec, res)
    print(f"plan {res.plan.as_tuple()}  net BE {res.net_be:.6g}  "
          f"({res.diagnostics['evaluations']} lower-level solves, {res.diagnostics['seconds']:.1f} s)")
    return EXIT_OK


def cmd_brute_force(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    spec = build_spec(cfg)
    dump_yaml(out / "manifest.yaml", _manifest(args, cfg))
    t0 = time.perf_counter()
    surf = brute_force(spec, _u_init(spec, cfg), cfg.lower, max_points=cfg.brute_force_cap, jobs=args.jobs)
    (out / "surface.csv").write_text(surf.to_csv())
    report = {"optimum": list(surf.optimum), "V": surf.optimum_value, "points": len(surf.grid),
              "seconds": time.perf_counter() - t0}
    if args.compare:
        try:
            prior = yaml.safe_load(Path(args.compare).read_text())
            plan, value = tuple(prior["plan"]), float(prior["objective"])
        except (OSError, yaml.YAMLError, KeyError, TypeError) as exc:
            raise ConfigError(f"cannot read plan summary {args.compare}: {exc}") from exc
        report["compare"] = {"plan": list(plan), "objective": value,
                             "gap": (value - surf.optimum_value) / abs(surf.optimum_value)}
    dump_yaml(out / "optimum.yaml", report)
    print(surf.summary(), end="")
    if "compare" in report:
        print(f"gap to {args.compare}: {100 * report['compare']['gap']:.3f}%")
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    names = list(SWEEPS) if args.name == ["all"] else args.name
    unknown = set(names) - set(SWEEPS)
    if unknown:
        raise ConfigError(f"unknown sweep(s) {sorted(unknown)}; choose from {sorted(SWEEPS)}")
    dump_yaml(out / "manifest.yaml", _manifest(args, cfg, {"sweeps": [to_plain(SWEEPS[n]) for n in names]}))
    cache: dict = {}
    failed = False
    for name in names:
        res = run_sweep(SWEEPS[name], cfg.scenario, cfg.upper, cache, jobs=args.jobs)
        (out / f"sweep_{name}.csv").write_text(res.to_csv())
        (out / f"sweep_{name}.txt").write_text(res.to_table())
        dump_yaml(out / f"sweep_{name}_flags.yaml", res.flags)
        print(f"== {name}\n{res.to_table()}flags: {res.flags}")
        failed |= not res.flags["all_rows_ok"]
    return EXIT_NUMERICAL if failed else EXIT_OK


def cmd_baselines(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    spec = build_spec(cfg)
    dump_yaml(out / "manifest.yaml", _manifest(args, cfg))
    conv, single = run_baselines(spec, cfg.upper)
    for tag, res in (("conv", conv), ("single", single)):
        sub = out / tag
        sub.mkdir(exist_ok=True)
        _write_plan(sub, spec, res)
        print(f"{tag:>6}: plan {res.plan.as_tuple()}  net BE {res.net_be:.6g}")
    return EXIT_OK


COMMANDS = {"phantom": cmd_phantom, "plan": cmd_plan, "brute-force": cmd_brute_force,
            "sweep": cmd_sweep, "baselines": cmd_baselines}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML problem/solver configuration")
    common.add_argument("--out", default="mmplan_out", help="output directory (created if missing)")
    common.add_argument("--override", action="append", metavar="K=V",
                        help="override a setting, e.g. T_d=5 or lower.bcd_tol=1e-7 (repeatable)")
    common.add_argument("--seed", type=int, default=0,
                        help="seed for randomized instance generation; solvers are deterministic")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps and brute force")
    common.add_argument("-v", "--verbose", action="count", default=0)
    p = argparse.ArgumentParser(prog="mmplan", description="Multi-modality fluence and fractionation planning.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", parents=[common], help="write the phantom label grid and dose matrices")
    sub.add_parser("plan", parents=[common], help="optimize fluence and fractionation jointly")
    bf = sub.add_parser("brute-force", parents=[common], help="evaluate the value function on the integer grid")
    bf.add_argument("--compare", metavar="PLAN_YAML", help="plan.yaml from a previous 'plan' run")
    sw = sub.add_parser("sweep", parents=[common], help="run parameter sweeps against the baselines")
    sw.add_argument("name", nargs="*", default=["all"], help=f"sweeps to run: {', '.join(SWEEPS)} or all")
    sub.add_parser("baselines", parents=[common], help="conventional and optimized single-modality courses")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    np.random.seed(args.seed)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = apply_overrides(load_config(args.config), args.override)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleProblem as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except PlanningError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
