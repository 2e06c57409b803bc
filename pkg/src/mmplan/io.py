"""File formats: sparse triplet matrices, YAML problem configs and run manifests."""

from __future__ import annotations

import dataclasses
import math
import re
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
import yaml

from .errors import ConfigError
from .lower import LowerConfig
from .model import ModalityData, ProblemSpec
from .phantom import BeamModel, Disk, PhantomConfig, ScenarioConfig, SCENARIO_KEYS, scenario
from .upper import UpperConfig


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot, such as ``1e-7``."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _load_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


# ------------------------------------------------------------ sparse triplets

def write_triplets(path, matrix) -> None:
    """Write ``rows cols nnz`` then one ``i j value`` line per stored entry (0-based)."""
    m = sp.coo_matrix(matrix)
    m.sum_duplicates()
    order = np.lexsort((m.col, m.row))
    lines = [f"{m.shape[0]} {m.shape[1]} {m.nnz}"]
    lines += [f"{i} {j} {v:.17g}" for i, j, v in zip(m.row[order], m.col[order], m.data[order])]
    Path(path).write_text("\n".join(lines) + "\n")


def read_triplets(path) -> sp.csr_matrix:
    try:
        text = Path(path).read_text().split("\n")
    except OSError as exc:
        raise ConfigError(f"cannot read matrix file {path}: {exc}") from exc
    rows = [ln.split() for ln in text if ln.strip()]
    if not rows or len(rows[0]) != 3:
        raise ConfigError(f"{path}: first line must be 'rows cols nnz'")
    try:
        n, m, nnz = (int(v) for v in rows[0])
        body = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, 3)
    except ValueError as exc:
        raise ConfigError(f"{path}: malformed entry ({exc})") from exc
    if body.shape[0] != nnz:
        raise ConfigError(f"{path}: header announces {nnz} entries, found {body.shape[0]}")
    i, j = body[:, 0].astype(np.int64), body[:, 1].astype(np.int64)
    if nnz and (i.min() < 0 or j.min() < 0 or i.max() >= n or j.max() >= m):
        raise ConfigError(f"{path}: index out of range for a {n}x{m} matrix")
    return sp.csr_matrix((body[:, 2], (i, j)), shape=(n, m))


def write_label_grid(path, phantom) -> None:
    """CSV grid of structure labels (0 = background, k = k-th structure)."""
    names = list(phantom.masks)
    grid = phantom.label_grid() + 1
    header = "# " + ",".join(f"{k + 1}={n}" for k, n in enumerate(names))
    np.savetxt(path, grid, fmt="%d", delimiter=",", header=header, comments="")


# ------------------------------------------------------------------- configs

@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings of one CLI run."""

    scenario: ScenarioConfig = ScenarioConfig()
    lower: LowerConfig = LowerConfig()
    upper: UpperConfig = UpperConfig()
    external: tuple = ()
    brute_force_cap: int = 2000
    base_dir: str = "."


def _tuple(x):
    return tuple(_tuple(v) for v in x) if isinstance(x, (list, tuple)) else x


def _build(cls, raw: dict, what: str, convert=None):
    raw = dict(raw or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown {what} key(s): {sorted(unknown)}")
    if convert:
        raw = convert(raw)
    try:
        return cls(**{k: _tuple(v) for k, v in raw.items()})
    except TypeError as exc:
        raise ConfigError(f"bad {what} section: {exc}") from exc


def _phantom_cfg(raw):
    def conv(d):
        if "structures" in d:
            d["structures"] = tuple(_build(Disk, s, "structure") for s in d["structures"])
        return d
    return _build(PhantomConfig, raw, "phantom", conv)


def parse_config(data: dict, base_dir=".") -> RunConfig:
    """Turn a parsed YAML mapping into a :class:`RunConfig`.

    Top-level keys: ``phantom``, ``modalities`` (list of ``{name, beam,
    matrices}``), ``radiobiology``, ``constraints``, ``T_d``, ``N_max``,
    ``margin``, ``prescription`` and ``solver`` (``lower``/``upper``/
    ``brute_force_cap``).
    """
    data = dict(data or {})
    allowed = {"phantom", "modalities", "radiobiology", "constraints", "T_d", "N_max",
               "margin", "prescription", "solver"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    kw = {}
    if "phantom" in data:
        kw["phantom"] = _phantom_cfg(data["phantom"])
    external = []
    if "modalities" in data:
        names, beams = [], []
        for mod in data["modalities"]:
            mod = dict(mod)
            bad = set(mod) - {"name", "beam", "matrices"}
            if bad:
                raise ConfigError(f"unknown modality key(s): {sorted(bad)}")
            names.append(str(mod.get("name", f"m{len(names) + 1}")))
            beams.append(_build(BeamModel, mod.get("beam", {}), "beam"))
            external.append(_tuple(sorted((mod.get("matrices") or {}).items(), key=lambda kv: kv[0]))
                            if isinstance(mod.get("matrices"), dict) else ())
        kw["names"], kw["beams"] = tuple(names), tuple(beams)
    rb = dict(data.get("radiobiology") or {})
    if "oar_ratios" in rb:
        rb["oar_ratios"] = tuple((k, float(v)) for k, v in rb["oar_ratios"].items())
    allowed_rb = {"alpha1", "tumor_ab", "gamma1", "oar_ratios", "alpha2", "r"}
    if set(rb) - allowed_rb:
        raise ConfigError(f"unknown radiobiology key(s): {sorted(set(rb) - allowed_rb)}")
    kw.update(rb)
    if "constraints" in data:
        cons = []
        for c in data["constraints"]:
            try:
                cons.append((str(c["name"]), str(c["kind"]), float(c["tolerance"])))
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"constraint entries need name, kind and tolerance: {c}") from exc
        kw["constraints"] = tuple(cons)
    for key in ("T_d", "N_max", "margin", "prescription"):
        if key in data:
            kw[key] = data[key]
    try:
        scen = ScenarioConfig(**kw)
    except TypeError as exc:
        raise ConfigError(f"bad scenario settings: {exc}") from exc
    solver = dict(data.get("solver") or {})
    if set(solver) - {"lower", "upper", "brute_force_cap"}:
        raise ConfigError(f"unknown solver key(s): {sorted(set(solver) - {'lower', 'upper', 'brute_force_cap'})}")
    lower = _build(LowerConfig, solver.get("lower"), "solver.lower")
    upper_raw = dict(solver.get("upper") or {})
    if "initial_guesses" in upper_raw and upper_raw["initial_guesses"] is not None:
        upper_raw["initial_guesses"] = tuple(tuple(g) for g in upper_raw["initial_guesses"])
    upper = _build(UpperConfig, upper_raw, "solver.upper")
    upper = dataclasses.replace(upper, lower=lower)
    return RunConfig(scenario=scen, lower=lower, upper=upper, external=tuple(external),
                     brute_force_cap=int(solver.get("brute_force_cap", 2000)), base_dir=str(base_dir))


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        data = _load_yaml(p.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p} is not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return parse_config(data, base_dir=p.parent)


def _coerce(value: str):
    return _load_yaml(value)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``key=value`` strings; keys are scenario fields or ``lower.x``/``upper.x``."""
    scen, lower, upper = {}, {}, {}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key, val = key.strip(), _coerce(raw.strip())
        if key.startswith("lower."):
            lower[key[6:]] = val
        elif key.startswith("upper."):
            upper[key[6:]] = val
        elif key in SCENARIO_KEYS or key in ("prescription",):
            scen[key] = val
        else:
            raise ConfigError(f"unknown override key {key!r}")
    try:
        s = dataclasses.replace(cfg.scenario, **scen)
        lo = dataclasses.replace(cfg.lower, **lower)
        up = dataclasses.replace(cfg.upper, lower=lo, **{k: _tuple(v) for k, v in upper.items()})
    except TypeError as exc:
        raise ConfigError(f"bad override: {exc}") from exc
    return dataclasses.replace(cfg, scenario=s, lower=lo, upper=up)


def build_spec(cfg: RunConfig) -> ProblemSpec:
    """Problem for a run config; external dose matrices replace generated ones."""
    spec = scenario(cfg.scenario)
    if not any(cfg.external):
        return spec
    mods = list(spec.modalities)
    for m, ext in enumerate(cfg.external):
        if not ext:
            continue
        ext = dict(ext)
        old = mods[m]
        base = Path(cfg.base_dir)
        T = read_triplets(base / ext["T"]) if "T" in ext else old.T
        H = dict(old.H)
        for organ, path in dict(ext.get("H", ())).items():
            H[organ] = read_triplets(base / path)
        mods[m] = dataclasses.replace(old, T=T, H=H)
    return spec.replace(modalities=mods)


def _plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if hasattr(obj, "N") and hasattr(obj, "as_tuple"):
        return list(obj.as_tuple())
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def to_plain(obj):
    """Nested dataclasses and arrays as YAML-safe builtins."""
    return _plain(obj)


def dump_yaml(path, data) -> None:
    Path(path).write_text(yaml.safe_dump(to_plain(data), sort_keys=False))
