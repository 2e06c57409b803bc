"""Synthetic 2D head-and-neck phantom with photon- and proton-like beams.

Coordinates are in cm with the origin at the grid centre; ``x`` runs along
columns and ``y`` along rows (posterior is +y). A gantry angle of 0 deg
irradiates from the anterior side, travelling in +y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np
import scipy.ndimage as ndi
import scipy.sparse as sp

from .errors import ConfigError
from .model import ConstraintSpec, ModalityData, Phantom, ProblemSpec
from .nnls import nnls

PHOTON = "photon"
PROTON = "proton"
PHOTON_ANGLES = (0.0, 51.0, 103.0, 153.0, 206.0, 257.0, 309.0)


@dataclass(frozen=True)
class Disk:
    name: str
    center: tuple
    radius: float
    priority: int


DEFAULT_STRUCTURES = (
    Disk("tumor", (0.0, -1.5), 3.0, 4),
    Disk("cord", (0.0, 7.0), 1.0, 3),
    Disk("parotid_r", (-8.0, 2.0), 2.2, 2),
    Disk("parotid_l", (8.0, 2.0), 2.2, 2),
)


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry of the phantom.

    The body is an ellipse with semi-axes ``body_radii`` (x, y); the
    unspecified-tissue structure is the band of width ``skin_thickness``
    inside its contour (no band when 0). Overlaps resolve by priority, and
    the band ranks below every disk.
    """

    grid_shape: tuple = (60, 60)
    voxel_size: float = 0.5
    body_radii: tuple = (14.0, 12.0)
    skin_thickness: float = 1.0
    structures: tuple = DEFAULT_STRUCTURES
    tumor_name: str = "tumor"
    unspecified_name: str = "unspecified"


@dataclass(frozen=True)
class BeamModel:
    """Beam arrangement and depth-dose shape of one modality.

    Photon fields: ``angles`` (deg), ``beamlets_per_angle``, attenuation
    ``mu`` (1/cm), ``buildup`` depth (cm) and Gaussian ``sigma_lat``
    (voxels). Proton fields: ``spots`` as (lateral offset cm, Bragg depth cm)
    pairs, or ``n_spots`` placed inside the target when ``spots`` is None;
    ``peak_width`` (cm) and entrance ``plateau`` as a fraction of the peak.
    """

    kind: str = PHOTON
    angles: tuple = PHOTON_ANGLES
    beamlets_per_angle: int = 28
    mu: float = 0.1
    buildup: float = 1.5
    sigma_lat: float = 1.0
    n_spots: int = 40
    spots: Optional[tuple] = None
    peak_width: float = 2.0
    plateau: float = 0.3

    def __post_init__(self):
        if self.kind not in (PHOTON, PROTON):
            raise ConfigError(f"beam kind must be photon or proton, got {self.kind!r}")
        if self.mu < 0 or self.buildup <= 0 or self.sigma_lat < 0 or self.peak_width <= 0:
            raise ConfigError("beam parameters out of range")
        if not 0 <= self.plateau < 1:
            raise ConfigError("plateau must lie in [0, 1)")


def proton_beam(**kw) -> BeamModel:
    kw.setdefault("angles", (0.0,))
    return BeamModel(kind=PROTON, **kw)


def voxel_centers(grid_shape, voxel_size):
    rows, cols = grid_shape
    y, x = np.mgrid[0:rows, 0:cols]
    x = (x.ravel() + 0.5 - cols / 2.0) * voxel_size
    y = (y.ravel() + 0.5 - rows / 2.0) * voxel_size
    return x, y


def _in_ellipse(x, y, a, b):
    return (x / a) ** 2 + (y / b) ** 2 <= 1.0


def build_phantom(cfg: PhantomConfig = PhantomConfig()) -> Phantom:
    """Rasterize the configured structures into disjoint masks."""
    rows, cols = cfg.grid_shape
    vs = cfg.voxel_size
    half_w, half_h = cols * vs / 2.0, rows * vs / 2.0
    a, b = cfg.body_radii
    if a > half_w or b > half_h:
        raise ConfigError("body contour does not fit inside the grid")
    x, y = voxel_centers(cfg.grid_shape, vs)
    body = _in_ellipse(x, y, a, b)
    inside = {}
    for d in cfg.structures:
        cx, cy = d.center
        if abs(cx) + d.radius > half_w or abs(cy) + d.radius > half_h:
            raise ConfigError(f"structure {d.name} extends beyond the grid")
        inside[d.name] = body & ((x - cx) ** 2 + (y - cy) ** 2 <= d.radius ** 2)
    if len(inside) != len(cfg.structures):
        raise ConfigError("structure names must be unique")
    ordered = sorted(cfg.structures, key=lambda d: -d.priority)
    for i, d1 in enumerate(ordered):
        for d2 in ordered[i + 1:]:
            if d1.priority == d2.priority and np.any(inside[d1.name] & inside[d2.name]):
                raise ConfigError(f"{d1.name} and {d2.name} overlap with equal priority")
    taken = np.zeros(x.size, dtype=bool)
    masks = {}
    for d in ordered:
        m = inside[d.name] & ~taken
        taken |= m
        masks[d.name] = np.flatnonzero(m)
    if cfg.skin_thickness > 0:
        s = cfg.skin_thickness
        inner = _in_ellipse(x, y, a - s, b - s) if min(a, b) > s else np.zeros_like(body)
        masks[cfg.unspecified_name] = np.flatnonzero(body & ~inner & ~taken)
    return Phantom(cfg.grid_shape, vs, masks, cfg.tumor_name)


def expand_margin(phantom: Phantom, structure: str, radius: int) -> Phantom:
    """Dilate one structure by ``radius`` voxels (Euclidean ball).

    Voxels taken over by the dilated structure are removed from the other
    masks; dilation is clipped at the grid boundary.
    """
    if radius < 0:
        raise ConfigError("margin radius must be nonnegative")
    if structure not in phantom.masks:
        raise ConfigError(f"unknown structure {structure!r}")
    if radius == 0:
        return phantom
    img = np.zeros(phantom.n_voxels, dtype=bool)
    img[phantom.masks[structure]] = True
    r = int(math.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    ball = xx ** 2 + yy ** 2 <= radius ** 2
    grown = ndi.binary_dilation(img.reshape(phantom.grid_shape), structure=ball).ravel()
    grown_idx = np.flatnonzero(grown)
    masks = {}
    for name, idx in phantom.masks.items():
        masks[name] = grown_idx if name == structure else idx[~grown[idx]]
    return phantom.with_masks(masks)


def _geometry(phantom: Phantom, body_radii, angle_deg):
    x, y = voxel_centers(phantom.grid_shape, phantom.voxel_size)
    t = phantom.tumor
    iso = np.array([x[t].mean(), y[t].mean()])
    th = math.radians(angle_deg)
    d = np.array([math.sin(th), math.cos(th)])     # direction of travel
    p = np.array([math.cos(th), -math.sin(th)])    # lateral axis
    along = (x - iso[0]) * d[0] + (y - iso[1]) * d[1]
    lat = (x - iso[0]) * p[0] + (y - iso[1]) * p[1]
    body = _in_ellipse(x, y, *body_radii)
    return iso, d, p, along, lat, body


def _entry(iso, d, p, s, body_radii):
    """Along-axis coordinate where the ray at lateral offset ``s`` enters the body."""
    a, b = body_radii
    o = iso + s * p
    qa = d[0] ** 2 / a ** 2 + d[1] ** 2 / b ** 2
    qb = 2.0 * (o[0] * d[0] / a ** 2 + o[1] * d[1] / b ** 2)
    qc = o[0] ** 2 / a ** 2 + o[1] ** 2 / b ** 2 - 1.0
    disc = qb * qb - 4.0 * qa * qc
    if disc <= 0:
        raise ConfigError(f"beamlet at lateral offset {s:.3g} cm misses the body")
    return (-qb - math.sqrt(disc)) / (2.0 * qa)


def _lateral(lat, sigma_cm, voxel_size):
    if sigma_cm == 0:
        return (np.abs(lat) <= voxel_size / 2.0).astype(float)
    prof = np.exp(-0.5 * (lat / sigma_cm) ** 2)
    prof[np.abs(lat) > 3.0 * sigma_cm] = 0.0
    return prof


def photon_depth_dose(depth, mu, buildup):
    """Linear buildup to 1 at ``buildup``, exponential attenuation beyond."""
    depth = np.asarray(depth, dtype=float)
    out = np.where(depth < buildup, depth / buildup, np.exp(-mu * (depth - buildup)))
    return np.where(depth >= 0, out, 0.0)


def proton_depth_dose(depth, bragg, width, plateau):
    """Entrance plateau, Gaussian Bragg peak of height 1 at ``bragg``, distal falloff."""
    depth = np.asarray(depth, dtype=float)
    s = width / 2.0
    g = np.exp(-0.5 * ((depth - bragg) / s) ** 2)
    out = np.where(depth <= bragg, plateau + (1.0 - plateau) * g, g)
    return np.where(depth >= 0, out, 0.0)


def _normalize(cols):
    peak = cols.max(axis=0)
    if np.any(peak <= 0):
        raise ConfigError("a beamlet deposits no dose inside the body")
    return cols / peak


def photon_dose(phantom: Phantom, beam: BeamModel, body_radii) -> np.ndarray:
    """Full-grid photon dose, one column per (angle, lateral offset) beamlet."""
    if beam.kind != PHOTON:
        raise ConfigError("photon_dose needs a photon beam")
    vs = phantom.voxel_size
    cols = []
    for ang in beam.angles:
        iso, d, p, along, lat, body = _geometry(phantom, body_radii, ang)
        proj = lat[phantom.tumor]
        offsets = np.linspace(proj.min() - vs, proj.max() + vs, beam.beamlets_per_angle)
        for s in offsets:
            depth = along - _entry(iso, d, p, s, body_radii)
            dose = photon_depth_dose(depth, beam.mu, beam.buildup)
            cols.append(dose * _lateral(lat - s, beam.sigma_lat * vs, vs) * body)
    return _normalize(np.column_stack(cols))


def default_spots(phantom: Phantom, beam: BeamModel, body_radii) -> tuple:
    """Spread ``n_spots`` Bragg-peak positions evenly over the target (sunflower layout)."""
    x, y = voxel_centers(phantom.grid_shape, phantom.voxel_size)
    t = phantom.tumor
    iso, d, p, along, lat, _ = _geometry(phantom, body_radii, beam.angles[0])
    radius = max(math.sqrt(t.size / math.pi) * phantom.voxel_size - phantom.voxel_size, 0.0)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    spots = []
    for k in range(beam.n_spots):
        rk = radius * math.sqrt((k + 0.5) / beam.n_spots)
        px, py = rk * math.cos(k * golden), rk * math.sin(k * golden)
        s = px * p[0] + py * p[1]
        a = px * d[0] + py * d[1]
        spots.append((s, a - _entry(iso, d, p, s, body_radii)))
    return tuple(spots)


def proton_dose(phantom: Phantom, beam: BeamModel, body_radii) -> np.ndarray:
    """Full-grid proton dose, one column per spot; all spots share ``beam.angles[0]``."""
    if beam.kind != PROTON:
        raise ConfigError("proton_dose needs a proton beam")
    vs = phantom.voxel_size
    iso, d, p, along, lat, body = _geometry(phantom, body_radii, beam.angles[0])
    spots = beam.spots if beam.spots is not None else default_spots(phantom, beam, body_radii)
    rows, cols_ = phantom.grid_shape
    half = np.array([cols_, rows]) * vs / 2.0
    cols = []
    for s, bragg in spots:
        t_in = _entry(iso, d, p, s, body_radii)
        peak = iso + s * p + (t_in + bragg) * d
        if bragg <= 0 or np.any(np.abs(peak) > half):
            raise ConfigError(f"proton spot ({s:.3g}, {bragg:.3g}) lies outside the grid")
        depth = along - t_in
        dose = proton_depth_dose(depth, bragg, beam.peak_width, beam.plateau)
        cols.append(dose * _lateral(lat - s, beam.sigma_lat * vs, vs) * body)
    return _normalize(np.column_stack(cols))


def _rows(dose, idx):
    return sp.csr_matrix(dose[idx])


def photon_dose_matrices(phantom: Phantom, beam: BeamModel, body_radii=(14.0, 12.0)):
    """Tumor matrix and per-organ matrices for a photon beam arrangement."""
    dose = photon_dose(phantom, beam, body_radii)
    return _rows(dose, phantom.tumor), {k: _rows(dose, phantom.masks[k]) for k in phantom.oar_names}


def proton_dose_matrices(phantom: Phantom, beam: BeamModel, body_radii=(14.0, 12.0)):
    """Tumor matrix and per-organ matrices for a single-angle proton spot set."""
    dose = proton_dose(phantom, beam, body_radii)
    return _rows(dose, phantom.tumor), {k: _rows(dose, phantom.masks[k]) for k in phantom.oar_names}


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to build a planning problem on the synthetic phantom.

    Radiobiology defaults: modality 1 has alpha = gamma = 0.35 /Gy, tumor
    alpha/beta 10 Gy and organ gamma/delta ratios from ``oar_ratios``.
    Modality 2 has tumor ``alpha2`` (same alpha/beta), organ gamma equal to
    ``alpha2 * gamma1 / alpha1`` and organ delta scaled by ``r``.
    ``margin`` (voxels) dilates the target used to build modality 2; its
    tumor BE is then weighted by ``|tumor| / |dilated target|`` so the
    objective is the per-voxel average BE times ``|tumor|``.
    """

    phantom: PhantomConfig = PhantomConfig()
    beams: tuple = (BeamModel(), proton_beam())
    names: tuple = (PHOTON, PROTON)
    alpha1: float = 0.35
    tumor_ab: float = 10.0
    gamma1: float = 0.35
    oar_ratios: tuple = (("cord", 2.0), ("parotid_r", 5.0), ("parotid_l", 5.0), ("unspecified", 2.0))
    constraints: tuple = (("cord", "max", 35.0), ("parotid_r", "mean", 12.0),
                          ("parotid_l", "mean", 12.0), ("unspecified", "max", 13.125))
    T_d: float = 5.0
    N_max: int = 25
    alpha2: float = 0.35
    r: float = 1.0
    margin: int = 0
    prescription: float = 70.0


SCENARIO_KEYS = ("T_d", "alpha2", "r", "margin", "N_max")


@lru_cache(maxsize=32)
def _dose_cached(phantom_cfg: PhantomConfig, beam: BeamModel, margin: int):
    base = build_phantom(phantom_cfg)
    target = expand_margin(base, base.tumor_name, margin)
    fn = photon_dose if beam.kind == PHOTON else proton_dose
    dose = fn(target, beam, phantom_cfg.body_radii)
    dose.setflags(write=False)
    return base, target, dose


def _modality(name, dose, base, target, alpha, beta, gamma, delta):
    T = _rows(dose, target.tumor)
    # organ voxels inside a target margin stay organ voxels: dose this modality puts
    # there still counts against the organ's tolerance
    H = {k: sp.csr_matrix(dose[base.masks[k]]) for k in base.oar_names}
    # on an enlarged target the objective counts BE per target voxel, so every
    # modality enters on the scale of the original tumor
    return ModalityData(name=name, T=T, H=H, alpha=alpha, beta=beta,
                        gamma={k: gamma[k] for k in H}, delta={k: delta[k] for k in H},
                        tumor_voxels=target.tumor, tumor_weight=base.tumor.size / target.tumor.size)


def scenario(base: ScenarioConfig = ScenarioConfig(), overrides: Optional[dict] = None) -> ProblemSpec:
    """Build the planning problem for one point of a parameter sweep.

    ``overrides`` may set ``T_d``, ``alpha2``, ``r``, ``margin`` and ``N_max``.
    """
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(SCENARIO_KEYS)
    if unknown:
        raise ConfigError(f"unknown scenario override(s): {sorted(unknown)}")
    cfg = replace(base, **overrides)
    ratios = dict(cfg.oar_ratios)
    mods = []
    for m, (name, beam) in enumerate(zip(cfg.names, cfg.beams)):
        margin = cfg.margin if m == 1 else 0
        base_ph, target, dose = _dose_cached(cfg.phantom, beam, int(margin))
        missing = set(base_ph.oar_names) - set(ratios)
        if missing:
            raise ConfigError(f"no gamma/delta ratio for organs {sorted(missing)}")
        if m == 0:
            alpha, gamma, scale = cfg.alpha1, cfg.gamma1, 1.0
        else:
            alpha, gamma, scale = cfg.alpha2, cfg.alpha2 * cfg.gamma1 / cfg.alpha1, cfg.r
        g = {k: gamma for k in base_ph.oar_names}
        dl = {k: scale * gamma / ratios[k] for k in base_ph.oar_names}
        mods.append(_modality(name, dose, base_ph, target, alpha, alpha / cfg.tumor_ab, g, dl))
    base_ph = build_phantom(cfg.phantom)
    cons = [ConstraintSpec(n, k, t) for n, k, t in cfg.constraints if n in base_ph.masks]
    return ProblemSpec(base_ph, mods, cons, T_d=cfg.T_d, N_max=cfg.N_max)


def initial_fluence(spec: ProblemSpec, prescription: float = 70.0) -> np.ndarray:
    """Nonnegative fit of a uniform tumor dose, ignoring every organ constraint."""
    T = sp.block_diag([m.T for m in spec.modalities], format="csr")
    return nnls(T, np.full(T.shape[0], float(prescription)))
