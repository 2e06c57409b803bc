"""Problem data, biological-effect (BE) evaluation and fixed-N assembly.

The multi-modality planning problem is stored per modality (dose matrices and
linear-quadratic coefficients) and, for a fixed fractionation schedule,
flattened into one block-diagonal system in which every max-dose organ is
expanded into one-voxel constraints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DimensionError, DomainError

MEAN = "mean"
MAX = "max"


def _index_array(idx, n_voxels, name):
    arr = np.unique(np.asarray(idx, dtype=np.int64).ravel())
    if arr.size and (arr[0] < 0 or arr[-1] >= n_voxels):
        raise ConfigError(f"mask {name!r} has voxel indices outside the grid")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Phantom:
    """2D voxel grid with named, pairwise disjoint structure masks.

    Masks hold flat (row-major) voxel indices.
    """

    grid_shape: tuple
    voxel_size: float
    masks: dict
    tumor_name: str = "tumor"

    def __post_init__(self):
        shape = tuple(int(s) for s in self.grid_shape)
        if len(shape) != 2 or min(shape) < 1:
            raise ConfigError(f"grid_shape must be two positive ints, got {self.grid_shape}")
        if not self.voxel_size > 0:
            raise ConfigError("voxel_size must be positive")
        n = shape[0] * shape[1]
        masks = {str(k): _index_array(v, n, k) for k, v in self.masks.items()}
        if self.tumor_name not in masks or masks[self.tumor_name].size == 0:
            raise ConfigError(f"tumor mask {self.tumor_name!r} is missing or empty")
        count = np.zeros(n, dtype=np.int64)
        for arr in masks.values():
            count[arr] += 1
        if count.max(initial=0) > 1:
            raise ConfigError("structure masks overlap")
        object.__setattr__(self, "grid_shape", shape)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "masks", masks)

    @property
    def n_voxels(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]

    @property
    def tumor(self) -> np.ndarray:
        return self.masks[self.tumor_name]

    @property
    def l(self) -> int:
        """Number of tumor voxels."""
        return int(self.tumor.size)

    @property
    def oar_names(self) -> list:
        return [k for k in self.masks if k != self.tumor_name]

    def label_grid(self) -> np.ndarray:
        """Integer label image: 0 outside every structure, k for the k-th mask."""
        labels = np.zeros(self.n_voxels, dtype=np.int64)
        for k, arr in enumerate(self.masks.values(), start=1):
            labels[arr] = k
        return labels.reshape(self.grid_shape)

    def with_masks(self, masks: dict) -> "Phantom":
        return Phantom(self.grid_shape, self.voxel_size, masks, self.tumor_name)


def _as_csr(m, name):
    m = sp.csr_matrix(m, dtype=np.float64)
    m.sum_duplicates()
    if m.nnz and (not np.all(np.isfinite(m.data)) or m.data.min() < 0):
        raise ConfigError(f"dose matrix {name} must be nonnegative and finite")
    return m


def _coef(v, n, name, strict):
    arr = np.array(np.broadcast_to(np.asarray(v, dtype=np.float64), (n,)))
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} must be finite")
    if strict and np.any(arr <= 0):
        raise ConfigError(f"{name} must be strictly positive")
    if not strict and np.any(arr < 0):
        raise ConfigError(f"{name} must be nonnegative")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ModalityData:
    """Dose matrices and LQ coefficients of one radiation modality.

    ``T`` maps beamlet intensities to tumor-voxel dose, ``H[name]`` to the
    dose in organ ``name``. Coefficients may be given as scalars and are
    broadcast to one entry per row of the matching matrix.

    ``tumor_weight`` scales this modality's tumor BE inside the objective
    only. A modality planned on an enlarged target uses it to count its
    tumor BE per voxel of that target instead of per row summed.
    """

    name: str
    T: sp.csr_matrix
    H: dict
    alpha: np.ndarray
    beta: np.ndarray
    gamma: dict
    delta: dict
    tumor_voxels: Optional[np.ndarray] = None
    tumor_weight: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.tumor_weight) and self.tumor_weight > 0):
            raise DomainError(f"{self.name}: tumor_weight must be positive, got {self.tumor_weight}")
        T = _as_csr(self.T, f"{self.name}.T")
        H = {k: _as_csr(v, f"{self.name}.H[{k}]") for k, v in self.H.items()}
        for k, h in H.items():
            if h.shape[1] != T.shape[1]:
                raise DimensionError(
                    f"{self.name}: H[{k}] has {h.shape[1]} columns, T has {T.shape[1]}")
        missing = set(H) ^ set(self.gamma) | set(H) ^ set(self.delta)
        if missing:
            raise ConfigError(f"{self.name}: coefficients do not match organs {sorted(missing)}")
        set_ = object.__setattr__
        set_(self, "T", T)
        set_(self, "H", H)
        set_(self, "alpha", _coef(self.alpha, T.shape[0], "alpha", strict=True))
        set_(self, "beta", _coef(self.beta, T.shape[0], "beta", strict=True))
        set_(self, "gamma", {k: _coef(self.gamma[k], H[k].shape[0], f"gamma[{k}]", False) for k in H})
        set_(self, "delta", {k: _coef(self.delta[k], H[k].shape[0], f"delta[{k}]", False) for k in H})
        if self.tumor_voxels is not None:
            tv = np.asarray(self.tumor_voxels, dtype=np.int64)
            if tv.shape != (T.shape[0],):
                raise DimensionError("tumor_voxels must list one voxel per row of T")
            set_(self, "tumor_voxels", tv)

    @property
    def n_beamlets(self) -> int:
        return self.T.shape[1]


@dataclass(frozen=True)
class ConstraintSpec:
    """BE tolerance on one organ at risk, either on its mean or on every voxel."""

    oar_name: str
    kind: str
    tolerance: float

    def __post_init__(self):
        if self.kind not in (MEAN, MAX):
            raise ConfigError(f"constraint kind must be 'mean' or 'max', got {self.kind!r}")
        if not self.tolerance > 0:
            raise ConfigError(f"tolerance for {self.oar_name} must be positive")


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    phantom: Phantom
    modalities: tuple
    constraints: tuple
    T_d: float
    N_max: int

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if not self.modalities:
            raise ConfigError("at least one modality is required")
        if int(self.N_max) != self.N_max or self.N_max < 1:
            raise ConfigError("N_max must be an integer >= 1")
        object.__setattr__(self, "N_max", int(self.N_max))
        if not self.T_d > 0:
            raise ConfigError("T_d must be positive")
        for c in self.constraints:
            rows = set()
            for mod in self.modalities:
                if c.oar_name not in mod.H:
                    raise ConfigError(f"modality {mod.name} has no dose matrix for {c.oar_name}")
                rows.add(mod.H[c.oar_name].shape[0])
            if len(rows) > 1:
                raise DimensionError(f"organ {c.oar_name} has different voxel counts per modality")

    @property
    def M(self) -> int:
        return len(self.modalities)

    @property
    def l(self) -> int:
        return self.phantom.l

    @property
    def n_beamlets(self) -> tuple:
        return tuple(m.n_beamlets for m in self.modalities)

    def replace(self, **changes) -> "ProblemSpec":
        kw = dict(phantom=self.phantom, modalities=self.modalities,
                  constraints=self.constraints, T_d=self.T_d, N_max=self.N_max)
        kw.update(changes)
        return ProblemSpec(**kw)

    @cached_property
    def _template(self) -> "_Template":
        return _Template.build(self)


@dataclass(frozen=True, eq=False)
class FractionationPlan:
    """Fraction count per modality; continuous during the relaxation."""

    N: np.ndarray

    def __post_init__(self):
        N = np.array(self.N, dtype=np.float64).ravel()
        if N.size == 0 or not np.all(np.isfinite(N)):
            raise DomainError("fraction counts must be a nonempty finite vector")
        if np.any(N < 0):
            raise DomainError(f"fraction counts must be nonnegative, got {N}")
        if N.sum() < 1 - 1e-9:
            raise DomainError(f"total fractions must be at least 1, got {N.sum()}")
        N.setflags(write=False)
        object.__setattr__(self, "N", N)

    @property
    def total(self) -> float:
        return float(self.N.sum())

    @property
    def is_integer(self) -> bool:
        return bool(np.all(self.N == np.round(self.N)))

    def as_tuple(self) -> tuple:
        if self.is_integer:
            return tuple(int(n) for n in self.N)
        return tuple(float(n) for n in self.N)


@dataclass(frozen=True)
class ConstraintBlock:
    """One generalized constraint ``gamma.(H u) + (H u).D(H u) <= C``."""

    H: sp.csr_matrix
    gamma_tilde: np.ndarray
    D: np.ndarray
    C: float
    origin: tuple


@dataclass(frozen=True, eq=False)
class _Template:
    """N-independent part of the generalized system, built once per spec."""

    col_offsets: np.ndarray
    T: sp.csr_matrix
    tumor_mod: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    A: sp.csr_matrix
    con_mod: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    seg: np.ndarray
    C: np.ndarray
    origins: tuple
    tumor_weight: np.ndarray

    @classmethod
    def build(cls, spec: ProblemSpec) -> "_Template":
        mods = spec.modalities
        M = len(mods)
        ncols = [m.n_beamlets for m in mods]
        col_offsets = np.concatenate([[0], np.cumsum(ncols)]).astype(np.int64)
        T = sp.block_diag([m.T for m in mods], format="csr")
        tumor_mod = np.concatenate([np.full(m.T.shape[0], k) for k, m in enumerate(mods)])
        weight = np.concatenate([np.full(m.T.shape[0], float(m.tumor_weight)) for m in mods])
        alpha = np.concatenate([m.alpha for m in mods]) * weight
        beta = np.concatenate([m.beta for m in mods]) * weight

        blocks, con_mod, gam, dlt, seg, C, origins = [], [], [], [], [0], [], []
        for c in spec.constraints:
            Hk = sp.block_diag([m.H[c.oar_name] for m in mods], format="csr")
            nv = mods[0].H[c.oar_name].shape[0]
            mod_of_row = np.repeat(np.arange(M), nv)
            g = np.concatenate([m.gamma[c.oar_name] for m in mods])
            d = np.concatenate([m.delta[c.oar_name] for m in mods])
            if c.kind == MEAN:
                # organ-average BE, not the organ-total
                g, d = g / nv, d / nv
                order = np.arange(M * nv)
                seg.append(seg[-1] + M * nv)
                C.append(c.tolerance)
                origins.append((c.oar_name, MEAN))
            else:
                # voxel-major rows: voxel j owns rows j*M .. j*M+M-1, one per modality
                order = (np.arange(M)[None, :] * nv + np.arange(nv)[:, None]).ravel()
                seg.extend(seg[-1] + M * np.arange(1, nv + 1))
                C.extend([c.tolerance] * nv)
                origins.extend((c.oar_name, j) for j in range(nv))
            blocks.append(Hk[order])
            con_mod.append(mod_of_row[order])
            gam.append(g[order])
            dlt.append(d[order])
        total_cols = int(col_offsets[-1])
        if blocks:
            A = sp.vstack(blocks, format="csr")
            con_mod = np.concatenate(con_mod)
            gam, dlt = np.concatenate(gam), np.concatenate(dlt)
        else:
            A = sp.csr_matrix((0, total_cols))
            con_mod = np.zeros(0, dtype=np.int64)
            gam = dlt = np.zeros(0)
        return cls(col_offsets, T, tumor_mod, alpha, beta, A, con_mod, gam, dlt,
                   np.asarray(seg, dtype=np.int64), np.asarray(C, dtype=np.float64),
                   tuple(origins), weight)


@dataclass(frozen=True, eq=False)
class GeneralizedSystem:
    """Block-diagonal fixed-N problem.

    Tumor part: ``T``, ``alpha_tilde`` (= -N_m alpha_m stacked) and the
    diagonal of ``B``, both already multiplied by ``tumor_weight`` (per row). Constraint ``i`` owns rows ``seg[i]:seg[i+1]`` of the
    stacked matrix ``A`` together with the matching entries of
    ``gamma_tilde`` and the diagonal ``D``; its tolerance is ``C[i]``.
    """

    N: np.ndarray
    col_offsets: np.ndarray
    T: sp.csr_matrix
    tumor_mod: np.ndarray
    alpha_tilde: np.ndarray
    B: np.ndarray
    A: sp.csr_matrix
    con_mod: np.ndarray
    gamma_tilde: np.ndarray
    D: np.ndarray
    seg: np.ndarray
    C: np.ndarray
    origins: tuple
    tumor_weight: Optional[np.ndarray] = None

    @property
    def M(self) -> int:
        return self.N.size

    @property
    def n_cols(self) -> int:
        return int(self.col_offsets[-1])

    @property
    def n_constraints(self) -> int:
        return self.C.size

    def constraint(self, i: int) -> ConstraintBlock:
        a, b = self.seg[i], self.seg[i + 1]
        return ConstraintBlock(self.A[a:b], self.gamma_tilde[a:b], self.D[a:b],
                               float(self.C[i]), self.origins[i])

    @property
    def constraints(self) -> list:
        return [self.constraint(i) for i in range(self.n_constraints)]

    def modality_slice(self, m: int) -> slice:
        return slice(int(self.col_offsets[m]), int(self.col_offsets[m + 1]))

    def eta0_threshold(self) -> float:
        """Largest tumor step size for which the prox is bounded."""
        bmax = float(self.B.max(initial=0.0))
        return math.inf if bmax <= 0 else 1.0 / (2.0 * bmax)


def assemble(spec: ProblemSpec, plan) -> GeneralizedSystem:
    """Build the generalized system for a (possibly fractional) schedule."""
    if not isinstance(plan, FractionationPlan):
        plan = FractionationPlan(plan)
    if plan.N.size != spec.M:
        raise DimensionError(f"plan has {plan.N.size} entries, problem has {spec.M} modalities")
    t = spec._template
    N = plan.N
    return GeneralizedSystem(
        N=N,
        col_offsets=t.col_offsets,
        T=t.T,
        tumor_mod=t.tumor_mod,
        alpha_tilde=-N[t.tumor_mod] * t.alpha,
        B=N[t.tumor_mod] * t.beta,
        A=t.A,
        con_mod=t.con_mod,
        gamma_tilde=N[t.con_mod] * t.gamma,
        D=N[t.con_mod] * t.delta,
        seg=t.seg,
        C=t.C,
        origins=t.origins,
        tumor_weight=t.tumor_weight,
    )


def _check_u(u, n):
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1 or u.size != n:
        raise DimensionError(f"fluence vector must have {n} entries, got shape {u.shape}")
    return u


def tumor_be(u, sys: GeneralizedSystem) -> float:
    """Objective tumor term ``-alpha_tilde.(Tu) + (Tu).B(Tu)`` (no proliferation).

    This is the total tumor BE whenever every modality has unit ``tumor_weight``.
    """
    d = sys.T @ _check_u(u, sys.n_cols)
    return float(-sys.alpha_tilde @ d + d @ (sys.B * d))


def tumor_be_by_modality(u, sys: GeneralizedSystem) -> np.ndarray:
    """Unweighted tumor BE summed over the rows of each modality."""
    return np.bincount(sys.tumor_mod, weights=tumor_be_per_voxel(u, sys), minlength=sys.M)


def tumor_be_per_voxel(u, sys: GeneralizedSystem) -> np.ndarray:
    """BE of every tumor row of ``T`` (rows of all modalities, stacked, unweighted)."""
    d = sys.T @ _check_u(u, sys.n_cols)
    be = -sys.alpha_tilde * d + sys.B * d * d
    return be if sys.tumor_weight is None else be / sys.tumor_weight


def constraint_be(u, sys: GeneralizedSystem) -> np.ndarray:
    """Achieved BE of every generalized constraint, in constraint order."""
    u = _check_u(u, sys.n_cols)
    if sys.n_constraints == 0:
        return np.zeros(0)
    h = sys.A @ u
    return np.add.reduceat(sys.gamma_tilde * h + sys.D * h * h, sys.seg[:-1])


def proliferation(N_total: float, T_d: float, l: int) -> float:
    """Tumor regrowth penalty ``l (N - 1) ln 2 / T_d``."""
    if N_total < 1 - 1e-9:
        raise DomainError(f"total fractions must be >= 1, got {N_total}")
    if not T_d > 0:
        raise DomainError("doubling time must be positive")
    if l < 1:
        raise DomainError("tumor must have at least one voxel")
    return l * max(N_total - 1.0, 0.0) * math.log(2.0) / T_d


def objective_F(u, plan, sys: GeneralizedSystem, spec: ProblemSpec) -> float:
    """Minimization objective: minus tumor BE plus proliferation."""
    N = plan.N if isinstance(plan, FractionationPlan) else np.asarray(plan, dtype=float)
    return -tumor_be(u, sys) + proliferation(float(np.sum(N)), spec.T_d, spec.l)


def violations(u, sys: GeneralizedSystem, feas_tol: float = 1e-6) -> np.ndarray:
    """Indices of constraints whose BE exceeds ``C (1 + feas_tol)``."""
    return np.flatnonzero(constraint_be(u, sys) > sys.C * (1.0 + feas_tol))


@dataclass(frozen=True, eq=False)
class PlanResult:
    """Integer schedule with its fluence and achieved BE values.

    ``objective`` is ``F`` (minimization orientation, so the net tumor BE is
    ``-objective``). ``diagnostics`` holds solver counters, the continuous
    solutions before rounding and the per-start traces.
    """

    plan: FractionationPlan
    u: np.ndarray
    objective: float
    tumor_be: float
    constraint_values: np.ndarray
    diagnostics: dict

    @property
    def net_be(self) -> float:
        return -self.objective
