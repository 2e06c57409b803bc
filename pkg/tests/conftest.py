"""Shared builders for small planning problems."""

from __future__ import annotations

import numpy as np
import pytest

from mmplan.model import ConstraintSpec, ModalityData, Phantom, ProblemSpec

ACCEPTANCE_LINES: list = []


def tiny_phantom(n_tumor=2, organs=(("oar", 1),)):
    """Row of voxels: tumor first, then each organ in order."""
    masks, start = {"tumor": np.arange(n_tumor)}, n_tumor
    for name, k in organs:
        masks[name] = np.arange(start, start + k)
        start += k
    return Phantom((1, start), 1.0, masks)


def tiny_modality(name, phantom, rng, n_beamlets=2, alpha=0.35, ab=10.0, gamma=0.35, gd=2.0):
    T = rng.uniform(0.2, 1.0, (phantom.l, n_beamlets))
    H = {k: rng.uniform(0.0, 0.6, (phantom.masks[k].size, n_beamlets)) for k in phantom.oar_names}
    return ModalityData(name, T, H, alpha, alpha / ab, {k: gamma for k in H}, {k: gamma / gd for k in H})


def tiny_spec(seed=0, M=1, n_tumor=2, organs=(("oar", 1),), kinds=None, tolerance=3.0,
              n_beamlets=2, T_d=5.0, N_max=5, identical=False):
    rng = np.random.default_rng(seed)
    ph = tiny_phantom(n_tumor, organs)
    first = tiny_modality("m1", ph, rng, n_beamlets)
    mods = [first]
    for m in range(1, M):
        if identical:
            mods.append(ModalityData(f"m{m + 1}", first.T, first.H, first.alpha, first.beta,
                                     first.gamma, first.delta))
        else:
            mods.append(tiny_modality(f"m{m + 1}", ph, rng, n_beamlets))
    kinds = kinds or {name: "max" for name, _ in organs}
    cons = [ConstraintSpec(name, kinds[name], tolerance) for name, _ in organs]
    return ProblemSpec(ph, mods, cons, T_d=T_d, N_max=N_max)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
