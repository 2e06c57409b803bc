import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmplan.errors import ConfigError, DimensionError, DomainError
from mmplan.model import (ConstraintSpec, FractionationPlan, ModalityData, Phantom, ProblemSpec, assemble,
                          constraint_be, objective_F, proliferation, tumor_be, tumor_be_by_modality)

from conftest import tiny_phantom, tiny_spec


def one_voxel_spec(T=1.0, H=1.0, M=1):
    ph = tiny_phantom(1, (("oar", 1),))
    mod = ModalityData("m", [[T]], {"oar": [[H]]}, 0.35, 0.035, {"oar": 0.35}, {"oar": 0.175})
    return ProblemSpec(ph, [mod] * M, [ConstraintSpec("oar", "max", 10.0)], T_d=5.0, N_max=10)


def test_tumor_be_zero_fluence():
    spec = tiny_spec()
    sys = assemble(spec, [2])
    assert tumor_be(np.zeros(2), sys) == 0.0


def test_tumor_be_single_voxel_hand_value():
    sys = assemble(one_voxel_spec(T=1.0), [1])
    assert tumor_be(np.array([2.0]), sys) == pytest.approx(0.35 * 2 + 0.035 * 4, abs=1e-12)


def test_tumor_weight_scales_objective_term_only():
    ph = tiny_phantom(2, (("oar", 1),))
    plain = ModalityData("m", [[1.0], [0.5]], {"oar": [[0.2]]}, 0.35, 0.035, {"oar": 0.35}, {"oar": 0.175})
    halved = ModalityData("m", [[1.0], [0.5]], {"oar": [[0.2]]}, 0.35, 0.035, {"oar": 0.35}, {"oar": 0.175},
                          tumor_weight=0.5)
    u = np.array([3.0])
    s_plain = assemble(ProblemSpec(ph, [plain], [], T_d=5.0, N_max=4), [2])
    s_half = assemble(ProblemSpec(ph, [halved], [], T_d=5.0, N_max=4), [2])
    assert tumor_be(u, s_half) == pytest.approx(0.5 * tumor_be(u, s_plain), rel=1e-14)
    assert np.allclose(tumor_be_by_modality(u, s_half), tumor_be_by_modality(u, s_plain), rtol=1e-14)
    with pytest.raises(DomainError):
        ModalityData("m", [[1.0]], {}, 0.35, 0.035, {}, {}, tumor_weight=0.0)


def test_zero_fraction_modality_matches_single_modality():
    spec2 = tiny_spec(seed=3, M=2)
    spec1 = spec2.replace(modalities=spec2.modalities[:1])
    u = np.array([1.3, 0.4, 2.0, 5.0])
    s2 = assemble(spec2, [3, 0])
    s1 = assemble(spec1, [3])
    assert tumor_be(u, s2) == pytest.approx(tumor_be(u[:2], s1), rel=1e-14)
    assert tumor_be_by_modality(u, s2)[1] == 0.0
    vals2 = constraint_be(u, s2)
    u_zero = u.copy()
    u_zero[2:] = 0.0
    assert np.allclose(vals2, constraint_be(u_zero, s2), rtol=0, atol=1e-14)


def test_proliferation_examples():
    assert proliferation(1, 3.0, 7) == 0.0
    assert proliferation(12, 5.0, 1) == pytest.approx(11 * math.log(2) / 5, rel=1e-12)
    assert proliferation(12, 5.0, 1) == pytest.approx(1.52493, abs=1e-5)
    assert proliferation(9, 5.0, 6) == pytest.approx(2 * proliferation(9, 5.0, 3))
    with pytest.raises(DomainError):
        proliferation(0.5, 5.0, 1)
    with pytest.raises(DomainError):
        proliferation(2, 0.0, 1)


def test_objective_examples():
    spec = one_voxel_spec()
    plan = FractionationPlan([1])
    sys = assemble(spec, plan)
    assert objective_F(np.zeros(1), plan, sys, spec) == 0.0
    assert objective_F(np.array([2.0]), plan, sys, spec) == pytest.approx(-0.84, abs=1e-12)


@given(st.floats(1.5, 20), st.floats(0.5, 50), st.floats(0.01, 50))
@settings(max_examples=40, deadline=None)
def test_objective_decreases_with_doubling_time(N, td, extra):
    spec = one_voxel_spec()
    plan = FractionationPlan([N])
    sys = assemble(spec, plan)
    u = np.array([1.7])
    f_slow = objective_F(u, plan, sys, spec.replace(T_d=td + extra))
    f_fast = objective_F(u, plan, sys, spec.replace(T_d=td))
    assert f_slow < f_fast


def test_constraint_be_examples():
    sys = assemble(one_voxel_spec(H=1.0), [1])
    assert constraint_be(np.array([2.0]), sys)[0] == pytest.approx(1.4, abs=1e-12)
    spec = tiny_spec(organs=(("oar", 4),))
    sys = assemble(spec, [2])
    assert np.all(constraint_be(np.zeros(2), sys) == 0)
    u = np.array([0.7, 1.1])
    vals = constraint_be(u, sys)
    H = spec.modalities[0].H["oar"].toarray()
    h = H @ u
    assert vals.size == 4
    assert np.allclose(vals, 2 * 0.35 * h + 2 * 0.175 * h * h, rtol=1e-13)


def test_assemble_counts_constraint_entries():
    spec = tiny_spec(organs=(("mean_oar", 5), ("max_oar", 3)), kinds={"mean_oar": "mean", "max_oar": "max"})
    sys = assemble(spec, [1])
    assert sys.n_constraints == 4


def test_mean_constraint_is_organ_average():
    spec = tiny_spec(organs=(("oar", 3),), kinds={"oar": "mean"})
    u = np.array([0.5, 1.5])
    sys = assemble(spec, [2])
    H = spec.modalities[0].H["oar"].toarray()
    h = H @ u
    assert constraint_be(u, sys)[0] == pytest.approx(np.mean(2 * 0.35 * h + 2 * 0.175 * h * h), rel=1e-13)


def test_assemble_identical_modalities_and_alpha_layout():
    spec = tiny_spec(M=2, identical=True)
    sys = assemble(spec, [3, 3])
    half = sys.B.size // 2
    assert np.array_equal(sys.B[:half], sys.B[half:])
    sys = assemble(tiny_spec(M=2, seed=5), [2, 7])
    a1, a2 = (m.alpha for m in tiny_spec(M=2, seed=5).modalities)
    assert np.allclose(sys.alpha_tilde, np.concatenate([-2 * a1, -7 * a2]))


def test_assemble_linear_in_fractions():
    spec = tiny_spec(M=2, seed=2)
    s1, s2 = assemble(spec, [1.5, 2.0]), assemble(spec, [3.0, 2.0])
    m0 = s1.tumor_mod == 0
    assert np.allclose(s2.B[m0], 2 * s1.B[m0])
    assert np.array_equal(s2.B[~m0], s1.B[~m0])
    c0 = s1.con_mod == 0
    assert np.allclose(s2.D[c0], 2 * s1.D[c0])


@pytest.mark.parametrize("c", [0.0, 1.0, 2.0])
def test_be_is_degree_two_polynomial(c):
    spec = tiny_spec(seed=4, organs=(("oar", 3),))
    sys = assemble(spec, [4])
    u = np.array([0.8, 1.9])
    d = sys.T @ u
    lin, quad = -sys.alpha_tilde @ d, d @ (sys.B * d)
    assert tumor_be(c * u, sys) == pytest.approx(c * lin + c * c * quad, rel=1e-13, abs=1e-15)


def test_modality_permutation_equivariance():
    spec = tiny_spec(M=2, seed=6, organs=(("a", 2), ("b", 3)), kinds={"a": "mean", "b": "max"})
    flipped = spec.replace(modalities=spec.modalities[::-1])
    u = np.array([0.3, 1.2, 2.2, 0.9])
    n = spec.modalities[0].n_beamlets
    u_flip = np.concatenate([u[n:], u[:n]])
    p, q = FractionationPlan([2, 5]), FractionationPlan([5, 2])
    sa, sb = assemble(spec, p), assemble(flipped, q)
    assert objective_F(u, p, sa, spec) == pytest.approx(objective_F(u_flip, q, sb, flipped), rel=1e-13)
    assert np.allclose(constraint_be(u, sa), constraint_be(u_flip, sb), rtol=1e-13)


def test_phantom_rejects_overlap_and_empty_tumor():
    with pytest.raises(ConfigError):
        Phantom((2, 2), 1.0, {"tumor": [0, 1], "oar": [1]})
    with pytest.raises(ConfigError):
        Phantom((2, 2), 1.0, {"tumor": [], "oar": [1]})


def test_modality_validation():
    ph = tiny_phantom()
    with pytest.raises(DimensionError):
        ModalityData("m", np.ones((2, 2)), {"oar": np.ones((1, 3))}, 0.35, 0.035, {"oar": 0.35}, {"oar": 0.1})
    with pytest.raises(ConfigError):
        ModalityData("m", -np.ones((2, 2)), {"oar": np.ones((1, 2))}, 0.35, 0.035, {"oar": 0.35}, {"oar": 0.1})
    with pytest.raises(ConfigError):
        ModalityData("m", np.ones((2, 2)), {"oar": np.ones((1, 2))}, 0.0, 0.035, {"oar": 0.35}, {"oar": 0.1})
    assert ph.l == 2


def test_problem_spec_validation():
    spec = tiny_spec()
    with pytest.raises(ConfigError):
        spec.replace(N_max=0)
    with pytest.raises(ConfigError):
        spec.replace(T_d=0.0)
    with pytest.raises(ConfigError):
        spec.replace(constraints=[ConstraintSpec("missing", "max", 1.0)])
    with pytest.raises(ConfigError):
        ConstraintSpec("oar", "median", 1.0)


def test_plan_domain():
    with pytest.raises(DomainError):
        FractionationPlan([0, 0])
    with pytest.raises(DomainError):
        FractionationPlan([-1, 3])
    assert FractionationPlan([2.0, 3.0]).as_tuple() == (2, 3)
    assert FractionationPlan([2.5, 3.0]).as_tuple() == (2.5, 3.0)
