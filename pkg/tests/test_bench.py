import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmplan.bench import (PER_VOXEL, SWEEPS, SweepSpec, avg_be_per_voxel, compare, pobj_metrics,
                          run_baselines, run_sweep)
from mmplan.errors import DomainError
from mmplan.model import FractionationPlan, ModalityData, PlanResult, ProblemSpec, assemble, tumor_be
from mmplan.phantom import BeamModel, PhantomConfig, ScenarioConfig, proton_beam, scenario
from mmplan.upper import UpperConfig, ValueFunction

from conftest import tiny_phantom, tiny_spec

SMALL = ScenarioConfig(phantom=PhantomConfig(grid_shape=(20, 20), voxel_size=1.5),
                       beams=(BeamModel(beamlets_per_angle=8), proton_beam(n_spots=10)), N_max=6)


def test_pobj_examples():
    assert pobj_metrics(5.0, 5.0, 5.0) == (100.0, 100.0)
    assert pobj_metrics(1.057 * 3.0, 3.0, 1.0)[0] == pytest.approx(105.7)
    assert pobj_metrics(1.229 * 2.0, 1.0, 2.0)[1] == pytest.approx(122.9)
    with pytest.raises(DomainError):
        pobj_metrics(1.0, 0.0, 1.0)
    with pytest.raises(DomainError):
        pobj_metrics(1.0, 1.0, -2.0)


@given(st.floats(0.1, 1e4), st.floats(0.1, 1e4), st.floats(0.1, 1e4), st.floats(1e-3, 1e3))
@settings(max_examples=50, deadline=None)
def test_pobj_scale_invariant(a, b, c, k):
    p = pobj_metrics(a, b, c)
    q = pobj_metrics(k * a, k * b, k * c)
    assert np.allclose(p, q, rtol=1e-12)


def uniform_result(k, dose=2.0):
    """One-fraction plan giving every one of ``k`` tumor voxels the same dose."""
    ph = tiny_phantom(k, (("oar", 1),))
    mod = ModalityData("m", np.ones((k, 1)), {"oar": np.zeros((1, 1))}, 0.35, 0.035,
                       {"oar": 0.35}, {"oar": 0.175})
    spec = ProblemSpec(ph, [mod], [], T_d=5.0, N_max=3)
    plan = FractionationPlan([1])
    u = np.array([dose])
    sys = assemble(spec, plan)
    return spec, PlanResult(plan, u, -tumor_be(u, sys), tumor_be(u, sys), np.zeros(0), {})


def test_avg_be_uniform_and_mask_doubling():
    b = 0.35 * 2 + 0.035 * 4
    spec, res = uniform_result(3)
    assert avg_be_per_voxel(res, spec) == pytest.approx(b, rel=1e-14)
    spec6, res6 = uniform_result(6)
    assert avg_be_per_voxel(res6, spec6) == pytest.approx(avg_be_per_voxel(res, spec), rel=1e-14)
    with pytest.raises(DomainError):
        avg_be_per_voxel(res, spec, tumor_mask=np.array([], dtype=int))


def test_avg_be_matches_direct_recomputation_on_margin_scenario():
    spec = scenario(SMALL, {"margin": 2})
    vf = ValueFunction(spec)
    plan = FractionationPlan([2, 3])
    ev = vf.evaluate(plan.N)
    res = PlanResult(plan, ev.u, ev.value, 0.0, np.zeros(0), {})
    n1 = spec.modalities[0].n_beamlets
    total = 0.0
    for m, (mod, um) in enumerate(zip(spec.modalities, (ev.u[:n1], ev.u[n1:]))):
        d = mod.T.toarray() @ um
        be = plan.N[m] * (mod.alpha * d + mod.beta * d * d)
        total += be.sum() / mod.T.shape[0]
    total -= (plan.total - 1) * math.log(2) / spec.T_d
    assert avg_be_per_voxel(res, spec) == pytest.approx(total, rel=1e-12)
    # with the margin weight the objective is the per-voxel average scaled by |tumor|
    assert avg_be_per_voxel(res, spec) == pytest.approx(-ev.value / spec.l, rel=1e-12)


def test_baselines_on_tiny_problem():
    spec = tiny_spec(seed=2, M=2, n_tumor=3, organs=(("oar", 2),), n_beamlets=3, tolerance=2.0, N_max=25)
    conv, single = run_baselines(spec)
    assert conv.plan.as_tuple() == (25, 0)
    assert single.plan.N[1] == 0 and 1 <= single.plan.N[0] <= 25
    assert single.objective <= conv.objective + 1e-9
    assert np.all(single.u[3:] == 0)


def test_compare_reports_dominance_on_tiny_problem():
    spec = tiny_spec(seed=4, M=2, n_tumor=3, organs=(("oar", 2),), n_beamlets=3, tolerance=2.0, N_max=8)
    rep = compare(spec)
    assert rep.verified and rep.error is None
    assert rep.pobj_single >= 99.5 and rep.pobj_conv >= rep.pobj_single - 1e-9
    assert sum(rep.dual_plan) == rep.total_fractions


def test_predefined_sweeps():
    assert SWEEPS["T_d"].values == (2.0, 5.0, 10.0, 50.0, 100.0)
    assert SWEEPS["margin_r"].values == (0.8, 1.0, 1.2)
    assert dict(SWEEPS["margin_r"].fixed) == {"margin": 2} and SWEEPS["margin_r"].metric == PER_VOXEL


@pytest.fixture(scope="module")
def small_sweep():
    return run_sweep(SweepSpec("T_d", (2.0, 5.0, 10.0, 50.0, 100.0)), SMALL)


def test_sweep_rows_table_and_flags(small_sweep):
    assert len(small_sweep.reports) == 5
    assert all(r.error is None and r.verified for r in small_sweep.reports)
    csv_lines = small_sweep.to_csv().strip().splitlines()
    assert len(csv_lines) == 6 and csv_lines[0].startswith("T_d,N1_dual,N2_dual,N1_single")
    table = small_sweep.to_table()
    assert "pObj_single" in table and len(table.strip().splitlines()) == 7
    assert {"dominance", "verified", "fractions_nondecreasing", "all_rows_ok"} <= set(small_sweep.flags)


def test_sweep_records_failing_row_and_continues():
    bad = SweepSpec("T_d", (5.0, -1.0))
    res = run_sweep(bad, SMALL, baseline_cache={})
    assert res.reports[0].error is None
    assert res.reports[1].error and "T_d" in res.reports[1].error
    assert res.flags["all_rows_ok"] is False
