import numpy as np
import pytest

from ncmfg.coupling import CouplingSpec, scenario_by_name
from ncmfg.measure import sample_initial
from ncmfg.mfg import PicardConfig, picard_solve, picard_step, stability_harness, verify_solution


def coarse(name, **kw):
    return scenario_by_name(name).with_overrides(dx=1 / 8, n_particles=256, **kw)


@pytest.fixture(scope="module")
def grushin_coupled():
    sc = coarse("grushin-sin-coupled")
    return sc, picard_solve(sc)


def second_moment(m):
    c = m.positions - m.positions.mean(axis=0)
    return float(np.mean(np.sum(c**2, axis=1)))


def test_decoupled_converges_in_one_iteration():
    sc = coarse("identity2d-decoupled")
    sol = picard_solve(sc)
    assert sol.iterations == 1 and sol.residual_history == [0.0] and sol.converged
    assert sol.status == "converged"


def test_initial_snapshot_is_m0(grushin_coupled):
    sc, sol = grushin_coupled
    m0 = sample_initial(sc.m0_spec, sc.n_particles, sc.seed)
    assert np.array_equal(sol.m0.positions, m0.positions)
    assert np.array_equal(sol.transported[0].positions, m0.positions)
    assert sol.flow_snapshots[0].time_label == 0.0
    assert sol.flow_snapshots[-1].time_label == pytest.approx(sc.T)


def test_weak_coupling_residuals_strictly_decrease(grushin_coupled):
    sc, sol = grushin_coupled
    h = sol.residual_history
    assert sol.converged and h[-1] < sc.fp_tol and len(h) == sol.iterations
    assert all(b < a for a, b in zip(h[:-1], h[1:]))


def test_one_more_step_stays_put(grushin_coupled):
    sc, sol = grushin_coupled
    # a contraction at rate about 1/4 moves the iterate by about the last residual
    assert picard_step(sol, sc) < 2 * sol.residual_history[-1]


def test_max_iter_reports_nonconvergence():
    sc = coarse("grushin-sin-coupled")
    sol = picard_solve(sc, PicardConfig.from_scenario(sc, max_iter=1))
    assert not sol.converged and sol.iterations == 1 and len(sol.residual_history) == 1
    assert sol.status == "max-iter"


def test_supplied_initial_measure_is_used():
    sc = coarse("identity2d-decoupled")
    m0 = sample_initial(sc.m0_spec, 17, seed=5)
    sol = picard_solve(sc, m0=m0)
    assert sol.m0.size == 17 and sol.diagnostics["n_particles"] == 17


def test_crowd_aversion_spreads_the_population():
    base = coarse("identity2d-coupled")
    averse = base.with_overrides(coupling=CouplingSpec(2, V="0.5*z", G="0"))
    idle = base.with_overrides(coupling=CouplingSpec(2, V="0", G="0"))
    sol = picard_solve(averse)
    m0, mT = sol.transported[0], sol.transported[-1]
    assert second_moment(mT) > 1.05 * second_moment(m0)
    still = picard_solve(idle)
    assert np.array_equal(still.transported[-1].positions, still.transported[0].positions)


def test_verify_solution(grushin_coupled):
    sc, sol = grushin_coupled
    rep = verify_solution(sol, sc)
    assert rep["weak_form"]["ok"]
    assert rep["terminal_consistency"] == 0.0
    assert rep["mass"] == pytest.approx([1.0, 1.0], abs=1e-15)
    assert rep["time_lipschitz"]["ok"]
    assert len(rep["uniqueness"]) == 2
    assert all(p["status"] != "error" for p in rep["uniqueness"])


def test_stability_zero_gap():
    sc = coarse("grushin-sin-coupled")
    rep = stability_harness(sc, gaps=(0.0,))
    assert rep["u_gaps"] == [0.0] and rep["flow_gaps"] == [0.0] and rep["measure_d1_gaps"] == [0.0]


def test_stability_gaps_shrink():
    sc = coarse("grushin-sin-coupled")
    rep = stability_harness(sc)
    assert rep["measure_d1_gaps"] == pytest.approx([0.2, 0.1, 0.05], abs=1e-12)
    assert rep["u_decreasing"] and rep["flow_decreasing"]
    assert all(fg <= cert for fg, cert in zip(rep["flow_gaps"], rep["flow_certificate"]))


def test_stability_of_decoupled_problem_is_trivial():
    rep = stability_harness(coarse("grushin-sin-decoupled"))
    assert rep["u_gaps"] == [0.0, 0.0, 0.0]
