import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ncmfg.coupling import (
    CouplingSpec,
    MeasureCurve,
    RunningCostField,
    ScenarioConfig,
    TerminalCostField,
    builtin_scenarios,
    c2_certify,
    eval_F,
    eval_G,
    mollified_density,
    scenario_by_name,
)
from ncmfg.errors import CertificationError, ConfigError, ExpressionError
from ncmfg.kernels import BoxCutoff, Mollifier
from ncmfg.measure import ParticleMeasure, sample_initial

DIRAC = ParticleMeasure([[0.0, 0.0]])
BOX = ((-1.0, -1.0), (1.0, 1.0))


def triweight(s, w):
    q = (np.asarray(s) / w) ** 2
    return np.where(q < 1, 35 / (32 * w) * (1 - q) ** 3, 0.0)


# ---------------------------------------------------------------- mollifier


def test_mollifier_integrates_to_one():
    rho = Mollifier(0.5, 2)
    h = 1 / 200
    s = np.arange(-0.5, 0.5 + h / 2, h)
    x = np.stack(np.meshgrid(s, s, indexing="ij"), axis=-1)
    assert np.trapezoid(np.trapezoid(rho(x), dx=h), dx=h) == pytest.approx(1.0, abs=1e-6)


def test_mollifier_grad_matches_differences():
    rho = Mollifier(0.7, 2)
    x = np.array([[0.2, -0.3], [0.5, 0.1], [-0.1, 0.65]])
    h = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (rho(x + e) - rho(x - e)) / (2 * h)
        np.testing.assert_allclose(rho.grad(x)[:, k], fd, atol=1e-6)


def test_mollifier_sup_norms_match_samples():
    rho = Mollifier(0.5, 1)
    s = np.linspace(-0.5, 0.5, 200001)
    assert np.max(np.abs(rho.dphi(s))) == pytest.approx(rho.sup_first, rel=1e-8)
    assert np.max(np.abs(rho.d2phi(s))) == pytest.approx(rho.sup_second, rel=1e-8)
    assert np.max(rho.phi(s)) == pytest.approx(rho.sup, rel=1e-12)


def test_mollified_dirac_is_the_kernel():
    rho = Mollifier(0.5, 2)
    x = np.array([[0.1, -0.2], [0.3, 0.3], [0.0, 0.0]])
    expected = triweight(x[:, 0], 0.5) * triweight(x[:, 1], 0.5)
    np.testing.assert_allclose(mollified_density(DIRAC, rho, x), expected, rtol=1e-14, atol=0)


def test_mollified_density_vanishes_outside_support():
    m = ParticleMeasure([[0.0, 0.0], [0.2, 0.1]])
    assert np.all(mollified_density(m, Mollifier(0.5, 2), np.array([[0.8, 0.0], [0.0, -0.6], [3.0, 3.0]])) == 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_convolution_against_direct_sum(seed):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-1, 1, size=(30, 2))
    pts = rng.uniform(-1.5, 1.5, size=(12, 2))
    rho = Mollifier(0.4, 2)
    direct = np.mean(rho(pts[:, None, :] - pos[None, :, :]), axis=1)
    np.testing.assert_allclose(rho.convolve_points(pos, pts), direct, rtol=1e-12, atol=1e-14)
    grad = np.mean(rho.grad(pts[:, None, :] - pos[None, :, :]), axis=1)
    val, g = rho.convolve_points_value_grad(pos, pts)
    np.testing.assert_allclose(val, direct, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(g, grad, rtol=1e-12, atol=1e-13)


def test_cutoff_profile():
    chi = BoxCutoff(1.0, 2.0)
    x = np.array([[0.5, -0.9], [2.0, 0.0], [1.5, 0.0], [3.0, 3.0]])
    v = chi(x)
    assert v[0] == 1.0 and v[1] == 0.0 and v[3] == 0.0 and 0 < v[2] < 1
    with pytest.raises(ValueError):
        BoxCutoff(2.0, 1.0)


# ---------------------------------------------------------------- F and G


def test_eval_F_with_z_is_the_mollified_density():
    spec = CouplingSpec(2, V="z", rho_width=0.5)
    x = np.array([[0.1, 0.2], [0.4, -0.3]])
    expected = triweight(x[:, 0], 0.5) * triweight(x[:, 1], 0.5)
    np.testing.assert_allclose(eval_F(spec, x, 0.3, DIRAC), expected, rtol=1e-14)


def test_eval_F_zero_coupling():
    spec = CouplingSpec(2, V="0")
    assert np.all(eval_F(spec, np.zeros((3, 2)), 0.0, DIRAC) == 0.0)
    assert spec.decoupled


def test_eval_F_time_and_state_dependence():
    spec = CouplingSpec(2, V="t*x1 + z")
    m = ParticleMeasure([[5.0, 5.0]])
    assert eval_F(spec, np.array([[2.0, 0.0]]), 0.5, m)[0] == pytest.approx(1.0)


def test_eval_G_examples():
    spec = CouplingSpec(2, G="0.5*(x1**2 + x2**2) + 0.05*z", rho_width=0.5)
    x = np.array([[1.0, 0.0], [0.0, 0.0]])
    val = eval_G(spec, x, DIRAC)
    assert val[0] == pytest.approx(0.5)
    assert val[1] == pytest.approx(0.05 * (35 / 16) ** 2)


def test_g_uses_its_own_width():
    spec = CouplingSpec(2, G="z", rho_width=0.5, g_rho_width=1.0)
    x = np.array([[0.7, 0.0]])
    assert eval_G(spec, x, DIRAC)[0] == pytest.approx(float(triweight(0.7, 1.0) * triweight(0.0, 1.0)))


def test_field_gradients_match_differences():
    m = sample_initial({"kind": "uniform", "lo": [-0.5, -0.5], "hi": [0.5, 0.5]}, 40, seed=3)
    spec = CouplingSpec(2, V="x1*z + z**2", G="x2 + sin(z)", g_cutoff=(0.6, 1.2))
    f = RunningCostField(spec, MeasureCurve.constant(m, 1.0))
    g = TerminalCostField(spec, m)
    x = np.array([[0.1, 0.2], [0.3, -0.4], [0.9, 0.1]])
    h = 1e-6
    for fld in (f, g):
        grad = fld.grad(x, 0.4)
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd = (fld(x + e, 0.4) - fld(x - e, 0.4)) / (2 * h)
            np.testing.assert_allclose(grad[:, k], fd, atol=1e-6)


def test_on_grid_matches_pointwise():
    m = sample_initial({"kind": "uniform", "lo": [-0.5, -0.5], "hi": [0.5, 0.5]}, 40, seed=3)
    sc = scenario_by_name("grushin-sin-coupled")
    grid = sc.grid()
    f = RunningCostField(sc.coupling, MeasureCurve.constant(m, 1.0))
    np.testing.assert_allclose(f.on_grid(grid, 0.2).ravel(), f(grid.nodes, 0.2), rtol=1e-12, atol=1e-15)


def test_measure_curve_interpolates_linearly():
    a, b = ParticleMeasure([[0.0, 0.0]], 0.0), ParticleMeasure([[5.0, 5.0]], 1.0)
    f = RunningCostField(CouplingSpec(2, V="z"), MeasureCurve.from_snapshots([a, b]))
    x = np.array([[0.0, 0.0]])
    assert f(x, 0.25)[0] == pytest.approx(0.75 * (35 / 16) ** 2)


def test_coupling_needs_a_measure():
    with pytest.raises(ConfigError):
        RunningCostField(CouplingSpec(2, V="z"), None)
    with pytest.raises(ConfigError):
        TerminalCostField(CouplingSpec(2, G="z"), None)


@pytest.mark.parametrize("kw", [{"V": "z +* 1"}, {"G": "y + 1"}, {"rho_width": 0.0}])
def test_bad_coupling_specs(kw):
    with pytest.raises(ConfigError):
        CouplingSpec(2, **kw)


def test_unknown_symbol_is_expression_error():
    with pytest.raises(ExpressionError):
        CouplingSpec(2, V="q*z")


# ---------------------------------------------------------------- certification


def test_c2_certify_zero():
    rep = c2_certify(CouplingSpec(2), BOX, [0.0], [DIRAC])
    assert rep["F"] == 0.0 and rep["G"] == 0.0


def test_c2_certify_density_bounded_by_kernel_norm():
    spec = CouplingSpec(2, V="z", G="z", rho_width=0.5)
    m = sample_initial({"kind": "uniform", "lo": [-0.3, -0.3], "hi": [0.3, 0.3]}, 50, seed=1)
    rep = c2_certify(spec, BOX, [0.0], [DIRAC, m])
    # one-sided boundary stencils may exceed the exact sup by a fraction of a percent
    assert rep["C"] <= 1.01 * spec.rho.c2_norm
    assert rep["C"] > 0.5 * spec.rho.c2_norm


def test_c2_certify_flags_a_kink():
    with pytest.raises(CertificationError):
        c2_certify(CouplingSpec(2, V="sqrt(x1**2)"), BOX, [0.0], [DIRAC])


def test_c2_certify_builtin_couplings():
    for sc in builtin_scenarios():
        m = sample_initial(sc.m0_spec, 64, sc.seed)
        lo, hi = np.asarray(sc.lo), np.asarray(sc.hi)
        rep = c2_certify(sc.coupling, (lo, hi), [0.0, 0.5], [m], n=17 if sc.dim == 3 else 33)
        assert np.isfinite(rep["C"])


# ---------------------------------------------------------------- scenarios


def test_builtin_scenario_set():
    names = [s.name for s in builtin_scenarios()]
    assert len(names) == 8 and len(set(names)) == 8
    for base in ("identity2d", "grushin-sin", "grushin-sigmoid", "heisenberg3d"):
        dec, cou = scenario_by_name(f"{base}-decoupled"), scenario_by_name(f"{base}-coupled")
        assert dec.coupling.decoupled and not cou.coupling.decoupled
        assert dec.bfield == cou.bfield == base


@pytest.mark.parametrize("name,x,expected", [
    ("identity2d-decoupled", [0.3, 0.4], [[1, 0], [0, 1]]),
    ("grushin-sin-coupled", [0.5, 0.0], [[1, 0], [0, np.sin(0.5)]]),
    ("grushin-sigmoid-decoupled", [1.0, 0.0], [[1, 0], [0, 1 / np.sqrt(2)]]),
])
def test_scenario_b_entries(name, x, expected):
    np.testing.assert_allclose(scenario_by_name(name).field().eval_matrix(np.array([x]))[0], expected, atol=1e-15)


def test_heisenberg_entries():
    B = scenario_by_name("heisenberg3d-decoupled").field().eval_matrix(np.array([[0.2, 0.6, 0.1]]))[0]
    np.testing.assert_allclose(B, [[1, 0, 0], [0, 1, 0], [-np.sin(0.6) / 2, np.sin(0.2) / 2, 0]], atol=1e-15)


def test_scenario_support_inside_box():
    for sc in builtin_scenarios():
        lo, hi = sc.support
        assert np.all(np.asarray(lo) >= sc.lo) and np.all(np.asarray(hi) <= sc.hi)


def test_scenario_round_trip():
    for sc in builtin_scenarios():
        assert ScenarioConfig.from_dict(sc.to_dict()) == sc


def test_unknown_scenario():
    with pytest.raises(ConfigError, match="known"):
        scenario_by_name("nope")


@pytest.mark.parametrize("kw", [
    {"T": 0.0},
    {"dx": -1.0},
    {"theta": 1.5},
    {"n_particles": 0},
    {"lo": (-0.1, -0.1)},
    {"lo": (-1.0, -1.0, -1.0)},
])
def test_scenario_validation(kw):
    with pytest.raises(ConfigError):
        scenario_by_name("identity2d-decoupled").with_overrides(**kw)


def test_scenario_unknown_key():
    data = scenario_by_name("identity2d-decoupled").to_dict()
    data["colour"] = "red"
    with pytest.raises(ConfigError, match="unknown"):
        ScenarioConfig.from_dict(data)


def test_custom_entries_override_builtin_name():
    sc = scenario_by_name("identity2d-decoupled").with_overrides(bfield_entries=(("2",), ("0", "x1")))
    np.testing.assert_allclose(sc.field().eval_matrix(np.array([[0.5, 0.0]]))[0], [[2, 0], [0, 0.5]])
