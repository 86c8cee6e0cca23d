import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ncmfg.bfield import (
    BField,
    b_differentiability_probe,
    b_divergence,
    b_gradient,
    builtin_bfield,
    dp_hamiltonian,
    estimate_c2_bound,
    hamiltonian,
    write_matrix_csv,
)
from ncmfg.errors import ConfigError, OutOfDomainError
from ncmfg.fields import ExpressionField, QuadraticField

coord = st.floats(-3.0, 3.0, allow_nan=False)
BUILTINS = ["identity2d", "grushin-sin", "grushin-sigmoid", "heisenberg3d"]


def test_eval_matrix_grushin_nondegenerate(grushin):
    np.testing.assert_allclose(grushin.eval_matrix([math.pi / 2, 0.0]), np.eye(2), atol=1e-15)


def test_eval_matrix_grushin_degenerate_row(grushin):
    np.testing.assert_array_equal(grushin.eval_matrix([0.0, 7.0]), [[1.0, 0.0], [0.0, 0.0]])


@given(coord, coord)
def test_eval_matrix_identity_everywhere(identity, a, b):
    np.testing.assert_array_equal(identity.eval_matrix([a, b]), np.eye(2))


def test_hamiltonian_examples(identity, grushin):
    assert hamiltonian(identity, [0.3, -1.0], [3.0, 4.0]) == pytest.approx(12.5)
    assert hamiltonian(grushin, [0.0, 2.0], [0.0, 5.0]) == 0.0
    assert hamiltonian(grushin, [math.pi / 6, 0.0], [1.0, 2.0]) == pytest.approx(1.0, abs=1e-14)


def test_dp_hamiltonian_examples(identity, grushin):
    np.testing.assert_allclose(dp_hamiltonian(grushin, [math.pi / 2, 0.0], [1.0, 2.0]), [1.0, 2.0], atol=1e-15)
    np.testing.assert_allclose(dp_hamiltonian(grushin, [0.0, 0.0], [1.0, 2.0]), [1.0, 0.0])
    np.testing.assert_allclose(dp_hamiltonian(identity, [5.0, 5.0], [3.0, 4.0]), [3.0, 4.0])


@pytest.mark.parametrize("name", BUILTINS)
def test_builtins_are_lower_triangular(name):
    bf = builtin_bfield(name)
    x = np.random.default_rng(0).uniform(-2, 2, size=(50, bf.dim))
    B = bf.eval_matrix(x)
    assert np.all(np.triu(B, 1) == 0.0)
    assert np.all(B[:, 0, 0] != 0.0)


@pytest.mark.parametrize("name", BUILTINS)
def test_rows_depend_only_on_earlier_coordinates(name):
    bf = builtin_bfield(name)
    rng = np.random.default_rng(1)
    for i in range(bf.dim):
        x = rng.uniform(-2, 2, size=(20, bf.dim))
        y = x.copy()
        y[:, i:] = rng.uniform(-2, 2, size=(20, bf.dim - i))
        np.testing.assert_array_equal(bf.eval_matrix(x)[:, i], bf.eval_matrix(y)[:, i])


def test_upper_entries_rejected():
    with pytest.raises(ConfigError):
        BField([["1", "x1"], ["0", "1"]])


def test_row_dependence_on_own_coordinate_rejected():
    with pytest.raises(ConfigError):
        BField([["1"], ["0", "sin(x2)"]])


def test_zero_leading_entry_rejected():
    with pytest.raises(ConfigError):
        BField([["0"], ["0", "1"]])


def test_unknown_builtin_rejected():
    with pytest.raises(ConfigError):
        builtin_bfield("no-such-field")


def test_domain_check():
    bf = builtin_bfield("grushin-sin", ((-1.0, -1.0), (1.0, 1.0)))
    bf.eval_matrix([1.0, -1.0])
    with pytest.raises(OutOfDomainError):
        bf.eval_matrix([1.5, 0.0])
    bf.eval_matrix([1.5, 0.0], check=False)


@pytest.mark.parametrize("name", BUILTINS)
def test_c2_bound_dominates_entries_and_differences(name):
    bf = builtin_bfield(name, ((-2.0,) * 3, (2.0,) * 3) if name == "heisenberg3d" else ((-2.0, -2.0), (2.0, 2.0)))
    bound = estimate_c2_bound(bf, bf.domain)
    x = np.random.default_rng(2).uniform(-2, 2, size=(200, bf.dim))
    assert np.max(np.abs(bf.eval_matrix(x))) <= bound + 1e-12
    assert np.max(np.abs(bf.jacobian(x))) <= bound + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-3, 3), st.floats(-3, 3))
def test_dp_hamiltonian_matches_finite_differences(x1, x2, p1, p2):
    bf = builtin_bfield("grushin-sigmoid")
    x, p = np.array([x1, x2]), np.array([p1, p2])
    eps = 1e-6
    fd = [(hamiltonian(bf, x, p + eps * e) - hamiltonian(bf, x, p - eps * e)) / (2 * eps) for e in np.eye(2)]
    np.testing.assert_allclose(dp_hamiltonian(bf, x, p), fd, atol=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-3, 3), st.floats(-3, 3))
def test_hamiltonian_nonnegative_and_quadratic(x1, x2, p1, p2):
    bf = builtin_bfield("grushin-sin")
    x, p = np.array([x1, x2]), np.array([p1, p2])
    h = hamiltonian(bf, x, p)
    assert h >= 0.0
    assert hamiltonian(bf, x, 2.0 * p) == pytest.approx(4.0 * h, rel=1e-12, abs=1e-300)


def test_jacobian_matches_finite_differences():
    bf = builtin_bfield("heisenberg3d")
    x = np.array([0.3, -0.7, 0.2])
    eps = 1e-6
    fd = np.stack([(bf.eval_matrix(x + eps * e) - bf.eval_matrix(x - eps * e)) / (2 * eps) for e in np.eye(3)], axis=-1)
    np.testing.assert_allclose(bf.jacobian(x), fd, atol=1e-9)


def test_b_gradient_examples(grushin):
    x2 = ExpressionField("x2", 2)
    x1 = ExpressionField("x1", 2)
    np.testing.assert_allclose(b_gradient(x2, grushin, [math.pi / 2, 0.3]), [0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(b_gradient(x1, grushin, [0.4, 0.3]), [1.0, 0.0])
    np.testing.assert_allclose(b_gradient(x2, grushin, [0.0, 0.3]), [0.0, 0.0])


def test_b_gradient_plain_callable_uses_differences(grushin):
    x = np.array([0.7, 0.1])
    got = b_gradient(lambda y: y[..., 0] * y[..., 1], grushin, x)
    np.testing.assert_allclose(got, [0.1, 0.7 * math.sin(0.7)], atol=1e-8)


def test_b_divergence_examples(grushin, identity):
    assert b_divergence(lambda x: np.stack([x[..., 0], 0 * x[..., 0]], -1), grushin, [0.4, 0.2]) == pytest.approx(1.0)
    assert b_divergence(lambda x: np.stack([0 * x[..., 0], x[..., 1]], -1), grushin, [math.pi / 2, 0.2]) == pytest.approx(1.0)
    assert b_divergence(lambda x: np.ones_like(x), identity, [0.4, 0.2]) == pytest.approx(0.0, abs=1e-9)


def test_b_divergence_equals_divergence_of_phi_bt():
    # for triangular B the B-divergence is div(Phi B^T)
    bf = builtin_bfield("grushin-sigmoid")

    def Phi(x):
        return np.stack([np.sin(x[..., 1]), x[..., 0] * x[..., 1]], -1)

    def flux(x):
        return np.einsum("...j,...ij->...i", Phi(x), bf.eval_matrix(x))

    x = np.array([0.5, -0.3])
    eps = 1e-5
    div = sum((flux(x + eps * e)[k] - flux(x - eps * e)[k]) / (2 * eps) for k, e in enumerate(np.eye(2)))
    assert b_divergence(Phi, bf, x) == pytest.approx(div, abs=1e-7)


def test_probe_linear_function(identity):
    u = ExpressionField("x1", 2)
    rep = b_differentiability_probe(u, identity, np.array([0.2, 0.1]), [1e-1, 1e-2, 1e-3])
    np.testing.assert_allclose(rep.rho, [1.0, 0.0], atol=1e-12)
    assert np.max(rep.residuals) < 1e-10


def test_probe_quadratic_matches_gradient_times_b(grushin):
    u = QuadraticField([0.2, -0.4])
    x = np.array([0.6, 0.3])
    rep = b_differentiability_probe(u, grushin, x, [1e-2, 1e-3, 1e-4])
    expected = u.grad(x) @ grushin.eval_matrix(x)
    np.testing.assert_allclose(rep.rho, expected, atol=1e-3)
    assert rep.residuals[-1] < rep.residuals[0]


def test_probe_kink_in_nondegenerate_direction(identity):
    rep = b_differentiability_probe(lambda x: np.abs(np.asarray(x)[..., 0]), identity, np.zeros(2), [1e-1, 1e-2, 1e-3])
    assert np.min(rep.residuals) > 0.5


def test_probe_rejects_increasing_radii(identity):
    with pytest.raises(ValueError):
        b_differentiability_probe(ExpressionField("x1", 2), identity, np.zeros(2), [1e-3, 1e-2])


def test_matrix_csv(tmp_path, grushin):
    path = write_matrix_csv(grushin, [math.pi / 2, 0.0], tmp_path / "b.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "i,j,value"
    assert len(lines) == 5
    assert float(lines[4].split(",")[2]) == pytest.approx(1.0)
