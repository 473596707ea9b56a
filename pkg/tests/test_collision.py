import numpy as np
import pytest
from scipy import integrate

from kinetic_lab.collision import (
    KERNEL_PREFACTOR,
    apply_L,
    assemble_collision,
    diagonal_cell_integral,
    dissipativity_check,
    dump_kernel,
    eval_chi,
    eval_kernel,
    eval_nu,
    eval_nu_gradient,
    eval_nu_laplacian,
    load_kernel,
    nu_of_speed,
    nu_speed_derivatives,
    null_space_residuals,
    smoothing_diagnostic,
    summarize,
)
from kinetic_lab.errors import GridError, ScaleGuardError, SingularKernelError
from kinetic_lab.velocity_grid import GridFunction, build_grid, collision_invariants

SQRT_2PI = np.sqrt(2.0 * np.pi)


def nu_by_quadrature(r: float) -> float:
    integral, _ = integrate.quad(lambda u: np.exp(-0.5 * u * u), 0.0, r)
    return (np.exp(-0.5 * r * r) + (r + 1.0 / r) * integral) / SQRT_2PI


# ===== collision frequency =====

def test_nu_at_origin():
    assert eval_nu([0.0, 0.0, 0.0]) == pytest.approx(2.0 / SQRT_2PI, rel=1e-14)


@pytest.mark.parametrize("r", [0.3, 1.0, 2.5, 6.0])
def test_nu_matches_quadrature(r):
    assert eval_nu([r, 0.0, 0.0]) == pytest.approx(nu_by_quadrature(r), rel=1e-10)


def test_nu_series_is_continuous():
    below, above = nu_of_speed(np.array([0.999e-6, 1.001e-6]))
    assert below == pytest.approx(above, rel=1e-10)


def test_nu_grows_like_half_speed():
    assert eval_nu([40.0, 0.0, 0.0]) / 20.0 == pytest.approx(1.0, rel=1e-3)


def test_eval_nu_on_a_stack():
    values = eval_nu(np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]))
    assert values.shape == (2,)
    assert values[0] == pytest.approx(values[1])


@pytest.mark.parametrize("r", [5e-3, 0.5, 2.0, 7.0])
def test_nu_derivatives_match_finite_differences(r):
    step = 1e-5
    first, second = nu_speed_derivatives(r)
    fd_first = (nu_of_speed(r + step) - nu_of_speed(r - step)) / (2 * step)
    fd_second = (nu_of_speed(r + 1e-3) - 2 * nu_of_speed(r) + nu_of_speed(r - 1e-3)) / 1e-6
    assert float(first) == pytest.approx(float(fd_first), rel=1e-6, abs=1e-9)
    assert float(second) == pytest.approx(float(fd_second), rel=1e-4, abs=1e-6)


def test_nu_gradient_is_bounded_by_one():
    xi = np.random.default_rng(0).uniform(-10, 10, size=(500, 3))
    assert np.max(np.linalg.norm(eval_nu_gradient(xi), axis=0)) <= 1.0


def test_nu_laplacian_matches_finite_differences():
    point = np.array([0.7, -0.4, 1.1])
    step = 1e-3
    lap = 0.0
    for a in range(3):
        e = np.zeros(3)
        e[a] = step
        lap += (eval_nu(point + e) - 2 * eval_nu(point) + eval_nu(point - e)) / step ** 2
    assert float(eval_nu_laplacian(point[None, :])[0]) == pytest.approx(lap, rel=1e-5)


# ===== kernel =====

def test_kernel_is_symmetric():
    a, b = np.array([0.3, -1.0, 0.5]), np.array([1.2, 0.4, -0.7])
    assert eval_kernel(a, b) == pytest.approx(eval_kernel(b, a), rel=1e-15)


def test_kernel_closed_form_at_origin():
    # |V| = 1, |xi|^2 - |xi*|^2 = -1
    expected = KERNEL_PREFACTOR * (2.0 * np.exp(-1.0 / 8.0 - 1.0 / 8.0) - 0.5 * np.exp(-0.25))
    assert eval_kernel([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]) == pytest.approx(expected, rel=1e-14)


def test_kernel_singular_at_coincidence():
    with pytest.raises(SingularKernelError):
        eval_kernel([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])


@pytest.mark.parametrize("r, expected", [(0.0, 1.0), (1.0, 1.0), (-0.5, 1.0), (1.5, 0.5), (2.0, 0.0), (3.0, 0.0)])
def test_cutoff_values(r, expected):
    assert eval_chi(r) == pytest.approx(expected)


def test_cutoff_is_monotone_on_the_bridge():
    r = np.linspace(1.0, 2.0, 101)
    assert np.all(np.diff(eval_chi(r)) <= 0)


def test_diagonal_cell_integral_is_positive(grid):
    diag = diagonal_cell_integral(grid)
    assert diag.shape == (grid.size,)
    assert np.all(diag > 0)


# ===== operator =====

def test_split_is_exact_and_symmetric(op):
    np.testing.assert_array_equal(op.K_s + op.K_r, op.K)
    np.testing.assert_allclose(op.K, op.K.T, rtol=0, atol=1e-12 * np.max(np.abs(op.K)))
    np.testing.assert_allclose(op.L, op.K - np.diag(op.nu))


def test_nu_floor_is_grid_minimum(op):
    assert op.nu_floor == pytest.approx(np.min(op.nu))
    assert op.nu_floor == pytest.approx(2.0 / SQRT_2PI)


def test_conservative_operator_annihilates_invariants(op):
    assert max(null_space_residuals(op)) < 1e-10
    assert len(op.quadrature_residuals) == 5


def test_quadrature_residuals_describe_the_raw_operator(raw_op, op):
    np.testing.assert_allclose(null_space_residuals(raw_op), raw_op.quadrature_residuals, rtol=1e-10)
    np.testing.assert_allclose(op.quadrature_residuals, raw_op.quadrature_residuals)
    assert max(raw_op.quadrature_residuals) < 0.5


def test_correction_is_invisible_off_invariants(op, raw_op, grid, rng):
    _, basis = collision_invariants(grid)
    f = rng.standard_normal(grid.size)
    f -= basis.T @ (grid.weight * basis @ f)
    g = rng.standard_normal(grid.size)
    g -= basis.T @ (grid.weight * basis @ g)
    assert grid.inner(g, apply_L(op, f)) == pytest.approx(grid.inner(g, apply_L(raw_op, f)), rel=1e-10, abs=1e-9)


def test_dissipativity(op):
    report = dissipativity_check(op, trials=4, seed=3)
    assert report.symmetry_residual < 1e-12
    assert report.self_adjoint_residual < 1e-10
    assert report.max_rayleigh_off_invariants < 0


def test_smoothing_diagnostic_reports_finite_constants(op):
    report = smoothing_diagnostic(op, trials=2, seed=0)
    assert report.trials == 2
    for value in (report.k_h1_over_l2, report.ks_l2_over_D_l2, report.kr_h2_over_l2, report.ks_norm):
        assert np.isfinite(value) and value >= 0


def test_apply_L_preserves_type(op, grid):
    f = GridFunction(np.ones(grid.size), grid)
    assert isinstance(apply_L(op, f), GridFunction)
    np.testing.assert_allclose(apply_L(op, f.values), apply_L(op, f).values)
    with pytest.raises(GridError):
        apply_L(op, np.ones(5))


def test_size_guard(grid):
    with pytest.raises(ScaleGuardError):
        assemble_collision(grid, 0.1, size_cap=100)


def test_cutoff_strength_must_be_positive(grid):
    with pytest.raises(ValueError):
        assemble_collision(grid, 0.0)


def test_kernel_dump_round_trip(op, grid, tmp_path):
    path = dump_kernel(op, tmp_path / "kernel.bin")
    np.testing.assert_array_equal(load_kernel(path, grid, D=0.1), op.K)
    with pytest.raises(GridError):
        load_kernel(path, build_grid(4.5, 7))
    with pytest.raises(GridError):
        load_kernel(path, grid, D=0.2)


def test_summarize(op):
    facts = summarize(op)
    assert facts["nodes"] == 729
    assert facts["cutoff_D"] == 0.1
    assert 0 < facts["grad_nu_max"]
