import numpy as np
import pytest

from kinetic_lab.errors import AliasingError, DecompositionError
from kinetic_lab.green import (
    aggregate_norm,
    decompose_green,
    evolve_mode,
    extract_coefficients,
    fluid_pointwise_constant,
    invariant_moments,
    lattice_size,
    make_initial,
    point_value,
    sobolev_weight,
    sup_x_norm,
    synthesize_physical,
    velocity_profile,
    whole_solution_bound,
    x_lattice,
)
from kinetic_lab.fitting import fit_decay
from kinetic_lab.spectrum import FLUID_BRANCHES, assemble_mode, full_spectrum, mode_along
from kinetic_lab.velocity_grid import L2, NormKind, compute_norm, maxwellian_root

TIMES = np.linspace(0.0, 4.0, 41)


@pytest.fixture(scope="module")
def long_mode(op):
    m = assemble_mode(op, 0.05, (1, 0, 0))
    return m, full_spectrum(m, leading=FLUID_BRANCHES + 3)


# ===== initial data =====

def test_velocity_profile_is_unit_norm(grid):
    assert compute_norm(velocity_profile(grid), L2, grid) == pytest.approx(1.0)


def test_single_mode_data(grid):
    data = make_initial("single-mode", grid, 0.1, 1, k0=(-1, 0, 0))
    nonzero = [k for k in data.modes if np.any(data.values(k))]
    assert sorted(nonzero) == [(-1, 0, 0), (1, 0, 0)]
    assert data.canonical_modes.count((1, 0, 0)) == 1
    assert (-1, 0, 0) not in data.canonical_modes
    assert len(data.modes) == 27


@pytest.mark.parametrize("profile", ["random-smooth", "box-bump", "single-mode"])
def test_reality_and_zero_mean(grid, profile):
    data = make_initial(profile, grid, 0.1, 1, seed=7)
    for k in data.modes:
        np.testing.assert_allclose(data.values((-k[0], -k[1], -k[2])), np.conj(data.values(k)))
    np.testing.assert_allclose(invariant_moments(grid, data.values((0, 0, 0))), 0.0, atol=1e-12)


def test_random_data_is_seeded(grid):
    a = make_initial("random-smooth", grid, 0.1, 1, seed=3)
    b = make_initial("random-smooth", grid, 0.1, 1, seed=3)
    c = make_initial("random-smooth", grid, 0.1, 1, seed=4)
    np.testing.assert_array_equal(a.values((1, 1, 0)), b.values((1, 1, 0)))
    assert not np.allclose(a.values((1, 1, 0)), c.values((1, 1, 0)))


def test_make_initial_validation(grid):
    with pytest.raises(ValueError):
        make_initial("gaussian", grid, 0.1, 1)
    with pytest.raises(ValueError):
        make_initial("single-mode", grid, 0.1, 1, k0=(2, 0, 0))
    with pytest.raises(ValueError):
        make_initial("box-bump", grid, 0.1, -1)


# ===== evolution =====

def test_evolution_starts_exactly_at_initial_data(op, grid):
    m = assemble_mode(op, 0.1, (1, 0, 0))
    f0 = velocity_profile(grid)
    state = evolve_mode(m, f0, TIMES)
    np.testing.assert_array_equal(state.values[0], f0.astype(complex))
    assert state.method in ("eigen", "expm")


def test_energy_never_grows(op, grid):
    m = assemble_mode(op, 0.1, (1, 1, 0))
    state = evolve_mode(m, velocity_profile(grid), TIMES)
    norms = state.norms(L2, grid)
    assert np.all(np.diff(norms) <= 1e-8 * norms[0])


def test_zero_mode_conserves_invariants(op, grid):
    m = assemble_mode(op, 0.1, (0, 0, 0))
    f0 = velocity_profile(grid)
    state = evolve_mode(m, f0, TIMES)
    moments = np.array([invariant_moments(grid, v) for v in state.values])
    np.testing.assert_allclose(moments, np.tile(moments[0], (TIMES.size, 1)), atol=1e-10)


def test_zero_data_stays_zero(op, grid):
    m = assemble_mode(op, 0.1, (1, 0, 0))
    state = evolve_mode(m, np.zeros(grid.size), TIMES)
    assert state.method == "zero"
    assert not np.any(state.values)


def test_times_must_ascend(op, grid):
    m = assemble_mode(op, 0.1, (1, 0, 0))
    with pytest.raises(ValueError):
        evolve_mode(m, velocity_profile(grid), [0.0, 2.0, 1.0])


def test_conjugate_state(op, grid):
    m = assemble_mode(op, 0.1, (1, 0, 0))
    state = evolve_mode(m, velocity_profile(grid), TIMES[:5])
    mirror = state.conjugate()
    assert mirror.k == (-1, 0, 0)
    np.testing.assert_array_equal(mirror.values, np.conj(state.values))


# ===== decomposition =====

def test_decomposition_is_complete(long_mode, grid):
    m, spectrum = long_mode
    state = evolve_mode(m, velocity_profile(grid), TIMES)
    decomp = decompose_green(state, spectrum, delta=0.2)
    assert decomp.long_wave
    assert decomp.completeness_residual() < 1e-12
    assert len(decomp.fluid_eigenvalues) == FLUID_BRANCHES
    assert len(decomp.fluid_weights) == FLUID_BRANCHES


def test_fluid_eigenvector_stays_fluid(long_mode):
    m, spectrum = long_mode
    f0 = spectrum.right_vectors[:, 0]
    state = evolve_mode(m, f0, TIMES)
    decomp = decompose_green(state, spectrum, delta=0.2)
    expected = np.exp(spectrum.eigenvalues[0] * TIMES)[:, None] * f0[None, :]
    np.testing.assert_allclose(decomp.fluid, expected, atol=1e-8)
    assert np.max(np.abs(decomp.orthogonal)) < 1e-8


def test_short_wave_passes_through(op, grid):
    m = assemble_mode(op, 0.2, (1, 0, 0))
    state = evolve_mode(m, velocity_profile(grid), TIMES[:5])
    # |eps k| == delta counts as short wave
    decomp = decompose_green(state, None, delta=0.2)
    assert not decomp.long_wave
    np.testing.assert_array_equal(decomp.short, state.values)
    assert not np.any(decomp.fluid)


def test_long_wave_needs_matching_spectrum(long_mode, op, grid):
    m, spectrum = long_mode
    state = evolve_mode(m, velocity_profile(grid), TIMES[:5])
    with pytest.raises(DecompositionError):
        decompose_green(state, None, delta=0.2)
    other = assemble_mode(op, 0.05, (0, 1, 0))
    wrong = evolve_mode(other, velocity_profile(grid), TIMES[:5])
    with pytest.raises(DecompositionError):
        decompose_green(wrong, spectrum, delta=0.2)


def test_decomposition_conjugate(long_mode, grid):
    m, spectrum = long_mode
    decomp = decompose_green(evolve_mode(m, velocity_profile(grid), TIMES[:5]), spectrum, 0.2)
    mirror = decomp.conjugate()
    assert mirror.k == (-1, 0, 0)
    np.testing.assert_array_equal(mirror.fluid, np.conj(decomp.fluid))


# ===== norms and synthesis =====

def test_sobolev_weight():
    assert sobolev_weight((0, 0, 0), 0.1, 2.0) == 1.0
    assert sobolev_weight((1, 0, 0), 0.1, 1.0) == pytest.approx(1.0 + (0.1 * np.pi) ** 2)


def test_aggregate_norm_sums_modes(grid):
    f = maxwellian_root(grid)
    parts = {(1, 0, 0): f, (-1, 0, 0): f}
    assert aggregate_norm(parts, 0.1, grid) == pytest.approx(np.sqrt(2.0), rel=1e-3)
    assert aggregate_norm({}, 0.1, grid) == 0.0
    weighted = aggregate_norm(parts, 0.1, grid, s=2.0)
    assert weighted == pytest.approx(np.sqrt(2.0 * sobolev_weight((1, 0, 0), 0.1, 2.0)), rel=1e-3)


def test_synthesis_of_a_cosine(grid):
    f = maxwellian_root(grid)
    modes = {(1, 0, 0): 0.5 * f, (-1, 0, 0): 0.5 * f}
    m = 4
    field_values = synthesize_physical(modes, m)
    assert np.isrealobj(field_values)
    x = x_lattice(0.1, m)
    expected = np.cos(np.pi * 0.1 * x[:, 0])[:, None] * f[None, :]
    np.testing.assert_allclose(field_values, expected, atol=1e-12)
    np.testing.assert_allclose(point_value(modes, 0.1), f, atol=1e-14)


def test_extract_inverts_synthesis(grid, rng):
    modes = {
        (1, 0, 0): rng.standard_normal(grid.size) + 1j * rng.standard_normal(grid.size),
        (0, 1, -1): rng.standard_normal(grid.size) + 1j * rng.standard_normal(grid.size),
    }
    back = extract_coefficients(synthesize_physical(modes, 3), 3, 1)
    for k, values in modes.items():
        np.testing.assert_allclose(back[k], values, atol=1e-12)
    np.testing.assert_allclose(back[(1, 1, 1)], 0.0, atol=1e-12)


def test_lattice_guard(grid):
    modes = {(2, 0, 0): np.ones(grid.size)}
    assert lattice_size(2) == 8
    assert lattice_size(1, oversample=1) == 3
    with pytest.raises(AliasingError):
        synthesize_physical(modes, 4)


def test_sup_x_norm(grid):
    f = maxwellian_root(grid)
    modes = {(1, 0, 0): 0.5 * f, (-1, 0, 0): 0.5 * f}
    assert sup_x_norm(modes, grid, 4) == pytest.approx(compute_norm(f, L2, grid))
    sup = NormKind.sup_weighted(2.0)
    assert sup_x_norm(modes, grid, 4, sup) == pytest.approx(compute_norm(f, sup, grid))


def test_fluid_pointwise_constant_is_finite(long_mode, grid):
    m, spectrum = long_mode
    decomp = decompose_green(evolve_mode(m, velocity_profile(grid), TIMES), spectrum, 0.2)
    value = fluid_pointwise_constant([decomp, decomp.conjugate()], 0.05, grid, a_ref=0.5, window=(1.0, 4.0))
    assert np.isfinite(value) and value > 0


def test_whole_solution_bound_without_long_waves(op, grid):
    m = assemble_mode(op, 0.5, (1, 0, 0))
    state = evolve_mode(m, velocity_profile(grid), TIMES)
    decomp = decompose_green(state, None, delta=0.2)
    bound = whole_solution_bound([decomp, decomp.conjugate()], 0.5, grid, 4, window=(1.0, 4.0))
    assert bound.lambda_long == np.inf
    assert bound.lambda_short > 0
    assert np.isfinite(bound.sup_ratio)


# ===== decay rates =====

def test_orthogonal_part_decays_at_the_gap_rate(long_mode, grid, tau):
    m, spectrum = long_mode
    decomp = decompose_green(evolve_mode(m, velocity_profile(grid), TIMES), spectrum, 0.2)
    norms = np.array([compute_norm(v, L2, grid) for v in decomp.orthogonal])
    assert fit_decay(TIMES, norms, window=(1.0, 4.0)).rate >= 0.8 * tau


def test_short_wave_decays_at_the_gap_rate(op, grid, tau):
    m = mode_along(op, 2.0)
    decomp = decompose_green(evolve_mode(m, velocity_profile(grid), TIMES), None, 0.2)
    norms = np.array([compute_norm(v, L2, grid) for v in decomp.short])
    assert fit_decay(TIMES, norms, window=(1.0, 4.0)).rate >= 0.8 * tau


def test_pointwise_constant_is_stable_under_more_modes(op, grid):
    eps = 0.05
    times = np.linspace(0.0, 20.0, 81)
    shape = velocity_profile(grid)
    decomps = {}
    for n in (1, 2, 3):
        m = assemble_mode(op, eps, (n, 0, 0))
        spectrum = full_spectrum(m, leading=FLUID_BRANCHES)
        state = evolve_mode(m, (1.0 + n * n) ** -3 * shape, times)
        decomps[n] = decompose_green(state, spectrum, delta=0.2)
        if n == 1:
            a_ref = -spectrum.eigenvalues[0].real / (np.pi * eps) ** 2

    def constant(k_max):
        chosen = [decomps[n] for n in range(1, k_max + 1)]
        chosen += [d.conjugate() for d in chosen]
        return fluid_pointwise_constant(chosen, eps, grid, a_ref=a_ref)

    narrow, wide = constant(1), constant(3)
    assert abs(wide - narrow) <= 0.1 * wide
