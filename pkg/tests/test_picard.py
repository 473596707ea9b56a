import numpy as np
import pytest

from kinetic_lab.errors import IntegrationError
from kinetic_lab.green import decompose_green, evolve_mode, velocity_profile
from kinetic_lab.picard import (
    WAVE_ORDERS,
    check_rate_hypothesis,
    check_t_grid,
    damped_semigroup_ks,
    duhamel_h0,
    march_with_halving,
    picard_cascade,
    ratio_suprema,
    remainder_regularity,
    rk4_march,
    source_integral,
    transport_generator,
    transport_semigroup,
    wave_ratios,
)
from kinetic_lab.spectrum import FLUID_BRANCHES, assemble_mode, full_spectrum
from kinetic_lab.velocity_grid import L2, GridFunction, NormKind

T_GRID = np.linspace(0.0, 1.0, 11)


@pytest.fixture(scope="module")
def mode(op):
    return assemble_mode(op, 0.1, (1, 0, 0))


@pytest.fixture(scope="module")
def family(op, mode, grid):
    return picard_cascade(op, mode, velocity_profile(grid), T_GRID, dt=0.01)


# ===== semigroups =====

def test_transport_semigroup_is_exact(mode, grid):
    f0 = np.ones(grid.size)
    np.testing.assert_allclose(transport_semigroup(mode, f0, 1.5), np.exp(1.5 * transport_generator(mode)))
    twice = transport_semigroup(mode, transport_semigroup(mode, f0, 0.4), 0.6)
    np.testing.assert_allclose(twice, transport_semigroup(mode, f0, 1.0), rtol=1e-13)
    with pytest.raises(ValueError):
        transport_semigroup(mode, f0, -0.1)


def test_transport_semigroup_keeps_grid_functions(mode, grid):
    out = transport_semigroup(mode, GridFunction(np.ones(grid.size), grid), 0.5)
    assert isinstance(out, GridFunction)


def test_damped_semigroup_composes(op, mode, grid):
    f0 = velocity_profile(grid)
    np.testing.assert_array_equal(damped_semigroup_ks(op, mode, f0, 0.0, warn=False), f0.astype(complex))
    step = damped_semigroup_ks(op, mode, damped_semigroup_ks(op, mode, f0, 0.3, warn=False), 0.2, warn=False)
    np.testing.assert_allclose(step, damped_semigroup_ks(op, mode, f0, 0.5, warn=False), atol=1e-10)
    with pytest.raises(ValueError):
        damped_semigroup_ks(op, mode, f0, -1.0)


def test_rate_hypothesis_warning(op):
    message = check_rate_hypothesis(op)
    assert (message is None) == (op.ks_norm <= 0.5 * op.nu_floor)


# ===== integrator =====

def test_rk4_on_linear_decay():
    times = np.array([0.0, 0.5, 1.0])
    out = rk4_march(lambda y: -y, np.array([1.0 + 0j]), times, 0.1, lambda t, y: True)
    np.testing.assert_allclose(out[:, 0].real, np.exp(-times), rtol=1e-5)


def test_march_halves_after_rejection():
    calls = []

    def accept(t, y):
        calls.append(t)
        return len(calls) > 1

    out, step, halvings, notes = march_with_halving(
        lambda y: -y, np.array([1.0 + 0j]), np.array([0.0, 1.0]), 0.2, accept, label="decay",
    )
    assert halvings == 1
    assert step == pytest.approx(0.1)
    assert len(notes) == 1
    assert out.shape == (2, 1)


def test_march_gives_up():
    with pytest.raises(IntegrationError):
        march_with_halving(
            lambda y: -y, np.array([1.0 + 0j]), np.array([0.0, 1.0]), 0.2,
            lambda t, y: False, label="decay", max_halvings=2,
        )


@pytest.mark.parametrize("t_grid", [[], [0.1, 1.0], [0.0, 1.0, 1.0], [0.0, 2.0, 1.0]])
def test_check_t_grid_rejects(t_grid):
    with pytest.raises(ValueError):
        check_t_grid(t_grid)


# ===== cascade =====

def test_cascade_shapes(family, grid):
    assert family.waves.shape == (T_GRID.size, len(WAVE_ORDERS), grid.size)
    assert family.remainders.shape == family.waves.shape
    assert family.halvings == 0
    np.testing.assert_allclose(family.wave(-1)[0], velocity_profile(grid))
    np.testing.assert_array_equal(family.wave(0)[0], 0.0)


@pytest.mark.parametrize("order", WAVE_ORDERS)
def test_cascade_telescopes(family, order):
    assert family.telescoping_residual(order) <= 1e-6


def test_first_wave_is_the_damped_semigroup(family, op, mode, grid):
    expected = damped_semigroup_ks(op, mode, velocity_profile(grid), 1.0, warn=False)
    np.testing.assert_allclose(family.wave(-1)[-1], expected, atol=1e-8)


def test_duhamel_oracle_matches_cascade(family, op, mode, grid):
    h0 = duhamel_h0(op, mode, velocity_profile(grid), 1.0, panels=4, order=6)
    scale = np.linalg.norm(velocity_profile(grid))
    assert np.linalg.norm(h0 - family.wave(0)[-1]) <= 1e-6 * scale
    assert not np.any(duhamel_h0(op, mode, velocity_profile(grid), 0.0))


def test_wave_ratios(family, grid):
    ratios = wave_ratios(family, grid)
    assert ratios.shape == (len(WAVE_ORDERS), T_GRID.size)
    assert np.all(np.isnan(ratios[:, 0]))
    assert np.all(np.isfinite(ratios[:, 1:]))
    suprema = ratio_suprema(ratios, T_GRID)
    assert sorted(suprema) == WAVE_ORDERS
    assert all(value >= 0 for value in suprema.values())


def test_remainder_regularity_and_source(family, op):
    series = remainder_regularity([family], op.grid)
    assert series.values.shape == (T_GRID.size,)
    assert series.values[0] == pytest.approx(0.0, abs=1e-12)
    integral = source_integral([family], op)
    assert integral[0] == 0.0
    assert np.all(np.diff(integral) >= 0)


@pytest.mark.slow
def test_green_remainder_decays_at_the_remainder_rate(op, grid, tau):
    m = assemble_mode(op, 0.05, (1, 0, 0))
    times = np.linspace(0.0, 10.0, 101)
    family = picard_cascade(op, m, velocity_profile(grid), times, dt=0.01)
    spectrum = full_spectrum(m, leading=FLUID_BRANCHES)
    decomp = decompose_green(evolve_mode(m, velocity_profile(grid), times), spectrum, delta=0.2)

    series = remainder_regularity([family], grid, window=(1.0, 8.0), fluid={m.k: decomp.fluid})
    assert series.fit is not None
    assert series.fit.rate >= 0.8 * min(0.5 * op.nu_floor, tau)


@pytest.mark.slow
@pytest.mark.parametrize("kind", [L2, NormKind.sup_weighted(2.0)], ids=["L2", "sup2"])
def test_wave_ratio_suprema_are_stable_under_step_halving(op, mode, grid, kind):
    times = np.linspace(0.0, 10.0, 51)
    suprema = [
        ratio_suprema(wave_ratios(picard_cascade(op, mode, velocity_profile(grid), times, dt=dt), grid, kind), times)
        for dt in (0.02, 0.01)
    ]
    for j in WAVE_ORDERS:
        assert suprema[1][j] == pytest.approx(suprema[0][j], rel=0.2)
