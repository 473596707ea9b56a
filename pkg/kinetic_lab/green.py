"""
Green Decomposition

Mode-by-mode evolution on the periodic box and the long/short-wave split:
1. Initial data profiles (random-smooth, box-bump, single-mode) with the
   reality constraint and the zero-mean projection
2. Exact mode evolution through the eigendecomposition (expm fallback)
3. Fluid / non-fluid / short-wave decomposition via spectral projectors
4. H^s_x norms by Parseval and L^inf_x norms by lattice synthesis
5. Pointwise fluid constant and the whole-solution bound
"""

import logging
from dataclasses import dataclass, field
from itertools import product
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from kinetic_lab.errors import AliasingError, DecompositionError, FitRejectedError
from kinetic_lab.fitting import fit_decay
from kinetic_lab.spectrum import FLUID_BRANCHES, ModeOperator, SpectrumResult
from kinetic_lab.velocity_grid import (
    L2,
    GridFunction,
    NormKind,
    VelocityGrid,
    collision_invariants,
    compute_norm,
    maxwellian_root,
    project_off_invariants,
)

logger = logging.getLogger(__name__)

Mode = Tuple[int, int, int]

PROFILES = ("random-smooth", "box-bump", "single-mode")
CONDITION_LIMIT = 1e8
BOX_HALF_WIDTH = 0.25  # fraction of the period


# =============================================================================
# INITIAL DATA
# =============================================================================

@dataclass
class InitialData:
    """Fourier coefficients I_k for |k_i| <= k_max, with I_{-k} = conj(I_k)."""
    eps: float
    k_max: int
    grid: VelocityGrid = field(repr=False)
    coefficients: Dict[Mode, GridFunction] = field(repr=False)
    zero_mean: bool = True
    profile: str = "single-mode"
    seed: int = 0

    @property
    def modes(self) -> List[Mode]:
        return sorted(self.coefficients)

    @property
    def canonical_modes(self) -> List[Mode]:
        """One representative of each {k, -k} pair (k = 0 included)."""
        return [k for k in self.modes if k >= _negate(k)]

    def values(self, k: Mode) -> np.ndarray:
        return self.coefficients[k].values


def _negate(k: Mode) -> Mode:
    return (-k[0], -k[1], -k[2])


def velocity_profile(grid: VelocityGrid) -> np.ndarray:
    """Unit-norm smooth profile with fluid and non-fluid content."""
    xi1, xi2 = grid.nodes[:, 0], grid.nodes[:, 1]
    g = maxwellian_root(grid) * (1.0 + xi1 + 0.5 * (grid.speeds ** 2 - 3.0) + xi1 * xi2)
    return g / compute_norm(g, L2, grid)


def _box_coefficient(k: Mode, k_max: int) -> float:
    """Fourier coefficient of a centred box of half-width 1/4 period, Gaussian-smoothed."""
    c = 1.0
    for ki in k:
        c *= 2.0 * BOX_HALF_WIDTH * np.sinc(2.0 * BOX_HALF_WIDTH * ki)
    damping = np.exp(-sum(ki ** 2 for ki in k) / (max(k_max, 1) ** 2))
    return float(c * damping)


def make_initial(
    profile: str,
    grid: VelocityGrid,
    eps: float,
    k_max: int,
    seed: int = 0,
    k0: Sequence[int] = (1, 0, 0),
    zero_mean: bool = True,
) -> InitialData:
    """
    Build initial data on the box of side 2/eps.

    Args:
        profile: "random-smooth", "box-bump" or "single-mode"
        grid: Velocity grid
        eps: Inverse box-size scale
        k_max: Retained modes satisfy |k_i| <= k_max
        seed: Seed for random-smooth data
        k0: Wave vector of single-mode data
        zero_mean: Project the k = 0 coefficient off the collision invariants

    Returns:
        InitialData satisfying the reality constraint by construction
    """
    if k_max < 0:
        raise ValueError(f"k_max must be >= 0, got {k_max}")
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")

    k_max = int(k_max)
    axis = range(-k_max, k_max + 1)
    canonical = [k for k in product(axis, axis, axis) if k >= _negate(k)]
    zero = np.zeros(grid.size, dtype=complex)
    coefficients: Dict[Mode, np.ndarray] = {}

    if profile == "single-mode":
        k0 = tuple(int(c) for c in k0)
        if max(abs(c) for c in k0) > k_max:
            raise ValueError(f"k0={k0} lies outside k_max={k_max}")
        key = max(k0, _negate(k0))
        shape = velocity_profile(grid).astype(complex)
        for k in canonical:
            coefficients[k] = zero.copy()
        coefficients[key] = shape if key == (0, 0, 0) else 0.5 * shape

    elif profile == "box-bump":
        shape = velocity_profile(grid).astype(complex)
        for k in canonical:
            coefficients[k] = _box_coefficient(k, k_max) * shape

    else:
        rng = np.random.default_rng(seed)
        root = maxwellian_root(grid)
        xi = grid.nodes
        monomials = np.vstack([
            np.ones(grid.size), xi[:, 0], xi[:, 1], xi[:, 2],
            xi[:, 0] * xi[:, 1], xi[:, 1] * xi[:, 2], xi[:, 0] * xi[:, 2],
            xi[:, 0] ** 2, xi[:, 1] ** 2, xi[:, 2] ** 2,
        ]) * root
        for k in canonical:
            weights = rng.standard_normal(10) + 1j * rng.standard_normal(10)
            decay = (1.0 + sum(ki ** 2 for ki in k)) ** -2
            coefficients[k] = decay * (weights @ monomials) / np.sqrt(10.0)

    origin = (0, 0, 0)
    coefficients[origin] = coefficients[origin].real.astype(complex)
    if zero_mean:
        coefficients[origin] = project_off_invariants(grid, coefficients[origin])

    full: Dict[Mode, GridFunction] = {}
    for k, values in coefficients.items():
        full[k] = GridFunction(values, grid)
        if k != origin:
            full[_negate(k)] = GridFunction(np.conj(values), grid)

    logger.info(
        f"Initial data: profile={profile}, eps={eps}, k_max={k_max}, "
        f"{len(full)} modes, seed={seed}"
    )
    return InitialData(
        eps=float(eps), k_max=k_max, grid=grid, coefficients=full,
        zero_mean=zero_mean, profile=profile, seed=int(seed),
    )


def invariant_moments(grid: VelocityGrid, values: np.ndarray) -> np.ndarray:
    """<sqrt(w){1, xi, |xi|^2}, f> for the five raw invariants."""
    raw, _ = collision_invariants(grid)
    return grid.weight * (raw @ values)


# =============================================================================
# MODE EVOLUTION
# =============================================================================

@dataclass
class ModeState:
    """f_k(t) on a time grid; values has shape (len(times), N)."""
    k: Mode
    eps: float
    times: np.ndarray
    values: np.ndarray = field(repr=False)
    method: str = "eigen"

    @property
    def eps_k(self) -> float:
        return float(self.eps * np.linalg.norm(self.k))

    def norms(self, kind: NormKind, grid: VelocityGrid) -> np.ndarray:
        return np.array([compute_norm(v, kind, grid) for v in self.values])

    def conjugate(self) -> "ModeState":
        """State of the mode -k for reality-constrained data."""
        return ModeState(_negate(self.k), self.eps, self.times, np.conj(self.values), self.method)


def _check_times(times: Sequence[float]) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("times must be a non-empty 1-D sequence")
    if t[0] < 0 or np.any(np.diff(t) < 0):
        raise ValueError("times must be nonnegative and ascending")
    return t


def _expm_march(B: np.ndarray, f0: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Scaling-and-squaring propagators, reused across equal increments."""
    out = np.empty((times.size, f0.size), dtype=complex)
    propagators: Dict[float, np.ndarray] = {}
    state, previous = f0.astype(complex), 0.0
    for i, t in enumerate(times):
        step = round(float(t - previous), 12)
        if step > 0:
            if step not in propagators:
                propagators[step] = scipy.linalg.expm(step * B)
            state = propagators[step] @ state
        out[i] = state
        previous = t
    return out


def evolve_mode(m: ModeOperator, f0, times: Sequence[float]) -> ModeState:
    """
    f_k(t) = exp(B t) f_k(0).

    Args:
        m: Mode operator
        f0: GridFunction or node values
        times: Nonnegative ascending times

    Returns:
        ModeState; t = 0 reproduces f0 exactly
    """
    t = _check_times(times)
    values0 = f0.values if isinstance(f0, GridFunction) else np.asarray(f0)
    values0 = values0.astype(complex)

    if not np.any(values0):
        return ModeState(m.k, m.eps, t, np.zeros((t.size, values0.size), dtype=complex), "zero")

    system = m.eigensystem
    if system.condition > CONDITION_LIMIT:
        logger.warning(
            f"Eigenvector condition {system.condition:.2e} at k={m.k}; "
            "falling back to scaling-and-squaring"
        )
        out, method = _expm_march(m.B, values0, t), "expm"
    else:
        coeffs = system.left @ values0
        growth = np.exp(np.outer(t, system.values))
        out, method = (growth * coeffs) @ system.right.T, "eigen"

    out[t == 0] = values0
    return ModeState(m.k, m.eps, t, out, method)


# =============================================================================
# DECOMPOSITION
# =============================================================================

@dataclass
class GreenDecomposition:
    """Per-mode split into fluid, long-wave non-fluid and short-wave parts."""
    k: Mode
    eps_k: float
    times: np.ndarray
    delta: float
    long_wave: bool
    full: np.ndarray = field(repr=False)
    fluid: np.ndarray = field(repr=False)
    orthogonal: np.ndarray = field(repr=False)
    short: np.ndarray = field(repr=False)
    fluid_eigenvalues: List[complex] = field(default_factory=list)
    fluid_weights: List[float] = field(default_factory=list)

    def completeness_residual(self) -> float:
        total = self.fluid + self.orthogonal + self.short
        scale = max(float(np.max(np.abs(self.full))), 1e-300)
        return float(np.max(np.abs(total - self.full)) / scale)

    def conjugate(self) -> "GreenDecomposition":
        return GreenDecomposition(
            k=_negate(self.k), eps_k=self.eps_k, times=self.times, delta=self.delta,
            long_wave=self.long_wave, full=np.conj(self.full), fluid=np.conj(self.fluid),
            orthogonal=np.conj(self.orthogonal), short=np.conj(self.short),
            fluid_eigenvalues=[complex(np.conj(s)) for s in self.fluid_eigenvalues],
            fluid_weights=list(self.fluid_weights),
        )


def decompose_green(
    state: ModeState,
    spectrum: Optional[SpectrumResult],
    delta: float,
) -> GreenDecomposition:
    """
    Split one evolved mode.

    |eps k| >= delta (ties included) passes through as short wave. Long-wave
    modes use the five leading spectral projectors: fluid(t) = sum_j
    exp(sigma_j t) P_j f0, and the orthogonal part is full - fluid.

    Raises:
        DecompositionError: long-wave mode without a matching spectrum
    """
    zeros = np.zeros_like(state.values)
    long_wave = state.eps_k < delta
    if not long_wave:
        return GreenDecomposition(
            k=state.k, eps_k=state.eps_k, times=state.times, delta=delta, long_wave=False,
            full=state.values, fluid=zeros, orthogonal=zeros.copy(), short=state.values.copy(),
        )

    if spectrum is None:
        raise DecompositionError(f"long-wave mode k={state.k} (|eps k|={state.eps_k:.4f}) needs a spectrum")
    if tuple(spectrum.k) != tuple(state.k) or spectrum.eps != state.eps:
        raise DecompositionError(f"spectrum for k={spectrum.k} supplied to mode k={state.k}")
    if spectrum.leading < FLUID_BRANCHES:
        raise DecompositionError(f"spectrum keeps {spectrum.leading} vectors; need {FLUID_BRANCHES}")

    idx = list(range(FLUID_BRANCHES))
    sigma = spectrum.eigenvalues[idx]
    coeffs = spectrum.left_vectors[idx] @ state.values[0]
    fluid = (np.exp(np.outer(state.times, sigma)) * coeffs) @ spectrum.right_vectors[:, idx].T
    return GreenDecomposition(
        k=state.k, eps_k=state.eps_k, times=state.times, delta=delta, long_wave=True,
        full=state.values, fluid=fluid, orthogonal=state.values - fluid, short=zeros,
        fluid_eigenvalues=[complex(s) for s in sigma],
        fluid_weights=[
            float(abs(c) * np.linalg.norm(spectrum.right_vectors[:, j])) for j, c in enumerate(coeffs)
        ],
    )


# =============================================================================
# NORMS AND SYNTHESIS
# =============================================================================

def sobolev_weight(k: Mode, eps: float, s: float) -> float:
    return float((1.0 + (np.pi * eps) ** 2 * sum(c * c for c in k)) ** s)


def aggregate_norm(
    parts: Dict[Mode, np.ndarray],
    eps: float,
    grid: VelocityGrid,
    s: float = 0.0,
    xi_kind: NormKind = L2,
) -> float:
    """
    (sum_k (1 + |pi eps k|^2)^s ||f_k||^2)^{1/2}.

    For SupWeighted xi_kind the x-Sobolev sum is taken pointwise in xi before
    the weighted maximum over the grid.
    """
    if not parts:
        return 0.0
    if xi_kind.name == "SupWeighted":
        total = np.zeros(grid.size)
        for k, values in parts.items():
            total += sobolev_weight(k, eps, s) * np.abs(values) ** 2
        return compute_norm(np.sqrt(total), xi_kind, grid)
    return float(np.sqrt(sum(
        sobolev_weight(k, eps, s) * compute_norm(values, xi_kind, grid) ** 2
        for k, values in parts.items()
    )))


def lattice_size(k_max: int, oversample: int = 4) -> int:
    """Points per axis for x-sup norms: oversample * k_max, never below 2 k_max + 1."""
    return max(oversample * k_max, 2 * k_max + 1)


def x_lattice(eps: float, points_per_axis: int) -> np.ndarray:
    """Uniform lattice on the box [0, 2/eps)^3, shape (m^3, 3), lexicographic."""
    axis = (2.0 / eps) * np.arange(points_per_axis) / points_per_axis
    g1, g2, g3 = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.column_stack([g1.ravel(), g2.ravel(), g3.ravel()])


def synthesize_physical(
    modes: Dict[Mode, np.ndarray],
    points_per_axis: int,
    imag_tol: float = 1e-10,
) -> np.ndarray:
    """
    f(x_j) = sum_k f_k exp(i pi eps k . x_j) on the lattice of x_lattice.

    Args:
        modes: Coefficients per wave vector
        points_per_axis: Lattice resolution m (>= 2 k_max + 1)
        imag_tol: Relative imaginary residue below which a real array is returned

    Returns:
        Array of shape (m^3, N)

    Raises:
        AliasingError: lattice too coarse for the retained modes
    """
    m = int(points_per_axis)
    k_max = max((max(abs(c) for c in k) for k in modes), default=0)
    if m < 2 * k_max + 1:
        raise AliasingError(
            f"lattice of {m} points per axis aliases modes up to k_max={k_max}; need {2 * k_max + 1}"
        )
    n_nodes = len(next(iter(modes.values())))
    spectrum = np.zeros((m, m, m, n_nodes), dtype=complex)
    for k, values in modes.items():
        spectrum[k[0] % m, k[1] % m, k[2] % m] += values
    field_values = np.fft.ifftn(spectrum, axes=(0, 1, 2)) * m ** 3
    field_values = field_values.reshape(m ** 3, n_nodes)

    scale = max(float(np.max(np.abs(field_values))), 1e-300)
    residue = float(np.max(np.abs(field_values.imag))) / scale
    if residue <= imag_tol:
        return field_values.real
    logger.debug(f"Synthesized field keeps imaginary residue {residue:.2e}")
    return field_values


def extract_coefficients(field_values: np.ndarray, points_per_axis: int, k_max: int) -> Dict[Mode, np.ndarray]:
    """Discrete Fourier inversion of synthesize_physical for |k_i| <= k_max."""
    m = int(points_per_axis)
    if m < 2 * k_max + 1:
        raise AliasingError(f"lattice of {m} points per axis cannot resolve k_max={k_max}")
    n_nodes = field_values.shape[1]
    spectrum = np.fft.fftn(field_values.reshape(m, m, m, n_nodes), axes=(0, 1, 2)) / m ** 3
    axis = range(-k_max, k_max + 1)
    return {k: spectrum[k[0] % m, k[1] % m, k[2] % m].copy() for k in product(axis, axis, axis)}


def point_value(modes: Dict[Mode, np.ndarray], eps: float, x: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """f(x, .) at a single point of the box."""
    x = np.asarray(x, dtype=float)
    total = None
    for k, values in modes.items():
        term = values * np.exp(1j * np.pi * eps * np.dot(k, x))
        total = term if total is None else total + term
    return total


def sup_x_norm(
    modes: Dict[Mode, np.ndarray],
    grid: VelocityGrid,
    points_per_axis: int,
    xi_kind: NormKind = L2,
) -> float:
    """max over the x lattice of ||f(x, .)|| in the velocity norm xi_kind (L2 or SupWeighted)."""
    if not modes:
        return 0.0
    field_values = synthesize_physical(modes, points_per_axis)
    if xi_kind.name == "SupWeighted":
        return float(np.max(np.abs(field_values) * (1.0 + grid.speeds) ** xi_kind.beta))
    return float(np.sqrt(grid.weight * np.max(np.sum(np.abs(field_values) ** 2, axis=1))))


# =============================================================================
# DERIVED LAWS
# =============================================================================

def _slice(decomps: Iterable[GreenDecomposition], part: str, index: int) -> Dict[Mode, np.ndarray]:
    return {d.k: getattr(d, part)[index] for d in decomps}


def fluid_pointwise_constant(
    decomps: Sequence[GreenDecomposition],
    eps: float,
    grid: VelocityGrid,
    a_ref: float,
    window: Tuple[float, float] = (1.0, 20.0),
) -> float:
    """
    sup_t ||G_F(x=0, t)||_{L2_xi} (1+t)^{3/2} exp(a_ref (pi eps)^2 t) over the window.

    a_ref is the smallest fitted a2 in the kappa variable, so the exponent is
    the slowest fluid damping of the |k| = 1 modes.
    """
    times = decomps[0].times
    best = 0.0
    for i, t in enumerate(times):
        if t < window[0] or t > window[1]:
            continue
        value = point_value(_slice(decomps, "fluid", i), eps)
        norm = compute_norm(value, L2, grid)
        best = max(best, norm * (1.0 + t) ** 1.5 * np.exp(a_ref * (np.pi * eps) ** 2 * t))
    return float(best)


@dataclass
class WholeSolutionBound:
    """||f(t)||_{L^inf_x L2_xi} against e^{-lam_S t}||I||_{H2} + e^{-lam_L t}||I||_{L2}."""
    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    lambda_short: float
    lambda_long: float
    sup_ratio: float


def whole_solution_bound(
    decomps: Sequence[GreenDecomposition],
    eps: float,
    grid: VelocityGrid,
    points_per_axis: int,
    window: Optional[Tuple[float, float]] = None,
) -> WholeSolutionBound:
    """
    Fit short- and long-wave decay rates and compare the sup-in-x solution
    norm with the two-rate bound; with no long-wave modes lambda_long is inf.
    """
    times = decomps[0].times
    lhs = np.array([
        sup_x_norm(_slice(decomps, "full", i), grid, points_per_axis) for i in range(times.size)
    ])

    def part_series(select):
        chosen = [d for d in decomps if select(d)]
        return np.array([
            aggregate_norm({d.k: d.full[i] for d in chosen}, eps, grid) for i in range(times.size)
        ]), chosen

    short_series, short_modes = part_series(lambda d: not d.long_wave)
    long_series, long_modes = part_series(lambda d: d.long_wave)

    def rate(series, chosen):
        if not chosen or not np.any(series > 0):
            return np.inf
        try:
            return fit_decay(times, series, "exp", window=window).rate
        except FitRejectedError:
            return np.inf

    lam_s = rate(short_series, short_modes)
    lam_l = rate(long_series, long_modes)
    initial_h2 = aggregate_norm({d.k: d.full[0] for d in short_modes}, eps, grid, s=2.0)
    initial_l2 = aggregate_norm({d.k: d.full[0] for d in long_modes}, eps, grid)

    rhs = np.zeros_like(times)
    if np.isfinite(lam_s):
        rhs += np.exp(-lam_s * times) * initial_h2
    if np.isfinite(lam_l):
        rhs += np.exp(-lam_l * times) * initial_l2
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, lhs / rhs, 0.0)
    return WholeSolutionBound(
        times=times, lhs=lhs, rhs=rhs,
        lambda_short=float(lam_s), lambda_long=float(lam_l),
        sup_ratio=float(np.max(ratio)),
    )
