"""
Hard-Sphere Collision Operator

Assembles the linearized collision operator L = -nu + K on a velocity grid:
1. Collision frequency nu(xi) through the error function
2. Dense kernel matrix K with the singular diagonal cell integrated exactly
3. Smooth cutoff split K = K_s + K_r
4. Application, smoothing and dissipativity diagnostics
5. Binary kernel dump for reuse across runs
"""

import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from scipy import special
from scipy.sparse.linalg import eigsh

from kinetic_lab.errors import GridError, ScaleGuardError, SingularKernelError
from kinetic_lab.parallel import parallel_map
from kinetic_lab.velocity_grid import (
    H1,
    H2,
    L2,
    GridFunction,
    VelocityGrid,
    collision_invariants,
    compute_norm,
    gradient,
    maxwellian_root,
    project_off_invariants,
)

logger = logging.getLogger(__name__)

SQRT_2PI = np.sqrt(2.0 * np.pi)
KERNEL_PREFACTOR = (2.0 * np.pi) ** -1.5
DEFAULT_SIZE_CAP = 9261  # n = 21
KERNEL_MAGIC = b"KLABKMAT"
ROW_BLOCK = 128


# =============================================================================
# CLOSED FORMS
# =============================================================================

def nu_of_speed(speed: Union[float, np.ndarray]) -> np.ndarray:
    """
    Collision frequency as a function of |xi|.

    nu(r) = (1/sqrt(2 pi)) [exp(-r^2/2) + (r + 1/r) int_0^r exp(-u^2/2) du]

    The integral is sqrt(pi/2) erf(r/sqrt(2)); near r = 0 the factored form is
    replaced by its series 1 + 5 r^2 / 6, giving nu(0) = 2/sqrt(2 pi).
    """
    r = np.asarray(speed, dtype=float)
    small = r < 1e-6
    safe = np.where(small, 1.0, r)
    integral = np.sqrt(np.pi / 2.0) * special.erf(safe / np.sqrt(2.0))
    factored = (safe + 1.0 / safe) * integral
    series = 1.0 + 5.0 * r ** 2 / 6.0
    tail = np.where(small, series, factored)
    return (np.exp(-0.5 * r ** 2) + tail) / SQRT_2PI


def eval_nu(xi) -> Union[float, np.ndarray]:
    """
    nu at a velocity (shape (3,)) or at a stack of velocities (shape (M, 3)).

    Returns:
        Positive float for a single velocity, array otherwise
    """
    xi = np.asarray(xi, dtype=float)
    values = nu_of_speed(np.linalg.norm(xi, axis=-1))
    return float(values) if values.ndim == 0 else values


def nu_speed_derivatives(speed: Union[float, np.ndarray]):
    """
    (nu'(r), nu''(r)) in closed form, with series below r = 1e-2.

    nu'(r)  = [(1 - 1/r^2) E(r) + exp(-r^2/2)/r] / sqrt(2 pi)
    nu''(r) = [2 E(r)/r^3 - 2 exp(-r^2/2)/r^2] / sqrt(2 pi),  E(r) = int_0^r exp(-u^2/2) du
    """
    r = np.asarray(speed, dtype=float)
    small = r < 1e-2
    safe = np.where(small, 1.0, r)
    E = np.sqrt(np.pi / 2.0) * special.erf(safe / np.sqrt(2.0))
    gauss = np.exp(-0.5 * safe ** 2)
    first = (1.0 - 1.0 / safe ** 2) * E + gauss / safe
    second = 2.0 * E / safe ** 3 - 2.0 * gauss / safe ** 2
    first = np.where(small, 2.0 * r / 3.0 - r ** 3 / 15.0, first)
    second = np.where(small, 2.0 / 3.0 - r ** 2 / 5.0, second)
    return first / SQRT_2PI, second / SQRT_2PI


def eval_nu_gradient(nodes: np.ndarray) -> np.ndarray:
    """Exact grad nu at a stack of velocities, shape (3, M)."""
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    r = np.linalg.norm(nodes, axis=1)
    first, _ = nu_speed_derivatives(r)
    with np.errstate(divide="ignore", invalid="ignore"):
        radial = np.where(r > 0, first / np.where(r > 0, r, 1.0), 0.0)
    return (nodes * radial[:, None]).T


def eval_nu_laplacian(nodes: np.ndarray) -> np.ndarray:
    """Exact Laplacian nu'' + 2 nu'/r (3 nu''(0) at the origin)."""
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    r = np.linalg.norm(nodes, axis=1)
    first, second = nu_speed_derivatives(r)
    safe = np.where(r > 0, r, 1.0)
    return np.where(r > 0, second + 2.0 * first / safe, 3.0 * second)


def _kernel_values(xi: np.ndarray, xs: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """W for broadcast-compatible stacks; entries with dist == 0 are returned as 0."""
    s_i = np.sum(xi ** 2, axis=-1)
    s_j = np.sum(xs ** 2, axis=-1)
    safe = np.where(dist > 0, dist, 1.0)
    singular = (2.0 / safe) * np.exp(-(s_i - s_j) ** 2 / (8.0 * safe ** 2) - safe ** 2 / 8.0)
    regular = 0.5 * dist * np.exp(-(s_i + s_j) / 4.0)
    return np.where(dist > 0, KERNEL_PREFACTOR * (singular - regular), 0.0)


def eval_kernel(xi, xi_star) -> float:
    """
    Hard-sphere kernel W(xi, xi*), symmetric under exchange.

    W = (2 pi)^{-3/2} [ (2/|V|) exp(-(|xi|^2-|xi*|^2)^2 / (8|V|^2) - |V|^2/8)
                        - (|V|/2) exp(-(|xi|^2+|xi*|^2)/4) ],  V = xi - xi*

    Raises:
        SingularKernelError: xi == xi* (callers use the diagonal cell correction)
    """
    xi = np.asarray(xi, dtype=float)
    xs = np.asarray(xi_star, dtype=float)
    dist = np.sqrt(np.sum((xi - xs) ** 2))
    if dist == 0.0:
        raise SingularKernelError("W(xi, xi*) is singular at coincident velocities")
    return float(_kernel_values(xi, xs, dist))


def eval_chi(r: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """
    Smooth cutoff: 1 on [-1, 1], 0 outside [-2, 2], exponential bump bridge between.
    """
    a = np.abs(np.asarray(r, dtype=float))
    inside = (a > 1.0) & (a < 2.0)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        up = np.exp(-1.0 / np.where(inside, 2.0 - a, 1.0))
        down = np.exp(-1.0 / np.where(inside, a - 1.0, 1.0))
        bridge = up / (up + down)
    chi = np.where(a <= 1.0, 1.0, np.where(inside, bridge, 0.0))
    return float(chi) if chi.ndim == 0 else chi


def diagonal_cell_integral(grid: VelocityGrid) -> np.ndarray:
    """
    Diagonal entries K_ii from the singular cell.

    The cell is replaced by the ball of equal volume h^3 (radius rho); the
    1/|V| factor integrates to 2 pi rho^2 and the smooth factor is frozen at
    the cell centre, averaged over approach directions:
    int_0^1 exp(-|xi|^2 mu^2 / 2) d mu. The |V| term vanishes at coincidence.
    """
    rho = (3.0 * grid.weight / (4.0 * np.pi)) ** (1.0 / 3.0)
    ball = 2.0 * np.pi * rho ** 2
    r = grid.speeds
    safe = np.where(r > 1e-12, r, 1.0)
    angular = np.where(
        r > 1e-12,
        np.sqrt(np.pi / 2.0) * special.erf(safe / np.sqrt(2.0)) / safe,
        1.0,
    )
    return KERNEL_PREFACTOR * 2.0 * ball * angular


# =============================================================================
# OPERATOR
# =============================================================================

@dataclass(frozen=True, eq=False)
class CollisionOperator:
    """Assembled L = -nu + K with K = K_s + K_r (quadrature weight folded in)."""
    grid: VelocityGrid
    nu: np.ndarray = field(repr=False)
    K: np.ndarray = field(repr=False)
    K_s: np.ndarray = field(repr=False)
    K_r: np.ndarray = field(repr=False)
    cutoff_strength: float
    nu_floor: float
    quadrature_residuals: List[float] = field(default_factory=list)
    conservative: bool = True

    @cached_property
    def L(self) -> np.ndarray:
        return self.K - np.diag(self.nu)

    @cached_property
    def ks_norm(self) -> float:
        return operator_norm(self.K_s)

    @cached_property
    def k_norm(self) -> float:
        return operator_norm(self.K)

    @cached_property
    def nu_gradient(self) -> np.ndarray:
        return gradient(self.grid, self.nu)


def operator_norm(matrix: np.ndarray) -> float:
    """Spectral norm of a real symmetric matrix (Lanczos for large sizes)."""
    if matrix.shape[0] <= 256:
        return float(np.linalg.norm(matrix, 2))
    if not np.any(matrix - np.diag(np.diag(matrix))):
        return float(np.max(np.abs(np.diag(matrix))))
    value = eigsh(matrix, k=1, which="LM", return_eigenvectors=False)
    return float(np.abs(value[0]))


def assemble_collision(
    grid: VelocityGrid,
    D: float,
    size_cap: int = DEFAULT_SIZE_CAP,
    threads: int = 1,
    conservative: bool = True,
) -> CollisionOperator:
    """
    Assemble the collision operator and its cutoff split.

    Args:
        grid: Velocity grid
        D: Cutoff strength (> 0); the split uses chi(|xi - xi*| / (D nu_0))
        size_cap: Largest admissible node count
        threads: Row-block workers
        conservative: Fold the conservation correction into K_r so the five
            invariants are exact null vectors of L

    Returns:
        CollisionOperator; K is formed as K_s + K_r so the split is exact
    """
    if not D > 0:
        raise ValueError(f"cutoff strength D must be positive, got {D}")
    if grid.size > size_cap:
        raise ScaleGuardError(
            f"grid has {grid.size} nodes, above the dense-assembly cap of {size_cap}; "
            "lower points_per_axis or raise size_cap"
        )

    nodes = grid.nodes
    nu = nu_of_speed(grid.speeds)
    nu_floor = float(np.min(nu))
    scale = D * nu_floor

    def rows_block(start: int):
        stop = min(start + ROW_BLOCK, grid.size)
        xi = nodes[start:stop, None, :]
        diff = xi - nodes[None, :, :]
        dist = np.sqrt(np.sum(diff ** 2, axis=-1))
        W = _kernel_values(xi, nodes[None, :, :], dist) * grid.weight
        chi = eval_chi(dist / scale)
        return start, W, chi

    K_s = np.empty((grid.size, grid.size))
    K_r = np.empty((grid.size, grid.size))
    for start, W, chi in parallel_map(rows_block, range(0, grid.size, ROW_BLOCK), threads):
        stop = start + W.shape[0]
        K_s[start:stop] = W * chi
        K_r[start:stop] = W - K_s[start:stop]

    diag = np.arange(grid.size)
    K_s[diag, diag] = diagonal_cell_integral(grid)
    K_r[diag, diag] = 0.0

    raw, basis = collision_invariants(grid)
    raw_L = K_s + K_r - np.diag(nu)
    residuals = [
        float(np.linalg.norm(raw_L @ phi) / np.linalg.norm(phi)) for phi in raw
    ]
    logger.debug(f"Quadrature null-space residuals: {np.round(residuals, 6).tolist()}")
    if conservative:
        K_r += _conservation_correction(raw_L, basis, grid.weight)
    K = K_s + K_r

    logger.info(
        f"Assembled collision operator on {grid.size} nodes "
        f"(D={D}, nu_floor={nu_floor:.5f}, max quadrature residual={max(residuals):.2e})"
    )
    return CollisionOperator(
        grid=grid,
        nu=nu,
        K=K,
        K_s=K_s,
        K_r=K_r,
        cutoff_strength=float(D),
        nu_floor=nu_floor,
        quadrature_residuals=residuals,
        conservative=conservative,
    )


def _conservation_correction(L: np.ndarray, basis: np.ndarray, weight: float) -> np.ndarray:
    """
    Symmetric rank <= 10 matrix C with (L + C) = (I - P) L (I - P).

    P is the orthogonal projector onto the invariants; afterwards the five
    invariants are exact null vectors and L is unchanged on their complement.
    """
    L_phi = L @ basis.T                              # (N, 5)
    LP = weight * L_phi @ basis                      # L P
    core = weight * basis @ L_phi                    # Phi^T W L Phi, (5, 5)
    PLP = weight * basis.T @ (core @ basis)
    C = -LP - LP.T + PLP
    return 0.5 * (C + C.T)


def apply_L(op: CollisionOperator, f: Union[GridFunction, np.ndarray]):
    """
    L f = -nu f + K f.

    Args:
        op: Assembled operator
        f: GridFunction on op.grid, or raw node values

    Returns:
        Same type as f
    """
    if isinstance(f, GridFunction):
        if not f.grid.same_as(op.grid):
            raise GridError(f"function on grid {f.grid.key}, operator on {op.grid.key}")
        return GridFunction(-op.nu * f.values + op.K @ f.values, op.grid)
    values = np.asarray(f)
    if values.shape[0] != op.grid.size:
        raise GridError(f"{values.shape[0]} values for a grid of {op.grid.size} nodes")
    return -op.nu * values + op.K @ values


# =============================================================================
# DIAGNOSTICS
# =============================================================================

@dataclass
class SmoothingReport:
    """Measured constants of the K / K_s / K_r smoothing bounds."""
    k_h1_over_l2: float
    ks_l2_over_D_l2: float
    kr_h2_over_l2: float
    ks_norm: float
    maxwellian_k_norm: float
    maxwellian_nu_norm: float
    trials: int


def smoothing_diagnostic(op: CollisionOperator, trials: int = 8, seed: int = 0) -> SmoothingReport:
    """
    Sup over random unit vectors of ||Kh||_H1/||h||, ||K_s h||/(D||h||), ||K_r h||_H2/||h||.
    """
    grid = op.grid
    rng = np.random.default_rng(seed)
    ratios = np.zeros((trials, 3))
    for p in range(trials):
        h = rng.standard_normal(grid.size)
        h /= compute_norm(h, L2, grid)
        ratios[p, 0] = compute_norm(op.K @ h, H1, grid)
        ratios[p, 1] = compute_norm(op.K_s @ h, L2, grid) / op.cutoff_strength
        ratios[p, 2] = compute_norm(op.K_r @ h, H2, grid)

    root = maxwellian_root(grid)
    return SmoothingReport(
        k_h1_over_l2=float(ratios[:, 0].max()),
        ks_l2_over_D_l2=float(ratios[:, 1].max()),
        kr_h2_over_l2=float(ratios[:, 2].max()),
        ks_norm=op.ks_norm,
        maxwellian_k_norm=compute_norm(op.K @ root, L2, grid),
        maxwellian_nu_norm=compute_norm(op.nu * root, L2, grid),
        trials=trials,
    )


def null_space_residuals(op: CollisionOperator) -> List[float]:
    """||L phi|| / ||phi|| for the five raw collision invariants."""
    raw, _ = collision_invariants(op.grid)
    return [
        compute_norm(apply_L(op, phi), L2, op.grid) / compute_norm(phi, L2, op.grid)
        for phi in raw
    ]


@dataclass
class DissipativityReport:
    symmetry_residual: float
    self_adjoint_residual: float
    max_rayleigh_off_invariants: float


def dissipativity_check(op: CollisionOperator, trials: int = 8, seed: int = 0) -> DissipativityReport:
    """
    Symmetry of K, self-adjointness of L and sign of <Lf, f> off the invariants.
    """
    grid = op.grid
    rng = np.random.default_rng(seed)
    scale = np.max(np.abs(op.K))
    symmetry = float(np.max(np.abs(op.K - op.K.T)) / scale)

    adjoint = 0.0
    rayleigh = -np.inf
    for _ in range(trials):
        f = project_off_invariants(grid, rng.standard_normal(grid.size))
        g = rng.standard_normal(grid.size)
        Lf, Lg = apply_L(op, f), apply_L(op, g)
        gap = abs(grid.inner(Lf, g) - grid.inner(f, Lg))
        denom = compute_norm(Lf, L2, grid) * compute_norm(g, L2, grid)
        adjoint = max(adjoint, gap / denom)
        rayleigh = max(rayleigh, float(np.real(grid.inner(f, Lf))) / compute_norm(f, L2, grid) ** 2)

    return DissipativityReport(
        symmetry_residual=symmetry,
        self_adjoint_residual=float(adjoint),
        max_rayleigh_off_invariants=float(rayleigh),
    )


# =============================================================================
# PERSISTENCE
# =============================================================================

_HEADER = struct.Struct("<8sidd")


def dump_kernel(op: CollisionOperator, path: Union[str, Path]) -> Path:
    """Write K as little-endian float64 after a (magic, n, R, D) header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(_HEADER.pack(
            KERNEL_MAGIC, op.grid.points_per_axis, op.grid.radius, op.cutoff_strength
        ))
        handle.write(np.ascontiguousarray(op.K, dtype="<f8").tobytes())
    logger.info(f"Dumped kernel matrix to {path}")
    return path


def load_kernel(path: Union[str, Path], grid: VelocityGrid, D: Optional[float] = None) -> np.ndarray:
    """
    Read a kernel dump and check it belongs to grid (and D when given).
    """
    with open(path, "rb") as handle:
        magic, n, radius, stored_D = _HEADER.unpack(handle.read(_HEADER.size))
        if magic != KERNEL_MAGIC:
            raise GridError(f"{path} is not a kernel dump")
        if (float(radius), int(n)) != grid.key:
            raise GridError(f"kernel dump is for grid (R={radius}, n={n}), expected {grid.key}")
        if D is not None and stored_D != D:
            raise GridError(f"kernel dump has D={stored_D}, expected {D}")
        data = np.frombuffer(handle.read(), dtype="<f8")
    return data.reshape(grid.size, grid.size).astype(float)


def summarize(op: CollisionOperator) -> Dict[str, float]:
    """Scalar facts about an operator for summaries and logs."""
    return {
        "nodes": op.grid.size,
        "nu_floor": op.nu_floor,
        "nu_max": float(np.max(op.nu)),
        "cutoff_D": op.cutoff_strength,
        "ks_norm": op.ks_norm,
        "k_norm": op.k_norm,
        "grad_nu_max": float(np.max(np.linalg.norm(op.nu_gradient, axis=0))),
    }
