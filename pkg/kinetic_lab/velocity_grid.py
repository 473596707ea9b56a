"""
Velocity Grid

Truncated uniform discretization of velocity space with:
1. Cell-centre nodes on [-R, R]^3 and a single midpoint quadrature weight
2. Maxwellian weights and the five discrete collision invariants
3. Second-order finite-difference gradient operators
4. The L2 / H1 / H2 / weighted-sup norms used by every estimate
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Tuple, Union

import numpy as np
from scipy import sparse

from kinetic_lab.errors import GridError

logger = logging.getLogger(__name__)


# =============================================================================
# DATA CLASSES
# =============================================================================

@dataclass(frozen=True, eq=False)
class VelocityGrid:
    """Uniform cell-centre grid on the cube [-R, R]^3.

    Nodes are enumerated lexicographically in (i1, i2, i3) with i3 fastest.
    """
    radius: float
    points_per_axis: int
    nodes: np.ndarray = field(repr=False)
    spacing: float
    weight: float

    @property
    def size(self) -> int:
        return self.points_per_axis ** 3

    @property
    def axis_values(self) -> np.ndarray:
        n, h = self.points_per_axis, self.spacing
        return -self.radius + h * (np.arange(n) + 0.5)

    @property
    def speeds(self) -> np.ndarray:
        return np.linalg.norm(self.nodes, axis=1)

    @property
    def key(self) -> Tuple[float, int]:
        return (float(self.radius), int(self.points_per_axis))

    def same_as(self, other: "VelocityGrid") -> bool:
        return other is self or other.key == self.key

    def inner(self, f: np.ndarray, g: np.ndarray) -> complex:
        """Discrete L2 inner product <f, g> (conjugate-linear in f)."""
        return self.weight * np.vdot(f, g)


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Complex scalar values on every node of a grid."""
    values: np.ndarray
    grid: VelocityGrid

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.shape != (self.grid.size,):
            raise GridError(
                f"GridFunction has {values.size} values, grid has {self.grid.size} nodes"
            )
        if not np.all(np.isfinite(values)):
            raise GridError("GridFunction values must be finite")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class NormKind:
    """Velocity norm selector: L2, H1, H2 or SupWeighted(beta)."""
    name: str
    beta: float = 0.0

    @classmethod
    def sup_weighted(cls, beta: float) -> "NormKind":
        if beta < 0:
            raise GridError(f"weight exponent beta must be >= 0, got {beta}")
        return cls("SupWeighted", float(beta))

    @classmethod
    def parse(cls, text: str) -> "NormKind":
        """Parse 'L2', 'H1', 'H2' or 'SupWeighted(2)' / 'sup2'."""
        token = text.strip()
        if token in ("L2", "H1", "H2"):
            return cls(token)
        lowered = token.lower()
        if lowered.startswith("supweighted(") and lowered.endswith(")"):
            return cls.sup_weighted(float(token[len("SupWeighted("):-1]))
        if lowered.startswith("sup"):
            return cls.sup_weighted(float(lowered[3:] or 0.0))
        raise GridError(f"Unknown norm kind: {text!r}")

    @property
    def label(self) -> str:
        if self.name == "SupWeighted":
            return f"sup{self.beta:g}"
        return self.name


L2 = NormKind("L2")
H1 = NormKind("H1")
H2 = NormKind("H2")


# =============================================================================
# CONSTRUCTION
# =============================================================================

def build_grid(radius: float, points_per_axis: int) -> VelocityGrid:
    """
    Build the truncated velocity grid.

    Args:
        radius: Truncation half-width R (> 0)
        points_per_axis: Odd node count n >= 3

    Returns:
        VelocityGrid with n^3 nodes of weight h^3, h = 2R/n
    """
    if not radius > 0:
        raise GridError(f"radius must be positive, got {radius}")
    if int(points_per_axis) != points_per_axis or points_per_axis < 3:
        raise GridError(f"points_per_axis must be an integer >= 3, got {points_per_axis}")
    if points_per_axis % 2 == 0:
        raise GridError(
            f"points_per_axis must be odd (got {points_per_axis}): odd counts keep the "
            "node set symmetric about the origin with the origin handled by the nu limit"
        )

    n = int(points_per_axis)
    h = 2.0 * radius / n
    axis = -radius + h * (np.arange(n) + 0.5)
    g1, g2, g3 = np.meshgrid(axis, axis, axis, indexing="ij")
    nodes = np.column_stack([g1.ravel(), g2.ravel(), g3.ravel()])

    grid = VelocityGrid(
        radius=float(radius),
        points_per_axis=n,
        nodes=nodes,
        spacing=h,
        weight=h ** 3,
    )
    logger.debug(f"Built velocity grid R={radius} n={n} ({grid.size} nodes, h={h:.4f})")
    return grid


def parity_permutation(grid: VelocityGrid) -> np.ndarray:
    """Index map i -> j with xi_j = -xi_i."""
    n = grid.points_per_axis
    idx = np.arange(grid.size).reshape(n, n, n)
    return idx[::-1, ::-1, ::-1].ravel()


# =============================================================================
# MAXWELLIAN AND INVARIANTS
# =============================================================================

def maxwellian(grid: VelocityGrid) -> np.ndarray:
    """w(xi) = (2 pi)^{-3/2} exp(-|xi|^2 / 2) at the nodes."""
    return (2.0 * np.pi) ** -1.5 * np.exp(-0.5 * grid.speeds ** 2)


def maxwellian_root(grid: VelocityGrid) -> np.ndarray:
    return np.sqrt(maxwellian(grid))


def collision_invariants(grid: VelocityGrid) -> Tuple[np.ndarray, np.ndarray]:
    """
    The five collision invariants sqrt(w){1, xi_1, xi_2, xi_3, |xi|^2}.

    Returns:
        (raw, orthonormal): two (5, N) real arrays; the second is
        orthonormal in the discrete L2 inner product and spans the same space
    """
    root = maxwellian_root(grid)
    raw = np.vstack([
        root,
        grid.nodes[:, 0] * root,
        grid.nodes[:, 1] * root,
        grid.nodes[:, 2] * root,
        grid.speeds ** 2 * root,
    ])
    scale = np.sqrt(grid.weight)
    q, _ = np.linalg.qr(scale * raw.T)
    return raw, (q / scale).T


def project_off_invariants(grid: VelocityGrid, values: np.ndarray) -> np.ndarray:
    """Remove the component of values lying in the invariant subspace."""
    _, basis = collision_invariants(grid)
    coeffs = grid.weight * (basis @ values)
    return values - basis.T @ coeffs


# =============================================================================
# DIFFERENCE OPERATORS
# =============================================================================

def _first_difference_1d(n: int, h: float) -> sparse.csr_matrix:
    d = sparse.lil_matrix((n, n))
    for i in range(1, n - 1):
        d[i, i - 1] = -0.5 / h
        d[i, i + 1] = 0.5 / h
    d[0, 0:3] = np.array([-3.0, 4.0, -1.0]) / (2.0 * h)
    d[n - 1, n - 3:n] = np.array([1.0, -4.0, 3.0]) / (2.0 * h)
    return d.tocsr()


def _second_difference_1d(n: int, h: float) -> sparse.csr_matrix:
    d = sparse.lil_matrix((n, n))
    for i in range(1, n - 1):
        d[i, i - 1:i + 2] = np.array([1.0, -2.0, 1.0]) / h ** 2
    if n >= 4:
        d[0, 0:4] = np.array([2.0, -5.0, 4.0, -1.0]) / h ** 2
        d[n - 1, n - 4:n] = np.array([-1.0, 4.0, -5.0, 2.0]) / h ** 2
    else:
        d[0, 0:3] = np.array([1.0, -2.0, 1.0]) / h ** 2
        d[n - 1, n - 3:n] = np.array([1.0, -2.0, 1.0]) / h ** 2
    return d.tocsr()


def _lift(op_1d: sparse.csr_matrix, n: int, axis: int) -> sparse.csr_matrix:
    eye = sparse.identity(n, format="csr")
    factors = [eye, eye, eye]
    factors[axis - 1] = op_1d
    return sparse.kron(sparse.kron(factors[0], factors[1]), factors[2], format="csr")


@lru_cache(maxsize=32)
def _cached_operator(radius: float, n: int, axis: int, order: int) -> sparse.csr_matrix:
    h = 2.0 * radius / n
    op_1d = _first_difference_1d(n, h) if order == 1 else _second_difference_1d(n, h)
    return _lift(op_1d, n, axis)


def _check_axis(axis: int):
    if axis not in (1, 2, 3):
        raise GridError(f"axis must be 1, 2 or 3, got {axis}")


def gradient_matrix(grid: VelocityGrid, axis: int) -> sparse.csr_matrix:
    """
    d/dxi_axis as a sparse N x N matrix.

    Central differences in the interior, one-sided second-order stencils on
    the two boundary layers; exact on affine (and quadratic) functions.

    Args:
        grid: Velocity grid
        axis: 1, 2 or 3

    Returns:
        CSR matrix acting on node values
    """
    _check_axis(axis)
    return _cached_operator(grid.radius, grid.points_per_axis, axis, 1)


def second_difference_matrix(grid: VelocityGrid, axis: int) -> sparse.csr_matrix:
    """d^2/dxi_axis^2 with second-order one-sided boundary rows (n >= 4)."""
    _check_axis(axis)
    return _cached_operator(grid.radius, grid.points_per_axis, axis, 2)


def gradient(grid: VelocityGrid, values: np.ndarray) -> np.ndarray:
    """Stack of the three partial derivatives, shape (3, N)."""
    return np.stack([gradient_matrix(grid, a) @ values for a in (1, 2, 3)])


def interior_mask(grid: VelocityGrid, layers: int = 1) -> np.ndarray:
    """True on nodes at least `layers` cells away from every face."""
    n = grid.points_per_axis
    i = np.arange(n)
    inside = (i >= layers) & (i < n - layers)
    m1, m2, m3 = np.meshgrid(inside, inside, inside, indexing="ij")
    return (m1 & m2 & m3).ravel()


# =============================================================================
# NORMS
# =============================================================================

def _values_of(f: Union[GridFunction, np.ndarray], grid: VelocityGrid) -> np.ndarray:
    if isinstance(f, GridFunction):
        if grid is not None and not f.grid.same_as(grid):
            raise GridError(
                f"GridFunction lives on grid {f.grid.key}, norm requested on {grid.key}"
            )
        return f.values
    values = np.asarray(f)
    if values.shape[-1] != grid.size:
        raise GridError(f"values of length {values.shape[-1]} do not match grid size {grid.size}")
    return values


def compute_norm(
    f: Union[GridFunction, np.ndarray],
    kind: NormKind = L2,
    grid: VelocityGrid = None,
) -> float:
    """
    Velocity norm of a grid function.

    Args:
        f: GridFunction, or raw node values together with `grid`
        kind: L2, H1, H2 or SupWeighted(beta)
        grid: Grid the norm is evaluated on (defaults to f.grid)

    Returns:
        Non-negative real norm; sup norms are grid maxima
    """
    if grid is None:
        if not isinstance(f, GridFunction):
            raise GridError("compute_norm on raw values needs the grid")
        grid = f.grid
    values = _values_of(f, grid)

    if kind.name == "SupWeighted":
        if kind.beta < 0:
            raise GridError(f"weight exponent beta must be >= 0, got {kind.beta}")
        return float(np.max(np.abs(values) * (1.0 + grid.speeds) ** kind.beta))

    total = np.sum(np.abs(values) ** 2)
    if kind.name in ("H1", "H2"):
        grads = [gradient_matrix(grid, a) @ values for a in (1, 2, 3)]
        total += sum(np.sum(np.abs(g) ** 2) for g in grads)
        if kind.name == "H2":
            for a in (1, 2, 3):
                for b in (1, 2, 3):
                    if a == b:
                        second = second_difference_matrix(grid, a) @ values
                    else:
                        second = gradient_matrix(grid, a) @ grads[b - 1]
                    total += np.sum(np.abs(second) ** 2)
    elif kind.name != "L2":
        raise GridError(f"Unknown norm kind: {kind.name}")
    return float(np.sqrt(grid.weight * total))
