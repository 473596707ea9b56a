"""
Mixture Operators

Velocity-to-space regularity transfer for one Fourier mode:
1. D_t = t grad_x + grad_xi with grad_x acting as i pi eps k
2. The alternating transport/collision cascade v_0 .. v_2j exposing M_j^t f0
3. Nested Duhamel quadrature and h^(4) reconstruction oracles
4. Mixture ratios against t^j e^{-2 nu_0 t/3} ||f0||_{H^j_xi}
5. Cancellation identity, commutators and the D_t bound constants
"""

import logging
from dataclasses import dataclass, field
from math import factorial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss

from kinetic_lab.collision import CollisionOperator, eval_nu_gradient, eval_nu_laplacian
from kinetic_lab.errors import FitRejectedError
from kinetic_lab.fitting import DecayFit, fit_decay
from kinetic_lab.picard import (
    DEFAULT_DT,
    GROWTH_TOLERANCE,
    check_t_grid,
    damped_semigroup_ks,
    march_with_halving,
    transport_generator,
    transport_semigroup,
)
from kinetic_lab.spectrum import ModeOperator
from kinetic_lab.velocity_grid import (
    H1,
    H2,
    L2,
    GridFunction,
    VelocityGrid,
    compute_norm,
    gradient_matrix,
    interior_mask,
)

logger = logging.getLogger(__name__)

MIXTURE_ORDERS = (1, 2)
DEFAULT_ETA0_FRACTION = 0.1


def _values(f) -> np.ndarray:
    return f.values if isinstance(f, GridFunction) else np.asarray(f)


# =============================================================================
# D_t
# =============================================================================

def apply_D_t(m: ModeOperator, t: float, f) -> np.ndarray:
    """
    D_t f = t (i pi eps k) f + grad_xi f, one row per axis.

    Returns:
        Complex array of shape (3, N)
    """
    values = _values(f)
    wave = np.pi * m.wave_vector
    return np.stack([
        t * 1j * wave[a] * values + gradient_matrix(m.grid, a + 1) @ values
        for a in range(3)
    ])


def vector_norm(rows: np.ndarray, grid: VelocityGrid, mask: Optional[np.ndarray] = None) -> float:
    """Euclidean combination of the L2 norms of the rows (optionally on a node mask)."""
    if mask is not None:
        return float(np.sqrt(grid.weight * np.sum(np.abs(rows[..., mask]) ** 2)))
    return float(np.sqrt(grid.weight * np.sum(np.abs(rows) ** 2)))


# =============================================================================
# MIXTURE CASCADE
# =============================================================================

@dataclass
class MixtureRun:
    """States v_0 .. v_2j on a time grid; v_2j(t) = M_j^t f0."""
    order: int
    k: Tuple[int, int, int]
    eps: float
    times: np.ndarray
    states: np.ndarray = field(repr=False)
    nu_floor: float
    eta0: float
    dt: float
    warnings: List[str] = field(default_factory=list)

    @property
    def mixture(self) -> np.ndarray:
        return self.states[:, 2 * self.order]

    @property
    def eps_k(self) -> float:
        return float(self.eps * np.linalg.norm(self.k))


def _mixture_rhs(Y: np.ndarray, a_s: np.ndarray, K: np.ndarray) -> np.ndarray:
    out = a_s * Y
    out[1:] += Y[:-1] @ K
    return out


def mixture_apply(
    op: CollisionOperator,
    m: ModeOperator,
    j: int,
    f0,
    t_grid: Sequence[float],
    dt: float = DEFAULT_DT,
    eta0: Optional[float] = None,
) -> MixtureRun:
    """
    Integrate v_0' = A_S v_0, v_n' = A_S v_n + K v_{n-1} (n = 1 .. 2j).

    Growth beyond the envelope (||K|| t)^n / n! ||f0|| triggers step halving.

    Args:
        op: Collision operator
        m: Mode operator
        j: Mixture order, 1 or 2
        f0: Initial value of v_0
        t_grid: Output times from 0
        dt: RK4 step
        eta0: Rate slack; defaults to 0.1 nu_0
    """
    if j not in MIXTURE_ORDERS:
        raise ValueError(f"mixture order must be one of {MIXTURE_ORDERS}, got {j}")
    times = check_t_grid(t_grid)
    values = _values(f0).astype(complex)
    depth = 2 * j + 1
    Y0 = np.zeros((depth, values.size), dtype=complex)
    Y0[0] = values

    a_s = transport_generator(m)
    k_norm = op.k_norm
    scale = np.linalg.norm(values)
    envelope_coeffs = np.array([k_norm ** n / factorial(n) for n in range(depth)])

    def accept(t: float, Y: np.ndarray) -> bool:
        envelope = (1.0 + GROWTH_TOLERANCE) * scale * envelope_coeffs * t ** np.arange(depth)
        return bool(np.all(np.linalg.norm(Y, axis=1) <= envelope + 1e-300))

    states, step, _, warnings = march_with_halving(
        lambda Y: _mixture_rhs(Y, a_s, op.K), Y0, times, dt, accept,
        label=f"mixture j={j} k={m.k}",
    )
    return MixtureRun(
        order=j, k=m.k, eps=m.eps, times=times, states=states,
        nu_floor=op.nu_floor,
        eta0=DEFAULT_ETA0_FRACTION * op.nu_floor if eta0 is None else float(eta0),
        dt=step, warnings=warnings,
    )


# =============================================================================
# ORACLES
# =============================================================================

def _gauss_nodes(a: float, b: float, panels: int, order: int):
    x, w = leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        for xi, wi in zip(x, w):
            yield lo + half * (xi + 1.0), half * wi


def nested_duhamel_v2(
    op: CollisionOperator,
    m: ModeOperator,
    f0,
    t: float,
    panels: int = 8,
    order: int = 6,
) -> np.ndarray:
    """
    int_0^t int_0^{s1} S^{t-s1} K S^{s1-s2} K S^{s2} f0 ds2 ds1 by composite Gauss.
    """
    values = _values(f0).astype(complex)
    total = np.zeros_like(values)
    if t == 0:
        return total
    for s1, w1 in _gauss_nodes(0.0, t, panels, order):
        inner = np.zeros_like(values)
        for s2, w2 in _gauss_nodes(0.0, s1, panels, order):
            inner += w2 * transport_semigroup(m, op.K @ transport_semigroup(m, values, s2), s1 - s2)
        total += w1 * transport_semigroup(m, op.K @ inner, t - s1)
    return total


def reconstruct_h4(
    op: CollisionOperator,
    m: ModeOperator,
    I_k,
    t: float,
    panels: int = 4,
    order: int = 4,
    dt: float = DEFAULT_DT,
) -> np.ndarray:
    """h^(4)(t) = int_0^t M_2^{t-s} K_r O^s I ds by Gauss quadrature over mixture runs."""
    I = _values(I_k).astype(complex)
    total = np.zeros_like(I)
    if t == 0:
        return total
    for s, w in _gauss_nodes(0.0, t, panels, order):
        source = op.K_r @ damped_semigroup_ks(op, m, I, s, warn=False)
        if t - s <= 0:
            continue
        run = mixture_apply(op, m, 2, source, [0.0, t - s], dt=dt)
        total += w * run.mixture[-1]
    return total


# =============================================================================
# RATIOS
# =============================================================================

@dataclass
class MixtureRatio:
    order: int
    eps_k: float
    times: np.ndarray
    ratios: np.ndarray
    sup_ratio: float


def mixture_ratio(
    run: MixtureRun,
    f0_h_norm: float,
    grid: VelocityGrid,
    t_min: float = 0.0,
    t_max: Optional[float] = None,
) -> MixtureRatio:
    """
    ||(i pi eps k)^j v_2j(t)|| / (t^j e^{-2 nu_0 t/3} ||f0||_{H^j_xi}) for t in (t_min, t_max].

    t = 0 is excluded.
    """
    factor = (np.pi * run.eps_k) ** run.order
    t = run.times
    upper = t[-1] if t_max is None else t_max
    mask = (t > max(t_min, 0.0)) & (t <= upper)
    ratios = np.full(t.size, np.nan)
    if f0_h_norm <= 0:
        raise ValueError("f0 H^j norm must be positive")
    for i in np.flatnonzero(mask):
        numerator = factor * compute_norm(run.mixture[i], L2, grid)
        denominator = t[i] ** run.order * np.exp(-2.0 * run.nu_floor * t[i] / 3.0) * f0_h_norm
        ratios[i] = numerator / denominator
    sup = float(np.nanmax(ratios)) if mask.any() else 0.0
    return MixtureRatio(order=run.order, eps_k=run.eps_k, times=t, ratios=ratios, sup_ratio=sup)


# =============================================================================
# CANCELLATION AND COMMUTATORS
# =============================================================================

def gaussian_bump(grid: VelocityGrid, centre: Sequence[float] = (0.5, -0.25, 0.0), width: float = 1.0) -> np.ndarray:
    """Smooth bump exp(-|xi - c|^2 / (2 width^2)), negligible at the boundary."""
    shift = grid.nodes - np.asarray(centre, dtype=float)
    return np.exp(-np.sum(shift ** 2, axis=1) / (2.0 * width ** 2)).astype(complex)


@dataclass
class CancellationReport:
    identity_residual: float
    identity_tolerance: float
    decay_fit: Optional[DecayFit]
    eta0: float
    rate_floor: float
    commutator_residual: float
    second_commutator_residual: float
    grad_nu_max: float
    grad_nu_max_exact: float
    first_order_constant: float
    line2_constant: float
    second_order_constants: Dict[str, float]
    times: np.ndarray = field(repr=False)
    lhs_norms: np.ndarray = field(repr=False)

    @property
    def rate_ok(self) -> bool:
        return self.decay_fit is not None and self.decay_fit.rate >= self.rate_floor

    def to_dict(self) -> Dict[str, object]:
        return {
            "identity_residual": self.identity_residual,
            "identity_tolerance": self.identity_tolerance,
            "rate": self.decay_fit.rate if self.decay_fit else None,
            "rate_residual": self.decay_fit.residual if self.decay_fit else None,
            "rate_floor": self.rate_floor,
            "eta0": self.eta0,
            "commutator_residual": self.commutator_residual,
            "second_commutator_residual": self.second_commutator_residual,
            "grad_nu_max": self.grad_nu_max,
            "grad_nu_max_exact": self.grad_nu_max_exact,
            "first_order_constant": self.first_order_constant,
            "line2_constant": self.line2_constant,
            "second_order_constant_H1": self.second_order_constants["H1"],
            "second_order_constant_H2": self.second_order_constants["H2"],
        }


def commutator_residuals(m: ModeOperator, t: float, h: np.ndarray, layers: int = 2) -> Tuple[float, float]:
    """
    Relative interior residuals of [D_t, nu] h = (grad nu) h and
    [D_t^2, nu] h = 2 grad nu . D_t h + (Laplacian nu) h.
    """
    grid = m.grid
    nu = m.op.nu
    mask = interior_mask(grid, layers)
    grad_nu = eval_nu_gradient(grid.nodes)

    first = apply_D_t(m, t, nu * h) - nu * apply_D_t(m, t, h)
    expected = grad_nu * h
    scale = max(float(np.max(np.abs(expected[:, mask]))), 1e-300)
    first_res = float(np.max(np.abs(first - expected)[:, mask])) / scale

    D_h = apply_D_t(m, t, h)
    D_nuh = apply_D_t(m, t, nu * h)
    second = sum(
        apply_D_t(m, t, D_nuh[a])[a] - nu * apply_D_t(m, t, D_h[a])[a] for a in range(3)
    )
    expected2 = 2.0 * np.sum(grad_nu * D_h, axis=0) + eval_nu_laplacian(grid.nodes) * h
    mask2 = interior_mask(grid, 2 * layers)
    scale2 = max(float(np.max(np.abs(expected2[mask2]))), 1e-300)
    second_res = float(np.max(np.abs(second - expected2)[mask2])) / scale2
    return first_res, second_res


def cancellation_check(
    m: ModeOperator,
    f0,
    t_grid: Sequence[float],
    eta0_fraction: float = DEFAULT_ETA0_FRACTION,
    window: Optional[Sequence[float]] = None,
    layers: int = 2,
) -> CancellationReport:
    """
    Check D_t S^t f0 - S^t grad f0 = -t (grad nu) S^t f0 and its decay.

    The identity is exact for the diagonal semigroup; the measured residual is
    finite-difference truncation on interior nodes. The left side is fitted
    with the power-exp model and compared with nu_0 - eta0.
    """
    grid = m.grid
    op = m.op
    values = _values(f0).astype(complex)
    times = np.asarray(t_grid, dtype=float)
    mask = interior_mask(grid, layers)
    grad_nu = eval_nu_gradient(grid.nodes)
    grad_f0 = np.stack([gradient_matrix(grid, a) @ values for a in (1, 2, 3)])
    l2, h1, h2 = (compute_norm(values, kind, grid) for kind in (L2, H1, H2))

    nu_floor = op.nu_floor
    eta0 = eta0_fraction * nu_floor
    identity = 0.0
    lhs_norms = np.zeros(times.size)
    first_const = line2_const = 0.0
    second_consts = {"H1": 0.0, "H2": 0.0}

    for i, t in enumerate(times):
        u = transport_semigroup(m, values, t)
        D_u = apply_D_t(m, t, u)
        lhs = D_u - np.stack([transport_semigroup(m, g, t) for g in grad_f0])
        rhs = -t * grad_nu * u
        identity = max(identity, vector_norm(lhs - rhs, grid, mask) / l2)
        lhs_norms[i] = vector_norm(lhs, grid, mask)

        envelope = np.exp(-(nu_floor - eta0) * t)
        first_const = max(first_const, vector_norm(D_u, grid, mask) / (envelope * h1))
        line2_const = max(line2_const, lhs_norms[i] / (envelope * l2))
        second = np.stack([apply_D_t(m, t, D_u[a]) for a in range(3)])
        second_norm = vector_norm(second.reshape(9, -1), grid, interior_mask(grid, 2 * layers))
        second_consts["H1"] = max(second_consts["H1"], second_norm / (envelope * h1))
        second_consts["H2"] = max(second_consts["H2"], second_norm / (envelope * h2))

    if window is None:
        window = (max(times[-1] * 0.1, times[1] if times.size > 1 else 0.0), times[-1])
    try:
        fit = fit_decay(times, lhs_norms, "power_exp", window=window)
    except FitRejectedError as e:
        logger.warning(f"Cancellation decay fit rejected: {e}")
        fit = None

    commutator, second_commutator = commutator_residuals(m, times[min(1, times.size - 1)], values, layers)
    grad_fd = np.stack([gradient_matrix(grid, a) @ op.nu for a in (1, 2, 3)])

    return CancellationReport(
        identity_residual=identity,
        identity_tolerance=10.0 * grid.spacing ** 2,
        decay_fit=fit,
        eta0=eta0,
        rate_floor=nu_floor - eta0,
        commutator_residual=commutator,
        second_commutator_residual=second_commutator,
        grad_nu_max=float(np.max(np.linalg.norm(grad_fd, axis=0))),
        grad_nu_max_exact=float(np.max(np.linalg.norm(grad_nu, axis=0))),
        first_order_constant=first_const,
        line2_constant=line2_const,
        second_order_constants=second_consts,
        times=times,
        lhs_norms=lhs_norms,
    )
