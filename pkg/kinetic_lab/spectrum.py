"""
Mode Spectra

Per-Fourier-mode operator B(eps k) = L - i pi eps (xi . k) and its fluid structure:
1. Dense eigendecomposition with biorthogonal left/right eigenvectors
2. Five fluid branches tracked across |eps k| by eigenvector overlap
3. Polynomial branch fits in the wavenumber kappa = pi |eps k|
4. Spectral gap (tau) and long-wave threshold (delta) estimation
5. Moment-closure sound speeds and an isotropy check
"""

import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.optimize import linear_sum_assignment
from scipy.sparse.linalg import eigs

from kinetic_lab.collision import CollisionOperator
from kinetic_lab.errors import (
    BranchTrackingError,
    FitRejectedError,
    GapScanError,
    ScaleGuardError,
    SpectrumError,
)
from kinetic_lab.parallel import parallel_map
from kinetic_lab.velocity_grid import VelocityGrid, collision_invariants

logger = logging.getLogger(__name__)

FULL_SPECTRUM_CAP = 4096
FLUID_BRANCHES = 5
GAP_SAFETY = 0.9
DEFAULT_LEADING = 12
DEGENERACY_TOL = 1e-9


# =============================================================================
# MODE OPERATOR
# =============================================================================

@dataclass
class Eigensystem:
    """B = right diag(values) left with left @ right = I."""
    values: np.ndarray
    right: np.ndarray
    left: np.ndarray
    condition: float


@dataclass(frozen=True, eq=False)
class ModeOperator:
    """B for one Fourier mode; depends on eps and k only through eps * k."""
    op: CollisionOperator = field(repr=False)
    eps: float
    k: Tuple[int, int, int]
    B: np.ndarray = field(repr=False)

    @property
    def grid(self) -> VelocityGrid:
        return self.op.grid

    @property
    def wave_vector(self) -> np.ndarray:
        """eps * k (a real 3-vector)."""
        return self.eps * np.asarray(self.k, dtype=float)

    @property
    def eps_k(self) -> float:
        return float(np.linalg.norm(self.wave_vector))

    @property
    def kappa(self) -> float:
        """Wavenumber pi |eps k| multiplying xi in the transport term."""
        return float(np.pi * self.eps_k)

    @property
    def transport(self) -> np.ndarray:
        """pi (xi . eps k) at every node."""
        return np.pi * (self.grid.nodes @ self.wave_vector)

    @property
    def is_zero_mode(self) -> bool:
        return not any(self.k)

    @cached_property
    def eigensystem(self) -> Eigensystem:
        """Full eigendecomposition; Hermitian path at k = 0."""
        try:
            if self.is_zero_mode:
                values, right = scipy.linalg.eigh(self.B.real)
                values = values.astype(complex)
                right = right.astype(complex)
                left = right.T.copy()
                condition = 1.0
            else:
                values, right = scipy.linalg.eig(self.B)
                condition = float(np.linalg.cond(right))
                left = scipy.linalg.inv(right)
        except (np.linalg.LinAlgError, ValueError) as e:
            raise SpectrumError(
                f"eigendecomposition failed for k={self.k}, eps={self.eps}: {e}",
                condition=float(np.linalg.cond(self.B)),
            ) from e

        order = np.lexsort((values.imag, -values.real))
        return Eigensystem(
            values=values[order],
            right=right[:, order],
            left=left[order, :],
            condition=condition,
        )


def assemble_mode(op: CollisionOperator, eps: float, k: Sequence[int]) -> ModeOperator:
    """
    B = K - diag(nu) - i pi diag(xi . (eps k)).

    Args:
        op: Assembled collision operator
        eps: Inverse box-size scale (> 0)
        k: Integer wave vector

    Returns:
        ModeOperator; at k = 0, B is L exactly
    """
    k = tuple(int(c) for c in k)
    B = op.L.astype(complex)
    if any(k):
        transport = np.pi * (op.grid.nodes @ (eps * np.asarray(k, dtype=float)))
        B[np.diag_indices_from(B)] -= 1j * transport
    return ModeOperator(op=op, eps=float(eps), k=k, B=B)


def mode_along(op: CollisionOperator, eps_k: float, direction: Sequence[int] = (1, 0, 0)) -> ModeOperator:
    """Mode with |eps k| = eps_k along an integer direction."""
    direction = tuple(int(c) for c in direction)
    length = float(np.linalg.norm(direction))
    if length == 0:
        raise ValueError("direction must be a nonzero integer vector")
    return assemble_mode(op, eps_k / length, direction)


# =============================================================================
# SPECTRA
# =============================================================================

@dataclass
class SpectrumResult:
    """Eigenvalues (descending real part) and the leading biorthogonal pairs."""
    eps: float
    k: Tuple[int, int, int]
    eps_k: float
    eigenvalues: np.ndarray
    right_vectors: np.ndarray = field(repr=False)
    left_vectors: np.ndarray = field(repr=False)
    complete: bool = True
    condition: float = 1.0
    tau_cut: Optional[float] = None
    tau_est: Optional[float] = None
    delta_est: Optional[float] = None

    @property
    def leading(self) -> int:
        return self.right_vectors.shape[1]

    @property
    def fluid_count(self) -> Optional[int]:
        """Eigenvalues with Re > -tau_cut."""
        if self.tau_cut is None:
            return None
        return int(np.sum(self.eigenvalues.real > -self.tau_cut))

    def biorthogonality_residual(self) -> float:
        gram = self.left_vectors @ self.right_vectors
        return float(np.max(np.abs(gram - np.eye(gram.shape[0]))))

    def projector_apply(self, indices: Sequence[int], f: np.ndarray) -> np.ndarray:
        """Sum over indices of right_j (left_j . f)."""
        idx = list(indices)
        coeffs = self.left_vectors[idx] @ f
        return self.right_vectors[:, idx] @ coeffs


def _cache_path(cache_dir: Path, m: ModeOperator) -> Path:
    grid = m.grid
    key = f"{grid.points_per_axis}|{grid.radius!r}|{m.op.cutoff_strength!r}|{m.eps!r}|{m.k}"
    return Path(cache_dir) / f"{hashlib.sha1(key.encode()).hexdigest()}.npz"


def _iterative_leading(m: ModeOperator, leading: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shift-invert Arnoldi about 0; left vectors from B^T = B."""
    values, right = eigs(m.B, k=leading, sigma=0.0, which="LM")
    order = np.lexsort((values.imag, -values.real))
    values, right = values[order], right[:, order]
    left = scipy.linalg.solve(right.T @ right, right.T)
    return values, right, left


def full_spectrum(
    m: ModeOperator,
    leading: int = DEFAULT_LEADING,
    tau_cut: Optional[float] = None,
    size_cap: int = FULL_SPECTRUM_CAP,
    cache_dir: Optional[Union[str, Path]] = None,
) -> SpectrumResult:
    """
    Eigenvalues of B with biorthogonal vectors for the leading subset.

    Args:
        m: Mode operator
        leading: Number of largest-real-part eigenpairs to keep vectors for
        tau_cut: Threshold for fluid_count (usually the gap estimate)
        size_cap: Above this node count only the leading subset is computed,
            by shift-invert iteration about 0
        cache_dir: Optional eigenpair cache directory

    Returns:
        SpectrumResult

    Raises:
        SpectrumError: eigensolver failure, with the condition number of B
    """
    n_nodes = m.grid.size
    leading = min(leading, n_nodes)
    path = _cache_path(Path(cache_dir), m) if cache_dir is not None else None

    if path is not None and path.exists():
        with np.load(path) as data:
            if data["right"].shape[1] >= leading:
                logger.debug(f"Eigen cache hit for k={m.k} ({path.name})")
                return SpectrumResult(
                    eps=m.eps, k=m.k, eps_k=m.eps_k,
                    eigenvalues=data["values"],
                    right_vectors=data["right"][:, :leading],
                    left_vectors=data["left"][:leading],
                    complete=bool(data["complete"]),
                    condition=float(data["condition"]),
                    tau_cut=tau_cut,
                )

    if n_nodes <= size_cap:
        system = m.eigensystem
        values, condition, complete = system.values, system.condition, True
        right = system.right[:, :leading]
        left = system.left[:leading]
    else:
        if leading >= n_nodes - 1:
            raise ScaleGuardError(
                f"{n_nodes} nodes exceed the full-spectrum cap {size_cap}; request fewer leading pairs"
            )
        try:
            values, right, left = _iterative_leading(m, leading)
        except Exception as e:
            raise SpectrumError(f"shift-invert iteration failed for k={m.k}: {e}") from e
        condition, complete = float(np.linalg.cond(right)), False

    result = SpectrumResult(
        eps=m.eps, k=m.k, eps_k=m.eps_k,
        eigenvalues=values,
        right_vectors=right,
        left_vectors=left,
        complete=complete,
        condition=condition,
        tau_cut=tau_cut,
    )
    residual = result.biorthogonality_residual()
    if residual > 1e-8:
        logger.warning(
            f"Biorthogonality residual {residual:.2e} at k={m.k} (condition {condition:.2e})"
        )

    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, values=values, right=right, left=left,
                 complete=complete, condition=condition)
    return result


def invariant_subspace_angle(result: SpectrumResult, grid: VelocityGrid) -> float:
    """Largest principal angle between the five leading right vectors and the invariants."""
    _, basis = collision_invariants(grid)
    angles = scipy.linalg.subspace_angles(result.right_vectors[:, :FLUID_BRANCHES], basis.T)
    return float(np.max(angles))


# =============================================================================
# FLUID BRANCHES
# =============================================================================

@dataclass
class BranchTable:
    """Five tracked branches sigma_j over ascending |eps k| samples."""
    eps_k: np.ndarray
    sigma: np.ndarray
    overlap: np.ndarray
    direction: Tuple[int, int, int]
    flagged: List[int] = field(default_factory=list)

    @property
    def kappa(self) -> np.ndarray:
        return np.pi * self.eps_k

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for s, x in enumerate(self.eps_k):
            for j in range(self.sigma.shape[0]):
                rows.append({
                    "eps_k": x,
                    "branch": j,
                    "re_sigma": self.sigma[j, s].real,
                    "im_sigma": self.sigma[j, s].imag,
                    "overlap": self.overlap[j, s],
                })
        return pd.DataFrame(rows, columns=["eps_k", "branch", "re_sigma", "im_sigma", "overlap"])


def _cluster_scores(overlap: np.ndarray, values: np.ndarray, assigned: np.ndarray) -> np.ndarray:
    """Overlap of each branch with the eigenspace of its assigned eigenvalue."""
    scores = np.empty(len(assigned))
    for a, b in enumerate(assigned):
        tol = DEGENERACY_TOL * max(1.0, abs(values[b]))
        cluster = np.abs(values - values[b]) <= tol
        scores[a] = float(np.sqrt(np.sum(overlap[a, cluster] ** 2)))
    return scores


def fluid_branches(
    op: CollisionOperator,
    eps_k_samples: Sequence[float],
    direction: Sequence[int] = (1, 0, 0),
    threads: int = 1,
    leading: int = DEFAULT_LEADING,
    overlap_threshold: float = 0.5,
    strict: bool = False,
) -> BranchTable:
    """
    Track the five fluid eigenvalues along a fixed direction.

    The five largest-real-part eigenvalues at the smallest sample seed the
    branches; each later sample is matched by maximal |left_prev . right_next|
    (Hungarian assignment), never by value sorting.

    Args:
        op: Collision operator
        eps_k_samples: |eps k| values inside (0, delta)
        direction: Integer direction of k
        threads: Parallel spectra
        leading: Candidate eigenpairs per sample
        overlap_threshold: Samples with any branch below it are flagged
        strict: Raise instead of flagging

    Returns:
        BranchTable
    """
    samples = np.sort(np.asarray(eps_k_samples, dtype=float))
    if samples.size == 0 or samples[0] <= 0:
        raise ValueError("eps_k_samples must be positive")
    direction = tuple(int(c) for c in direction)

    spectra = parallel_map(
        lambda x: full_spectrum(mode_along(op, x, direction), leading=leading),
        samples,
        threads,
    )

    first = spectra[0]
    seed = np.arange(FLUID_BRANCHES)
    seed = seed[np.lexsort((-first.eigenvalues[seed].real, first.eigenvalues[seed].imag))]

    sigma = np.empty((FLUID_BRANCHES, samples.size), dtype=complex)
    overlap = np.empty((FLUID_BRANCHES, samples.size))
    sigma[:, 0] = first.eigenvalues[seed]
    overlap[:, 0] = 1.0
    left_prev = first.left_vectors[seed]
    flagged: List[int] = []

    for s in range(1, samples.size):
        nxt = spectra[s]
        scores = np.abs(left_prev @ nxt.right_vectors)
        rows, cols = linear_sum_assignment(-scores)
        assigned = cols[np.argsort(rows)]
        quality = _cluster_scores(scores, nxt.eigenvalues[:nxt.leading], assigned)

        sigma[:, s] = nxt.eigenvalues[assigned]
        overlap[:, s] = quality
        if np.any(quality < overlap_threshold):
            message = (
                f"branch tracking ambiguous at |eps k|={samples[s]:.4f} "
                f"(min overlap {quality.min():.3f})"
            )
            if strict:
                raise BranchTrackingError(message)
            logger.warning(message)
            flagged.append(s)
        left_prev = nxt.left_vectors[assigned]

    logger.info(f"Tracked {FLUID_BRANCHES} fluid branches over {samples.size} samples along {direction}")
    return BranchTable(eps_k=samples, sigma=sigma, overlap=overlap, direction=direction, flagged=flagged)


# =============================================================================
# BRANCH FITS
# =============================================================================

@dataclass
class BranchFit:
    """
    sigma ~ a1 (i x) - a2 x^2 - a3 i x^3 + a4 x^4 in the wavenumber x.

    Truncation terms above x^4 (real) and x^3 (imaginary) are kept in
    re_terms / im_terms as {power: coefficient}.
    """
    branch_index: int
    a1: float
    a2: float
    a3: float
    a4: float
    fit_residual: float
    order: int = 4
    re_terms: Dict[int, float] = field(default_factory=dict)
    im_terms: Dict[int, float] = field(default_factory=dict)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        re = -self.a2 * x ** 2 + self.a4 * x ** 4 + sum(c * x ** p for p, c in self.re_terms.items())
        im = self.a1 * x - self.a3 * x ** 3 + sum(c * x ** p for p, c in self.im_terms.items())
        return re + 1j * im

    def to_dict(self) -> Dict[str, float]:
        return {
            "branch": self.branch_index,
            "a1": self.a1,
            "a2": self.a2,
            "a3": self.a3,
            "a4": self.a4,
            "fit_residual": self.fit_residual,
            "order": self.order,
        }


def _weighted_polyfit(
    x: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray,
    powers: Sequence[int],
) -> Dict[int, float]:
    """Weighted least squares of y on x^p; columns scaled by max(x) for conditioning."""
    scale = float(np.max(x))
    u = x / scale
    design = np.column_stack([weights * u ** p for p in powers])
    coeffs, *_ = np.linalg.lstsq(design, weights * y, rcond=None)
    return {p: float(c) / scale ** p for p, c in zip(powers, coeffs)}


def _evaluate(x: np.ndarray, coeffs: Dict[int, float]) -> np.ndarray:
    return sum((c * x ** p for p, c in coeffs.items()), np.zeros_like(x))


def fit_branch_expansion(
    x: Sequence[float],
    sigma: Sequence[complex],
    branch_index: int = 0,
    residual_threshold: float = 1e-3,
    quartic: bool = True,
    higher_order: bool = False,
) -> BranchFit:
    """
    Relative least-squares fit of one branch: Re against -a2 x^2 (+ a4 x^4), Im against a1 x - a3 x^3.

    Every sample is weighted by 1/|sigma|, so the residual is the RMS relative
    deviation and the small-x samples that fix a1 and a2 count as much as the
    large ones. With higher_order, x^6 / x^5 are always added and further
    even (real) and odd (imaginary) powers follow one pair at a time until the
    residual meets the threshold or one spare sample would be left.

    Args:
        x: Wavenumbers kappa = pi |eps k|
        sigma: Branch eigenvalues at x
        branch_index: Label carried into the result
        residual_threshold: Largest accepted relative residual
        quartic: Include the x^4 term in the real fit
        higher_order: Absorb truncation terms above x^4 / x^3

    Raises:
        FitRejectedError: fewer than 4 samples or residual above threshold
    """
    x = np.asarray(x, dtype=float)
    sigma = np.asarray(sigma, dtype=complex)
    if x.size < 4:
        raise FitRejectedError(f"branch fit needs at least 4 samples, got {x.size}")
    if np.any(x <= 0):
        raise FitRejectedError("branch fit needs positive wavenumbers")

    magnitude = np.abs(sigma)
    top = float(np.max(magnitude))
    weights = 1.0 / np.maximum(magnitude, 1e-12 * top) if top > 0 else np.ones_like(x)

    re_powers = [2, 4] if quartic else [2]
    im_powers = [1, 3]

    def solve():
        re = _weighted_polyfit(x, sigma.real, weights, re_powers)
        im = _weighted_polyfit(x, sigma.imag, weights, im_powers)
        fitted = _evaluate(x, re) + 1j * _evaluate(x, im)
        residual = float(np.sqrt(np.mean((weights * np.abs(fitted - sigma)) ** 2))) if top > 0 else 0.0
        return re, im, residual

    def extend():
        re_powers.append(re_powers[-1] + 2)
        im_powers.append(im_powers[-1] + 2)

    def room() -> bool:
        return max(len(re_powers), len(im_powers)) + 1 < x.size

    if higher_order and room():
        extend()
    re, im, residual = solve()
    while higher_order and residual > residual_threshold and room():
        extend()
        re, im, residual = solve()

    fit = BranchFit(
        branch_index=branch_index,
        a1=im[1],
        a2=-re[2],
        a3=-im[3],
        a4=re.get(4, 0.0),
        fit_residual=residual,
        order=re_powers[-1],
        re_terms={p: c for p, c in re.items() if p > 4},
        im_terms={p: c for p, c in im.items() if p > 3},
    )
    if residual > residual_threshold:
        raise FitRejectedError(
            f"branch {branch_index} fit residual {residual:.2e} above {residual_threshold:.1e} "
            f"(order {fit.order}, {x.size} samples)"
        )
    logger.debug(f"Branch {branch_index}: a1={fit.a1:.4f} a2={fit.a2:.4f} residual={residual:.1e} order={fit.order}")
    return fit


def fit_all_branches(table: BranchTable, **kwargs) -> List[BranchFit]:
    """Fit every tracked branch in the kappa variable; the first rejection propagates."""
    return [
        fit_branch_expansion(table.kappa, table.sigma[j], branch_index=j, **kwargs)
        for j in range(table.sigma.shape[0])
    ]


def fit_branches_in_window(
    table: BranchTable,
    eps_k_window: Tuple[float, float],
    **kwargs,
) -> Tuple[List[BranchFit], Dict[int, str]]:
    """
    Fit each branch on the samples with |eps k| inside the window.

    Returns:
        (accepted fits, {branch index: rejection message})
    """
    lo, hi = eps_k_window
    mask = (table.eps_k >= lo) & (table.eps_k <= hi)
    fits: List[BranchFit] = []
    rejected: Dict[int, str] = {}
    for j in range(table.sigma.shape[0]):
        try:
            fits.append(fit_branch_expansion(table.kappa[mask], table.sigma[j, mask], branch_index=j, **kwargs))
        except FitRejectedError as e:
            logger.warning(f"Branch fit rejected: {e}")
            rejected[j] = str(e)
    return fits, rejected


# =============================================================================
# GAP ESTIMATION
# =============================================================================

@dataclass
class GapEstimate:
    tau_est: float
    delta_est: float
    sixth_eigenvalue: float
    kernel_eigenvalues: List[float]
    scan: List[float]
    counts: List[int]

    def as_tuple(self) -> Tuple[float, float]:
        return self.tau_est, self.delta_est


def estimate_gap(
    op: CollisionOperator,
    eps_k_scan: Sequence[float],
    direction: Sequence[int] = (1, 0, 0),
    threads: int = 1,
) -> GapEstimate:
    """
    tau from the k = 0 spectrum, delta from a scan in |eps k|.

    tau_est = -0.9 * (sixth-largest eigenvalue of L); delta_est is the largest
    scanned |eps k| before the count of eigenvalues above -tau_est first
    leaves five.

    Raises:
        SpectrumError: L has fewer than six negative directions
        GapScanError: the scan starts outside or never leaves the five-branch regime
    """
    values = np.sort(scipy.linalg.eigvalsh(op.L))[::-1]
    sixth = float(values[FLUID_BRANCHES])
    if sixth >= 0:
        raise SpectrumError(f"sixth eigenvalue of L is {sixth:.3e}; no spectral gap")
    tau_est = -GAP_SAFETY * sixth

    scan = sorted(float(x) for x in eps_k_scan)
    if not scan or scan[0] <= 0:
        raise GapScanError("gap scan needs positive |eps k| samples")

    def count(x: float) -> int:
        eig = scipy.linalg.eigvals(mode_along(op, x, direction).B)
        return int(np.sum(eig.real > -tau_est))

    # chunks of `threads` samples; stop once the five-branch regime is left
    counts: List[int] = []
    chunk = max(1, threads)
    for start in range(0, len(scan), chunk):
        counts.extend(parallel_map(count, scan[start:start + chunk], threads))
        if any(c != FLUID_BRANCHES for c in counts):
            break
    scan = scan[:len(counts)]
    if counts[0] != FLUID_BRANCHES:
        raise GapScanError(
            f"{counts[0]} eigenvalues above -tau at the first sample |eps k|={scan[0]}; "
            f"add samples below {scan[0] / 2:.3g}"
        )
    crossing = next((i for i, c in enumerate(counts) if c != FLUID_BRANCHES), None)
    if crossing is None:
        raise GapScanError(
            f"five-branch regime persists up to |eps k|={scan[-1]}; "
            f"extend the scan to {2 * scan[-1]:.3g}"
        )

    delta_est = scan[crossing - 1]
    logger.info(f"Gap estimate: tau={tau_est:.5f}, delta={delta_est:.4f}")
    return GapEstimate(
        tau_est=tau_est,
        delta_est=delta_est,
        sixth_eigenvalue=sixth,
        kernel_eigenvalues=[float(v) for v in values[:FLUID_BRANCHES]],
        scan=scan,
        counts=counts,
    )


# =============================================================================
# ORACLES
# =============================================================================

def moment_closure_speeds(grid: VelocityGrid, direction: Sequence[float] = (1.0, 0.0, 0.0)) -> np.ndarray:
    """
    Eigenvalues of the 5 x 5 matrix <phi_a, (xi . d) phi_b> on the orthonormal invariants.

    For the unit Maxwellian these are {-sqrt(5/3), 0, 0, 0, sqrt(5/3)}.
    """
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    _, basis = collision_invariants(grid)
    matrix = grid.weight * (basis * (grid.nodes @ d)) @ basis.T
    return np.sort(np.linalg.eigvalsh(0.5 * (matrix + matrix.T)))


@dataclass
class IsotropyReport:
    eps_k: float
    axis_eigenvalues: List[complex]
    diagonal_eigenvalues: List[complex]
    max_deviation: float
    relative_deviation: float


def isotropy_check(op: CollisionOperator, eps_k: float = 0.2) -> IsotropyReport:
    """Compare the five leading eigenvalues along (1,0,0) and (1,1,0) at equal |eps k|."""
    def leading_five(direction):
        values = full_spectrum(mode_along(op, eps_k, direction), leading=FLUID_BRANCHES).eigenvalues
        top = values[:FLUID_BRANCHES]
        return top[np.lexsort((top.real, top.imag))]

    axis = leading_five((1, 0, 0))
    diagonal = leading_five((1, 1, 0))
    deviation = float(np.max(np.abs(axis - diagonal)))
    scale = float(np.max(np.abs(axis)))
    return IsotropyReport(
        eps_k=float(eps_k),
        axis_eigenvalues=axis.tolist(),
        diagonal_eigenvalues=diagonal.tolist(),
        max_deviation=deviation,
        relative_deviation=deviation / scale if scale > 0 else 0.0,
    )
