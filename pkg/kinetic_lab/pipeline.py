"""
Scenario Pipeline

Runs the lab stages for a validated Scenario and writes the artifact directory:
1. spectrum - gap estimate, tracked fluid branches, branch fits, oracles
2. evolve   - mode evolution, Green decomposition, decay rates, pointwise law
3. picard   - kinetic-wave cascade, bound ratios, remainder regularity
4. mixture  - mixture ratios and cancellation identities
Artifacts: one CSV per stage, summary.json and manifest.json.
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from kinetic_lab.collision import (
    CollisionOperator,
    assemble_collision,
    dissipativity_check,
    null_space_residuals,
    smoothing_diagnostic,
    summarize,
)
from kinetic_lab.errors import GapScanError, LabError, ScaleGuardError
from kinetic_lab.fitting import DecaySeries
from kinetic_lab.green import (
    GreenDecomposition,
    aggregate_norm,
    decompose_green,
    evolve_mode,
    fluid_pointwise_constant,
    invariant_moments,
    lattice_size,
    make_initial,
    sup_x_norm,
    whole_solution_bound,
)
from kinetic_lab.mixture import (
    MIXTURE_ORDERS,
    cancellation_check,
    gaussian_bump,
    mixture_apply,
    mixture_ratio,
)
from kinetic_lab.parallel import parallel_map
from kinetic_lab.picard import (
    WAVE_ORDERS,
    WaveFamily,
    picard_cascade,
    ratio_suprema,
    remainder_regularity,
    source_integral,
    wave_ratios,
)
from kinetic_lab.scenario import Scenario
from kinetic_lab.spectrum import (
    FLUID_BRANCHES,
    assemble_mode,
    estimate_gap,
    fit_branches_in_window,
    fluid_branches,
    full_spectrum,
    invariant_subspace_angle,
    isotropy_check,
    mode_along,
    moment_closure_speeds,
)
from kinetic_lab.velocity_grid import H1, H2, L2, NormKind, build_grid, compute_norm

logger = logging.getLogger(__name__)

STAGES = ("spectrum", "evolve", "picard", "mixture")
MODES = STAGES + ("all",)
FLOAT_FORMAT = "%.12e"
RATE_RESIDUAL_LIMIT = 0.1
# |eps k| range of the branch expansion fits
BRANCH_FIT_WINDOW = (0.05, 0.3)


# =============================================================================
# SERIALIZATION
# =============================================================================

def to_jsonable(value: Any) -> Any:
    """Plain JSON types; complex numbers become [re, im], non-finite floats strings."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (complex, np.complexfloating)):
        return [to_jsonable(float(value.real)), to_jsonable(float(value.imag))]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else str(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    return value


def write_json(data: Dict[str, Any], path: Path):
    with open(path, "w") as f:
        json.dump(to_jsonable(data), f, indent=2, sort_keys=True)


def write_csv(frame: pd.DataFrame, path: Path):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def fit_summary(series: DecaySeries) -> Optional[Dict[str, Any]]:
    return series.fit.to_dict() if series.fit is not None else None


def _versions() -> Dict[str, str]:
    versions = {}
    for package in ("numpy", "scipy", "pandas", "joblib", "PyYAML"):
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


# =============================================================================
# CONTEXT
# =============================================================================

@dataclass
class LabContext:
    """Shared state of one run: operator, gap and per-stage summaries."""
    scenario: Scenario
    op: CollisionOperator
    out_dir: Path
    summary: Dict[str, Any] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    tau_est: Optional[float] = None
    delta: Optional[float] = None
    branch_a2: List[float] = field(default_factory=list)
    decompositions: Dict[tuple, GreenDecomposition] = field(default_factory=dict)

    @property
    def grid(self):
        return self.op.grid

    def ensure_gap(self):
        """tau and delta from a scan (delta_override replaces the scanned delta)."""
        if self.delta is not None:
            return
        s = self.scenario
        try:
            gap = estimate_gap(self.op, s.gap_scan, threads=s.threads)
        except GapScanError as e:
            if s.delta_override is None:
                raise
            logger.warning(f"Gap scan failed, continuing with delta_override={s.delta_override}: {e}")
            self.delta = float(s.delta_override)
            self.summary["gap"] = {"delta_used": self.delta, "scan_error": str(e)}
            return
        self.tau_est = gap.tau_est
        self.delta = float(s.delta_override) if s.delta_override is not None else gap.delta_est
        logger.info(f"Gap: tau_est={gap.tau_est:.4f} delta_est={gap.delta_est:.4f} (using {self.delta:.4f})")
        self.summary["gap"] = {
            "tau_est": gap.tau_est,
            "delta_est": gap.delta_est,
            "delta_used": self.delta,
            "sixth_eigenvalue": gap.sixth_eigenvalue,
            "kernel_eigenvalues": gap.kernel_eigenvalues,
        }
        write_csv(pd.DataFrame({"eps_k": gap.scan, "count": gap.counts}), self.out_dir / "gap_scan.csv")


# =============================================================================
# STAGES
# =============================================================================

def run_spectrum_stage(ctx: LabContext):
    s, op = ctx.scenario, ctx.op
    ctx.ensure_gap()

    samples = [x for x in s.eps_k_samples if x < ctx.delta]
    if len(samples) < 4:
        logger.warning(f"Only {len(samples)} branch samples below delta={ctx.delta}; using all samples")
        samples = list(s.eps_k_samples)
    table = fluid_branches(op, samples, threads=s.threads)
    write_csv(table.to_frame(), ctx.out_dir / "branches.csv")

    branch_fits, rejected = fit_branches_in_window(table, BRANCH_FIT_WINDOW, higher_order=True)
    ctx.branch_a2 = [f.a2 for f in branch_fits]

    k0_spectrum = full_spectrum(assemble_mode(op, s.eps, (0, 0, 0)), leading=FLUID_BRANCHES + 1,
                                tau_cut=ctx.tau_est)
    dissipation = dissipativity_check(op, seed=s.seed)
    smoothing = smoothing_diagnostic(op, seed=s.seed)
    summary = {
        "operator": summarize(op),
        "quadrature_null_residuals": op.quadrature_residuals,
        "null_residuals": null_space_residuals(op),
        "symmetry_residual": dissipation.symmetry_residual,
        "self_adjoint_residual": dissipation.self_adjoint_residual,
        "max_rayleigh_off_invariants": dissipation.max_rayleigh_off_invariants,
        "max_real_eigenvalue_k0": float(np.max(k0_spectrum.eigenvalues.real)),
        "invariant_subspace_angle": invariant_subspace_angle(k0_spectrum, ctx.grid),
        "smoothing": smoothing.__dict__,
        "branch_fits": [f.to_dict() for f in branch_fits],
        "branch_fit_rejections": rejected,
        "branch_fit_window": list(BRANCH_FIT_WINDOW),
        "flagged_samples": [float(table.eps_k[i]) for i in table.flagged],
        "moment_speeds": moment_closure_speeds(ctx.grid).tolist(),
    }
    if s.check_isotropy:
        iso = isotropy_check(op, eps_k=samples[len(samples) // 2])
        summary["isotropy"] = {"eps_k": iso.eps_k, "relative_deviation": iso.relative_deviation}
    ctx.summary["spectrum"] = summary


def _mode_job(ctx: LabContext, initial, k, want_cascade: bool):
    """Evolution, decomposition and (optionally) the cascade of one canonical mode."""
    s, op = ctx.scenario, ctx.op
    m = assemble_mode(op, s.eps, k)
    I = initial.values(k)
    state = evolve_mode(m, I, s.times)
    spectrum = None
    if state.eps_k < ctx.delta:
        spectrum = full_spectrum(m, leading=FLUID_BRANCHES + 3, tau_cut=ctx.tau_est)
    decomp = decompose_green(state, spectrum, ctx.delta)
    family = picard_cascade(op, m, I, s.times, dt=s.dt_cascade) if want_cascade else None
    logger.debug(f"Mode {k} done (|eps k|={state.eps_k:.4f}, long_wave={decomp.long_wave})")
    return k, decomp, family


def _evolve_modes(ctx: LabContext, want_cascade: bool):
    s = ctx.scenario
    ctx.ensure_gap()
    initial = make_initial(s.profile, ctx.grid, s.eps, s.k_max, seed=s.seed, k0=s.k0, zero_mean=s.zero_mean)
    active = [k for k in initial.canonical_modes if np.any(initial.values(k))]
    results = parallel_map(lambda k: _mode_job(ctx, initial, k, want_cascade), active, s.threads)
    decomps, families = {}, []
    for k, decomp, family in results:
        decomps[k] = decomp
        if any(k):
            decomps[decomp.conjugate().k] = decomp.conjugate()
        if family is not None:
            families.append(family)
    ctx.decompositions = decomps
    return decomps, families


def _part_series(decomps, part: str, kind: NormKind, grid, eps, lattice) -> np.ndarray:
    times = next(iter(decomps.values())).times
    out = np.zeros(times.size)
    for i in range(times.size):
        modes = {k: getattr(d, part)[i] for k, d in decomps.items()}
        if kind.name == "SupWeighted":
            out[i] = sup_x_norm(modes, grid, lattice, kind)
        else:
            out[i] = aggregate_norm(modes, eps, grid, 0.0, kind)
    return out


REGIMES = {
    "short-wave": "eps >= delta: every nonzero mode is short wave, whole solution decays like e^{-ct}",
    "fluid": "eps < delta: fluid part decays like e^{-c eps^2 t}, remainder like e^{-ct}",
    "diffusive": "eps below the delta0 proxy: fluid part follows the (1+t)^{-3/2} pointwise law",
}
POINTWISE_STABILITY = 0.1


def classify_regime(eps: float, delta: float, pointwise_change: Optional[float]) -> str:
    """
    Regime of the scenario from eps against delta and the delta0 proxy.

    The delta0 proxy counts eps as small enough when the pointwise constant
    moves by at most 10% between the k_max - 1 and k_max truncations.
    """
    if eps >= delta:
        return "short-wave"
    if pointwise_change is not None and pointwise_change <= POINTWISE_STABILITY:
        return "diffusive"
    return "fluid"


def single_fluid_branch(decomps: Sequence[GreenDecomposition], tolerance: float = 1e-8) -> bool:
    """
    True when the data sits on fluid eigenvectors sharing one decay rate.

    Any short-wave data, any initial part off the fluid projectors, or two
    excited branches with different Re sigma make the data mixed.
    """
    rates: List[float] = []
    for d in decomps:
        size = float(np.linalg.norm(d.full[0]))
        if size == 0:
            continue
        if not d.long_wave or np.linalg.norm(d.orthogonal[0]) > tolerance * size:
            return False
        top = max(d.fluid_weights, default=0.0)
        rates += [s.real for s, w in zip(d.fluid_eigenvalues, d.fluid_weights) if top > 0 and w > tolerance * top]
    if not rates:
        return False
    return max(rates) - min(rates) <= 1e-6 * max(abs(r) for r in rates)


def _rate(times, values, window, model: str = "exp") -> Optional[Dict[str, Any]]:
    if not np.any(values > 0):
        return None
    return fit_summary(DecaySeries(times, values).fitted(model, window))


def run_evolve_stage(ctx: LabContext, decomps: Dict[tuple, GreenDecomposition]):
    s, grid = ctx.scenario, ctx.grid
    times = np.asarray(s.times)
    lattice = lattice_size(s.k_max)

    columns: Dict[str, np.ndarray] = {"t": times}
    for kind in s.norms:
        label = kind.label
        for part in ("full", "fluid", "orthogonal", "short"):
            columns[f"{part}_{label}"] = _part_series(decomps, part, kind, grid, s.eps, lattice)
    completeness = np.array([
        aggregate_norm({k: d.fluid[i] + d.orthogonal[i] + d.short[i] - d.full[i] for k, d in decomps.items()},
                       s.eps, grid)
        for i in range(times.size)
    ])
    columns["completeness"] = completeness
    write_csv(pd.DataFrame(columns), ctx.out_dir / "evolve.csv")

    l2 = L2.label
    window = s.window
    long_modes = [d for d in decomps.values() if d.long_wave]
    slowest = None
    for d in long_modes:
        if not d.fluid_weights:
            continue
        top = max(d.fluid_weights)
        for sigma, weight in zip(d.fluid_eigenvalues, d.fluid_weights):
            if top > 0 and weight > 1e-8 * top:
                slowest = -sigma.real if slowest is None else min(slowest, -sigma.real)

    a_ref = None
    for d in long_modes:
        kappa2 = (np.pi * d.eps_k) ** 2
        if kappa2 > 0:
            candidate = min(-sigma.real / kappa2 for sigma in d.fluid_eigenvalues)
            a_ref = candidate if a_ref is None else min(a_ref, candidate)
    a_ref_source = "mode spectra"
    if ctx.branch_a2:
        a_ref, a_ref_source = min(ctx.branch_a2), "branch fits"
    elif a_ref is not None:
        logger.warning(f"No accepted branch fit; a_ref={a_ref:.4f} taken from the mode spectra")

    summary: Dict[str, Any] = {
        "modes": len(decomps),
        "long_wave_modes": len(long_modes),
        "delta": ctx.delta,
        "tau_est": ctx.tau_est,
        "completeness_residual": float(max(d.completeness_residual() for d in decomps.values())),
        "fluid_rate": _rate(times, columns[f"fluid_{l2}"], window),
        "orthogonal_rate": _rate(times, columns[f"orthogonal_{l2}"], window),
        "short_rate": _rate(times, columns[f"short_{l2}"], window),
        "slowest_fluid_rate": slowest,
        "fluid_data_single_branch": single_fluid_branch(list(decomps.values())),
        "a_ref": a_ref,
        "a_ref_source": a_ref_source,
    }

    zero = decomps.get((0, 0, 0))
    if zero is not None:
        moments = np.array([invariant_moments(grid, v) for v in zero.full])
        scale = max(float(np.max(np.abs(moments[0]))), compute_norm(zero.full[0], L2, grid))
        summary["conservation_drift"] = float(np.max(np.abs(moments - moments[0])) / scale)

    growth = 0.0
    for d in decomps.values():
        norms = np.linalg.norm(d.full, axis=1)
        if norms[0] > 0:
            growth = max(growth, float(np.max(np.diff(norms)) / norms[0]))
    summary["max_energy_increase"] = growth

    if long_modes and a_ref is not None:
        full_constant = fluid_pointwise_constant(list(decomps.values()), s.eps, grid, a_ref)
        inner = [d for k, d in decomps.items() if max(abs(c) for c in k) < s.k_max]
        summary["pointwise_constant"] = full_constant
        if inner and any(d.long_wave for d in inner):
            truncated = fluid_pointwise_constant(inner, s.eps, grid, a_ref)
            change = abs(full_constant - truncated) / max(full_constant, 1e-300)
            summary["pointwise_constant_truncated"] = truncated
            summary["pointwise_relative_change"] = change
    summary["regime"] = classify_regime(s.eps, ctx.delta, summary.get("pointwise_relative_change"))

    bound = whole_solution_bound(list(decomps.values()), s.eps, grid, lattice, window=window)
    summary["whole_solution_bound"] = {
        "lambda_short": bound.lambda_short,
        "lambda_long": bound.lambda_long,
        "sup_ratio": bound.sup_ratio,
    }
    ctx.summary["evolve"] = summary


def run_picard_stage(ctx: LabContext, families: List[WaveFamily]):
    s, grid, op = ctx.scenario, ctx.grid, ctx.op
    times = np.asarray(s.times)
    sup_kind = NormKind.sup_weighted(s.beta)

    rows = []
    suprema_l2: Dict[int, float] = {j: 0.0 for j in WAVE_ORDERS}
    suprema_sup: Dict[int, float] = {j: 0.0 for j in WAVE_ORDERS}
    telescoping = 0.0
    for fam in families:
        ratios_l2 = wave_ratios(fam, grid, L2)
        ratios_sup = wave_ratios(fam, grid, sup_kind)
        for j, value in ratio_suprema(ratios_l2, times).items():
            suprema_l2[j] = max(suprema_l2[j], value)
        for j, value in ratio_suprema(ratios_sup, times).items():
            suprema_sup[j] = max(suprema_sup[j], value)
        telescoping = max(telescoping, max(fam.telescoping_residual(j) for j in WAVE_ORDERS))
        for r, j in enumerate(WAVE_ORDERS):
            for i, t in enumerate(times):
                wave = fam.waves[i, r]
                rows.append({
                    "t": t, "kx": fam.k[0], "ky": fam.k[1], "kz": fam.k[2], "j": j,
                    "norm_L2": compute_norm(wave, L2, grid),
                    f"norm_{sup_kind.label}": compute_norm(wave, sup_kind, grid),
                    "ratio_L2": ratios_l2[r, i],
                    f"ratio_{sup_kind.label}": ratios_sup[r, i],
                })
    write_csv(pd.DataFrame(rows), ctx.out_dir / "picard.csv")

    window = s.window
    remainder = remainder_regularity(families, grid, s=2.0, window=window)
    floor = 0.8 * min(0.5 * op.nu_floor, ctx.tau_est if ctx.tau_est else np.inf)

    fluid = {k: d.fluid for k, d in ctx.decompositions.items()}
    green_remainder = remainder_regularity(families, grid, s=2.0, window=window, fluid=fluid)

    lattice = lattice_size(s.k_max)
    kinetic_sup = np.zeros(times.size)
    for i in range(times.size):
        modes = {}
        for fam in families:
            modes[fam.k] = fam.kinetic[i]
            if any(fam.k):
                modes[(-fam.k[0], -fam.k[1], -fam.k[2])] = np.conj(fam.kinetic[i])
        kinetic_sup[i] = sup_x_norm(modes, grid, lattice, sup_kind)

    ctx.summary["picard"] = {
        "modes": len(families),
        "telescoping_residual": telescoping,
        "wave_suprema_L2": suprema_l2,
        f"wave_suprema_{sup_kind.label}": suprema_sup,
        "remainder_rate": fit_summary(remainder),
        "remainder_rate_floor": floor,
        "green_remainder_rate": fit_summary(green_remainder),
        "source_integral_max": float(np.max(source_integral(families, op))) if families else 0.0,
        "kinetic_sup_rate": _rate(times, kinetic_sup, window, model="power_exp"),
        "kinetic_rate_floor": 0.4 * op.nu_floor,
        "halvings": int(max((f.halvings for f in families), default=0)),
        "warnings": sorted({w for f in families for w in f.warnings}),
    }


def run_mixture_stage(ctx: LabContext):
    s, op, grid = ctx.scenario, ctx.op, ctx.grid
    times = s.times
    bump = gaussian_bump(grid)
    norms = {1: compute_norm(bump, H1, grid), 2: compute_norm(bump, H2, grid)}

    def job(eps_k: float):
        m = mode_along(op, eps_k)
        runs = {j: mixture_apply(op, m, j, bump, times, dt=s.dt_cascade) for j in MIXTURE_ORDERS}
        ratios = {j: mixture_ratio(runs[j], norms[j], grid) for j in MIXTURE_ORDERS}
        report = cancellation_check(m, bump, times, eta0_fraction=s.eta0_fraction, window=s.window)
        return eps_k, ratios, report

    rows = []
    per_eps: Dict[str, Any] = {}
    for eps_k, ratios, report in parallel_map(job, s.mixture_eps_k, s.threads):
        for j, ratio in ratios.items():
            for i, t in enumerate(times):
                rows.append({
                    "t": t, "j": j, "eps_k": eps_k,
                    "ratio": ratio.ratios[i],
                    "cancellation_lhs": report.lhs_norms[i],
                })
        per_eps[f"{eps_k:g}"] = {
            "sup_ratio_j1": ratios[1].sup_ratio,
            "sup_ratio_j2": ratios[2].sup_ratio,
            "cancellation": report.to_dict(),
        }
    write_csv(pd.DataFrame(rows), ctx.out_dir / "mixture.csv")
    ctx.summary["mixture"] = {
        "grad_nu_max": summarize(op)["grad_nu_max"],
        "eta0": s.eta0_fraction * op.nu_floor,
        "by_eps_k": per_eps,
    }


# =============================================================================
# ENTRY
# =============================================================================

def run_scenario(scenario: Scenario, mode: str = "all", out_dir: Optional[Path] = None) -> Path:
    """
    Execute the selected stages and write the artifact directory.

    Args:
        scenario: Validated scenario
        mode: "spectrum", "evolve", "picard", "mixture" or "all"
        out_dir: Overrides scenario.output_dir

    Returns:
        Path of the artifact directory

    Raises:
        LabError: any stage failure; the manifest is left with complete = false
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    scenario.validate()
    stages = STAGES if mode == "all" else (mode,)

    grid = build_grid(scenario.radius, scenario.points_per_axis)
    if grid.size > scenario.size_cap:
        raise ScaleGuardError(f"grid of {grid.size} nodes exceeds size_cap={scenario.size_cap}")

    out = Path(out_dir or scenario.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": scenario.to_dict(),
        "seed": scenario.seed,
        "mode": mode,
        "stages": list(stages),
        "versions": _versions(),
        "started": datetime.now(timezone.utc).isoformat(),
        "complete": False,
    }
    write_json(manifest, out / "manifest.json")

    started = time.perf_counter()
    op = assemble_collision(grid, scenario.cutoff_D, size_cap=scenario.size_cap, threads=scenario.threads)
    ctx = LabContext(scenario=scenario, op=op, out_dir=out)
    ctx.timings["assemble"] = time.perf_counter() - started
    ctx.summary["seed"] = scenario.seed

    try:
        if "spectrum" in stages:
            _timed(ctx, "spectrum", lambda: run_spectrum_stage(ctx))
        if "evolve" in stages or "picard" in stages:
            want_cascade = "picard" in stages
            decomps, families = _timed(ctx, "modes", lambda: _evolve_modes(ctx, want_cascade))
            if "evolve" in stages:
                _timed(ctx, "evolve", lambda: run_evolve_stage(ctx, decomps))
            if want_cascade:
                _timed(ctx, "picard", lambda: run_picard_stage(ctx, families))
        if "mixture" in stages:
            _timed(ctx, "mixture", lambda: run_mixture_stage(ctx))
    except LabError as e:
        manifest.update({"error": str(e), "wall_times": ctx.timings})
        write_json(manifest, out / "manifest.json")
        raise

    write_json(ctx.summary, out / "summary.json")
    manifest.update({"wall_times": ctx.timings, "complete": True,
                     "finished": datetime.now(timezone.utc).isoformat()})
    write_json(manifest, out / "manifest.json")
    logger.info(f"Artifacts written to {out}")
    return out


def _timed(ctx: LabContext, name: str, step):
    start = time.perf_counter()
    logger.info(f"Stage {name} started")
    result = step()
    ctx.timings[name] = time.perf_counter() - start
    logger.info(f"Stage {name} finished in {ctx.timings[name]:.1f}s")
    return result
