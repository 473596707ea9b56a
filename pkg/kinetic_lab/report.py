"""
Artifact Report

Reads a finished artifact directory and renders a markdown summary: every
measured quantity next to the claim it checks and a pass/fail verdict.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from kinetic_lab.errors import IncompleteArtifactError
from kinetic_lab.pipeline import RATE_RESIDUAL_LIMIT, REGIMES
from kinetic_lab.spectrum import FLUID_BRANCHES

logger = logging.getLogger(__name__)

SOUND_SPEED = math.sqrt(5.0 / 3.0)

# Thresholds checked by the report
NULL_RESIDUAL_LIMIT = 5e-2
SYMMETRY_LIMIT = 1e-12
RAYLEIGH_LIMIT = 1e-8
BRANCH_RESIDUAL_LIMIT = 1e-3
SPEED_TOLERANCE = 0.05
COMPLETENESS_LIMIT = 1e-6
CONSERVATION_LIMIT = 1e-8
FLUID_RATE_TOLERANCE = 0.05
POINTWISE_TOLERANCE = 0.1
NON_FLUID_FRACTION = 0.8
TELESCOPING_LIMIT = 1e-6
GRAD_NU_LIMIT = 1.0


@dataclass
class Check:
    """One row of the report table."""
    quantity: str
    claim: str
    value: str
    passed: Optional[bool]

    @property
    def verdict(self) -> str:
        if self.passed is None:
            return "➖ n/a"
        return "✅ pass" if self.passed else "❌ fail"


def _number(value: Any) -> float:
    if value is None:
        return math.nan
    return float(value)


def _fmt(value: Any) -> str:
    x = _number(value)
    if math.isnan(x):
        return "n/a"
    if math.isinf(x):
        return "inf"
    return f"{x:.4g}"


def _rate_text(fit: Optional[Dict[str, Any]]) -> str:
    """Rate with its residual; a rate with residual above the limit is withheld."""
    if not fit:
        return "no fit"
    residual = _number(fit.get("residual"))
    if residual > RATE_RESIDUAL_LIMIT:
        return f"withheld (residual {residual:.2g})"
    return f"{_fmt(fit.get('rate'))} (residual {residual:.2g})"


def _rate_value(fit: Optional[Dict[str, Any]]) -> Optional[float]:
    if not fit or _number(fit.get("residual")) > RATE_RESIDUAL_LIMIT:
        return None
    return _number(fit.get("rate"))


def load_artifacts(artifact_dir: Union[str, Path]) -> Dict[str, Any]:
    """
    Load manifest.json and summary.json from a finished run.

    Raises:
        IncompleteArtifactError: missing or empty directory, missing files, or a run
            whose manifest is not marked complete
    """
    path = Path(artifact_dir)
    if not path.is_dir():
        raise IncompleteArtifactError(f"artifact directory {path} does not exist")
    if not any(path.iterdir()):
        raise IncompleteArtifactError(f"artifact directory {path} is empty")
    manifest_path, summary_path = path / "manifest.json", path / "summary.json"
    if not manifest_path.exists():
        raise IncompleteArtifactError(f"{path} has no manifest.json")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if not manifest.get("complete", False):
        reason = manifest.get("error", "run did not finish")
        raise IncompleteArtifactError(f"{path} holds an incomplete run: {reason}")
    if not summary_path.exists():
        raise IncompleteArtifactError(f"{path} has no summary.json")
    with open(summary_path) as f:
        summary = json.load(f)
    return {"manifest": manifest, "summary": summary}


# =============================================================================
# CHECKS PER STAGE
# =============================================================================

def spectrum_checks(spectrum: Dict[str, Any], gap: Dict[str, Any]) -> List[Check]:
    checks = []
    residuals = spectrum.get("quadrature_null_residuals") or []
    if residuals:
        worst = max(residuals)
        checks.append(Check("max ||L phi|| / ||phi|| (quadrature)", "invariants span the kernel of L",
                            _fmt(worst), worst <= NULL_RESIDUAL_LIMIT))
    symmetry = _number(spectrum.get("symmetry_residual"))
    checks.append(Check("K symmetry residual", "K is symmetric", _fmt(symmetry), symmetry <= SYMMETRY_LIMIT))
    rayleigh = _number(spectrum.get("max_rayleigh_off_invariants"))
    checks.append(Check("max <Lf, f> / ||f||^2 off invariants", "L is dissipative",
                        _fmt(rayleigh), rayleigh <= RAYLEIGH_LIMIT))

    sixth = _number(gap.get("sixth_eigenvalue"))
    checks.append(Check("sixth eigenvalue of L", "spectral gap below the five-fold kernel",
                        _fmt(sixth), sixth < 0 if not math.isnan(sixth) else None))

    fits = spectrum.get("branch_fits") or []
    rejected = spectrum.get("branch_fit_rejections") or {}
    window = spectrum.get("branch_fit_window")
    claim = f"relative residual <= {BRANCH_RESIDUAL_LIMIT:g}"
    if window:
        claim += f" over |eps k| in [{_fmt(window[0])}, {_fmt(window[1])}]"
    if rejected or not fits:
        checks.append(Check("branch fits", claim, f"{len(rejected)} of {FLUID_BRANCHES} rejected", False))
    if fits:
        worst_residual = max(f["fit_residual"] for f in fits)
        checks.append(Check("max branch fit residual", claim, _fmt(worst_residual),
                            worst_residual <= BRANCH_RESIDUAL_LIMIT))
        a2 = [f["a2"] for f in fits]
        checks.append(Check("min a2 over branches", "quadratic damping of every fluid branch",
                            _fmt(min(a2)), min(a2) > 0))
        a1 = sorted(f["a1"] for f in fits)
        speeds_ok = None
        if len(a1) == FLUID_BRANCHES:
            speeds_ok = (
                abs(a1[-1] - SOUND_SPEED) <= SPEED_TOLERANCE
                and abs(a1[0] + SOUND_SPEED) <= SPEED_TOLERANCE
                and all(abs(v) <= SPEED_TOLERANCE for v in a1[1:-1])
            )
        checks.append(Check("a1 pattern", "three non-propagating branches and sound speeds +-sqrt(5/3)",
                            ", ".join(_fmt(v) for v in a1), speeds_ok))

    speeds = spectrum.get("moment_speeds") or []
    if speeds:
        checks.append(Check("moment-closure speeds", "Euler moment system sound speed",
                            ", ".join(_fmt(v) for v in speeds),
                            abs(max(speeds) - SOUND_SPEED) <= SPEED_TOLERANCE))
    iso = spectrum.get("isotropy")
    if iso:
        checks.append(Check("axis vs diagonal eigenvalues", "spectrum depends on |eps k| only",
                            _fmt(iso["relative_deviation"]), None))
    return checks


def evolve_checks(evolve: Dict[str, Any], tau_est: Optional[float]) -> List[Check]:
    checks = []
    completeness = _number(evolve.get("completeness_residual"))
    checks.append(Check("G_F + G_perp + G_S - G", "Green decomposition is complete",
                        _fmt(completeness), completeness <= COMPLETENESS_LIMIT))
    if "conservation_drift" in evolve:
        drift = _number(evolve["conservation_drift"])
        checks.append(Check("k = 0 moment drift", "mass, momentum and energy are conserved",
                            _fmt(drift), drift <= CONSERVATION_LIMIT))

    for part in ("short", "orthogonal"):
        fit = evolve.get(f"{part}_rate")
        rate = _rate_value(fit)
        passed = None
        if rate is not None and tau_est:
            passed = rate >= NON_FLUID_FRACTION * tau_est
        checks.append(Check(f"{part} decay rate", "non-fluid parts decay at least like 0.8 tau",
                            _rate_text(fit), passed))

    fluid = evolve.get("fluid_rate")
    slowest = evolve.get("slowest_fluid_rate")
    rate = _rate_value(fluid)
    passed = None
    claim = f"matches slowest excited branch ({_fmt(slowest)})"
    if not evolve.get("fluid_data_single_branch"):
        claim += ", mixed data: reported only"
    elif rate is not None and slowest:
        passed = abs(rate - slowest) <= FLUID_RATE_TOLERANCE * abs(slowest)
    checks.append(Check("fluid decay rate", claim, _rate_text(fluid), passed))

    if "pointwise_relative_change" in evolve:
        change = _number(evolve["pointwise_relative_change"])
        checks.append(Check("pointwise constant change", "(1+t)^{-3/2} law is stable under k_max",
                            _fmt(change), change <= POINTWISE_TOLERANCE))
    bound = evolve.get("whole_solution_bound")
    if bound:
        checks.append(Check("whole-solution sup ratio", "two-rate bound on the sup-in-x norm",
                            _fmt(bound["sup_ratio"]), math.isfinite(_number(bound["sup_ratio"]))))
    return checks


def picard_checks(picard: Dict[str, Any]) -> List[Check]:
    checks = []
    telescoping = _number(picard.get("telescoping_residual"))
    checks.append(Check("cascade telescoping residual", "waves plus remainder rebuild the solution",
                        _fmt(telescoping), telescoping <= TELESCOPING_LIMIT))
    for key, value in sorted(picard.items()):
        if key.startswith("wave_suprema_"):
            worst = max(_number(v) for v in value.values())
            checks.append(Check(f"max wave ratio ({key.rsplit('_', 1)[-1]})",
                                "h^(j) <= C t^{j+1} e^{-nu0 t/2} ||I||", _fmt(worst), math.isfinite(worst)))

    floor = _number(picard.get("remainder_rate_floor"))
    remainder = picard.get("remainder_rate")
    checks.append(Check("remainder R H2 decay rate", "full minus kinetic part, reported only",
                        _rate_text(remainder), None))
    green_remainder = picard.get("green_remainder_rate")
    rate = _rate_value(green_remainder)
    checks.append(Check("Green remainder G_R H2 decay rate", f"at least {_fmt(floor)}",
                        _rate_text(green_remainder), None if rate is None else rate >= floor))
    kinetic = picard.get("kinetic_sup_rate")
    rate = _rate_value(kinetic)
    floor = _number(picard.get("kinetic_rate_floor"))
    checks.append(Check("kinetic part sup decay rate", f"at least {_fmt(floor)}", _rate_text(kinetic),
                        None if rate is None else rate >= floor))
    integral = _number(picard.get("source_integral_max"))
    checks.append(Check("h^(4) source integral", "bounded uniformly in t", _fmt(integral), math.isfinite(integral)))
    return checks


def mixture_checks(mixture: Dict[str, Any]) -> List[Check]:
    checks = []
    grad = _number(mixture.get("grad_nu_max"))
    checks.append(Check("max |grad nu|", "derivatives of nu are bounded", _fmt(grad), grad <= GRAD_NU_LIMIT))
    for eps_k, entry in sorted(mixture.get("by_eps_k", {}).items(), key=lambda kv: float(kv[0])):
        for j in (1, 2):
            ratio = _number(entry[f"sup_ratio_j{j}"])
            checks.append(Check(f"mixture ratio j={j} at |eps k|={eps_k}",
                                "M_j gains j derivatives in x", _fmt(ratio), math.isfinite(ratio)))
        cancel = entry["cancellation"]
        residual = _number(cancel["identity_residual"])
        tolerance = _number(cancel["identity_tolerance"])
        checks.append(Check(f"D_t identity residual at |eps k|={eps_k}", "exact cancellation identity",
                            _fmt(residual), residual <= tolerance))
        rate = cancel.get("rate")
        fit = {"rate": rate, "residual": cancel.get("rate_residual")} if rate is not None else None
        value = _rate_value(fit)
        checks.append(Check(f"D_t decay rate at |eps k|={eps_k}", f"at least nu0 - eta0 = {_fmt(cancel['rate_floor'])}",
                            _rate_text(fit), None if value is None else value >= _number(cancel["rate_floor"])))
    return checks


# =============================================================================
# RENDERING
# =============================================================================

def _table(checks: List[Check]) -> str:
    text = "| Quantity | Claim | Measured | Verdict |\n"
    text += "|---|---|---|---|\n"
    for c in checks:
        text += f"| {c.quantity} | {c.claim} | {c.value} | {c.verdict} |\n"
    return text + "\n"


def _ratio_table(picard: Dict[str, Any]) -> str:
    kinds = sorted(k for k in picard if k.startswith("wave_suprema_"))
    text = "| j | " + " | ".join(k.rsplit("_", 1)[-1] for k in kinds) + " |\n"
    text += "|---|" + "---|" * len(kinds) + "\n"
    for j in range(-1, 5):
        row = [_fmt(picard[k].get(str(j))) for k in kinds]
        text += f"| {j} | " + " | ".join(row) + " |\n"
    return text + "\n"


def render_report(artifacts: Dict[str, Any]) -> str:
    manifest, summary = artifacts["manifest"], artifacts["summary"]
    config = manifest.get("config", {})
    gap = summary.get("gap", {})

    report = "# Kinetic Lab Report\n\n"
    report += f"**Mode:** {manifest.get('mode', 'unknown')}\n\n"
    report += f"**Seed:** {manifest.get('seed')}\n\n"
    report += (f"**Grid:** R = {config.get('radius')}, n = {config.get('points_per_axis')}, "
               f"D = {config.get('cutoff_D')}, eps = {config.get('eps')}, k_max = {config.get('k_max')}\n\n")
    if gap:
        report += f"**Gap:** tau_est = {_fmt(gap.get('tau_est'))}, delta = {_fmt(gap.get('delta_used'))}\n\n"

    checks: List[Check] = []
    if "spectrum" in summary:
        found = spectrum_checks(summary["spectrum"], gap)
        report += "## Spectrum\n\n" + _table(found)
        checks += found
    if "evolve" in summary:
        evolve = summary["evolve"]
        found = evolve_checks(evolve, gap.get("tau_est"))
        report += "## Evolution\n\n" + _table(found)
        checks += found
        report += "### Regimes\n\n"
        for name, description in REGIMES.items():
            marker = "👉 " if evolve.get("regime") == name else ""
            report += f"- {marker}**{name}**: {description}\n"
        report += "\n"
    if "picard" in summary:
        found = picard_checks(summary["picard"])
        report += "## Kinetic Waves\n\n" + _table(found)
        report += "### Wave ratio suprema over t in (0, 10]\n\n" + _ratio_table(summary["picard"])
        checks += found
    if "mixture" in summary:
        found = mixture_checks(summary["mixture"])
        report += "## Mixture\n\n" + _table(found)
        checks += found

    passed = sum(1 for c in checks if c.passed)
    failed = sum(1 for c in checks if c.passed is False)
    report += "## Summary\n\n"
    report += f"- ✅ Passed: {passed}\n"
    report += f"- ❌ Failed: {failed}\n"
    report += f"- ➖ Not applicable: {len(checks) - passed - failed}\n"
    return report


def emit_report(artifact_dir: Union[str, Path], write: bool = True) -> str:
    """
    Render the report of a finished run.

    Args:
        artifact_dir: Directory written by run_scenario
        write: Also store the text as report.md in the directory

    Returns:
        Markdown report text

    Raises:
        IncompleteArtifactError: see load_artifacts
    """
    artifacts = load_artifacts(artifact_dir)
    text = render_report(artifacts)
    if write:
        target = Path(artifact_dir) / "report.md"
        target.write_text(text)
        logger.info(f"Report written to {target}")
    return text
