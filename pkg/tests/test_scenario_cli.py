import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import yaml

from kinetic_lab.cli import EXIT_INVALID_CONFIG, EXIT_LAB_ERROR, EXIT_OK, main
from kinetic_lab.errors import IncompleteArtifactError, ScaleGuardError, ScenarioError
from kinetic_lab.green import decompose_green, evolve_mode, velocity_profile
from kinetic_lab.pipeline import (
    REGIMES,
    _rate,
    classify_regime,
    run_scenario,
    single_fluid_branch,
    to_jsonable,
    write_json,
)
from kinetic_lab.report import (
    Check,
    emit_report,
    evolve_checks,
    load_artifacts,
    picard_checks,
    render_report,
    spectrum_checks,
)
from kinetic_lab.scenario import Scenario, build_scenario, load_config, load_scenario
from kinetic_lab.spectrum import FLUID_BRANCHES, assemble_mode, full_spectrum

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"
SMOKE = CONFIG_DIR / "smoke.yaml"


# ===== scenario =====

def test_defaults_are_valid():
    scenario = Scenario().validate()
    assert scenario.radius == 5.5
    assert scenario.points_per_axis == 15
    assert scenario.window == [1.0, 8.0]
    assert len(scenario.times) == 101
    assert [k.label for k in scenario.norms] == ["L2", "sup2"]


def test_validation_collects_every_problem():
    with pytest.raises(ScenarioError) as info:
        Scenario(radius=-1.0, points_per_axis=8, seed=-3, profile="gaussian").validate()
    assert len(info.value.problems) == 4


@pytest.mark.parametrize("changes", [
    {"k0": [2, 0, 0]},
    {"eta0_fraction": 1.0},
    {"eps_k_samples": [0.1, 0.2]},
    {"gap_scan": [0.0, 0.5]},
    {"fit_window": [3.0, 1.0]},
    {"norm_kinds": ["W3"]},
    {"threads": 0},
    {"delta_override": -0.1},
])
def test_single_invalid_field(changes):
    with pytest.raises(ScenarioError):
        build_scenario(changes)


def test_unknown_field_is_rejected():
    with pytest.raises(ScenarioError) as info:
        build_scenario({"radius": 4.5, "colour": "red"})
    assert info.value.problems == ["unknown scenario field 'colour'"]


def test_load_yaml_with_overrides():
    scenario = load_scenario(SMOKE, seed=5, threads=None)
    assert scenario.seed == 5
    assert scenario.threads == 1
    assert scenario.points_per_axis == 9
    assert scenario.times[-1] == 6.0
    assert scenario.window == [1.0, 5.0]


def test_load_json(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps({"eps": 0.2, "k_max": 2}))
    scenario = load_scenario(path)
    assert (scenario.eps, scenario.k_max) == (0.2, 2)


def test_load_config_errors(tmp_path):
    assert load_config(None) == {}
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert load_config(empty) == {}
    listing = tmp_path / "list.yaml"
    listing.write_text(yaml.safe_dump([1, 2, 3]))
    with pytest.raises(ScenarioError):
        load_config(listing)
    with pytest.raises(ScenarioError):
        load_config(tmp_path / "missing.yaml")


# ===== serialization =====

def test_to_jsonable():
    data = {
        (1, 0, 0): np.complex128(1.5 - 2j),
        "nan": np.float64("nan"),
        "inf": float("inf"),
        "count": np.int64(3),
        "flag": np.bool_(True),
        "array": np.array([1.0, 2.0]),
    }
    out = to_jsonable(data)
    assert out["(1, 0, 0)"] == [1.5, -2.0]
    assert out["nan"] == "nan"
    assert out["inf"] == "inf"
    assert out["count"] == 3 and isinstance(out["count"], int)
    assert out["flag"] is True
    assert out["array"] == [1.0, 2.0]
    json.dumps(out)


@pytest.mark.parametrize("eps, delta, change, expected", [
    (0.3, 0.2, None, "short-wave"),
    (0.2, 0.2, 0.01, "short-wave"),
    (0.1, 0.2, None, "fluid"),
    (0.1, 0.2, 0.5, "fluid"),
    (0.1, 0.2, 0.05, "diffusive"),
])
def test_classify_regime(eps, delta, change, expected):
    assert classify_regime(eps, delta, change) == expected
    assert expected in REGIMES


def test_kinetic_growth_needs_the_power_exp_model():
    times = np.linspace(0.0, 6.0, 61)
    values = times ** 5 * np.exp(-0.4 * times)
    power = _rate(times, values, (1.0, 5.0), model="power_exp")
    assert power["model"] == "power_exp"
    assert power["rate"] == pytest.approx(0.4, abs=1e-8)
    assert _rate(times, values, (1.0, 5.0))["rate"] < 0.0


def test_single_fluid_branch(op, grid):
    m = assemble_mode(op, 0.05, (1, 0, 0))
    spectrum = full_spectrum(m, leading=FLUID_BRANCHES)
    times = np.linspace(0.0, 1.0, 5)
    pure = decompose_green(evolve_mode(m, spectrum.right_vectors[:, 0], times), spectrum, 0.2)
    mixed = decompose_green(evolve_mode(m, velocity_profile(grid), times), spectrum, 0.2)
    assert single_fluid_branch([pure, pure.conjugate()])
    assert not single_fluid_branch([mixed])
    assert not single_fluid_branch([])


# ===== report =====

def synthetic_artifacts(path: Path, complete: bool = True):
    manifest = {"mode": "all", "seed": 0, "complete": complete,
                "config": {"radius": 4.5, "points_per_axis": 9, "cutoff_D": 0.1, "eps": 0.1, "k_max": 1}}
    summary = {
        "gap": {"tau_est": 0.3, "delta_used": 0.15, "sixth_eigenvalue": -0.33},
        "evolve": {
            "completeness_residual": 0.0,
            "fluid_rate": {"rate": 0.02, "residual": 0.5},
            "orthogonal_rate": {"rate": 0.6, "residual": 0.01},
            "short_rate": None,
            "slowest_fluid_rate": 0.02,
            "fluid_data_single_branch": False,
            "regime": "fluid",
            "whole_solution_bound": {"sup_ratio": 1.2, "lambda_short": 0.5, "lambda_long": 0.1},
        },
        "picard": {
            "telescoping_residual": 1e-9,
            "wave_suprema_L2": {str(j): 0.5 for j in range(-1, 5)},
            "wave_suprema_sup2": {str(j): 0.7 for j in range(-1, 5)},
            "remainder_rate": {"rate": 0.4, "residual": 0.02},
            "green_remainder_rate": {"rate": 0.2, "residual": 0.02},
            "remainder_rate_floor": 0.24,
            "kinetic_sup_rate": None,
            "kinetic_rate_floor": 0.32,
            "source_integral_max": 0.01,
        },
    }
    path.mkdir(parents=True, exist_ok=True)
    write_json(manifest, path / "manifest.json")
    write_json(summary, path / "summary.json")
    return path


def test_report_on_synthetic_artifacts(tmp_path):
    text = render_report(load_artifacts(synthetic_artifacts(tmp_path / "run")))
    assert "👉 **fluid**" in text
    assert "**short-wave**" in text
    assert "withheld (residual 0.5)" in text
    assert "| 4 | 0.5 | 0.7 |" in text
    assert "## Summary" in text
    assert "## Mixture" not in text


def test_emit_report_writes_file(tmp_path):
    run = synthetic_artifacts(tmp_path / "run")
    text = emit_report(run)
    assert (run / "report.md").read_text() == text


def test_incomplete_artifacts(tmp_path):
    with pytest.raises(IncompleteArtifactError):
        load_artifacts(tmp_path / "missing")
    with pytest.raises(IncompleteArtifactError):
        load_artifacts(tmp_path)
    with pytest.raises(IncompleteArtifactError):
        load_artifacts(synthetic_artifacts(tmp_path / "partial", complete=False))


def test_check_verdicts():
    assert Check("q", "c", "1", True).verdict == "✅ pass"
    assert Check("q", "c", "1", False).verdict == "❌ fail"
    assert Check("q", "c", "1", None).verdict == "➖ n/a"


def _row(checks, quantity):
    return next(c for c in checks if c.quantity == quantity)


def test_green_remainder_is_graded_and_full_remainder_is_informational():
    picard = {
        "telescoping_residual": 0.0,
        "remainder_rate": {"rate": -3.78, "residual": 0.05},
        "green_remainder_rate": {"rate": 0.199, "residual": 0.02},
        "remainder_rate_floor": 0.319,
        "kinetic_sup_rate": None,
        "kinetic_rate_floor": 0.32,
        "source_integral_max": 0.01,
    }
    checks = picard_checks(picard)
    assert _row(checks, "remainder R H2 decay rate").passed is None
    assert _row(checks, "Green remainder G_R H2 decay rate").passed is False

    picard["green_remainder_rate"] = {"rate": 0.35, "residual": 0.02}
    assert _row(picard_checks(picard), "Green remainder G_R H2 decay rate").passed is True


def test_fluid_rate_is_graded_only_for_single_branch_data():
    evolve = {
        "completeness_residual": 0.0,
        "fluid_rate": {"rate": 0.05, "residual": 0.01},
        "slowest_fluid_rate": 0.02,
        "fluid_data_single_branch": False,
    }
    row = _row(evolve_checks(evolve, 0.3), "fluid decay rate")
    assert row.passed is None
    assert "reported only" in row.claim

    evolve["fluid_data_single_branch"] = True
    assert _row(evolve_checks(evolve, 0.3), "fluid decay rate").passed is False
    evolve["fluid_rate"] = {"rate": 0.0201, "residual": 0.01}
    assert _row(evolve_checks(evolve, 0.3), "fluid decay rate").passed is True


def test_rejected_branch_fits_are_reported():
    spectrum = {
        "symmetry_residual": 0.0,
        "max_rayleigh_off_invariants": 0.0,
        "branch_fits": [{"branch": 0, "a1": 0.0, "a2": 0.4, "a3": 0.0, "a4": 0.0, "fit_residual": 2e-4}],
        "branch_fit_rejections": {1: "residual too large", 2: "residual too large"},
        "branch_fit_window": [0.05, 0.3],
    }
    checks = spectrum_checks(spectrum, {"sixth_eigenvalue": -0.33})
    rejected = _row(checks, "branch fits")
    assert rejected.passed is False
    assert rejected.value.startswith("2 of 5")
    assert _row(checks, "max branch fit residual").passed is True
    assert _row(checks, "a1 pattern").passed is None


# ===== CLI =====

def test_cli_invalid_config_writes_nothing(tmp_path):
    config = tmp_path / "bad.yaml"
    config.write_text(yaml.safe_dump({"points_per_axis": 8}))
    out = tmp_path / "out"
    assert main(["spectrum", "--config", str(config), "--out", str(out)]) == EXIT_INVALID_CONFIG
    assert not out.exists()


def test_cli_report_on_empty_directory(tmp_path):
    assert main(["report", str(tmp_path)]) == EXIT_LAB_ERROR


def test_cli_report(tmp_path):
    run = synthetic_artifacts(tmp_path / "run")
    assert main(["report", str(run)]) == EXIT_OK
    assert (run / "report.md").exists()


def test_size_cap_is_checked_before_writing(tmp_path):
    scenario = build_scenario({"radius": 4.5, "points_per_axis": 9, "size_cap": 100})
    with pytest.raises(ScaleGuardError):
        run_scenario(scenario, "spectrum", tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_unknown_mode(tmp_path):
    with pytest.raises(ValueError):
        run_scenario(Scenario(), "everything", tmp_path)


# ===== end to end =====

@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    scenario = load_scenario(SMOKE, delta_override=0.15)
    return run_scenario(scenario, "all", tmp_path_factory.mktemp("smoke"))


@pytest.mark.slow
def test_smoke_run_artifacts(smoke_run):
    manifest = json.loads((smoke_run / "manifest.json").read_text())
    assert manifest["complete"] is True
    assert manifest["stages"] == ["spectrum", "evolve", "picard", "mixture"]
    assert set(manifest["wall_times"]) >= {"assemble", "spectrum", "evolve", "picard", "mixture"}

    summary = json.loads((smoke_run / "summary.json").read_text())
    assert summary["gap"]["delta_used"] == 0.15
    assert summary["evolve"]["regime"] in REGIMES
    assert summary["evolve"]["completeness_residual"] < 1e-6
    assert summary["picard"]["telescoping_residual"] < 1e-6
    assert summary["spectrum"]["branch_fit_window"] == [0.05, 0.3]
    assert summary["evolve"]["fluid_data_single_branch"] is False
    assert summary["picard"]["kinetic_sup_rate"]["model"] == "power_exp"
    assert summary["picard"]["green_remainder_rate"]["model"] == "power_exp"

    evolve = pd.read_csv(smoke_run / "evolve.csv")
    assert list(evolve.columns[:3]) == ["t", "full_L2", "fluid_L2"]
    assert evolve["completeness"].max() < 1e-6
    picard = pd.read_csv(smoke_run / "picard.csv")
    assert list(picard.columns) == ["t", "kx", "ky", "kz", "j", "norm_L2", "norm_sup2", "ratio_L2", "ratio_sup2"]
    assert set(picard["j"]) == set(range(-1, 5))
    mixture = pd.read_csv(smoke_run / "mixture.csv")
    assert set(mixture["j"]) == {1, 2}
    for name in ("branches.csv", "gap_scan.csv"):
        assert (smoke_run / name).exists() or "scan_error" in summary["gap"]


@pytest.mark.slow
def test_smoke_run_report(smoke_run):
    text = emit_report(smoke_run)
    assert text.startswith("# Kinetic Lab Report")
    assert "## Mixture" in text


@pytest.mark.slow
def test_runs_are_deterministic(tmp_path):
    scenario = load_scenario(SMOKE, delta_override=0.15)
    first = run_scenario(scenario, "evolve", tmp_path / "a")
    second = run_scenario(scenario, "evolve", tmp_path / "b")
    assert (first / "evolve.csv").read_bytes() == (second / "evolve.csv").read_bytes()
    assert (first / "summary.json").read_bytes() == (second / "summary.json").read_bytes()
