"""
Scenario configuration: one flat YAML/JSON mapping of run parameters.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from kinetic_lab.errors import ScenarioError
from kinetic_lab.green import PROFILES
from kinetic_lab.velocity_grid import NormKind

logger = logging.getLogger(__name__)

MAX_SEED = 2 ** 64


def _default_branch_samples() -> List[float]:
    return [round(0.05 + 0.025 * i, 4) for i in range(11)]


def _default_gap_scan() -> List[float]:
    return [round(0.05 * i, 4) for i in range(1, 41)]


@dataclass
class Scenario:
    """Every tunable of a lab run; defaults are the desk-scale scenario."""
    radius: float = 5.5
    points_per_axis: int = 15
    cutoff_D: float = 0.1
    eps: float = 0.1
    k_max: int = 1
    delta_override: Optional[float] = None
    t_max: float = 10.0
    dt_output: float = 0.1
    dt_cascade: float = 0.01
    profile: str = "single-mode"
    k0: List[int] = field(default_factory=lambda: [1, 0, 0])
    zero_mean: bool = True
    seed: int = 0
    norm_kinds: List[str] = field(default_factory=lambda: ["L2", "SupWeighted(2)"])
    beta: float = 2.0
    eta0_fraction: float = 0.1
    eps_k_samples: List[float] = field(default_factory=_default_branch_samples)
    gap_scan: List[float] = field(default_factory=_default_gap_scan)
    fit_window: Optional[List[float]] = None
    size_cap: int = 9261
    threads: int = 1
    output_dir: str = "artifacts"
    mixture_eps_k: List[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    check_isotropy: bool = True

    @property
    def times(self) -> List[float]:
        steps = int(round(self.t_max / self.dt_output))
        return [round(i * self.dt_output, 12) for i in range(steps + 1)]

    @property
    def window(self) -> List[float]:
        if self.fit_window is not None:
            return [float(v) for v in self.fit_window]
        return [1.0, 0.8 * self.t_max]

    @property
    def norms(self) -> List[NormKind]:
        return [NormKind.parse(text) for text in self.norm_kinds]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def validate(self) -> "Scenario":
        """Collect every problem and raise one ScenarioError."""
        problems: List[str] = []
        for name in ("radius", "cutoff_D", "eps", "t_max", "dt_output", "dt_cascade", "beta"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not value > 0:
                problems.append(f"{name} must be a positive number (got {value!r})")
        if not isinstance(self.points_per_axis, int) or self.points_per_axis < 3 or self.points_per_axis % 2 == 0:
            problems.append(f"points_per_axis must be an odd integer >= 3 (got {self.points_per_axis!r})")
        if not isinstance(self.k_max, int) or self.k_max < 0:
            problems.append(f"k_max must be a non-negative integer (got {self.k_max!r})")
        if self.delta_override is not None and not self.delta_override > 0:
            problems.append(f"delta_override must be positive when given (got {self.delta_override!r})")
        if self.profile not in PROFILES:
            problems.append(f"profile must be one of {PROFILES} (got {self.profile!r})")
        if len(self.k0) != 3 or not all(isinstance(c, int) for c in self.k0):
            problems.append(f"k0 must be three integers (got {self.k0!r})")
        elif isinstance(self.k_max, int) and max(abs(c) for c in self.k0) > self.k_max:
            problems.append(f"k0={self.k0} lies outside k_max={self.k_max}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed < MAX_SEED:
            problems.append(f"seed must be an integer in [0, 2^64) (got {self.seed!r})")
        for text in self.norm_kinds:
            try:
                NormKind.parse(text)
            except ValueError as e:
                problems.append(str(e))
        if not 0 <= self.eta0_fraction < 1:
            problems.append(f"eta0_fraction must lie in [0, 1) (got {self.eta0_fraction!r})")
        for name in ("eps_k_samples", "gap_scan", "mixture_eps_k"):
            values = getattr(self, name)
            if not values or any(not v > 0 for v in values):
                problems.append(f"{name} must be a non-empty list of positive values")
        if len(self.eps_k_samples) < 4:
            problems.append("eps_k_samples needs at least 4 values for branch fits")
        if self.fit_window is not None:
            if len(self.fit_window) != 2 or not 0 <= self.fit_window[0] < self.fit_window[1]:
                problems.append(f"fit_window must be [t_lo, t_hi] with 0 <= t_lo < t_hi (got {self.fit_window!r})")
        if not isinstance(self.size_cap, int) or self.size_cap <= 0:
            problems.append(f"size_cap must be a positive integer (got {self.size_cap!r})")
        if not isinstance(self.threads, int) or self.threads < 1:
            problems.append(f"threads must be a positive integer (got {self.threads!r})")
        if problems:
            raise ScenarioError(problems)
        return self


def load_config(config_path: Optional[Path]) -> Dict[str, Any]:
    """
    Load a scenario mapping from YAML or JSON.

    Args:
        config_path: Path to config file (.yaml/.yml or .json)

    Returns:
        Configuration dictionary (empty when no path is given)

    Raises:
        ScenarioError: unreadable file or non-mapping content
    """
    if not config_path:
        return {}
    config_path = Path(config_path)
    if not config_path.exists():
        raise ScenarioError([f"config file {config_path} does not exist"])
    try:
        with open(config_path) as f:
            if config_path.suffix in (".yaml", ".yml"):
                data = yaml.safe_load(f)
            else:
                data = json.load(f)
    except (yaml.YAMLError, json.JSONDecodeError, OSError) as e:
        raise ScenarioError([f"could not parse {config_path}: {e}"]) from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ScenarioError([f"{config_path} must hold a flat mapping of scenario fields"])
    return data


def build_scenario(data: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> Scenario:
    """Scenario from a mapping plus non-None overrides, validated before use."""
    merged = dict(data)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in fields(Scenario)}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise ScenarioError([f"unknown scenario field {name!r}" for name in unknown])
    scenario = Scenario(**merged).validate()
    logger.debug(f"Scenario: {scenario}")
    return scenario


def load_scenario(config_path: Optional[Path], **overrides) -> Scenario:
    return build_scenario(load_config(config_path), overrides)
