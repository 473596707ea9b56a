"""
Decay-rate fitting for time series and refinement ladders.

Models:
1. exp:       y ~ A exp(-rate t)
2. power_exp: y ~ A t^p exp(-rate t)
3. power:     y ~ A x^p (convergence orders and eps scaling)
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from kinetic_lab.errors import FitRejectedError

logger = logging.getLogger(__name__)

MIN_SAMPLES = 6
MODELS = ("exp", "power_exp")


@dataclass
class DecayFit:
    """Least-squares fit of log y against the chosen model."""
    model: str
    rate: float
    power: float
    amplitude: float
    residual: float
    samples: int

    def predict(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.amplitude * t ** self.power * np.exp(-self.rate * t)

    def to_dict(self) -> Dict[str, float]:
        return {
            "model": self.model,
            "rate": self.rate,
            "power": self.power,
            "amplitude": self.amplitude,
            "residual": self.residual,
            "samples": self.samples,
        }


def _usable(t: np.ndarray, y: np.ndarray, need_positive_t: bool) -> np.ndarray:
    mask = np.isfinite(t) & np.isfinite(y) & (y > 0)
    if need_positive_t:
        mask &= t > 0
    return mask


def fit_decay(
    times: Sequence[float],
    values: Sequence[float],
    model: str = "exp",
    window: Optional[Sequence[float]] = None,
) -> DecayFit:
    """
    Fit an exponential (optionally algebraically modulated) decay.

    Args:
        times: Sample times
        values: Positive observations (non-positive samples are dropped)
        model: "exp" or "power_exp"
        window: Optional (t_lo, t_hi) restricting the fitted samples

    Returns:
        DecayFit with the rate, power (0 for "exp"), amplitude and RMS log residual

    Raises:
        FitRejectedError: fewer than six usable samples
    """
    if model not in MODELS:
        raise FitRejectedError(f"unknown decay model {model!r}; expected one of {MODELS}")
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    mask = _usable(t, y, need_positive_t=(model == "power_exp"))
    if window is not None:
        lo, hi = window
        mask &= (t >= lo) & (t <= hi)
    if mask.sum() < MIN_SAMPLES:
        raise FitRejectedError(
            f"only {int(mask.sum())} usable samples for a {model} fit (need {MIN_SAMPLES})"
        )

    t, logy = t[mask], np.log(y[mask])
    if model == "exp":
        design = np.column_stack([np.ones_like(t), -t])
    else:
        design = np.column_stack([np.ones_like(t), np.log(t), -t])
    coeffs, *_ = np.linalg.lstsq(design, logy, rcond=None)
    residual = float(np.sqrt(np.mean((design @ coeffs - logy) ** 2)))

    power = float(coeffs[1]) if model == "power_exp" else 0.0
    fit = DecayFit(
        model=model,
        rate=float(coeffs[-1]),
        power=power,
        amplitude=float(np.exp(coeffs[0])),
        residual=residual,
        samples=int(mask.sum()),
    )
    logger.debug(f"{model} fit: rate={fit.rate:.5f} power={fit.power:.3f} residual={residual:.2e}")
    return fit


@dataclass
class PowerFit:
    exponent: float
    amplitude: float
    residual: float


def fit_power_law(x: Sequence[float], y: Sequence[float], min_samples: int = 2) -> PowerFit:
    """
    Slope of log y against log x.

    Raises:
        FitRejectedError: fewer than min_samples positive pairs
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    mask = np.isfinite(x) & np.isfinite(y) & (x > 0) & (y > 0)
    if mask.sum() < min_samples:
        raise FitRejectedError(f"only {int(mask.sum())} usable pairs for a power-law fit")
    lx, ly = np.log(x[mask]), np.log(y[mask])
    design = np.column_stack([np.ones_like(lx), lx])
    coeffs, *_ = np.linalg.lstsq(design, ly, rcond=None)
    residual = float(np.sqrt(np.mean((design @ coeffs - ly) ** 2)))
    return PowerFit(exponent=float(coeffs[1]), amplitude=float(np.exp(coeffs[0])), residual=residual)


@dataclass
class DecaySeries:
    """A measured time series with its (optional) decay fit."""
    times: np.ndarray
    values: np.ndarray
    fit: Optional[DecayFit] = None

    def fitted(self, model: str = "exp", window: Optional[Sequence[float]] = None) -> "DecaySeries":
        """Copy with a fit attached; a rejected fit leaves fit = None and is logged."""
        try:
            fit = fit_decay(self.times, self.values, model, window)
        except FitRejectedError as e:
            logger.warning(f"Decay fit rejected: {e}")
            fit = None
        return DecaySeries(self.times, self.values, fit)
