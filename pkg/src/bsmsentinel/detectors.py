"""Online change-point detectors for scalar feature streams.

Two detectors are provided: a two-sided tabular CUSUM with an optional
one-sided lower-accumulator revision, and a two-component Gaussian mixture
whose abnormal-component posterior is thresholded per observation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import fmean, stdev
from typing import Sequence, Tuple

import numpy as np

SIGMA_FLOOR = 1e-6
VAR_FLOOR = 1e-9

FEATURE_MVS = "MVS"
FEATURE_MVT = "MVT"
FEATURE_DISTANCE = "DISTANCE"
FEATURES = (FEATURE_MVS, FEATURE_MVT, FEATURE_DISTANCE)

DETECTOR_CUSUM = "CUSUM"
DETECTOR_EM = "EM"


class CalibrationError(ValueError):
    """Not enough (or unusable) data to estimate in-control parameters."""


class DegenerateDataError(ValueError):
    """Sample set carries no spread; a two-component fit is meaningless."""


@dataclass(frozen=True)
class CusumParams:
    """In-control target and decision parameters for one monitored stream."""

    mu0: float
    sigma: float
    k: float
    h: float
    one_sided: bool = False
    reset_on_detect: bool = True

    def validate(self) -> None:
        if not self.sigma > 0:
            raise ValueError("sigma must be positive (apply the sigma floor)")
        if not self.h > 0:
            raise ValueError("h must be positive")
        if self.k < 0:
            raise ValueError("k must be non-negative")


@dataclass(frozen=True)
class CusumState:
    c_plus: float = 0.0
    c_minus: float = 0.0
    n_since_reset: int = 0


@dataclass(frozen=True)
class MixtureModel:
    """Two-component Gaussian mixture; component 0 is the normal regime."""

    w: Tuple[float, float]
    mu: Tuple[float, float]
    var: Tuple[float, float]

    def validate(self) -> None:
        if abs(self.w[0] + self.w[1] - 1.0) > 1e-12:
            raise ValueError("component weights must sum to 1")
        if min(self.w) < 0:
            raise ValueError("component weights must be non-negative")
        if min(self.var) < VAR_FLOOR:
            raise ValueError("component variances below the variance floor")


@dataclass(slots=True)
class Detection:
    """One per-(vehicle, window, feature, detector) decision."""

    vehicle_id: int
    window_start: float
    feature_name: str
    detector: str
    decision: str  # "D" or "ND"
    score: float


def cusum_step(
    state: CusumState, params: CusumParams, y: float
) -> Tuple[CusumState, str]:
    """Advance the tabular CUSUM recurrence by one observation.

    Returns the successor state and "D"/"ND". In one-sided mode the lower
    accumulator is held at zero. When ``reset_on_detect`` is set, a detection
    zeroes both accumulators in the returned state.
    """
    if not math.isfinite(y):
        raise ValueError(f"non-finite observation: {y!r}")
    c_plus = max(0.0, y - (params.mu0 + params.k) + state.c_plus)
    if params.one_sided:
        c_minus = 0.0
    else:
        c_minus = max(0.0, (params.mu0 - params.k) - y + state.c_minus)
    detected = c_plus > params.h or c_minus > params.h
    if detected and params.reset_on_detect:
        nxt = CusumState(0.0, 0.0, 0)
    else:
        nxt = CusumState(c_plus, c_minus, state.n_since_reset + 1)
    return nxt, ("D" if detected else "ND")


def cusum_score(state: CusumState, params: CusumParams, y: float) -> float:
    """max(C+, C-)/h for the accumulators the next step would produce."""
    c_plus = max(0.0, y - (params.mu0 + params.k) + state.c_plus)
    if params.one_sided:
        c_minus = 0.0
    else:
        c_minus = max(0.0, (params.mu0 - params.k) - y + state.c_minus)
    return max(c_plus, c_minus) / params.h


def cusum_calibrate(
    samples: Sequence[float],
    n_sigma: float = 5.0,
    k_rule: str = "half_sigma",
    sigma_floor: float = SIGMA_FLOOR,
    one_sided: bool = False,
    reset_on_detect: bool = True,
) -> CusumParams:
    """Estimate in-control parameters from an attack-free sample window.

    mu0 is the sample mean, sigma the floored sample standard deviation,
    h = n_sigma * sigma. ``k_rule`` is "half_sigma" (k = sigma/2, the
    standard tuning for one-sigma shifts) or "zero" (k = 0).
    """
    if len(samples) < 2:
        raise CalibrationError(f"need at least 2 samples, got {len(samples)}")
    for y in samples:
        if not math.isfinite(y):
            raise CalibrationError(f"non-finite calibration sample: {y!r}")
    mu0 = fmean(samples)
    sigma = max(stdev(samples), sigma_floor)
    if k_rule == "half_sigma":
        k = 0.5 * sigma
    elif k_rule == "zero":
        k = 0.0
    else:
        raise CalibrationError(f"unknown k_rule: {k_rule!r}")
    return CusumParams(
        mu0=mu0,
        sigma=sigma,
        k=k,
        h=n_sigma * sigma,
        one_sided=one_sided,
        reset_on_detect=reset_on_detect,
    )


def _log_normal(y: float, mu: float, var: float) -> float:
    return -0.5 * (math.log(2.0 * math.pi * var) + (y - mu) ** 2 / var)


def em_log_likelihood(model: MixtureModel, samples: np.ndarray) -> float:
    samples = np.asarray(samples, dtype=float)
    logp = np.empty((samples.size, 2))
    for j in range(2):
        logp[:, j] = (
            math.log(model.w[j]) if model.w[j] > 0 else -math.inf
        ) - 0.5 * (
            np.log(2.0 * np.pi * model.var[j])
            + (samples - model.mu[j]) ** 2 / model.var[j]
        )
    m = np.max(logp, axis=1)
    return float(np.sum(m + np.log(np.sum(np.exp(logp - m[:, None]), axis=1))))


def em_step(
    model: MixtureModel, samples: np.ndarray, var_floor: float = VAR_FLOOR
) -> MixtureModel:
    """One E+M update of the two-component mixture on ``samples``."""
    samples = np.asarray(samples, dtype=float)
    logp = np.empty((samples.size, 2))
    for j in range(2):
        logp[:, j] = (
            math.log(model.w[j]) if model.w[j] > 0 else -math.inf
        ) - 0.5 * (
            np.log(2.0 * np.pi * model.var[j])
            + (samples - model.mu[j]) ** 2 / model.var[j]
        )
    m = np.max(logp, axis=1)
    resp = np.exp(logp - m[:, None])
    resp /= resp.sum(axis=1, keepdims=True)

    n_j = resp.sum(axis=0)
    w = n_j / samples.size
    mu = [model.mu[j] if n_j[j] == 0 else float(resp[:, j] @ samples / n_j[j]) for j in range(2)]
    var = []
    for j in range(2):
        if n_j[j] == 0:
            var.append(max(model.var[j], var_floor))
        else:
            v = float(resp[:, j] @ (samples - mu[j]) ** 2 / n_j[j])
            var.append(max(v, var_floor))
    return MixtureModel(w=(float(w[0]), float(w[1])), mu=(mu[0], mu[1]), var=(var[0], var[1]))


def em_fit(
    samples: Sequence[float],
    init: MixtureModel,
    max_iter: int = 200,
    tol: float = 1e-8,
    var_floor: float = VAR_FLOOR,
) -> MixtureModel:
    """Fit the mixture by EM until the log-likelihood gain drops below tol."""
    arr = np.asarray(list(samples), dtype=float)
    if arr.size < 2:
        raise DegenerateDataError("need at least 2 samples")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite sample in EM input")
    if np.all(arr == arr[0]):
        raise DegenerateDataError("all samples identical; no mixture to fit")
    init.validate()

    model = init
    ll = em_log_likelihood(model, arr)
    for _ in range(max_iter):
        model = em_step(model, arr, var_floor=var_floor)
        new_ll = em_log_likelihood(model, arr)
        if new_ll - ll < tol:
            break
        ll = new_ll
    return model


def em_posterior(model: MixtureModel, y: float) -> float:
    """P(abnormal component | y), computed in log space (never NaN)."""
    if not math.isfinite(y):
        raise ValueError(f"non-finite observation: {y!r}")
    l0 = (-math.inf if model.w[0] == 0 else math.log(model.w[0])) + _log_normal(
        y, model.mu[0], model.var[0]
    )
    l1 = (-math.inf if model.w[1] == 0 else math.log(model.w[1])) + _log_normal(
        y, model.mu[1], model.var[1]
    )
    m = max(l0, l1)
    e0 = math.exp(l0 - m)
    e1 = math.exp(l1 - m)
    return e1 / (e0 + e1)


def em_posterior_many(model: MixtureModel, ys: np.ndarray) -> np.ndarray:
    """Vectorized ``em_posterior`` over an array of observations."""
    ys = np.asarray(ys, dtype=float)
    l0 = (
        (-np.inf if model.w[0] == 0 else math.log(model.w[0]))
        - 0.5 * (math.log(2.0 * math.pi * model.var[0]) + (ys - model.mu[0]) ** 2 / model.var[0])
    )
    l1 = (
        (-np.inf if model.w[1] == 0 else math.log(model.w[1]))
        - 0.5 * (math.log(2.0 * math.pi * model.var[1]) + (ys - model.mu[1]) ** 2 / model.var[1])
    )
    m = np.maximum(l0, l1)
    e0 = np.exp(l0 - m)
    e1 = np.exp(l1 - m)
    return e1 / (e0 + e1)


def em_detect_step(model: MixtureModel, y: float, threshold: float = 0.001) -> str:
    """"D" iff the abnormal-component posterior exceeds ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    return "D" if em_posterior(model, y) > threshold else "ND"


def mixture_from_stats(
    mean: float,
    var: float,
    offset_sigmas: float = 5.0,
    var_inflation: float = 10.0,
    abnormal_weight: float = 0.01,
    var_floor: float = VAR_FLOOR,
) -> MixtureModel:
    """Data-driven initial mixture: normal component at the calibration
    mean/variance, abnormal component offset upward with inflated variance
    and small prior weight."""
    v0 = max(var, var_floor)
    sigma = math.sqrt(v0)
    return MixtureModel(
        w=(1.0 - abnormal_weight, abnormal_weight),
        mu=(mean, mean + offset_sigmas * sigma),
        var=(v0, max(var_inflation * v0, var_floor)),
    )


def label_components(model: MixtureModel, reference_mean: float) -> MixtureModel:
    """Reorder components so the one nearer ``reference_mean`` sits at index 0.

    Ties break toward the lower original index, leaving the model unchanged.
    """
    d0 = abs(model.mu[0] - reference_mean)
    d1 = abs(model.mu[1] - reference_mean)
    if d1 < d0:
        return MixtureModel(
            w=(model.w[1], model.w[0]),
            mu=(model.mu[1], model.mu[0]),
            var=(model.var[1], model.var[0]),
        )
    return model


@dataclass
class DetectorConfig:
    """Tunable knobs for both detectors and the calibration stage."""

    n_sigma: float = 5.0
    k_rule: str = "half_sigma"
    reset_on_detect: bool = True
    one_sided: bool = False
    em_threshold: float = 0.001
    em_max_iter: int = 200
    em_tol: float = 1e-8
    calibration_window_seconds: float = 5.0
    # EM refinement iterations run on the calibration window after the
    # data-driven init; 0 scores with the initialized model as-is.
    em_fit_iters: int = 0
    # "warn" or "error" when the calibration interval contains attack labels
    calibration_policy: str = "warn"

    @classmethod
    def from_mapping(cls, values: dict) -> "DetectorConfig":
        cfg = cls()
        for key, raw in values.items():
            if key not in _DETECTOR_CONFIG_CASTS:
                raise ValueError(f"unknown detector config key: {key!r}")
            setattr(cfg, key, _DETECTOR_CONFIG_CASTS[key](raw))
        return cfg


def _parse_bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    text = str(raw).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


_DETECTOR_CONFIG_CASTS = {
    "n_sigma": float,
    "k_rule": str,
    "reset_on_detect": _parse_bool,
    "one_sided": _parse_bool,
    "em_threshold": float,
    "em_max_iter": int,
    "em_tol": float,
    "calibration_window_seconds": float,
    "em_fit_iters": int,
    "calibration_policy": str,
}

DETECTOR_CONFIG_KEYS = tuple(_DETECTOR_CONFIG_CASTS)
