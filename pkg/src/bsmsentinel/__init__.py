"""Streaming detection of DoS, impersonation, and false-information attacks
in connected-vehicle basic safety message traces."""

__version__ = "0.1.0"

from .detectors import (
    CusumParams,
    CusumState,
    Detection,
    DetectorConfig,
    MixtureModel,
    cusum_calibrate,
    cusum_step,
    em_detect_step,
    em_fit,
    em_posterior,
)
from .evaluate import MetricsReport, run_pipeline, score
from .simulate import (
    AttackSpec,
    LabeledTrace,
    ScenarioConfig,
    generate_baseline,
    inject_dos,
    inject_false_info,
    inject_impersonation,
)
from .trace import BsmRecord, FeatureSample, parse_trace, position_delta, windowize

__all__ = [
    "AttackSpec",
    "BsmRecord",
    "CusumParams",
    "CusumState",
    "Detection",
    "DetectorConfig",
    "FeatureSample",
    "LabeledTrace",
    "MetricsReport",
    "MixtureModel",
    "ScenarioConfig",
    "cusum_calibrate",
    "cusum_step",
    "em_detect_step",
    "em_fit",
    "em_posterior",
    "generate_baseline",
    "inject_dos",
    "inject_false_info",
    "inject_impersonation",
    "parse_trace",
    "position_delta",
    "run_pipeline",
    "score",
    "windowize",
]
