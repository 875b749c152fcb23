"""Calibrated dynamic flexible job-shop instances: generation, calibration,
simulation and evaluation."""

from .generator import generate_instance, generate_plan
from .metrics import ObservedMetrics, observed_metrics
from .model import (
    DistributionParams,
    DynamicScenario,
    EventStream,
    InputConfig,
    PlantSpec,
    TargetMetrics,
    derive_seed,
    derive_stream,
    validate_config,
    validate_stream,
)
from .serialize import dumps, load, loads, save
from .ssi import ssi

__version__ = "0.1.0"

__all__ = [
    "DistributionParams",
    "DynamicScenario",
    "EventStream",
    "InputConfig",
    "ObservedMetrics",
    "PlantSpec",
    "TargetMetrics",
    "derive_seed",
    "derive_stream",
    "dumps",
    "generate_instance",
    "generate_plan",
    "load",
    "loads",
    "observed_metrics",
    "save",
    "ssi",
    "validate_config",
    "validate_stream",
]
