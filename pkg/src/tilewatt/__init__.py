"""Tile-level analytical latency and power prediction for GPU AI kernels."""

__version__ = "0.1.0"

from .kernels import KernelGroupKey, OperatorSpec, OpKind, Precision, TileConfig  # noqa: E402
from .hwmodel import GpuConfig, PowerConfig, load_config  # noqa: E402
from .modules import Module, Phase, Utilization  # noqa: E402
from .traffic import TrafficBreakdown, kernel_traffic  # noqa: E402
from .timeline import PhaseTimeline, build_timeline  # noqa: E402
from .refine import CorrectionCoeffs, LatencyCorrector, correct_latency, fit_latency_coeffs  # noqa: E402
from .power import PowerCoeffs, PowerModel, dynamic_power, fit_power_coeffs, total_power  # noqa: E402
from .frontend import CARTClassifier, TileConfigPredictor, parse_kernel_name, predict_tile_config  # noqa: E402
from .db import MeasurementRecord, generate_synthetic_database, group_records, load_database, save_database  # noqa: E402
from .store import CoefficientStore, fit_store  # noqa: E402
from .e2e import (Workload, WorkloadOp, compare_variants, explore_arch, explore_dvfs,  # noqa: E402
                  load_workload, predict_workload)

__all__ = [
    "KernelGroupKey", "OperatorSpec", "OpKind", "Precision", "TileConfig", "GpuConfig", "PowerConfig",
    "load_config", "Module", "Phase", "Utilization", "TrafficBreakdown", "kernel_traffic", "PhaseTimeline",
    "build_timeline", "CorrectionCoeffs", "LatencyCorrector", "correct_latency", "fit_latency_coeffs",
    "PowerCoeffs", "PowerModel", "dynamic_power", "fit_power_coeffs", "total_power", "CARTClassifier",
    "TileConfigPredictor", "parse_kernel_name", "predict_tile_config", "MeasurementRecord",
    "generate_synthetic_database", "group_records", "load_database", "save_database", "CoefficientStore",
    "fit_store", "Workload", "WorkloadOp", "compare_variants", "explore_arch", "explore_dvfs",
    "load_workload", "predict_workload",
]
