"""Noise-aware Bayesian optimization for fleets of nominally identical devices.

The package characterizes measurement-noise heterogeneity across a device
fleet, decides between single-device and pooled multi-device optimization,
and runs the chosen GP-based campaign against real or simulated devices.
"""

from fleetbo.domain import (
    Dataset,
    ExperimentRecord,
    ParameterBounds,
    ParameterPoint,
    RepetitionMode,
    expected_weight,
    objective_delta_w,
)

__all__ = [
    "Dataset",
    "ExperimentRecord",
    "ParameterBounds",
    "ParameterPoint",
    "RepetitionMode",
    "expected_weight",
    "objective_delta_w",
]

__version__ = "0.1.0"
