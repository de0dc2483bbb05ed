"""A virtual printer fleet with per-device bias, sensitivity, and noise.

Each device responds linearly in the normalized parameters around the
default box midpoint, with Gaussian relative noise. Every measurement draws
from a counter-based substream keyed by (fleet seed, device, counter), so a
device's measurement sequence does not depend on how calls to different
devices interleave.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fleetbo.domain import ParameterPoint, RepetitionMode

# normalization anchors: midpoint and half-width of the default parameter box
FLOW_CENTER, FLOW_HALF_WIDTH = 3000.0, 2000.0
LH_CENTER, LH_HALF_WIDTH = 0.4, 0.2


@dataclass(frozen=True)
class DeviceSimConfig:
    """Linear response surface and noise level of one simulated device."""

    device_id: int
    bias: float = 1.0  # multiplier on the expected weight at the midpoint
    flow_sensitivity: float = 0.0  # slope per unit of normalized flow
    lh_sensitivity: float = 0.0  # slope per unit of normalized layer height
    noise_rel: float = 0.0  # noise std as a fraction of the expected weight
    sequential_noise_factor: float = 1.5

    def __post_init__(self):
        if self.bias <= 0:
            raise ValueError(f"bias must be > 0, got {self.bias}")
        if self.noise_rel < 0:
            raise ValueError(f"noise_rel must be >= 0, got {self.noise_rel}")

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "bias": self.bias,
            "flow_sensitivity": self.flow_sensitivity,
            "lh_sensitivity": self.lh_sensitivity,
            "noise_rel": self.noise_rel,
            "sequential_noise_factor": self.sequential_noise_factor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceSimConfig":
        return cls(
            device_id=int(d["device_id"]),
            bias=float(d["bias"]),
            flow_sensitivity=float(d["flow_sensitivity"]),
            lh_sensitivity=float(d["lh_sensitivity"]),
            noise_rel=float(d["noise_rel"]),
            sequential_noise_factor=float(d.get("sequential_noise_factor", 1.5)),
        )


@dataclass(frozen=True)
class FleetSimConfig:
    devices: tuple[DeviceSimConfig, ...]
    expected_weight: float = 6.2  # grams, the CAD-derived target
    seed: int = 0

    def __post_init__(self):
        ids = [d.device_id for d in self.devices]
        if ids != list(range(len(ids))):
            raise ValueError(f"device ids must be dense 0..n-1, got {ids}")
        if self.expected_weight <= 0:
            raise ValueError(f"expected_weight must be > 0, got {self.expected_weight}")

    @property
    def n(self) -> int:
        return len(self.devices)

    def to_dict(self) -> dict:
        return {
            "devices": [d.to_dict() for d in self.devices],
            "expected_weight": self.expected_weight,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FleetSimConfig":
        return cls(
            devices=tuple(DeviceSimConfig.from_dict(x) for x in d["devices"]),
            expected_weight=float(d["expected_weight"]),
            seed=int(d["seed"]),
        )


def noiseless_response(fleet: FleetSimConfig, device_id: int, point: ParameterPoint) -> float:
    """Expected measured weight without noise, in grams."""
    dev = fleet.devices[device_id]
    u = (point.flow - FLOW_CENTER) / FLOW_HALF_WIDTH
    v = (point.layer_height - LH_CENTER) / LH_HALF_WIDTH
    return fleet.expected_weight * (dev.bias + dev.flow_sensitivity * u + dev.lh_sensitivity * v)


def simulate_measurement(
    fleet: FleetSimConfig,
    device_id: int,
    point: ParameterPoint,
    mode: RepetitionMode,
    counter: int,
) -> float:
    """One measured weight draw; ``counter`` indexes the device's substream."""
    if not (0 <= device_id < fleet.n):
        raise ValueError(f"device {device_id} not in fleet of {fleet.n}")
    dev = fleet.devices[device_id]
    mean = noiseless_response(fleet, device_id, point)
    sigma = dev.noise_rel * fleet.expected_weight
    if mode is RepetitionMode.SEQUENTIAL:
        sigma *= dev.sequential_noise_factor
    if sigma > 0:
        rng = np.random.default_rng([fleet.seed, device_id, counter])
        mean += sigma * rng.standard_normal()
    return max(mean, 0.0)


def preset_heterogeneous(seed: int = 0, expected_weight: float = 6.2) -> FleetSimConfig:
    """Three devices with distinct biases, sensitivities, and noise scales."""
    return FleetSimConfig(
        devices=(
            DeviceSimConfig(0, bias=0.95, flow_sensitivity=0.02, lh_sensitivity=0.01, noise_rel=0.005),
            DeviceSimConfig(1, bias=1.00, flow_sensitivity=0.00, lh_sensitivity=0.02, noise_rel=0.015),
            DeviceSimConfig(2, bias=1.08, flow_sensitivity=-0.03, lh_sensitivity=0.03, noise_rel=0.03),
        ),
        expected_weight=expected_weight,
        seed=seed,
    )


def preset_homogeneous(seed: int = 0, expected_weight: float = 6.2) -> FleetSimConfig:
    """Three statistically identical devices with low noise."""
    return FleetSimConfig(
        devices=tuple(
            DeviceSimConfig(i, bias=1.00, flow_sensitivity=0.01, lh_sensitivity=0.01, noise_rel=0.003)
            for i in range(3)
        ),
        expected_weight=expected_weight,
        seed=seed,
    )


PRESETS = {
    "heterogeneous": preset_heterogeneous,
    "homogeneous": preset_homogeneous,
}


def save_fleet(fleet: FleetSimConfig, path: str | Path):
    Path(path).write_text(json.dumps(fleet.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_fleet(path: str | Path) -> FleetSimConfig:
    return FleetSimConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class SimulatorOracle:
    """Measurement oracle backed by the virtual fleet.

    Keeps one draw counter per device so the sequence of draws is
    reproducible and independent of cross-device interleaving; the counters
    are part of the campaign checkpoint.
    """

    fleet: FleetSimConfig
    counters: dict[int, int] = field(default_factory=dict)

    def measure(
        self,
        device_id: int,
        point: ParameterPoint,
        mode: RepetitionMode,
        iteration: int,
    ) -> tuple[float, float]:
        counter = self.counters.get(device_id, 0)
        self.counters[device_id] = counter + 1
        measured = simulate_measurement(self.fleet, device_id, point, mode, counter)
        return measured, self.fleet.expected_weight

    def state_dict(self) -> dict:
        return {"counters": {str(k): v for k, v in self.counters.items()}}

    def load_state_dict(self, state: dict):
        self.counters = {int(k): int(v) for k, v in state.get("counters", {}).items()}
