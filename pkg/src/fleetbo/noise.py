"""Per-run and per-device noise summaries.

A "run" is a replicate group: all weights measured at one parameter point on
one device in one repetition mode. Its (mean, std, variance) triple is the
feature vector used by the clustering stage; per-run stds also feed the
box-plot summaries, and pooled per-device weights feed the KDE reports.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fleetbo.domain import Dataset, ParameterPoint, RepetitionMode


class EmptyFeatureError(ValueError):
    """No replicate group had enough members to compute a feature vector."""


class DegenerateSampleError(ValueError):
    """Sample is constant, so the KDE bandwidth would be zero."""


@dataclass(frozen=True)
class RunFeature:
    """Weight statistics of one replicate group."""

    device_id: int
    point: ParameterPoint
    repetition_mode: RepetitionMode
    mu: float
    sigma: float
    var: float
    count: int

    def as_vector(self) -> np.ndarray:
        return np.array([self.mu, self.sigma, self.var])


@dataclass(frozen=True)
class FeatureMatrix:
    rows: tuple[RunFeature, ...]

    @property
    def n_init(self) -> int:
        return len(self.rows)

    def matrix(self) -> np.ndarray:
        """(n_init, 3) array of [mu, sigma, var] rows."""
        return np.array([r.as_vector() for r in self.rows])

    def device_labels(self) -> np.ndarray:
        return np.array([r.device_id for r in self.rows])


@dataclass(frozen=True)
class KdeSummary:
    device_id: int
    grid: tuple[float, ...]
    density: tuple[float, ...]
    bandwidth: float

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "grid": list(self.grid),
            "density": list(self.density),
            "bandwidth": self.bandwidth,
        }


@dataclass(frozen=True)
class BoxSummary:
    """Five-number summary of per-run sigma values for one (device, mode)."""

    device_id: int
    repetition_mode: RepetitionMode
    min: float
    q1: float
    median: float
    q3: float
    max: float
    whisker_rule: str = "range"

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "repetition_mode": self.repetition_mode.value,
            "min": self.min,
            "q1": self.q1,
            "median": self.median,
            "q3": self.q3,
            "max": self.max,
            "whisker_rule": self.whisker_rule,
        }


def run_features(dataset: Dataset) -> FeatureMatrix:
    """Group the dataset into replicate runs and compute (mu, sigma, var) rows.

    Groups with fewer than 2 replicates cannot yield a standard deviation and
    are skipped with a warning. Sigma uses the sample convention (ddof=1).
    """
    groups: dict[tuple, list[float]] = {}
    for rec in dataset.records:
        key = (rec.device_id, rec.point.flow, rec.point.layer_height, rec.repetition_mode)
        groups.setdefault(key, []).append(rec.measured_weight)

    rows = []
    skipped = 0
    for (device_id, flow, lh, mode), weights in groups.items():
        if len(weights) < 2:
            skipped += 1
            continue
        arr = np.asarray(weights)
        sigma = float(arr.std(ddof=1))
        rows.append(
            RunFeature(
                device_id=device_id,
                point=ParameterPoint(flow, lh),
                repetition_mode=mode,
                mu=float(arr.mean()),
                sigma=sigma,
                var=sigma**2,
                count=len(weights),
            )
        )
    if skipped:
        warnings.warn(f"skipped {skipped} group(s) with fewer than 2 replicates", stacklevel=2)
    if not rows:
        raise EmptyFeatureError("no qualifying replicate groups (need >= 2 replicates per group)")
    return FeatureMatrix(rows=tuple(rows))


def scott_bandwidth(sample: np.ndarray) -> float:
    """Scott's rule h = s * m**(-1/5) with the sample standard deviation."""
    return float(sample.std(ddof=1)) * len(sample) ** (-0.2)


def silverman_bandwidth(sample: np.ndarray) -> float:
    """Silverman's rule h = 0.9 * min(s, IQR/1.349) * m**(-1/5)."""
    s = float(sample.std(ddof=1))
    q1, q3 = np.percentile(sample, [25, 75])
    spread = min(s, (q3 - q1) / 1.349) or s
    return 0.9 * spread * len(sample) ** (-0.2)


_BANDWIDTH_RULES = {"scott": scott_bandwidth, "silverman": silverman_bandwidth}
_GRID_POINTS = 256


def kde(
    weights: Sequence[float] | np.ndarray,
    bandwidth_rule: str = "scott",
    device_id: int = 0,
) -> KdeSummary:
    """Gaussian-kernel density estimate on a 256-point grid.

    The grid spans [min - 3h, max + 3h] and the density is renormalized so
    its trapezoid integral over the grid is 1.
    """
    sample = np.asarray(weights, dtype=float)
    if sample.size < 2:
        raise ValueError(f"need at least 2 values for a KDE, got {sample.size}")
    if np.ptp(sample) == 0:
        raise DegenerateSampleError("constant sample has zero bandwidth")
    try:
        h = _BANDWIDTH_RULES[bandwidth_rule](sample)
    except KeyError:
        raise ValueError(f"unknown bandwidth rule {bandwidth_rule!r}") from None

    grid = np.linspace(sample.min() - 3 * h, sample.max() + 3 * h, _GRID_POINTS)
    z = (grid[:, None] - sample[None, :]) / h
    density = np.exp(-0.5 * z**2).sum(axis=1) / (sample.size * h * math.sqrt(2 * math.pi))
    density /= np.trapezoid(density, grid)
    return KdeSummary(
        device_id=device_id,
        grid=tuple(float(g) for g in grid),
        density=tuple(float(d) for d in density),
        bandwidth=h,
    )


def box_summaries(features: FeatureMatrix) -> list[BoxSummary]:
    """Five-number summary of run sigmas for every (device, mode) present.

    Quartiles use linear interpolation between order statistics.
    """
    if not features.rows:
        raise ValueError("feature matrix is empty")
    groups: dict[tuple[int, RepetitionMode], list[float]] = {}
    for row in features.rows:
        groups.setdefault((row.device_id, row.repetition_mode), []).append(row.sigma)
    out = []
    for (device_id, mode), sigmas in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
        arr = np.asarray(sigmas)
        q1, med, q3 = np.percentile(arr, [25, 50, 75])
        out.append(
            BoxSummary(
                device_id=device_id,
                repetition_mode=mode,
                min=float(arr.min()),
                q1=float(q1),
                median=float(med),
                q3=float(q3),
                max=float(arr.max()),
            )
        )
    return out


def write_kde_report(summaries: Sequence[KdeSummary], path: str | Path):
    Path(path).write_text(
        json.dumps([s.to_dict() for s in summaries], sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )


def write_box_report(summaries: Sequence[BoxSummary], path: str | Path):
    Path(path).write_text(
        json.dumps([s.to_dict() for s in summaries], sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
