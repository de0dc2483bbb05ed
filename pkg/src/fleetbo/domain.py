"""Experiment data model: parameter space, objective, CSV ingestion.

Measurements are print weights in grams. The optimization objective is the
negative relative weight deviation, so 0 is a perfect print and every
imperfect print scores below 0.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CSV_COLUMNS = (
    "device_id",
    "flow",
    "layer_height",
    "repetition_mode",
    "replicate_index",
    "measured_weight",
    "expected_weight",
    "iteration",
    "timestamp",
)


class RepetitionMode(str, Enum):
    """How replicates of one parameter set were printed."""

    SEQUENTIAL = "sequential"
    SIMULTANEOUS = "simultaneous"


class IngestError(ValueError):
    """A CSV row or file that violates the ingestion schema.

    ``row`` is the 1-based line number in the file (header is line 1);
    it is None for file-level problems.
    """

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class MissingColumnError(IngestError):
    pass


class RowParseError(IngestError):
    pass


class RowBoundsError(IngestError):
    pass


class RowDeviceError(IngestError):
    pass


@dataclass(frozen=True)
class ParameterBounds:
    """Box bounds for the two print parameters."""

    flow_lb: float = 1000.0
    flow_ub: float = 5000.0
    lh_lb: float = 0.2
    lh_ub: float = 0.6

    def __post_init__(self):
        if not (self.flow_lb < self.flow_ub):
            raise ValueError(f"flow bounds must satisfy lb < ub, got [{self.flow_lb}, {self.flow_ub}]")
        if not (self.lh_lb < self.lh_ub):
            raise ValueError(f"layer-height bounds must satisfy lb < ub, got [{self.lh_lb}, {self.lh_ub}]")

    @property
    def midpoint(self) -> "ParameterPoint":
        return ParameterPoint(
            flow=0.5 * (self.flow_lb + self.flow_ub),
            layer_height=0.5 * (self.lh_lb + self.lh_ub),
        )

    def contains(self, point: "ParameterPoint") -> bool:
        return (
            self.flow_lb <= point.flow <= self.flow_ub
            and self.lh_lb <= point.layer_height <= self.lh_ub
        )

    def as_box(self) -> np.ndarray:
        """(2, 2) array of [lb, ub] rows, flow first."""
        return np.array([[self.flow_lb, self.flow_ub], [self.lh_lb, self.lh_ub]])

    def to_dict(self) -> dict:
        return {
            "flow_lb": self.flow_lb,
            "flow_ub": self.flow_ub,
            "lh_lb": self.lh_lb,
            "lh_ub": self.lh_ub,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterBounds":
        return cls(**{k: float(d[k]) for k in ("flow_lb", "flow_ub", "lh_lb", "lh_ub")})


@dataclass(frozen=True)
class ParameterPoint:
    """One point in the (flow multiplier, layer height [mm]) design space."""

    flow: float
    layer_height: float

    def __post_init__(self):
        if not (math.isfinite(self.flow) and math.isfinite(self.layer_height)):
            raise ValueError(f"parameter point must be finite, got ({self.flow}, {self.layer_height})")

    def as_array(self) -> np.ndarray:
        return np.array([self.flow, self.layer_height])


@dataclass(frozen=True)
class ExperimentRecord:
    """One print-and-weigh event on one device."""

    device_id: int
    point: ParameterPoint
    repetition_mode: RepetitionMode
    replicate_index: int
    measured_weight: float
    expected_weight: float
    iteration: int = 0
    timestamp: str | None = None

    def __post_init__(self):
        if self.device_id < 0:
            raise ValueError(f"device_id must be >= 0, got {self.device_id}")
        if self.replicate_index < 0:
            raise ValueError(f"replicate_index must be >= 0, got {self.replicate_index}")
        if self.iteration < 0:
            raise ValueError(f"iteration must be >= 0, got {self.iteration}")
        for name, value in (("measured_weight", self.measured_weight), ("expected_weight", self.expected_weight)):
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and > 0, got {value}")

    @property
    def delta_w(self) -> float:
        return objective_delta_w(self.measured_weight, self.expected_weight)


@dataclass
class Dataset:
    """An ordered, validated collection of experiment records."""

    records: list[ExperimentRecord] = field(default_factory=list)
    fleet_size: int = 1
    bounds: ParameterBounds = field(default_factory=ParameterBounds)

    def __post_init__(self):
        if self.fleet_size < 1:
            raise ValueError(f"fleet_size must be >= 1, got {self.fleet_size}")
        for rec in self.records:
            self._check(rec)

    def _check(self, rec: ExperimentRecord):
        if rec.device_id >= self.fleet_size:
            raise ValueError(
                f"device_id {rec.device_id} out of range for fleet of {self.fleet_size}"
            )
        if not self.bounds.contains(rec.point):
            raise ValueError(
                f"point ({rec.point.flow}, {rec.point.layer_height}) outside bounds"
            )

    def append(self, rec: ExperimentRecord):
        self._check(rec)
        self.records.append(rec)

    def extend(self, recs: Iterable[ExperimentRecord]):
        for rec in recs:
            self.append(rec)

    def device_weights(self, device_id: int) -> np.ndarray:
        """All measured weights of one device, pooled over points and replicates."""
        return np.array([r.measured_weight for r in self.records if r.device_id == device_id])

    def for_device(self, device_id: int) -> list[ExperimentRecord]:
        return [r for r in self.records if r.device_id == device_id]

    def __len__(self) -> int:
        return len(self.records)


def objective_delta_w(measured: float, expected: float) -> float:
    """Negative relative weight deviation -|1 - measured/expected|.

    Equals 0 only for a perfect print; larger (closer to 0) is better.
    """
    if not (math.isfinite(expected) and expected > 0):
        raise ValueError(f"expected weight must be finite and > 0, got {expected}")
    if not (math.isfinite(measured) and measured >= 0):
        raise ValueError(f"measured weight must be finite and >= 0, got {measured}")
    return -abs(1.0 - measured / expected)


def expected_weight(volume_cm3: float, density_g_cm3: float) -> float:
    """Target part weight from CAD volume [cm^3] and material density [g/cm^3]."""
    if not (math.isfinite(volume_cm3) and volume_cm3 > 0):
        raise ValueError(f"volume must be finite and > 0, got {volume_cm3}")
    if not (math.isfinite(density_g_cm3) and density_g_cm3 > 0):
        raise ValueError(f"density must be finite and > 0, got {density_g_cm3}")
    return volume_cm3 * density_g_cm3


def _parse_float(value: str, column: str, row: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise RowParseError(f"cannot parse {column}={value!r} as a number", row) from None


def _parse_int(value: str, column: str, row: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise RowParseError(f"cannot parse {column}={value!r} as an integer", row) from None


def ingest_csv(path: str | Path, fleet_size: int, bounds: ParameterBounds | None = None) -> Dataset:
    """Read and validate an experiment CSV (see CSV_COLUMNS for the schema).

    Comment lines starting with '#' are skipped. Every invalid row raises an
    IngestError subclass carrying its 1-based line number. A file with a
    header but no data rows yields an empty Dataset and a warning.
    """
    bounds = bounds or ParameterBounds()
    path = Path(path)
    records: list[ExperimentRecord] = []
    with path.open(newline="", encoding="utf-8") as fh:
        line_no = 0
        header: list[str] | None = None
        reader = csv.reader(fh)
        for raw in reader:
            line_no += 1
            if not raw or raw[0].lstrip().startswith("#"):
                continue
            if header is None:
                header = [c.strip() for c in raw]
                missing = [c for c in CSV_COLUMNS if c not in header]
                if missing:
                    raise MissingColumnError(f"missing column(s): {', '.join(missing)}", row=line_no)
                idx = {c: header.index(c) for c in CSV_COLUMNS}
                continue
            if len(raw) < len(header):
                raise RowParseError(f"expected {len(header)} fields, got {len(raw)}", line_no)
            get = lambda c: raw[idx[c]].strip()  # noqa: E731

            device_id = _parse_int(get("device_id"), "device_id", line_no)
            if not (0 <= device_id < fleet_size):
                raise RowDeviceError(
                    f"device_id {device_id} not in [0, {fleet_size})", line_no
                )
            point = ParameterPoint(
                flow=_parse_float(get("flow"), "flow", line_no),
                layer_height=_parse_float(get("layer_height"), "layer_height", line_no),
            )
            if not bounds.contains(point):
                raise RowBoundsError(
                    f"point ({point.flow}, {point.layer_height}) outside bounds "
                    f"flow [{bounds.flow_lb}, {bounds.flow_ub}], "
                    f"layer_height [{bounds.lh_lb}, {bounds.lh_ub}]",
                    line_no,
                )
            mode_raw = get("repetition_mode").lower()
            try:
                mode = RepetitionMode(mode_raw)
            except ValueError:
                raise RowParseError(
                    f"repetition_mode must be 'sequential' or 'simultaneous', got {mode_raw!r}",
                    line_no,
                ) from None
            measured = _parse_float(get("measured_weight"), "measured_weight", line_no)
            expected = _parse_float(get("expected_weight"), "expected_weight", line_no)
            if measured <= 0 or expected <= 0:
                raise RowBoundsError(
                    f"weights must be > 0, got measured={measured}, expected={expected}", line_no
                )
            ts = get("timestamp")
            records.append(
                ExperimentRecord(
                    device_id=device_id,
                    point=point,
                    repetition_mode=mode,
                    replicate_index=_parse_int(get("replicate_index"), "replicate_index", line_no),
                    measured_weight=measured,
                    expected_weight=expected,
                    iteration=_parse_int(get("iteration"), "iteration", line_no),
                    timestamp=ts or None,
                )
            )
        if header is None:
            raise MissingColumnError("file has no header row")
    if not records:
        warnings.warn(f"{path}: no data rows, returning empty dataset", stacklevel=2)
    return Dataset(records=records, fleet_size=fleet_size, bounds=bounds)


def write_csv(dataset: Dataset, path: str | Path, device_names: Sequence[str] | None = None):
    """Write a dataset in the ingestion schema, with an id-mapping comment header."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        if device_names is None:
            device_names = [f"device {i}" for i in range(dataset.fleet_size)]
        for i, name in enumerate(device_names):
            fh.write(f"# device_id {i}: {name}\n")
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in dataset.records:
            writer.writerow(
                [
                    r.device_id,
                    repr(r.point.flow),
                    repr(r.point.layer_height),
                    r.repetition_mode.value,
                    r.replicate_index,
                    repr(r.measured_weight),
                    repr(r.expected_weight),
                    r.iteration,
                    r.timestamp or "",
                ]
            )
