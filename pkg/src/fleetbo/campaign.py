"""Campaign orchestration: initial design, noise phase, decision, BO loop.

The campaign mirrors the full workflow: measure an initial design on every
device, characterize the noise, decide between single-device and pooled
multi-device optimization, then iterate proposals through a measurement
oracle. Expected improvement drives the first ``ei_iterations`` BO
iterations; afterwards the acquisition switches to pure posterior-mean
exploitation. Everything is reproducible from (config, seed): all campaign
randomness flows from one generator owned by the state, and the state
round-trips bit-identically through its JSON checkpoint.

Metric snapshots are one-step-ahead scores: at each iteration the model's
pre-measurement prediction at the proposed point is paired with the realized
objective value, and MSE/RMSE/MAE are computed over all pairs accumulated so
far in that scope ("device_i", or "mean" for the batch average in
multi-device mode).
"""

from __future__ import annotations

import csv
import json
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from fleetbo.acquisition import (
    EI,
    POSTERIOR_MEAN,
    AcquisitionSpec,
    GaConfig,
    propose_batch,
    propose_single,
)
from fleetbo.clustering import association, choose_k, kmeans
from fleetbo.decision import Strategy, StrategyDecision, ThresholdConfig, decide, vote_pair
from fleetbo.divergence import pairwise_reports
from fleetbo.domain import (
    Dataset,
    ExperimentRecord,
    ParameterBounds,
    ParameterPoint,
    RepetitionMode,
    objective_delta_w,
)
from fleetbo.gp import (
    GpModel,
    HpBounds,
    augment_task,
    build_model,
    default_initial_hps,
    fit_model,
    model_from_dict,
    model_to_dict,
    posterior,
    relax_bounds_and_retrain,
    train,
)
from fleetbo.noise import FeatureMatrix, run_features

SCHEMA_VERSION = 1
MEAN_SCOPE = "mean"


class OracleError(RuntimeError):
    """A measurement could not be obtained."""


class OracleTimeout(OracleError):
    """The watch-file oracle gave up waiting for a row."""


class IndeterminateDecisionError(RuntimeError):
    """The decision was indeterminate and no fallback strategy was given."""


class PhaseError(RuntimeError):
    def __init__(self, phase: str, cause: Exception):
        super().__init__(f"{phase} phase failed: {cause}")
        self.phase = phase
        self.cause = cause


class MeasurementOracle(Protocol):
    def measure(
        self, device_id: int, point: ParameterPoint, mode: RepetitionMode, iteration: int
    ) -> tuple[float, float]:
        """Return (measured weight, expected weight) in grams."""
        ...


@dataclass(frozen=True)
class HistogramPolicy:
    bins: int = 20
    smoothing_eps: float = 1e-10

    def to_dict(self) -> dict:
        return {"bins": self.bins, "smoothing_eps": self.smoothing_eps}

    @classmethod
    def from_dict(cls, d: dict) -> "HistogramPolicy":
        return cls(bins=int(d.get("bins", 20)), smoothing_eps=float(d.get("smoothing_eps", 1e-10)))


@dataclass(frozen=True)
class CampaignConfig:
    bounds: ParameterBounds = field(default_factory=ParameterBounds)
    fleet_size: int = 3
    initial_sets: int = 25
    replicates: int = 3
    ei_iterations: int = 11
    max_iterations: int = 25
    ga: GaConfig = field(default_factory=GaConfig)
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    histogram: HistogramPolicy = field(default_factory=HistogramPolicy)
    seed: int = 0
    strategy_override: str | None = None

    def __post_init__(self):
        if self.initial_sets < 1:
            raise ValueError(f"initial_sets must be >= 1, got {self.initial_sets}")
        if self.ei_iterations > self.max_iterations:
            raise ValueError(
                f"ei_iterations ({self.ei_iterations}) must be <= max_iterations ({self.max_iterations})"
            )
        if self.strategy_override is not None and self.strategy_override not in (
            Strategy.SINGLE_DEVICE.value,
            Strategy.MULTI_DEVICE.value,
        ):
            raise ValueError(f"strategy_override must be single_device or multi_device")

    def to_dict(self) -> dict:
        return {
            "bounds": self.bounds.to_dict(),
            "fleet_size": self.fleet_size,
            "initial_sets": self.initial_sets,
            "replicates": self.replicates,
            "ei_iterations": self.ei_iterations,
            "max_iterations": self.max_iterations,
            "ga": self.ga.to_dict(),
            "thresholds": self.thresholds.to_dict(),
            "histogram": self.histogram.to_dict(),
            "seed": self.seed,
            "strategy_override": self.strategy_override,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        return cls(
            bounds=ParameterBounds.from_dict(d["bounds"]) if "bounds" in d else ParameterBounds(),
            fleet_size=int(d.get("fleet_size", 3)),
            initial_sets=int(d.get("initial_sets", 25)),
            replicates=int(d.get("replicates", 3)),
            ei_iterations=int(d.get("ei_iterations", 11)),
            max_iterations=int(d.get("max_iterations", 25)),
            ga=GaConfig.from_dict(d.get("ga", {})),
            thresholds=ThresholdConfig.from_dict(d["thresholds"]) if "thresholds" in d else ThresholdConfig(),
            histogram=HistogramPolicy.from_dict(d.get("histogram", {})),
            seed=int(d.get("seed", 0)),
            strategy_override=d.get("strategy_override"),
        )


@dataclass(frozen=True)
class MetricSnapshot:
    iteration: int
    scope: str
    mse: float
    rmse: float
    mae: float


def compute_metrics(
    predictions: Sequence[float],
    realized: Sequence[float],
    iteration: int = 0,
    scope: str = MEAN_SCOPE,
) -> MetricSnapshot:
    """MSE, RMSE, and MAE between predicted and realized objective values."""
    p = np.asarray(predictions, dtype=float)
    r = np.asarray(realized, dtype=float)
    if p.size == 0:
        raise ValueError("need at least one (prediction, realized) pair")
    if p.shape != r.shape:
        raise ValueError("predictions and realized must have equal length")
    err = p - r
    mse = float((err**2).mean())
    return MetricSnapshot(
        iteration=iteration,
        scope=scope,
        mse=mse,
        rmse=math.sqrt(mse),
        mae=float(np.abs(err).mean()),
    )


@dataclass(frozen=True)
class LogRow:
    iteration: int
    device_id: int
    point: ParameterPoint
    repetition_mode: RepetitionMode
    replicate_index: int
    measured_weight: float
    expected_weight: float
    predicted_dw: float
    acquisition: str


@dataclass(frozen=True)
class NoisePhaseResult:
    features: FeatureMatrix
    reports: list
    clustering: object
    association: object
    decision: StrategyDecision


def initial_design(config: CampaignConfig) -> list[ParameterPoint]:
    """Box midpoint plus (initial_sets - 1) distinct uniform points, seeded."""
    rng = np.random.default_rng([config.seed, 0])
    b = config.bounds
    points = [b.midpoint]
    seen = {(points[0].flow, points[0].layer_height)}
    while len(points) < config.initial_sets:
        p = ParameterPoint(
            flow=float(rng.uniform(b.flow_lb, b.flow_ub)),
            layer_height=float(rng.uniform(b.lh_lb, b.lh_ub)),
        )
        if (p.flow, p.layer_height) in seen:
            continue
        seen.add((p.flow, p.layer_height))
        points.append(p)
    return points


def run_initial_phase(config: CampaignConfig, oracle: MeasurementOracle) -> Dataset:
    """Measure the initial design on every device with the configured replicates."""
    dataset = Dataset(records=[], fleet_size=config.fleet_size, bounds=config.bounds)
    for point in initial_design(config):
        for device in range(config.fleet_size):
            for rep in range(config.replicates):
                measured, expected = oracle.measure(
                    device, point, RepetitionMode.SIMULTANEOUS, iteration=0
                )
                dataset.append(
                    ExperimentRecord(
                        device_id=device,
                        point=point,
                        repetition_mode=RepetitionMode.SIMULTANEOUS,
                        replicate_index=rep,
                        measured_weight=measured,
                        expected_weight=expected,
                        iteration=0,
                    )
                )
    return dataset


def run_noise_phase(dataset: Dataset, config: CampaignConfig) -> NoisePhaseResult:
    """Chain noise stats, divergence, clustering, and the strategy decision."""
    try:
        features = run_features(dataset)
    except Exception as e:
        raise PhaseError("noise-stats", e) from e
    try:
        samples = {d: dataset.device_weights(d) for d in range(config.fleet_size)}
        reports = pairwise_reports(
            samples,
            bin_count=config.histogram.bins,
            smoothing_eps=config.histogram.smoothing_eps,
        )
    except Exception as e:
        raise PhaseError("divergence", e) from e
    try:
        if config.fleet_size <= 5:
            k = config.fleet_size
        else:
            k = choose_k(features, k_max=min(10, features.n_init), seed=config.seed)
        clustering = kmeans(features, k, seed=config.seed)
        assoc = association(features, clustering.assignments)
    except Exception as e:
        raise PhaseError("clustering", e) from e
    try:
        reports = [r.with_votes(vote_pair(r, config.thresholds).votes) for r in reports]
        decision = decide(reports, assoc, config.thresholds)
    except Exception as e:
        raise PhaseError("decision", e) from e
    return NoisePhaseResult(
        features=features, reports=reports, clustering=clustering,
        association=assoc, decision=decision,
    )


@dataclass(frozen=True)
class CampaignState:
    """Full campaign state; immutable, updated by value, JSON round-trippable."""

    config: CampaignConfig
    phase: str  # design | noise | bo | done
    dataset: Dataset
    strategy: Strategy | None
    decision: dict | None
    models: dict[str, GpModel]
    iteration: int
    device_iterations: dict[int, int]
    snapshots: tuple[MetricSnapshot, ...]
    one_step: dict[str, dict[str, list]]
    log: tuple[LogRow, ...]
    partial_iterations: tuple[int, ...]
    rng_state: dict
    oracle_state: dict | None = None

    @classmethod
    def new(cls, config: CampaignConfig) -> "CampaignState":
        rng = np.random.default_rng([config.seed, 1])
        return cls(
            config=config,
            phase="design",
            dataset=Dataset(records=[], fleet_size=config.fleet_size, bounds=config.bounds),
            strategy=None,
            decision=None,
            models={},
            iteration=0,
            device_iterations={},
            snapshots=(),
            one_step={},
            log=(),
            partial_iterations=(),
            rng_state=rng.bit_generator.state,
        )

    def rng(self) -> np.random.Generator:
        g = np.random.default_rng()
        g.bit_generator.state = self.rng_state
        return g


def _draw_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(2**62))


def _scope(device_id: int) -> str:
    return f"device_{device_id}"


def _device_training_data(dataset: Dataset, device_id: int) -> tuple[np.ndarray, np.ndarray]:
    recs = dataset.for_device(device_id)
    x = np.array([[r.point.flow, r.point.layer_height] for r in recs])
    y = np.array([r.delta_w for r in recs])
    return x, y


def _pooled_training_data(dataset: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.array(
        [augment_task([r.point.flow, r.point.layer_height], r.device_id) for r in dataset.records]
    )
    y = np.array([r.delta_w for r in dataset.records])
    devices = np.array([r.device_id for r in dataset.records])
    return x, y, devices


def _train_single_model(
    x: np.ndarray, y: np.ndarray, bounds: HpBounds, init, seed: int
) -> GpModel:
    """Train, apply the bound-relaxation rule, and condition the model."""
    hps = train(x, y, bounds, init, seed=seed)
    model = build_model(x, y, hps, bounds)
    relaxed = relax_bounds_and_retrain(model, seed=seed)
    if relaxed.rounds > 0:
        model = build_model(x, y, relaxed.hps, relaxed.bounds)
    return model

def _init_models(state: CampaignState, rng: np.random.Generator) -> dict[str, GpModel]:
    config = state.config
    models: dict[str, GpModel] = {}
    if state.strategy is Strategy.SINGLE_DEVICE:
        for device in range(config.fleet_size):
            x, y = _device_training_data(state.dataset, device)
            models[_scope(device)] = _train_single_model(
                x, y, HpBounds.default(), default_initial_hps(), seed=_draw_seed(rng)
            )
    else:
        x, y, devices = _pooled_training_data(state.dataset)
        hps = train(
            x, y, HpBounds.default(task_mode=True, n_devices=config.fleet_size),
            default_initial_hps(task_mode=True, n_devices=config.fleet_size),
            task_mode=True, row_devices=devices, seed=_draw_seed(rng),
        )
        models["pooled"] = build_model(
            x, y, hps, HpBounds.default(task_mode=True, n_devices=config.fleet_size),
            task_mode=True, row_devices=devices,
        )
    return models


def _acq_spec(iteration: int, config: CampaignConfig, model: GpModel) -> AcquisitionSpec:
    if iteration <= config.ei_iterations:
        return AcquisitionSpec(kind=EI, f_best=model.incumbent)
    return AcquisitionSpec(kind=POSTERIOR_MEAN)


def _append_pair(one_step: dict, scope: str, iteration: int, predicted: float, realized: float) -> dict:
    new = {s: {k: list(v) for k, v in d.items()} for s, d in one_step.items()}
    entry = new.setdefault(scope, {"iterations": [], "predicted": [], "realized": []})
    entry["iterations"].append(iteration)
    entry["predicted"].append(predicted)
    entry["realized"].append(realized)
    return new


def step_single(state: CampaignState, device_id: int, oracle: MeasurementOracle) -> CampaignState:
    """One BO iteration on one device: propose, measure, retrain, score.

    The oracle call happens before any state is replaced, so a failing
    measurement leaves the input state untouched.
    """
    if state.strategy is not Strategy.SINGLE_DEVICE:
        raise ValueError("step_single requires the single-device strategy")
    config = state.config
    scope = _scope(device_id)
    model = state.models[scope]
    iteration = state.device_iterations.get(device_id, 0) + 1
    rng = state.rng()

    spec = _acq_spec(iteration, config, model)
    ga = GaConfig(**{**config.ga.to_dict(), "seed": _draw_seed(rng)})
    train_seed = _draw_seed(rng)
    point, _ = propose_single(model, config.bounds, spec, ga)
    mu, _ = posterior(model, point.as_array())
    predicted = float(mu)

    measured, expected = oracle.measure(device_id, point, RepetitionMode.SIMULTANEOUS, iteration)
    realized = objective_delta_w(measured, expected)

    record = ExperimentRecord(
        device_id=device_id,
        point=point,
        repetition_mode=RepetitionMode.SIMULTANEOUS,
        replicate_index=0,
        measured_weight=measured,
        expected_weight=expected,
        iteration=iteration,
    )
    dataset = Dataset(
        records=[*state.dataset.records, record],
        fleet_size=config.fleet_size,
        bounds=config.bounds,
    )

    x, y = _device_training_data(dataset, device_id)
    new_model = _train_single_model(x, y, model.bounds, model.hps, seed=train_seed)

    one_step = _append_pair(state.one_step, scope, iteration, predicted, realized)
    snapshot = compute_metrics(
        one_step[scope]["predicted"], one_step[scope]["realized"], iteration=iteration, scope=scope
    )
    log_row = LogRow(
        iteration=iteration,
        device_id=device_id,
        point=point,
        repetition_mode=RepetitionMode.SIMULTANEOUS,
        replicate_index=0,
        measured_weight=measured,
        expected_weight=expected,
        predicted_dw=predicted,
        acquisition=spec.kind,
    )
    return replace(
        state,
        dataset=dataset,
        models={**state.models, scope: new_model},
        device_iterations={**state.device_iterations, device_id: iteration},
        snapshots=(*state.snapshots, snapshot),
        one_step=one_step,
        log=(*state.log, log_row),
        rng_state=rng.bit_generator.state,
    )


def step_multi(state: CampaignState, oracle: MeasurementOracle) -> CampaignState:
    """One pooled BO iteration: batch proposal, measurements in priority
    order, a single retrain, and snapshots for the mean and every device.

    A mid-batch oracle failure keeps the completed measurements and marks
    the iteration partial; a timeout before any measurement propagates.
    """
    if state.strategy is not Strategy.MULTI_DEVICE:
        raise ValueError("step_multi requires the multi-device strategy")
    config = state.config
    model = state.models["pooled"]
    iteration = state.iteration + 1
    rng = state.rng()

    spec = _acq_spec(iteration, config, model)
    ga = GaConfig(**{**config.ga.to_dict(), "seed": _draw_seed(rng)})
    train_seed = _draw_seed(rng)
    proposal = propose_batch(
        model, config.bounds, spec, ga, devices=list(range(config.fleet_size))
    )

    new_records: list[ExperimentRecord] = []
    log_rows: list[LogRow] = []
    pairs: list[tuple[int, float, float]] = []  # (device, predicted, realized)
    partial = False
    for assignment in proposal.assignments:
        x_aug = augment_task(assignment.point.as_array(), assignment.device_id)
        mu, _ = posterior(model, x_aug)
        predicted = float(mu)
        try:
            measured, expected = oracle.measure(
                assignment.device_id, assignment.point, RepetitionMode.SIMULTANEOUS, iteration
            )
        except OracleTimeout:
            if not new_records:
                raise  # nothing to keep; let the caller checkpoint cleanly
            partial = True
            break  # waiting again for the remaining devices would time out too
        except OracleError:
            partial = True
            continue  # skip the failed device, keep executing the batch
        realized = objective_delta_w(measured, expected)
        new_records.append(
            ExperimentRecord(
                device_id=assignment.device_id,
                point=assignment.point,
                repetition_mode=RepetitionMode.SIMULTANEOUS,
                replicate_index=0,
                measured_weight=measured,
                expected_weight=expected,
                iteration=iteration,
            )
        )
        log_rows.append(
            LogRow(
                iteration=iteration,
                device_id=assignment.device_id,
                point=assignment.point,
                repetition_mode=RepetitionMode.SIMULTANEOUS,
                replicate_index=0,
                measured_weight=measured,
                expected_weight=expected,
                predicted_dw=predicted,
                acquisition=spec.kind,
            )
        )
        pairs.append((assignment.device_id, predicted, realized))

    if not new_records:
        raise OracleError(f"iteration {iteration}: no batch measurement completed")

    dataset = Dataset(
        records=[*state.dataset.records, *new_records],
        fleet_size=config.fleet_size,
        bounds=config.bounds,
    )
    x, y, devices = _pooled_training_data(dataset)
    hps = train(
        x, y, model.bounds, model.hps, task_mode=True, row_devices=devices, seed=train_seed
    )
    new_model = build_model(x, y, hps, model.bounds, task_mode=True, row_devices=devices)

    one_step = state.one_step
    snapshots = list(state.snapshots)
    for device_id, predicted, realized in pairs:
        scope = _scope(device_id)
        one_step = _append_pair(one_step, scope, iteration, predicted, realized)
        snapshots.append(
            compute_metrics(
                one_step[scope]["predicted"], one_step[scope]["realized"],
                iteration=iteration, scope=scope,
            )
        )
    mean_pred = float(np.mean([p for _, p, _ in pairs]))
    mean_real = float(np.mean([r for _, _, r in pairs]))
    one_step = _append_pair(one_step, MEAN_SCOPE, iteration, mean_pred, mean_real)
    snapshots.append(
        compute_metrics(
            one_step[MEAN_SCOPE]["predicted"], one_step[MEAN_SCOPE]["realized"],
            iteration=iteration, scope=MEAN_SCOPE,
        )
    )

    return replace(
        state,
        dataset=dataset,
        models={**state.models, "pooled": new_model},
        iteration=iteration,
        snapshots=tuple(snapshots),
        one_step=one_step,
        log=(*state.log, *log_rows),
        partial_iterations=(*state.partial_iterations, iteration) if partial else state.partial_iterations,
        rng_state=rng.bit_generator.state,
    )


class WatchFileOracle:
    """Polls an append-only CSV for measurement rows.

    Supports real-lab use: the campaign requests (device, iteration) and
    blocks until a matching unconsumed data row appears in the watched file,
    then returns its measured and expected weights. Rows are consumed in
    file order.
    """

    def __init__(self, path: str | Path, timeout_s: float = 600.0, poll_interval_s: float = 0.5):
        self.path = Path(path)
        self.timeout_s = timeout_s
        self.poll_interval_s = poll_interval_s
        self.consumed = 0

    def _rows(self) -> list[dict]:
        if not self.path.exists():
            return []
        rows = []
        with self.path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = None
            for raw in reader:
                if not raw or raw[0].lstrip().startswith("#"):
                    continue
                if header is None:
                    header = [c.strip() for c in raw]
                    continue
                rows.append(dict(zip(header, raw)))
        return rows

    def measure(
        self, device_id: int, point: ParameterPoint, mode: RepetitionMode, iteration: int
    ) -> tuple[float, float]:
        deadline = time.monotonic() + self.timeout_s
        while True:
            rows = self._rows()
            for i in range(self.consumed, len(rows)):
                row = rows[i]
                try:
                    if int(row["device_id"]) == device_id and int(row["iteration"]) == iteration:
                        self.consumed = i + 1
                        return float(row["measured_weight"]), float(row["expected_weight"])
                except (KeyError, ValueError):
                    continue
            if time.monotonic() >= deadline:
                raise OracleTimeout(
                    f"no row for device {device_id}, iteration {iteration} "
                    f"in {self.path} after {self.timeout_s:g}s"
                )
            time.sleep(self.poll_interval_s)

    def state_dict(self) -> dict:
        return {"consumed": self.consumed}

    def load_state_dict(self, state: dict):
        self.consumed = int(state.get("consumed", 0))


def state_to_dict(state: CampaignState) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "config": state.config.to_dict(),
        "phase": state.phase,
        "strategy": None if state.strategy is None else state.strategy.value,
        "decision": state.decision,
        "iteration": state.iteration,
        "device_iterations": {str(k): v for k, v in sorted(state.device_iterations.items())},
        "dataset": [
            [
                r.device_id,
                r.point.flow,
                r.point.layer_height,
                r.repetition_mode.value,
                r.replicate_index,
                r.measured_weight,
                r.expected_weight,
                r.iteration,
                r.timestamp,
            ]
            for r in state.dataset.records
        ],
        "models": {k: model_to_dict(m) for k, m in sorted(state.models.items())},
        "snapshots": [
            [s.iteration, s.scope, s.mse, s.rmse, s.mae] for s in state.snapshots
        ],
        "one_step": {k: state.one_step[k] for k in sorted(state.one_step)},
        "log": [
            [
                row.iteration,
                row.device_id,
                row.point.flow,
                row.point.layer_height,
                row.repetition_mode.value,
                row.replicate_index,
                row.measured_weight,
                row.expected_weight,
                row.predicted_dw,
                row.acquisition,
            ]
            for row in state.log
        ],
        "partial_iterations": list(state.partial_iterations),
        "rng_state": _jsonable_rng_state(state.rng_state),
        "oracle_state": state.oracle_state,
    }


def _jsonable_rng_state(state: dict) -> dict:
    return {
        "bit_generator": state["bit_generator"],
        "state": {k: int(v) for k, v in state["state"].items()},
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def state_from_dict(d: dict) -> CampaignState:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema version {d.get('schema_version')!r}")
    config = CampaignConfig.from_dict(d["config"])
    records = [
        ExperimentRecord(
            device_id=int(r[0]),
            point=ParameterPoint(float(r[1]), float(r[2])),
            repetition_mode=RepetitionMode(r[3]),
            replicate_index=int(r[4]),
            measured_weight=float(r[5]),
            expected_weight=float(r[6]),
            iteration=int(r[7]),
            timestamp=r[8],
        )
        for r in d["dataset"]
    ]
    return CampaignState(
        config=config,
        phase=d["phase"],
        dataset=Dataset(records=records, fleet_size=config.fleet_size, bounds=config.bounds),
        strategy=None if d["strategy"] is None else Strategy(d["strategy"]),
        decision=d["decision"],
        models={k: model_from_dict(v) for k, v in d["models"].items()},
        iteration=int(d["iteration"]),
        device_iterations={int(k): int(v) for k, v in d["device_iterations"].items()},
        snapshots=tuple(
            MetricSnapshot(iteration=int(s[0]), scope=s[1], mse=s[2], rmse=s[3], mae=s[4])
            for s in d["snapshots"]
        ),
        one_step={
            k: {kk: list(vv) for kk, vv in v.items()} for k, v in d["one_step"].items()
        },
        log=tuple(
            LogRow(
                iteration=int(r[0]),
                device_id=int(r[1]),
                point=ParameterPoint(float(r[2]), float(r[3])),
                repetition_mode=RepetitionMode(r[4]),
                replicate_index=int(r[5]),
                measured_weight=float(r[6]),
                expected_weight=float(r[7]),
                predicted_dw=float(r[8]),
                acquisition=r[9],
            )
            for r in d["log"]
        ),
        partial_iterations=tuple(int(i) for i in d["partial_iterations"]),
        rng_state=d["rng_state"],
        oracle_state=d.get("oracle_state"),
    )


def save_checkpoint(state: CampaignState, path: str | Path):
    Path(path).write_text(
        json.dumps(state_to_dict(state), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def load_checkpoint(path: str | Path) -> CampaignState:
    return state_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_iteration_log(state: CampaignState, path: str | Path):
    """Iteration log in the ingestion schema plus prediction and acquisition columns."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "device_id", "flow", "layer_height", "repetition_mode", "replicate_index",
                "measured_weight", "expected_weight", "iteration", "timestamp",
                "predicted_dw", "acquisition",
            ]
        )
        for row in state.log:
            writer.writerow(
                [
                    row.device_id,
                    repr(row.point.flow),
                    repr(row.point.layer_height),
                    row.repetition_mode.value,
                    row.replicate_index,
                    repr(row.measured_weight),
                    repr(row.expected_weight),
                    row.iteration,
                    "",
                    repr(row.predicted_dw),
                    row.acquisition,
                ]
            )


def write_report_series(state: CampaignState, out_dir: str | Path):
    """Plot-data CSVs: per-iteration objective series and metric series per scope."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    switch_after = state.config.ei_iterations

    with (out / "report_convergence.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["iteration", "scope", "measured_dw", "predicted_dw", "acquisition", "after_switch"]
        )
        for row in state.log:
            measured_dw = objective_delta_w(row.measured_weight, row.expected_weight)
            writer.writerow(
                [
                    row.iteration,
                    _scope(row.device_id),
                    repr(measured_dw),
                    repr(row.predicted_dw),
                    row.acquisition,
                    row.iteration > switch_after,
                ]
            )
        if MEAN_SCOPE in state.one_step:
            entry = state.one_step[MEAN_SCOPE]
            for it, pred, real in zip(entry["iterations"], entry["predicted"], entry["realized"]):
                writer.writerow(
                    [
                        it,
                        MEAN_SCOPE,
                        repr(real),
                        repr(pred),
                        EI if it <= switch_after else POSTERIOR_MEAN,
                        it > switch_after,
                    ]
                )

    with (out / "report_metrics.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "scope", "mse", "rmse", "mae", "after_switch"])
        for s in state.snapshots:
            writer.writerow(
                [s.iteration, s.scope, repr(s.mse), repr(s.rmse), repr(s.mae), s.iteration > switch_after]
            )


def _resolve_strategy(
    decision: StrategyDecision | None,
    config: CampaignConfig,
    fallback: str | None,
) -> Strategy:
    if config.strategy_override is not None:
        return Strategy(config.strategy_override)
    assert decision is not None
    if decision.strategy is not Strategy.INDETERMINATE:
        return decision.strategy
    if fallback is not None:
        warnings.warn(f"indeterminate decision, falling back to {fallback}", stacklevel=3)
        return Strategy(fallback)
    raise IndeterminateDecisionError(
        "decision is indeterminate; pass an explicit fallback strategy"
    )


def run_campaign(
    config: CampaignConfig,
    oracle: MeasurementOracle,
    out_dir: str | Path | None = None,
    fallback: str | None = None,
    resume: bool = False,
) -> CampaignState:
    """Run (or resume) the full campaign and return the final state.

    With ``out_dir`` set, a checkpoint is written after every phase and
    iteration, together with the iteration log; the final state also gets
    the report series and the decision document. On an oracle timeout the
    current state is checkpointed before the exception propagates.
    """
    out = Path(out_dir) if out_dir is not None else None
    checkpoint_path = out / "checkpoint.json" if out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    if resume:
        if checkpoint_path is None or not checkpoint_path.exists():
            raise FileNotFoundError("resume requested but no checkpoint found")
        state = load_checkpoint(checkpoint_path)
        if state.config.to_dict() != config.to_dict():
            raise ValueError("checkpoint config does not match the requested config")
        if state.oracle_state is not None and hasattr(oracle, "load_state_dict"):
            oracle.load_state_dict(state.oracle_state)
    else:
        state = CampaignState.new(config)

    def persist(st: CampaignState) -> CampaignState:
        if hasattr(oracle, "state_dict"):
            st = replace(st, oracle_state=oracle.state_dict())
        if checkpoint_path:
            save_checkpoint(st, checkpoint_path)
            write_iteration_log(st, out / "iteration_log.csv")
        return st

    try:
        if state.phase == "design":
            dataset = run_initial_phase(config, oracle)
            state = persist(replace(state, dataset=dataset, phase="noise"))

        if state.phase == "noise":
            if config.strategy_override is not None:
                warnings.warn(
                    f"strategy override {config.strategy_override!r}: skipping the decision phase",
                    stacklevel=2,
                )
                strategy, decision_doc = Strategy(config.strategy_override), None
            else:
                noise = run_noise_phase(state.dataset, config)
                strategy = _resolve_strategy(noise.decision, config, fallback)
                decision_doc = noise.decision.to_dict()
                if out:
                    from fleetbo.clustering import write_clustering_json
                    from fleetbo.decision import write_decision_json
                    from fleetbo.divergence import write_reports_json

                    write_reports_json(noise.reports, out / "divergence.json")
                    write_clustering_json(noise.clustering, noise.association, out / "clustering.json")
                    write_decision_json(noise.decision, out / "decision.json")
            state = replace(state, strategy=strategy, decision=decision_doc)
            rng = state.rng()
            models = _init_models(state, rng)
            state = persist(replace(state, models=models, phase="bo", rng_state=rng.bit_generator.state))

        while state.phase == "bo" and state.iteration < config.max_iterations:
            if state.strategy is Strategy.SINGLE_DEVICE:
                for device in range(config.fleet_size):
                    state = step_single(state, device, oracle)
                state = replace(state, iteration=state.iteration + 1)
            else:
                state = step_multi(state, oracle)
            state = persist(state)

        if state.phase == "bo":
            state = persist(replace(state, phase="done"))
        if out:
            write_report_series(state, out)
        return state
    except OracleTimeout:
        persist(state)
        raise
