"""Acquisition functions and their genetic-algorithm maximization.

Expected improvement (maximization convention) drives exploration; the pure
posterior mean drives exploitation after the campaign's acquisition switch.
Both are globally maximized over the parameter box by a real-coded GA. Batch
proposals for multi-task models run a greedy fantasy loop: the best
(device, point) is assigned, a pseudo-observation at the model's predicted
value is appended, and the search repeats over the remaining devices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from fleetbo.domain import ParameterBounds, ParameterPoint
from fleetbo.gp import GpModel, augment_task, extend_with_fantasy, posterior

EI = "ei"
POSTERIOR_MEAN = "posterior_mean"


@dataclass(frozen=True)
class AcquisitionSpec:
    kind: str
    f_best: float | None = None

    def __post_init__(self):
        if self.kind not in (EI, POSTERIOR_MEAN):
            raise ValueError(f"kind must be '{EI}' or '{POSTERIOR_MEAN}', got {self.kind!r}")
        if self.kind == EI and (self.f_best is None or not math.isfinite(self.f_best)):
            raise ValueError("expected improvement requires a finite incumbent f_best")


@dataclass(frozen=True)
class GaConfig:
    population: int = 50
    generations: int = 100
    tournament: int = 3
    crossover_rate: float = 0.9
    mutation_rate: float = 0.2
    mutation_scale: float = 0.1  # Gaussian sigma as a fraction of box width
    elitism: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ValueError(f"population must be >= 2, got {self.population}")
        for name in ("crossover_rate", "mutation_rate"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    def to_dict(self) -> dict:
        return {
            "population": self.population,
            "generations": self.generations,
            "tournament": self.tournament,
            "crossover_rate": self.crossover_rate,
            "mutation_rate": self.mutation_rate,
            "mutation_scale": self.mutation_scale,
            "elitism": self.elitism,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaConfig":
        return cls(
            population=int(d.get("population", 50)),
            generations=int(d.get("generations", 100)),
            tournament=int(d.get("tournament", 3)),
            crossover_rate=float(d.get("crossover_rate", 0.9)),
            mutation_rate=float(d.get("mutation_rate", 0.2)),
            mutation_scale=float(d.get("mutation_scale", 0.1)),
            elitism=int(d.get("elitism", 2)),
            seed=int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class BatchAssignment:
    device_id: int
    point: ParameterPoint
    acquisition_value: float
    fantasy_value: float


@dataclass(frozen=True)
class BatchProposal:
    """Per-device proposals, ordered by descending acquisition value."""

    assignments: tuple[BatchAssignment, ...]

    def __post_init__(self):
        devices = [a.device_id for a in self.assignments]
        if len(devices) != len(set(devices)):
            raise ValueError("each device must appear exactly once in a batch")


def _phi(z: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def expected_improvement(mu, sigma, f_best: float):
    """Closed-form EI for maximization: (mu - f)Phi(z) + sigma phi(z).

    Degenerates to max(mu - f, 0) at sigma = 0. Accepts scalars or arrays.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if (sigma < 0).any():
        raise ValueError("sigma must be >= 0")
    improve = mu - f_best
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, improve / np.where(sigma > 0, sigma, 1.0), 0.0)
    ei = np.where(sigma > 0, improve * ndtr(z) + sigma * _phi(z), np.maximum(improve, 0.0))
    if ei.ndim == 0:
        return float(ei)
    return ei


def posterior_mean_acq(model: GpModel, x: np.ndarray):
    """Pure-exploitation acquisition: the posterior mean itself."""
    mu, _ = posterior(model, x)
    return mu


def _acquisition_values(model: GpModel, spec: AcquisitionSpec, x: np.ndarray) -> np.ndarray:
    mu, var = posterior(model, x)
    if spec.kind == POSTERIOR_MEAN:
        return np.asarray(mu)
    sigma = np.sqrt(np.maximum(var, 0.0))
    return np.asarray(expected_improvement(mu, sigma, spec.f_best))


def ga_maximize(
    objective: Callable[[np.ndarray], float | np.ndarray],
    box: np.ndarray | Sequence[Sequence[float]],
    config: GaConfig | None = None,
    vectorized: bool = False,
) -> tuple[np.ndarray, float]:
    """Maximize a black-box objective over a box with a real-coded GA.

    Tournament selection, uniform crossover, per-gene Gaussian mutation
    clamped to the box, elitism, and best-ever tracking. Individuals where
    the objective is non-finite get fitness -inf instead of crashing the
    run. Deterministic for a fixed config seed; set ``vectorized`` when the
    objective evaluates a (q, d) batch and returns (q,) values.
    """
    config = config or GaConfig()
    box = np.asarray(box, dtype=float)
    lb, ub = box[:, 0], box[:, 1]
    if (lb >= ub).any():
        raise ValueError("box bounds must satisfy lb < ub in every dimension")
    width = ub - lb
    d = box.shape[0]
    rng = np.random.default_rng(config.seed)

    def evaluate(pop: np.ndarray) -> np.ndarray:
        if vectorized:
            values = np.asarray(objective(pop), dtype=float)
        else:
            values = np.array([float(objective(ind)) for ind in pop])
        return np.where(np.isfinite(values), values, -np.inf)

    pop = rng.uniform(lb, ub, size=(config.population, d))
    fitness = evaluate(pop)
    best_idx = int(fitness.argmax())
    best_x, best_f = pop[best_idx].copy(), float(fitness[best_idx])

    for _ in range(config.generations):
        order = np.argsort(-fitness, kind="stable")
        elites = pop[order[: config.elitism]].copy()
        n_children = config.population - config.elitism

        # tournament selection of two parent pools
        idx_a = rng.integers(config.population, size=(n_children, config.tournament))
        idx_b = rng.integers(config.population, size=(n_children, config.tournament))
        parents_a = pop[idx_a[np.arange(n_children), fitness[idx_a].argmax(axis=1)]]
        parents_b = pop[idx_b[np.arange(n_children), fitness[idx_b].argmax(axis=1)]]

        cross = rng.random(n_children) < config.crossover_rate
        gene_from_b = rng.random((n_children, d)) < 0.5
        children = np.where(cross[:, None] & gene_from_b, parents_b, parents_a)

        mutate = rng.random((n_children, d)) < config.mutation_rate
        noise = rng.normal(0.0, config.mutation_scale * width, size=(n_children, d))
        children = np.clip(children + mutate * noise, lb, ub)

        pop = np.vstack([elites, children])
        fitness = evaluate(pop)
        gen_best = int(fitness.argmax())
        if fitness[gen_best] > best_f:
            best_x, best_f = pop[gen_best].copy(), float(fitness[gen_best])

    return best_x, best_f


def propose_single(
    model: GpModel,
    bounds: ParameterBounds,
    spec: AcquisitionSpec,
    ga: GaConfig | None = None,
) -> tuple[ParameterPoint, float]:
    """Maximize the acquisition over the 2-D parameter box."""
    ga = ga or GaConfig()

    def acq(x: np.ndarray) -> np.ndarray:
        return _acquisition_values(model, spec, x)

    x, value = ga_maximize(acq, bounds.as_box(), ga, vectorized=True)
    return ParameterPoint(flow=float(x[0]), layer_height=float(x[1])), value


def propose_batch(
    model: GpModel,
    bounds: ParameterBounds,
    spec: AcquisitionSpec,
    ga: GaConfig | None = None,
    devices: Sequence[int] | None = None,
) -> BatchProposal:
    """Greedy fantasy batch proposal over (point, device) for a multi-task model.

    Each round maximizes the acquisition separately per unassigned device
    (the task coordinate is enumerated, not relaxed), assigns the winner,
    and extends the model with a pseudo-observation at its predicted value.
    Hyperparameters stay frozen throughout the batch.
    """
    if not model.task_mode:
        raise ValueError("batch proposal requires a multi-task model")
    ga = ga or GaConfig()
    if devices is None:
        devices = sorted({int(v) for v in model.row_devices})
    unassigned = list(devices)
    if not unassigned:
        raise ValueError("need at least one device to assign")

    box = bounds.as_box()
    assignments: list[BatchAssignment] = []
    current = model
    round_no = 0
    while unassigned:
        best = None
        for t in unassigned:
            def acq(x: np.ndarray, task=t) -> np.ndarray:
                x_aug = np.hstack([x, np.full((x.shape[0], 1), float(task))])
                return _acquisition_values(current, spec, x_aug)

            # per-(round, device) substream so batch proposals stay reproducible
            ga_t = GaConfig(**{**ga.to_dict(), "seed": ga.seed + 1009 * round_no + t})
            x, value = ga_maximize(acq, box, ga_t, vectorized=True)
            if best is None or value > best[2]:
                best = (t, x, value)
        t, x, value = best
        x_aug = augment_task(x, t)
        current, fantasy = extend_with_fantasy(current, x_aug, device_id=t)
        assignments.append(
            BatchAssignment(
                device_id=t,
                point=ParameterPoint(flow=float(x[0]), layer_height=float(x[1])),
                acquisition_value=float(value),
                fantasy_value=fantasy,
            )
        )
        unassigned.remove(t)
        round_no += 1

    ordered = sorted(assignments, key=lambda a: -a.acquisition_value)
    return BatchProposal(assignments=tuple(ordered))
