"""Gaussian-process surrogate with an anisotropic Matern-3/2 kernel.

Hyperparameters (signal variance, per-dimension lengthscales, noise
variances) are trained by maximizing the log marginal likelihood with
analytic gradients, in log space, under box bounds, from multiple starts.
The multi-task variant augments the input with a device-index coordinate and
carries one noise variance per device; rows are mapped to their device's
noise through ``row_devices``.

Models are immutable: training and fantasy extension build new values, and a
trained model can be queried concurrently.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

SQRT3 = math.sqrt(3.0)
LOG_2PI = math.log(2.0 * math.pi)
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
TRAIN_RESTARTS = 5  # warm start plus four seeded log-uniform draws


class TrainingError(RuntimeError):
    """Covariance factorization failed even after jitter escalation."""


@dataclass(frozen=True)
class Hyperparameters:
    signal_variance: float
    lengthscales: tuple[float, ...]
    noise_variances: tuple[float, ...]

    def __post_init__(self):
        if self.signal_variance <= 0:
            raise ValueError(f"signal variance must be > 0, got {self.signal_variance}")
        if any(l <= 0 for l in self.lengthscales):
            raise ValueError(f"lengthscales must be > 0, got {self.lengthscales}")
        if any(v <= 0 for v in self.noise_variances):
            raise ValueError(f"noise variances must be > 0, got {self.noise_variances}")

    def as_log_vector(self) -> np.ndarray:
        return np.log(np.r_[self.signal_variance, self.lengthscales, self.noise_variances])

    @classmethod
    def from_log_vector(cls, theta: np.ndarray, d: int, n_noise: int) -> "Hyperparameters":
        values = np.exp(theta)
        return cls(
            signal_variance=float(values[0]),
            lengthscales=tuple(float(v) for v in values[1 : 1 + d]),
            noise_variances=tuple(float(v) for v in values[1 + d : 1 + d + n_noise]),
        )

    def to_dict(self) -> dict:
        return {
            "signal_variance": self.signal_variance,
            "lengthscales": list(self.lengthscales),
            "noise_variances": list(self.noise_variances),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        return cls(
            signal_variance=float(d["signal_variance"]),
            lengthscales=tuple(float(v) for v in d["lengthscales"]),
            noise_variances=tuple(float(v) for v in d["noise_variances"]),
        )


@dataclass(frozen=True)
class HpBounds:
    """Box bounds per hyperparameter; all strictly positive."""

    signal_variance: tuple[float, float]
    lengthscales: tuple[tuple[float, float], ...]
    noise: tuple[tuple[float, float], ...]

    def __post_init__(self):
        for lb, ub in (self.signal_variance, *self.lengthscales, *self.noise):
            if not 0 < lb < ub:
                raise ValueError(f"bounds must satisfy 0 < lb < ub, got ({lb}, {ub})")

    @classmethod
    def default(cls, task_mode: bool = False, n_devices: int = 1) -> "HpBounds":
        lengthscales = [(1.0, 1e4), (1e-3, 10.0)]
        if task_mode:
            # the augmented task dimension reuses the layer-height slot
            lengthscales.append((1e-3, 10.0))
        return cls(
            signal_variance=(1e-5, 1e5),
            lengthscales=tuple(lengthscales),
            noise=((1e-4, 1.0),) * (n_devices if task_mode else 1),
        )

    def pairs(self) -> list[tuple[float, float]]:
        return [self.signal_variance, *self.lengthscales, *self.noise]

    def log_pairs(self) -> list[tuple[float, float]]:
        return [(math.log(lb), math.log(ub)) for lb, ub in self.pairs()]

    def to_dict(self) -> dict:
        return {
            "signal_variance": list(self.signal_variance),
            "lengthscales": [list(p) for p in self.lengthscales],
            "noise": [list(p) for p in self.noise],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HpBounds":
        return cls(
            signal_variance=tuple(float(v) for v in d["signal_variance"]),
            lengthscales=tuple(tuple(float(v) for v in p) for p in d["lengthscales"]),
            noise=tuple(tuple(float(v) for v in p) for p in d["noise"]),
        )


def default_initial_hps(task_mode: bool = False, n_devices: int = 1) -> Hyperparameters:
    """First-iteration initial guesses: 100 for the signal variance, 1 for
    every lengthscale, and 0.01 for every noise variance."""
    d = 3 if task_mode else 2
    return Hyperparameters(
        signal_variance=100.0,
        lengthscales=(1.0,) * d,
        noise_variances=(0.01,) * (n_devices if task_mode else 1),
    )


def matern32(
    x: Sequence[float] | np.ndarray,
    x_other: Sequence[float] | np.ndarray,
    lengthscales: Sequence[float] | np.ndarray,
    signal_variance: float,
) -> float:
    """Anisotropic Matern-3/2 covariance between two points.

    k(x, x') = beta * (1 + sqrt(3) r) * exp(-sqrt(3) r) with
    r = sqrt(sum_i (x_i - x'_i)^2 / lambda_i^2).
    """
    a = np.asarray(x, dtype=float)
    b = np.asarray(x_other, dtype=float)
    ls = np.asarray(lengthscales, dtype=float)
    if a.shape != b.shape or a.shape != ls.shape:
        raise ValueError("point and lengthscale dimensions must agree")
    if (ls <= 0).any() or signal_variance <= 0:
        raise ValueError("lengthscales and signal variance must be > 0")
    r = math.sqrt(float((((a - b) / ls) ** 2).sum()))
    s = SQRT3 * r
    return signal_variance * (1.0 + s) * math.exp(-s)


def _kernel_matrix(x1: np.ndarray, x2: np.ndarray, beta: float, ls: np.ndarray) -> np.ndarray:
    diff = x1[:, None, :] - x2[None, :, :]
    r = np.sqrt(((diff / ls) ** 2).sum(axis=2))
    s = SQRT3 * r
    return beta * (1.0 + s) * np.exp(-s)


def _chol_with_jitter(a: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, escalating diagonal jitter on failure."""
    for jitter in JITTER_LADDER:
        try:
            m = a if jitter == 0.0 else a + jitter * np.eye(a.shape[0])
            return cholesky(m, lower=True), jitter
        except LinAlgError:
            continue
    raise TrainingError("covariance matrix is not positive definite after jitter escalation")


@dataclass(frozen=True)
class GpModel:
    """A trained, immutable GP posterior over delta-W observations."""

    inputs: np.ndarray  # (m, d)
    targets: np.ndarray  # (m,)
    hps: Hyperparameters
    bounds: HpBounds
    prior_mean: float
    task_mode: bool
    row_devices: np.ndarray | None  # (m,) device index per row in multi-task mode
    chol: np.ndarray  # lower Cholesky factor of K + noise diagonal
    alpha: np.ndarray  # (K + noise)^-1 (targets - prior_mean)
    jitter: float

    @property
    def n_points(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def incumbent(self) -> float:
        """Best observed target value."""
        return float(self.targets.max())


def _noise_diagonal(hps: Hyperparameters, m: int, row_devices: np.ndarray | None) -> np.ndarray:
    if row_devices is None:
        return np.full(m, hps.noise_variances[0])
    return np.asarray(hps.noise_variances)[row_devices]


def build_model(
    inputs: np.ndarray,
    targets: np.ndarray,
    hps: Hyperparameters,
    bounds: HpBounds,
    task_mode: bool = False,
    row_devices: np.ndarray | None = None,
    prior_mean: float | None = None,
) -> GpModel:
    """Condition a GP with fixed hyperparameters on the given data."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    targets = np.asarray(targets, dtype=float)
    if inputs.shape[0] != targets.shape[0]:
        raise ValueError("inputs and targets must have equal length")
    if len(hps.lengthscales) != inputs.shape[1]:
        raise ValueError(
            f"model has {inputs.shape[1]} input dimensions but "
            f"{len(hps.lengthscales)} lengthscales"
        )
    if task_mode:
        if row_devices is None:
            raise ValueError("multi-task mode requires row_devices")
        row_devices = np.asarray(row_devices, dtype=int)
        if row_devices.max(initial=0) >= len(hps.noise_variances):
            raise ValueError("row device index exceeds noise variance count")
    else:
        row_devices = None

    mean = float(targets.mean()) if prior_mean is None else float(prior_mean)
    k = _kernel_matrix(inputs, inputs, hps.signal_variance, np.asarray(hps.lengthscales))
    a = k + np.diag(_noise_diagonal(hps, inputs.shape[0], row_devices))
    chol, jitter = _chol_with_jitter(a)
    alpha = cho_solve((chol, True), targets - mean)
    return GpModel(
        inputs=inputs,
        targets=targets,
        hps=hps,
        bounds=bounds,
        prior_mean=mean,
        task_mode=task_mode,
        row_devices=row_devices,
        chol=chol,
        alpha=alpha,
        jitter=jitter,
    )


def log_marginal_likelihood(model: GpModel) -> float:
    """LML of the model's targets under its current hyperparameters."""
    y = model.targets - model.prior_mean
    return float(
        -0.5 * y @ model.alpha
        - np.log(np.diag(model.chol)).sum()
        - 0.5 * model.n_points * LOG_2PI
    )


def _neg_lml_and_grad(
    theta: np.ndarray,
    inputs: np.ndarray,
    y_centered: np.ndarray,
    noise_index: np.ndarray,
    d: int,
    n_noise: int,
) -> tuple[float, np.ndarray]:
    """Negative LML and its gradient w.r.t. log hyperparameters."""
    m = inputs.shape[0]
    beta = math.exp(theta[0])
    ls = np.exp(theta[1 : 1 + d])
    noises = np.exp(theta[1 + d :])

    diff = inputs[:, None, :] - inputs[None, :, :]
    scaled_sq = (diff / ls) ** 2
    r = np.sqrt(scaled_sq.sum(axis=2))
    s = SQRT3 * r
    decay = np.exp(-s)
    k = beta * (1.0 + s) * decay
    a = k + np.diag(noises[noise_index])

    chol, _ = _chol_with_jitter(a)
    alpha = cho_solve((chol, True), y_centered)
    lml = -0.5 * y_centered @ alpha - np.log(np.diag(chol)).sum() - 0.5 * m * LOG_2PI

    a_inv = cho_solve((chol, True), np.eye(m))
    w = np.outer(alpha, alpha) - a_inv

    grad = np.empty_like(theta)
    grad[0] = 0.5 * np.sum(w * k)  # dA/dlog(beta) = K
    # dA/dlog(lambda_i) = 3 beta exp(-s) (x_i - x'_i)^2 / lambda_i^2
    base = 3.0 * beta * decay
    for i in range(d):
        grad[1 + i] = 0.5 * np.sum(w * (base * scaled_sq[:, :, i]))
    w_diag = np.diag(w)
    for j in range(n_noise):
        grad[1 + d + j] = 0.5 * noises[j] * w_diag[noise_index == j].sum()
    return -lml, -grad


def _clamp_to_bounds(hps: Hyperparameters, bounds: HpBounds) -> Hyperparameters:
    raw = np.r_[hps.signal_variance, hps.lengthscales, hps.noise_variances]
    pairs = np.asarray(bounds.pairs())
    clamped = np.clip(raw, pairs[:, 0], pairs[:, 1])
    if not np.array_equal(raw, clamped):
        warnings.warn("initial hyperparameters clamped into bounds", stacklevel=3)
    d = len(hps.lengthscales)
    return Hyperparameters.from_log_vector(np.log(clamped), d, len(hps.noise_variances))


def train(
    inputs: np.ndarray,
    targets: np.ndarray,
    bounds: HpBounds,
    init_hps: Hyperparameters,
    task_mode: bool = False,
    row_devices: np.ndarray | None = None,
    seed: int = 0,
    restarts: int = TRAIN_RESTARTS,
) -> Hyperparameters:
    """Maximize the log marginal likelihood over log-space hyperparameters.

    Multi-start bounded L-BFGS with analytic gradients: the first start is
    the (clamped) warm start, the rest are seeded log-uniform draws within
    the bounds. Returns the best restart's hyperparameters; deterministic
    for a fixed seed and warm start.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    targets = np.asarray(targets, dtype=float)
    if inputs.shape[0] < 2:
        raise ValueError("need at least 2 data points to train")
    d = inputs.shape[1]
    n_noise = len(init_hps.noise_variances)
    if task_mode:
        if row_devices is None:
            raise ValueError("multi-task mode requires row_devices")
        noise_index = np.asarray(row_devices, dtype=int)
    else:
        noise_index = np.zeros(inputs.shape[0], dtype=int)

    init_hps = _clamp_to_bounds(init_hps, bounds)
    y = targets - targets.mean()
    log_bounds = bounds.log_pairs()
    lo = np.array([p[0] for p in log_bounds])
    hi = np.array([p[1] for p in log_bounds])

    rng = np.random.default_rng(seed)
    starts = [init_hps.as_log_vector()]
    starts += [rng.uniform(lo, hi) for _ in range(max(0, restarts - 1))]

    best_theta, best_nll = None, np.inf
    failures = 0
    for theta0 in starts:
        try:
            result = minimize(
                _neg_lml_and_grad,
                theta0,
                args=(inputs, y, noise_index, d, n_noise),
                method="L-BFGS-B",
                jac=True,
                bounds=log_bounds,
            )
        except TrainingError:
            failures += 1
            continue
        if result.fun < best_nll:
            best_theta, best_nll = result.x, float(result.fun)
    if best_theta is None:
        raise TrainingError(f"all {failures} training restarts failed factorization")
    # exp(log(bound)) round-off can overshoot the box by ~1 ulp; clip it back
    pairs = np.asarray(bounds.pairs())
    values = np.clip(np.exp(best_theta), pairs[:, 0], pairs[:, 1])
    return Hyperparameters(
        signal_variance=float(values[0]),
        lengthscales=tuple(float(v) for v in values[1 : 1 + d]),
        noise_variances=tuple(float(v) for v in values[1 + d :]),
    )


def fit_model(
    inputs: np.ndarray,
    targets: np.ndarray,
    bounds: HpBounds,
    init_hps: Hyperparameters,
    task_mode: bool = False,
    row_devices: np.ndarray | None = None,
    seed: int = 0,
) -> GpModel:
    """Train hyperparameters and condition the model in one step."""
    hps = train(
        inputs, targets, bounds, init_hps,
        task_mode=task_mode, row_devices=row_devices, seed=seed,
    )
    return build_model(
        inputs, targets, hps, bounds, task_mode=task_mode, row_devices=row_devices
    )


@dataclass(frozen=True)
class RelaxResult:
    hps: Hyperparameters
    bounds: HpBounds
    rounds: int
    still_pinned: bool


PIN_FACTOR = 1.05
MAX_RELAX_ROUNDS = 3


def relax_bounds_and_retrain(model: GpModel, seed: int = 0) -> RelaxResult:
    """Widen lengthscale bounds that the estimate is pinned against, and retrain.

    A lengthscale within a factor 1.05 of its lower (upper) bound widens that
    bound by 10x. Up to 3 rounds; if an estimate is still pinned afterwards,
    the last result is returned with ``still_pinned`` set.
    """
    if model.task_mode:
        raise ValueError("bound relaxation applies to single-task models only")

    hps, bounds = model.hps, model.bounds
    rounds = 0
    for _ in range(MAX_RELAX_ROUNDS):
        new_ls_bounds = []
        pinned = False
        for l, (lb, ub) in zip(hps.lengthscales, bounds.lengthscales):
            new_lb, new_ub = lb, ub
            if l <= lb * PIN_FACTOR:
                new_lb, pinned = lb * 0.1, True
            if l >= ub / PIN_FACTOR:
                new_ub, pinned = ub * 10.0, True
            new_ls_bounds.append((new_lb, new_ub))
        if not pinned:
            return RelaxResult(hps=hps, bounds=bounds, rounds=rounds, still_pinned=False)
        bounds = replace(bounds, lengthscales=tuple(new_ls_bounds))
        hps = train(model.inputs, model.targets, bounds, hps, seed=seed)
        rounds += 1

    still_pinned = any(
        l <= lb * PIN_FACTOR or l >= ub / PIN_FACTOR
        for l, (lb, ub) in zip(hps.lengthscales, bounds.lengthscales)
    )
    return RelaxResult(hps=hps, bounds=bounds, rounds=rounds, still_pinned=still_pinned)


def posterior(model: GpModel, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at one or more query points.

    Accepts a single point (d,) or a batch (q, d); returns matching-shape
    arrays (scalars become 0-d arrays via squeeze by the caller if wanted).
    Variance is the latent-function variance, floored at 0.
    """
    q = np.atleast_2d(np.asarray(query, dtype=float))
    if q.shape[1] != model.dim:
        raise ValueError(f"query dimension {q.shape[1]} != model dimension {model.dim}")
    ls = np.asarray(model.hps.lengthscales)
    k_star = _kernel_matrix(model.inputs, q, model.hps.signal_variance, ls)
    mu = model.prior_mean + k_star.T @ model.alpha
    v = solve_triangular(model.chol, k_star, lower=True)
    var = np.maximum(model.hps.signal_variance - (v**2).sum(axis=0), 0.0)
    if np.asarray(query).ndim == 1:
        return mu[0], var[0]
    return mu, var


def augment_task(point: np.ndarray | Sequence[float], device_id: int) -> np.ndarray:
    """Append the device index as a real-valued trailing input coordinate."""
    arr = np.asarray(point, dtype=float).ravel()
    return np.r_[arr, float(device_id)]


def extend_with_fantasy(model: GpModel, x_new: np.ndarray, device_id: int | None = None) -> tuple[GpModel, float]:
    """Condition on a pseudo-observation at x_new set to the posterior mean.

    Hyperparameters and prior mean stay frozen; only the factorization is
    extended. Returns the new model and the fantasy value used.
    """
    mu, _ = posterior(model, x_new)
    fantasy = float(mu)
    inputs = np.vstack([model.inputs, np.atleast_2d(x_new)])
    targets = np.r_[model.targets, fantasy]
    row_devices = model.row_devices
    if model.task_mode:
        if device_id is None:
            raise ValueError("multi-task fantasy extension needs a device id")
        row_devices = np.r_[model.row_devices, device_id]
    new_model = build_model(
        inputs,
        targets,
        model.hps,
        model.bounds,
        task_mode=model.task_mode,
        row_devices=row_devices,
        prior_mean=model.prior_mean,
    )
    return new_model, fantasy


def model_to_dict(model: GpModel) -> dict:
    return {
        "inputs": [[float(v) for v in row] for row in model.inputs],
        "targets": [float(v) for v in model.targets],
        "hps": model.hps.to_dict(),
        "bounds": model.bounds.to_dict(),
        "prior_mean": model.prior_mean,
        "task_mode": model.task_mode,
        "row_devices": None if model.row_devices is None else [int(v) for v in model.row_devices],
    }


def model_from_dict(d: dict) -> GpModel:
    """Rebuild a model (including its factorization) from a checkpoint dict."""
    return build_model(
        inputs=np.asarray(d["inputs"], dtype=float),
        targets=np.asarray(d["targets"], dtype=float),
        hps=Hyperparameters.from_dict(d["hps"]),
        bounds=HpBounds.from_dict(d["bounds"]),
        task_mode=bool(d["task_mode"]),
        row_devices=None if d["row_devices"] is None else np.asarray(d["row_devices"], dtype=int),
        prior_mean=float(d["prior_mean"]),
    )


def save_model(model: GpModel, path: str | Path):
    Path(path).write_text(
        json.dumps(model_to_dict(model), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def load_model(path: str | Path) -> GpModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
