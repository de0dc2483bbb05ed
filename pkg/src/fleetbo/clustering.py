"""K-means over run-feature vectors and device-cluster association scores.

Lloyd's algorithm with k-means++ seeding, best-of-restarts selection, and an
inertia trace per run. Features are standardized per dimension by default;
the raw (mu, sigma, var) triple is wildly different in scale, with the
variance dominating, so clustering in standardized space is the sane
geometry. Pass standardize=False for raw-space clustering.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fleetbo.noise import FeatureMatrix

MAX_ITER = 300
DEFAULT_RESTARTS = 10


@dataclass(frozen=True)
class Standardization:
    """Per-dimension affine transform fitted on the raw features."""

    mean: np.ndarray
    scale: np.ndarray
    kept: np.ndarray  # indices of non-constant dimensions

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x[:, self.kept] - self.mean) / self.scale


@dataclass(frozen=True)
class ClusteringResult:
    k: int
    assignments: np.ndarray
    centroids: np.ndarray  # raw feature space, one row per cluster
    inertia: float
    silhouette: float | None
    seed: int
    standardization: Standardization | None
    inertia_trace: tuple[float, ...]  # per Lloyd iteration of the winning run

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "assignments": [int(a) for a in self.assignments],
            "centroids": [[float(v) for v in row] for row in self.centroids],
            "inertia": self.inertia,
            "silhouette": self.silhouette,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class AssociationReport:
    """How cluster memberships distribute across devices."""

    counts: dict[int, dict[int, int]]  # device -> cluster -> count
    purity: dict[int, float]  # device -> fraction in dominant cluster
    nmi: float

    def to_dict(self) -> dict:
        return {
            "counts": {str(d): {str(c): n for c, n in cl.items()} for d, cl in self.counts.items()},
            "purity": {str(d): p for d, p in self.purity.items()},
            "nmi": self.nmi,
        }


def _standardize(x: np.ndarray) -> tuple[np.ndarray, Standardization]:
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    kept = np.flatnonzero(scale > 0)
    if kept.size < x.shape[1]:
        dropped = sorted(set(range(x.shape[1])) - set(kept.tolist()))
        warnings.warn(f"dropping zero-variance feature dimension(s) {dropped}", stacklevel=3)
    if kept.size == 0:
        raise ValueError("all feature dimensions have zero variance")
    std = Standardization(mean=mean[kept], scale=scale[kept], kept=kept)
    return std.apply(x), std


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centroids by squared-distance sampling."""
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total == 0:
            centroids[j] = x[rng.integers(n)]
            continue
        probs = d2 / total
        centroids[j] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _lloyd(
    x: np.ndarray, k: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    centroids = _kmeans_pp_init(x, k, rng)
    assignments = np.full(x.shape[0], -1)
    trace: list[float] = []
    for _ in range(MAX_ITER):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assignments = d2.argmin(axis=1)
        trace.append(float(d2[np.arange(x.shape[0]), new_assignments].sum()))
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for j in range(k):
            members = x[assignments == j]
            if members.size:
                centroids[j] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the point farthest from its centroid
                far = d2.min(axis=1).argmax()
                centroids[j] = x[far]
    inertia = float(((x - centroids[assignments]) ** 2).sum())
    return assignments, centroids, inertia, trace


def kmeans(
    features: FeatureMatrix,
    k: int,
    seed: int = 0,
    restarts: int = DEFAULT_RESTARTS,
    standardize: bool = True,
) -> ClusteringResult:
    """Best-of-restarts k-means on the feature matrix.

    Restart r uses the deterministic substream (seed, r); the run with the
    lowest inertia wins, ties broken by restart index, so the result is
    bit-reproducible for a fixed seed.
    """
    raw = features.matrix()
    if not np.isfinite(raw).all():
        raise ValueError("features must be finite")
    if not (1 <= k <= features.n_init):
        raise ValueError(f"k must be in [1, {features.n_init}], got {k}")
    if restarts < 1:
        raise ValueError(f"restarts must be >= 1, got {restarts}")

    std = None
    x = raw
    if standardize:
        x, std = _standardize(raw)

    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        assignments, _, inertia, trace = _lloyd(x, k, rng)
        if best is None or inertia < best[1]:
            best = (assignments, inertia, trace)
    assignments, inertia, trace = best

    # raw-space centroids: the mean commutes with the affine standardization
    centroids = np.array(
        [
            raw[assignments == j].mean(axis=0) if (assignments == j).any() else np.full(raw.shape[1], np.nan)
            for j in range(k)
        ]
    )
    sil = silhouette_score(features, assignments, standardize=standardize) if k >= 2 else None
    return ClusteringResult(
        k=k,
        assignments=assignments,
        centroids=centroids,
        inertia=inertia,
        silhouette=sil,
        seed=seed,
        standardization=std,
        inertia_trace=tuple(trace),
    )


def silhouette_score(
    features: FeatureMatrix | np.ndarray,
    assignments: Sequence[int] | np.ndarray,
    standardize: bool = True,
) -> float:
    """Mean silhouette (b - a) / max(a, b) with Euclidean distances.

    a is the mean distance to the point's own cluster, b the smallest mean
    distance to any other cluster. Points in singleton clusters contribute 0.
    """
    x = features.matrix() if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=float)
    if standardize:
        x, _ = _standardize(x)
    labels = np.asarray(assignments)
    if len(labels) != x.shape[0]:
        raise ValueError("assignments length must match feature rows")
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least 2 clusters")

    dist = np.sqrt(np.maximum(((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2), 0.0))
    scores = np.zeros(x.shape[0])
    for i in range(x.shape[0]):
        own = labels == labels[i]
        n_own = own.sum()
        if n_own == 1:
            continue  # singleton convention: silhouette 0
        a = dist[i, own].sum() / (n_own - 1)
        b = min(dist[i, labels == other].mean() for other in uniq if other != labels[i])
        scores[i] = (b - a) / max(a, b)
    return float(scores.mean())


def choose_k(
    features: FeatureMatrix,
    k_max: int,
    seed: int = 0,
    restarts: int = DEFAULT_RESTARTS,
    standardize: bool = True,
) -> int:
    """Silhouette-maximizing k over [2, k_max], ties toward smaller k."""
    if not (2 <= k_max <= features.n_init):
        raise ValueError(f"k_max must be in [2, {features.n_init}], got {k_max}")
    best_k, best_sil = 2, -np.inf
    for k in range(2, k_max + 1):
        result = kmeans(features, k, seed=seed, restarts=restarts, standardize=standardize)
        if result.silhouette > best_sil:
            best_k, best_sil = k, result.silhouette
    if best_sil < 0.25:
        warnings.warn(
            f"weak cluster structure: best silhouette {best_sil:.3f} at k={best_k}",
            stacklevel=2,
        )
    return best_k


def normalized_mutual_information(labels_a, labels_b) -> float:
    """NMI with natural-log entropies and arithmetic-mean normalization."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError("label arrays must have equal length")
    n = a.size

    def entropy(labels):
        _, counts = np.unique(labels, return_counts=True)
        p = counts / n
        return float(-(p * np.log(p)).sum())

    h_a, h_b = entropy(a), entropy(b)
    mi = 0.0
    for ua in np.unique(a):
        mask_a = a == ua
        p_a = mask_a.sum() / n
        for ub in np.unique(b):
            joint = (mask_a & (b == ub)).sum() / n
            if joint > 0:
                mi += joint * np.log(joint / (p_a * ((b == ub).sum() / n)))
    denom = 0.5 * (h_a + h_b)
    if denom == 0 or mi <= 0:
        return 0.0
    return float(mi / denom)


def association(
    features: FeatureMatrix,
    assignments: Sequence[int] | np.ndarray,
    device_labels: Sequence[int] | np.ndarray | None = None,
) -> AssociationReport:
    """Cluster-membership counts, per-device purity, and device-cluster NMI."""
    labels = np.asarray(assignments)
    devices = np.asarray(device_labels) if device_labels is not None else features.device_labels()
    if len(labels) != len(devices):
        raise ValueError("assignments and device labels must have equal length")

    counts: dict[int, dict[int, int]] = {}
    for d, c in zip(devices, labels):
        counts.setdefault(int(d), {})
        counts[int(d)][int(c)] = counts[int(d)].get(int(c), 0) + 1
    purity = {
        d: max(cl.values()) / sum(cl.values()) for d, cl in counts.items()
    }
    return AssociationReport(
        counts=counts,
        purity=purity,
        nmi=normalized_mutual_information(devices, labels),
    )


def write_clustering_json(result: ClusteringResult, report: AssociationReport, path: str | Path):
    doc = {"clustering": result.to_dict(), "association": report.to_dict()}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_feature_rows_csv(
    features: FeatureMatrix, assignments: Sequence[int] | np.ndarray, path: str | Path
):
    """Per-row (features, cluster label, device) export for scatter reporting."""
    labels = np.asarray(assignments)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mu", "sigma", "var", "cluster", "device_id"])
        for row, label in zip(features.rows, labels):
            writer.writerow([repr(row.mu), repr(row.sigma), repr(row.var), int(label), row.device_id])
