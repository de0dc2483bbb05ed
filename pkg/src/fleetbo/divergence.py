"""Pairwise distributional dissimilarity metrics between device weight samples.

Four metrics: the two-sample Kolmogorov-Smirnov statistic, histogram KL
divergence, the 1-D Wasserstein distance, and the Bhattacharyya distance.
KS and Wasserstein operate directly on samples; KL and Bhattacharyya operate
on a shared-bin histogram pair and therefore depend on the binning policy.

The Bhattacharyya distance comes in two flavours. "mass" is the standard
-ln(sum sqrt(p*q)) over probability masses, which is always >= 0. "density"
evaluates the same expression over density heights (mass / bin width), which
can go negative for narrow bins; the decision thresholds expect this flavour.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import rel_entr

DEFAULT_BIN_COUNT = 20
DEFAULT_SMOOTHING_EPS = 1e-10


class DegenerateRangeError(ValueError):
    """Both samples are a single identical value; bins would have zero width."""


@dataclass(frozen=True)
class HistogramPair:
    """Two probability histograms over shared equal-width bins."""

    bin_edges: np.ndarray
    p_mass: np.ndarray
    q_mass: np.ndarray

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])

    @property
    def p_density(self) -> np.ndarray:
        return self.p_mass / self.bin_width

    @property
    def q_density(self) -> np.ndarray:
        return self.q_mass / self.bin_width


@dataclass(frozen=True)
class DivergenceReport:
    """All pairwise metrics for one unordered device pair.

    ``kl`` is the symmetrized mean of the two directed divergences, which the
    decision engine consumes; both raw directions are kept alongside.
    ``votes`` is filled in by the decision module.
    """

    device_a: int
    device_b: int
    ks: float
    kl: float
    kl_ab: float
    kl_ba: float
    wasserstein: float
    bhattacharyya_mass: float
    bhattacharyya_density: float
    votes: dict | None = None

    def with_votes(self, votes: dict) -> "DivergenceReport":
        return replace(self, votes=votes)

    def to_dict(self) -> dict:
        return {
            "device_a": self.device_a,
            "device_b": self.device_b,
            "ks": self.ks,
            "kl": self.kl,
            "kl_ab": self.kl_ab,
            "kl_ba": self.kl_ba,
            "wasserstein": self.wasserstein,
            "bhattacharyya_mass": self.bhattacharyya_mass,
            "bhattacharyya_density": self.bhattacharyya_density,
            "votes": self.votes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DivergenceReport":
        return cls(
            device_a=int(d["device_a"]),
            device_b=int(d["device_b"]),
            ks=float(d["ks"]),
            kl=float(d["kl"]),
            kl_ab=float(d["kl_ab"]),
            kl_ba=float(d["kl_ba"]),
            wasserstein=float(d["wasserstein"]),
            bhattacharyya_mass=float(d["bhattacharyya_mass"]),
            bhattacharyya_density=float(d["bhattacharyya_density"]),
            votes=d.get("votes"),
        )


def ks_statistic(sample_a: Sequence[float], sample_b: Sequence[float]) -> float:
    """Exact sup over the merged support of |ECDF_a - ECDF_b|."""
    a = np.sort(np.asarray(sample_a, dtype=float))
    b = np.sort(np.asarray(sample_b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    support = np.concatenate([a, b])
    f_a = np.searchsorted(a, support, side="right") / a.size
    f_b = np.searchsorted(b, support, side="right") / b.size
    return float(np.abs(f_a - f_b).max())


def wasserstein1(sample_a: Sequence[float], sample_b: Sequence[float]) -> float:
    """1-D Wasserstein distance as the integral of |ECDF_a - ECDF_b|.

    Computed exactly by sorting the merged support and summing
    |F - G| * segment width over the piecewise-constant segments.
    """
    a = np.sort(np.asarray(sample_a, dtype=float))
    b = np.sort(np.asarray(sample_b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    support = np.sort(np.concatenate([a, b]))
    f_a = np.searchsorted(a, support[:-1], side="right") / a.size
    f_b = np.searchsorted(b, support[:-1], side="right") / b.size
    return float(np.sum(np.abs(f_a - f_b) * np.diff(support)))


def build_histogram_pair(
    sample_a: Sequence[float],
    sample_b: Sequence[float],
    bin_count: int = DEFAULT_BIN_COUNT,
    smoothing_eps: float = DEFAULT_SMOOTHING_EPS,
) -> HistogramPair:
    """Histogram both samples over shared equal-width bins.

    Bins span the combined sample range. Counts are normalized to masses;
    ``smoothing_eps`` is added to every bin and the masses renormalized, so
    zero-count bins keep a strictly positive floor (unless eps is 0).
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    if bin_count < 2:
        raise ValueError(f"bin_count must be >= 2, got {bin_count}")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if lo == hi:
        raise DegenerateRangeError("combined sample range has zero width")
    edges = np.linspace(lo, hi, bin_count + 1)

    def mass(sample):
        counts, _ = np.histogram(sample, bins=edges)
        m = counts / counts.sum()
        if smoothing_eps > 0:
            m = m + smoothing_eps
            m = m / m.sum()
        return m

    return HistogramPair(bin_edges=edges, p_mass=mass(a), q_mass=mass(b))


def kl_divergence(hist: HistogramPair) -> float:
    """KL divergence sum(p * ln(p/q)) in the (first || second) direction.

    Returns inf when an unsmoothed q bin is zero where p has mass.
    """
    return float(rel_entr(hist.p_mass, hist.q_mass).sum())


def bhattacharyya(hist: HistogramPair, mode: str = "density") -> float:
    """Bhattacharyya distance -ln(sum sqrt(p*q)) over masses or densities."""
    if mode == "mass":
        p, q = hist.p_mass, hist.q_mass
    elif mode == "density":
        p, q = hist.p_density, hist.q_density
    else:
        raise ValueError(f"mode must be 'mass' or 'density', got {mode!r}")
    return float(-np.log(np.sqrt(p * q).sum()))


def pairwise_reports(
    samples: Mapping[int, Sequence[float]],
    bin_count: int = DEFAULT_BIN_COUNT,
    smoothing_eps: float = DEFAULT_SMOOTHING_EPS,
) -> list[DivergenceReport]:
    """One DivergenceReport per unordered device pair.

    Each device's sample is its pooled measured weights. KL is computed in
    both directions over the shared histogram; the reported ``kl`` is their
    mean, removing the arbitrary pair ordering.
    """
    devices = sorted(samples)
    if len(devices) < 2:
        raise ValueError(f"need at least 2 devices, got {len(devices)}")
    for d in devices:
        if len(samples[d]) < 2:
            raise ValueError(f"device {d} has fewer than 2 measurements")

    reports = []
    for da, db in itertools.combinations(devices, 2):
        sa, sb = samples[da], samples[db]
        hist = build_histogram_pair(sa, sb, bin_count=bin_count, smoothing_eps=smoothing_eps)
        rev = HistogramPair(bin_edges=hist.bin_edges, p_mass=hist.q_mass, q_mass=hist.p_mass)
        kl_ab = kl_divergence(hist)
        kl_ba = kl_divergence(rev)
        reports.append(
            DivergenceReport(
                device_a=da,
                device_b=db,
                ks=ks_statistic(sa, sb),
                kl=0.5 * (kl_ab + kl_ba),
                kl_ab=kl_ab,
                kl_ba=kl_ba,
                wasserstein=wasserstein1(sa, sb),
                bhattacharyya_mass=bhattacharyya(hist, "mass"),
                bhattacharyya_density=bhattacharyya(hist, "density"),
            )
        )
    return reports


def write_reports_json(reports: Sequence[DivergenceReport], path: str | Path):
    Path(path).write_text(
        json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )


def read_reports_json(path: str | Path) -> list[DivergenceReport]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [DivergenceReport.from_dict(d) for d in data]


def write_reports_csv(reports: Sequence[DivergenceReport], path: str | Path):
    """Table-style export: one row per pair, one column per metric."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["pair", "ks", "kl", "kl_ab", "kl_ba", "wasserstein",
             "bhattacharyya_mass", "bhattacharyya_density"]
        )
        for r in reports:
            writer.writerow(
                [
                    f"{r.device_a}-{r.device_b}",
                    repr(r.ks),
                    repr(r.kl),
                    repr(r.kl_ab),
                    repr(r.kl_ba),
                    repr(r.wasserstein),
                    repr(r.bhattacharyya_mass),
                    repr(r.bhattacharyya_density),
                ]
            )
