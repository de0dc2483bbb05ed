"""Noise-aware strategy decision: single-device vs multi-device optimization.

Each pairwise metric value is voted High (+1), Low (-1), or Indeterminate (0)
against its thresholds. A pair is Divergent when its vote sum is positive and
Convergent when negative. A strict majority of Divergent pairs selects
single-device optimization; a strict majority of Convergent pairs selects
multi-device optimization; anything else is Indeterminate, which callers must
resolve explicitly. A strong device-cluster association (NMI above its
threshold) breaks an Indeterminate outcome toward single-device.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

from fleetbo.clustering import AssociationReport
from fleetbo.divergence import DivergenceReport


class Strategy(str, Enum):
    SINGLE_DEVICE = "single_device"
    MULTI_DEVICE = "multi_device"
    INDETERMINATE = "indeterminate"


HIGH, INDET, LOW = 1, 0, -1

METRIC_IDS = ("ks", "kl", "wasserstein", "bhattacharyya")


@dataclass(frozen=True)
class ThresholdConfig:
    """Decision cut points for the four pairwise metrics.

    The Bhattacharyya cut applies to the density-mode value and has a single
    cut: below it counts as high divergence, at or above as low.
    """

    ks_high: float = 0.5
    ks_low: float = 0.2
    kl_high: float = 5.0
    kl_low: float = 2.0
    w_high: float = 0.4
    w_low: float = 0.2
    b_high_divergence: float = -2.0
    nmi_high: float = 0.5

    def __post_init__(self):
        for name, low, high in (
            ("ks", self.ks_low, self.ks_high),
            ("kl", self.kl_low, self.kl_high),
            ("wasserstein", self.w_low, self.w_high),
        ):
            if not low < high:
                raise ValueError(f"{name}: low threshold must be < high, got {low} >= {high}")

    def to_dict(self) -> dict:
        return {
            "ks_high": self.ks_high,
            "ks_low": self.ks_low,
            "kl_high": self.kl_high,
            "kl_low": self.kl_low,
            "w_high": self.w_high,
            "w_low": self.w_low,
            "b_high_divergence": self.b_high_divergence,
            "nmi_high": self.nmi_high,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdConfig":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class PairVotes:
    device_a: int
    device_b: int
    votes: dict[str, int]
    total: int
    label: str  # "divergent" | "convergent" | "neutral"

    def to_dict(self) -> dict:
        return {
            "pair": [self.device_a, self.device_b],
            "votes": dict(self.votes),
            "total": self.total,
            "label": self.label,
        }


@dataclass(frozen=True)
class StrategyDecision:
    strategy: Strategy
    pair_votes: tuple[PairVotes, ...]
    divergent_pairs: int
    convergent_pairs: int
    neutral_pairs: int
    nmi: float | None
    purity: dict[int, float] = field(default_factory=dict)
    rationale: tuple[str, ...] = ()
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "pair_votes": [p.to_dict() for p in self.pair_votes],
            "divergent_pairs": self.divergent_pairs,
            "convergent_pairs": self.convergent_pairs,
            "neutral_pairs": self.neutral_pairs,
            "nmi": self.nmi,
            "purity": {str(d): p for d, p in self.purity.items()},
            "rationale": list(self.rationale),
            "thresholds": self.thresholds.to_dict(),
        }


def metric_vote(metric_id: str, value: float, thresholds: ThresholdConfig) -> int:
    """Vote one metric value: High (+1), Low (-1), or Indeterminate (0)."""
    if not math.isfinite(value):
        if metric_id == "kl" and value == math.inf:
            return HIGH  # the infinite-divergence flag of an unsmoothed histogram
        raise ValueError(f"metric value must be finite, got {value}")
    if metric_id == "ks":
        low, high = thresholds.ks_low, thresholds.ks_high
    elif metric_id == "kl":
        low, high = thresholds.kl_low, thresholds.kl_high
    elif metric_id == "wasserstein":
        low, high = thresholds.w_low, thresholds.w_high
    elif metric_id == "bhattacharyya":
        return HIGH if value < thresholds.b_high_divergence else LOW
    else:
        raise ValueError(f"unknown metric id {metric_id!r}")
    if value > high:
        return HIGH
    if value < low:
        return LOW
    return INDET


def vote_pair(report: DivergenceReport, thresholds: ThresholdConfig) -> PairVotes:
    """All four metric votes for one pair; KL votes on the symmetrized value."""
    votes = {
        "ks": metric_vote("ks", report.ks, thresholds),
        "kl": metric_vote("kl", report.kl, thresholds),
        "wasserstein": metric_vote("wasserstein", report.wasserstein, thresholds),
        "bhattacharyya": metric_vote("bhattacharyya", report.bhattacharyya_density, thresholds),
    }
    total = sum(votes.values())
    label = "divergent" if total > 0 else ("convergent" if total < 0 else "neutral")
    return PairVotes(
        device_a=report.device_a, device_b=report.device_b, votes=votes, total=total, label=label
    )


def decide(
    reports: Sequence[DivergenceReport],
    association: AssociationReport | None = None,
    thresholds: ThresholdConfig | None = None,
) -> StrategyDecision:
    """Aggregate pair votes into a fleet-level strategy.

    Strict majorities only; an even split stays Indeterminate unless the
    clustering NMI is strong enough to break it toward single-device.
    """
    if not reports:
        raise ValueError("need at least one pair report")
    thresholds = thresholds or ThresholdConfig()

    pair_votes = tuple(vote_pair(r, thresholds) for r in reports)
    divergent = sum(1 for p in pair_votes if p.label == "divergent")
    convergent = sum(1 for p in pair_votes if p.label == "convergent")
    neutral = len(pair_votes) - divergent - convergent
    half = len(pair_votes) / 2

    rationale = [
        f"pair {p.device_a}-{p.device_b}: votes {p.votes} sum {p.total:+d} -> {p.label}"
        for p in pair_votes
    ]
    rationale.append(
        f"tally: {divergent} divergent, {convergent} convergent, {neutral} neutral "
        f"of {len(pair_votes)} pairs (majority needs > {half:g})"
    )

    if divergent > half:
        strategy = Strategy.SINGLE_DEVICE
        rationale.append("divergent majority -> single-device optimization")
    elif convergent > half:
        strategy = Strategy.MULTI_DEVICE
        rationale.append("convergent majority -> multi-device optimization")
    else:
        strategy = Strategy.INDETERMINATE
        rationale.append("no majority -> indeterminate")

    nmi = association.nmi if association is not None else None
    if nmi is not None:
        rationale.append(f"clustering advisory: NMI {nmi:.4f} (threshold {thresholds.nmi_high})")
        if strategy is Strategy.INDETERMINATE and nmi > thresholds.nmi_high:
            strategy = Strategy.SINGLE_DEVICE
            rationale.append("strong device-cluster association breaks tie -> single-device")

    return StrategyDecision(
        strategy=strategy,
        pair_votes=pair_votes,
        divergent_pairs=divergent,
        convergent_pairs=convergent,
        neutral_pairs=neutral,
        nmi=nmi,
        purity=dict(association.purity) if association is not None else {},
        rationale=tuple(rationale),
        thresholds=thresholds,
    )


def write_decision_json(decision: StrategyDecision, path: str | Path):
    Path(path).write_text(
        json.dumps(decision.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
