"""Reward vocabulary: score vectors, normalization, ranking, and threshold gates.

Seven core metrics are always serialized in canonical order; deployments may
add extension metrics (e.g. a CLIP-alignment score for image pipelines), which
sort after the core block in their configured order.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

CORE_METRICS: tuple[str, ...] = ("VQ", "TC", "DD", "TVA", "FC", "AES", "MPS")

_clamp_lock = threading.Lock()
_clamp_count = 0


def clamp_count() -> int:
    """Number of raw values clamped by normalize() since the last reset."""
    return _clamp_count


def reset_clamp_count() -> None:
    global _clamp_count
    with _clamp_lock:
        _clamp_count = 0


def _record_clamp() -> None:
    global _clamp_count
    with _clamp_lock:
        _clamp_count += 1


def ordered_metrics(names: Iterable[str]) -> tuple[str, ...]:
    """Return metric names in canonical order: core metrics first, then extensions.

    Extension names keep their given relative order. Raises ValueError on empty
    or duplicate names.
    """
    seen: set[str] = set()
    listed: list[str] = []
    for name in names:
        if not isinstance(name, str) or not name:
            raise ValueError(f"invalid metric name: {name!r}")
        if name in seen:
            raise ValueError(f"duplicate metric name: {name!r}")
        seen.add(name)
        listed.append(name)
    core = [m for m in CORE_METRICS if m in seen]
    ext = [m for m in listed if m not in CORE_METRICS]
    return tuple(core + ext)


@dataclass(frozen=True)
class MetricScale:
    """Affine mapping from a scorer's raw range onto the common target scale."""

    metric: str
    raw_min: float
    raw_max: float
    target_min: float = 0.0
    target_max: float = 5.0

    def __post_init__(self):
        if not self.raw_min < self.raw_max:
            raise ValueError(f"{self.metric}: raw_min must be < raw_max")
        if not self.target_min < self.target_max:
            raise ValueError(f"{self.metric}: target_min must be < target_max")


def normalize(raw: float, scale: MetricScale) -> float:
    """Map a raw score onto the target interval, clamping out-of-range values.

    Exact at both endpoints and monotone non-decreasing in the raw value.
    Clamps are counted in a module-level diagnostic counter. NaN is rejected.
    """
    if math.isnan(raw):
        raise ValueError(f"{scale.metric}: raw score is NaN")
    if raw <= scale.raw_min:
        if raw < scale.raw_min:
            _record_clamp()
        return scale.target_min
    if raw >= scale.raw_max:
        if raw > scale.raw_max:
            _record_clamp()
        return scale.target_max
    slope = (scale.target_max - scale.target_min) / (scale.raw_max - scale.raw_min)
    value = scale.target_min + (raw - scale.raw_min) * slope
    # interior rounding may land a hair outside the target band
    if value < scale.target_min:
        return scale.target_min
    if value > scale.target_max:
        return scale.target_max
    return value


@dataclass(frozen=True)
class ScoreVector:
    """One scored evaluation: raw scorer outputs plus their normalized form."""

    values: Mapping[str, float]
    normalized: Mapping[str, float]
    metric_set: tuple[str, ...]

    def __post_init__(self):
        if set(self.values) != set(self.metric_set) or set(self.normalized) != set(self.metric_set):
            raise ValueError("values/normalized keys must equal metric_set")

    @classmethod
    def from_raw(cls, values: Mapping[str, float], scales: Mapping[str, MetricScale]) -> "ScoreVector":
        metric_set = ordered_metrics(values.keys())
        missing = [m for m in metric_set if m not in scales]
        if missing:
            raise ValueError(f"no scale configured for metrics: {missing}")
        normalized = {m: normalize(values[m], scales[m]) for m in metric_set}
        return cls(values=dict(values), normalized=normalized, metric_set=metric_set)

    @classmethod
    def from_normalized(cls, normalized: Mapping[str, float]) -> "ScoreVector":
        """Build a vector whose raw values already sit on the target scale."""
        metric_set = ordered_metrics(normalized.keys())
        data = dict(normalized)
        return cls(values=data, normalized=dict(data), metric_set=metric_set)

    def to_json_obj(self) -> dict:
        return {
            "raw": {m: self.values[m] for m in self.metric_set},
            "norm": {m: self.normalized[m] for m in self.metric_set},
        }

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "ScoreVector":
        metric_set = ordered_metrics(obj["raw"].keys())
        return cls(values=dict(obj["raw"]), normalized=dict(obj["norm"]), metric_set=metric_set)


@dataclass(frozen=True)
class ThresholdPolicy:
    """Per-metric minimums on the normalized scale, plus a fallback rule."""

    per_metric_min: Mapping[str, float]
    fallback: str = "highest_overall"  # or "reject"

    def __post_init__(self):
        if self.fallback not in ("highest_overall", "reject"):
            raise ValueError(f"unknown fallback policy: {self.fallback!r}")


def overall(sv: ScoreVector) -> float:
    """Sum of normalized values over the metric set."""
    if not sv.metric_set:
        raise ValueError("no metrics configured")
    return sum(sv.normalized[m] for m in sv.metric_set)


def _rank_key(item: tuple):
    cid, sv = item
    return (-overall(sv), -sv.normalized.get("TVA", 0.0), cid)


def rank(candidates: Sequence[tuple[int, ScoreVector]]) -> list[int]:
    """Order candidate ids by descending overall score.

    Ties break on higher normalized TVA, then on lower id, so the result is a
    deterministic permutation of the input ids. All candidates must share one
    metric set.
    """
    if not candidates:
        return []
    first = candidates[0][1].metric_set
    for cid, sv in candidates:
        if sv.metric_set != first:
            raise ValueError(f"candidate {cid} has metric set {sv.metric_set}, expected {first}")
    return [cid for cid, _ in sorted(candidates, key=_rank_key)]


def select_top_n(population: Sequence[tuple[int, ScoreVector]], n: int) -> list[int]:
    """First n ids of rank(); the whole population when it is smaller than n."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return rank(population)[:n]


def dominates(a: ScoreVector, b: ScoreVector) -> bool:
    """Pareto dominance on normalized values: >= everywhere and > somewhere."""
    better = False
    for m in a.metric_set:
        if a.normalized[m] < b.normalized[m]:
            return False
        if a.normalized[m] > b.normalized[m]:
            better = True
    return better


def select_top_n_pareto(population: Sequence[tuple[int, ScoreVector]], n: int) -> list[int]:
    """Alternative selection: walk Pareto fronts, ordering within a front as rank() does."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not population:
        return []
    rank(population)  # reuse the homogeneity check
    remaining = list(population)
    selected: list[int] = []
    while remaining and len(selected) < n:
        front = [
            (cid, sv)
            for cid, sv in remaining
            if not any(dominates(other, sv) for ocid, other in remaining if ocid != cid)
        ]
        front_ids = set(cid for cid, _ in front)
        selected.extend(cid for cid, _ in sorted(front, key=_rank_key))
        remaining = [(cid, sv) for cid, sv in remaining if cid not in front_ids]
    return selected[:n]


def passes_thresholds(sv: ScoreVector, policy: ThresholdPolicy) -> bool:
    """True iff every covered metric's normalized value meets its minimum."""
    for metric, minimum in policy.per_metric_min.items():
        if metric not in sv.normalized:
            raise ValueError(f"threshold metric {metric!r} not present in score vector")
        if sv.normalized[metric] < minimum:
            return False
    return True
