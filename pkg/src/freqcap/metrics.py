"""Evaluation metrics and frequency-stratified CTR statistics.

LogLoss is reported as a per-event mean (lifts, being ratios, are unchanged
by the normalization).  AUC uses the rank-sum formulation with average ranks
for ties (half credit).  sAUC is the click-weighted average of per-section
AUCs; sections with a single class are skipped with a logged warning.
Normalized-CTR curves divide the per-frequency CTR by the frequency-0 CTR,
with the last point aggregating everything at or above ``v_max``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import UndefinedMetricError

log = logging.getLogger(__name__)

#: Predictions are clamped into [PRED_CLAMP, 1 - PRED_CLAMP] before LogLoss.
PRED_CLAMP = 1e-9


@dataclass(frozen=True, slots=True)
class ScoredEvent:
    """One evaluated impression: prediction, outcome, and stratification tags."""

    prediction: float
    label: int
    section_id: str = ""
    frequency: int = 0
    tags: Mapping[str, str] | None = None


@dataclass
class ScoredArrays:
    """Columnar form of a scored-event set; the array-native API for big runs."""

    predictions: np.ndarray
    labels: np.ndarray
    sections: np.ndarray
    frequencies: np.ndarray
    tag_columns: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.predictions)

    @classmethod
    def from_events(cls, scored: Iterable[ScoredEvent]) -> "ScoredArrays":
        scored = list(scored)
        tag_keys: set[str] = set()
        for ev in scored:
            if ev.tags:
                tag_keys.update(ev.tags)
        tag_columns = {
            key: np.asarray([(ev.tags or {}).get(key, "") for ev in scored])
            for key in sorted(tag_keys)
        } or None
        return cls(
            predictions=np.asarray([ev.prediction for ev in scored], dtype=float),
            labels=np.asarray([ev.label for ev in scored], dtype=np.int8),
            sections=np.asarray([ev.section_id for ev in scored]),
            frequencies=np.asarray([ev.frequency for ev in scored], dtype=np.int64),
            tag_columns=tag_columns,
        )


def _as_arrays(scored) -> ScoredArrays:
    if isinstance(scored, ScoredArrays):
        return scored
    return ScoredArrays.from_events(scored)


# -- LogLoss ---------------------------------------------------------------


def logloss_arrays(predictions: np.ndarray, labels: np.ndarray) -> float:
    if len(predictions) == 0:
        raise UndefinedMetricError("logloss of an empty set")
    p = np.clip(np.asarray(predictions, dtype=float), PRED_CLAMP, 1.0 - PRED_CLAMP)
    y = np.asarray(labels)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def logloss(scored: Iterable[ScoredEvent] | ScoredArrays) -> float:
    """Mean per-event logistic loss."""
    arrays = _as_arrays(scored)
    return logloss_arrays(arrays.predictions, arrays.labels)


class LoglossAccumulator:
    """Mergeable running (sum, count) pair for distributed/partitioned LogLoss."""

    def __init__(self):
        self.total = 0.0
        self.count = 0

    def update(self, predictions: np.ndarray, labels: np.ndarray) -> None:
        if len(predictions) == 0:
            return
        p = np.clip(np.asarray(predictions, dtype=float), PRED_CLAMP, 1.0 - PRED_CLAMP)
        y = np.asarray(labels)
        self.total += float(-np.sum(y * np.log(p) + (1 - y) * np.log1p(-p)))
        self.count += len(p)

    def merge(self, other: "LoglossAccumulator") -> "LoglossAccumulator":
        out = LoglossAccumulator()
        out.total = self.total + other.total
        out.count = self.count + other.count
        return out

    def result(self) -> float:
        if self.count == 0:
            raise UndefinedMetricError("logloss of an empty set")
        return self.total / self.count


# -- AUC / sAUC --------------------------------------------------------------


def auc_arrays(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-sum AUC with average ranks on ties; O(n log n)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined: {n_pos} positive / {n_neg} negative events"
        )
    # np.unique returns sorted values; average of each tie group's rank range.
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts + 1
    avg_rank = (starts + ends) / 2.0
    ranks = avg_rank[inverse]
    pos_rank_sum = float(ranks[pos].sum())
    u = pos_rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auc(scored: Iterable[ScoredEvent] | ScoredArrays) -> float:
    """P(score+ > score-) + 0.5 * P(tie) over positive/negative event pairs."""
    arrays = _as_arrays(scored)
    return auc_arrays(arrays.predictions, arrays.labels)


def sauc_arrays(scores: np.ndarray, labels: np.ndarray, sections: np.ndarray) -> float:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    sections = np.asarray(sections)
    section_ids, inverse = np.unique(sections, return_inverse=True)
    total_weight = 0.0
    weighted = 0.0
    skipped = 0
    for i in range(len(section_ids)):
        mask = inverse == i
        sec_labels = labels[mask]
        clicks = int((sec_labels == 1).sum())
        if clicks == 0 or clicks == len(sec_labels):
            skipped += 1
            continue
        weighted += clicks * auc_arrays(scores[mask], sec_labels)
        total_weight += clicks
    if skipped:
        log.warning("sAUC skipped %d degenerate section(s) of %d", skipped, len(section_ids))
    if total_weight == 0:
        raise UndefinedMetricError("sAUC undefined: no section with both classes")
    return weighted / total_weight


def sauc(scored: Iterable[ScoredEvent] | ScoredArrays) -> float:
    """Click-weighted average of per-section AUCs."""
    arrays = _as_arrays(scored)
    return sauc_arrays(arrays.predictions, arrays.labels, arrays.sections)


# -- Lifts --------------------------------------------------------------------


@dataclass(frozen=True)
class MetricSummary:
    """The comparable metrics of one run; absent values propagate as None lifts."""

    logloss: float | None = None
    sauc: float | None = None
    cpm: float | None = None


@dataclass(frozen=True)
class LiftResult:
    logloss_lift_pct: float | None
    sauc_lift_pct: float | None
    cpm_lift_pct: float | None


def lifts(candidate: MetricSummary, baseline: MetricSummary) -> LiftResult:
    """Lower-is-better LogLoss lift (1 - c/b)*100; higher-is-better (c/b - 1)*100."""

    def _check(name: str, value: float | None) -> None:
        if value is not None and value <= 0:
            raise UndefinedMetricError(f"baseline {name} must be positive, got {value}")

    _check("logloss", baseline.logloss)
    _check("sauc", baseline.sauc)
    _check("cpm", baseline.cpm)
    ll = None
    if candidate.logloss is not None and baseline.logloss is not None:
        ll = (1.0 - candidate.logloss / baseline.logloss) * 100.0
    sa = None
    if candidate.sauc is not None and baseline.sauc is not None:
        sa = (candidate.sauc / baseline.sauc - 1.0) * 100.0
    cpm = None
    if candidate.cpm is not None and baseline.cpm is not None:
        cpm = (candidate.cpm / baseline.cpm - 1.0) * 100.0
    return LiftResult(ll, sa, cpm)


# -- Normalized CTR curves ----------------------------------------------------


@dataclass
class NctrCurve:
    """CTR by frequency, normalized by the frequency-0 CTR.

    ``v`` runs 0..v_max with the last row aggregating all frequencies >=
    v_max.  ``stderr_n`` is the delta-method standard error of ``ctr_n``
    (0 at v=0 where the ratio is exactly 1 by construction).
    """

    v: np.ndarray
    impressions: np.ndarray
    clicks: np.ndarray
    ctr: np.ndarray
    ctr_n: np.ndarray
    cdf: np.ndarray
    stderr_n: np.ndarray

    @property
    def v_max(self) -> int:
        return int(self.v[-1])


def nctr_arrays(labels: np.ndarray, frequencies: np.ndarray, v_max: int = 50) -> NctrCurve:
    labels = np.asarray(labels)
    frequencies = np.asarray(frequencies)
    if len(labels) == 0:
        raise UndefinedMetricError("nctr of an empty set")
    idx = np.minimum(frequencies, v_max)
    impressions = np.bincount(idx, minlength=v_max + 1).astype(np.int64)
    clicks = np.bincount(idx, weights=labels, minlength=v_max + 1).astype(np.int64)
    if impressions[0] == 0:
        raise UndefinedMetricError("no frequency-0 impressions to normalize by")
    if clicks[0] == 0:
        raise UndefinedMetricError("zero CTR at frequency 0; normalization undefined")
    with np.errstate(divide="ignore", invalid="ignore"):
        ctr = np.where(impressions > 0, clicks / np.maximum(impressions, 1), np.nan)
        ctr_n = ctr / ctr[0]
        # Var(X/Y) ~= Var(X)/Y^2 + X^2 Var(Y)/Y^4 for independent binomial rates.
        var = np.where(impressions > 0, ctr * (1 - ctr) / np.maximum(impressions, 1), np.nan)
        stderr = np.sqrt(var / ctr[0] ** 2 + (ctr**2) * var[0] / ctr[0] ** 4)
    stderr[0] = 0.0
    cdf = np.cumsum(impressions) / impressions.sum()
    return NctrCurve(
        v=np.arange(v_max + 1),
        impressions=impressions,
        clicks=clicks,
        ctr=ctr,
        ctr_n=ctr_n,
        cdf=cdf,
        stderr_n=stderr,
    )


def nctr_curve(scored: Iterable[ScoredEvent] | ScoredArrays, v_max: int = 50) -> NctrCurve:
    """Normalized CTR and impression CDF as functions of the frequency feature."""
    arrays = _as_arrays(scored)
    return nctr_arrays(arrays.labels, arrays.frequencies, v_max=v_max)


@dataclass
class SegmentStats:
    curve: NctrCurve
    share: float


def segment_breakdown(
    scored: Iterable[ScoredEvent] | ScoredArrays,
    segment_key: str,
    v_max: int = 50,
) -> dict[str, SegmentStats]:
    """Per-segment normalized-CTR curves plus each segment's impression share."""
    arrays = _as_arrays(scored)
    if not arrays.tag_columns or segment_key not in arrays.tag_columns:
        raise UndefinedMetricError(f"no events carry segment key {segment_key!r}")
    column = arrays.tag_columns[segment_key]
    total = len(column)
    out: dict[str, SegmentStats] = {}
    for value in np.unique(column):
        if value == "":
            continue
        mask = column == value
        curve = nctr_arrays(arrays.labels[mask], arrays.frequencies[mask], v_max=v_max)
        out[str(value)] = SegmentStats(curve=curve, share=float(mask.sum()) / total)
    if not out:
        raise UndefinedMetricError(f"segment key {segment_key!r} has no tagged events")
    return out


# -- CSV emitters ----------------------------------------------------------------


def write_nctr_csv(curve: NctrCurve, path: str, segment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        header = ["v", "ctr_n", "impressions", "cdf"]
        if segment is not None:
            header.insert(0, "segment")
        writer.writerow(header)
        for i in range(len(curve.v)):
            row = [
                int(curve.v[i]),
                f"{curve.ctr_n[i]:.10g}",
                int(curve.impressions[i]),
                f"{curve.cdf[i]:.10g}",
            ]
            if segment is not None:
                row.insert(0, segment)
            writer.writerow(row)


def write_metrics_csv(summary: Mapping[str, float], path: str) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for key, value in summary.items():
            writer.writerow([key, f"{value:.10g}"])


def read_metrics_csv(path: str) -> dict[str, float]:
    out: dict[str, float] = {}
    with open(path, newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["metric", "value"]:
            raise UndefinedMetricError(f"{path}: not a metrics CSV")
        for row in reader:
            if len(row) == 2:
                out[row[0]] = float(row[1])
    return out


def write_lifts_csv(rows: Sequence[Mapping[str, object]], path: str) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["candidate", "metric", "baseline_value", "candidate_value", "lift_pct"])
        for row in rows:
            writer.writerow(
                [
                    row["candidate"],
                    row["metric"],
                    f"{row['baseline_value']:.10g}",
                    f"{row['candidate_value']:.10g}",
                    f"{row['lift_pct']:.10g}",
                ]
            )
