"""Memory-utilization accounting.

Per memory layer, an `AccessLog` accumulates three per-slot tallies over a
stream of forward passes: how often the slot received positive access weight
(u), how often it was the per-position argmax of the head-summed weights (t),
and its total summed weight (w). From those it derives the usage fractions,
the divergence of the access distribution from uniform, the staleness
histogram across checkpoint intervals, and the class-conditional usage
divergence used for label-split analysis.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pkm import MemoryAccess


class AccessLog:
    """Per-slot access tallies for one memory layer; merge is commutative."""

    def __init__(self, num_slots: int):
        if num_slots <= 0:
            raise ValueError("num_slots must be positive")
        self.num_slots = num_slots
        self.u_raw = np.zeros(num_slots, dtype=np.int64)  # positions with weight > 0
        self.t_raw = np.zeros(num_slots, dtype=np.int64)  # positions with argmax here
        self.w_raw = np.zeros(num_slots, dtype=np.float64)  # summed weights
        self.queries = 0

    def record(self, access: MemoryAccess) -> None:
        """Fold one forward pass into the tallies.

        Weights are first summed across heads per position; a slot counts for
        u once per position regardless of how many heads picked it, and the
        argmax tie goes to the lower slot index.
        """
        if access.num_slots != self.num_slots:
            raise ValueError(
                f"slot count mismatch: log has {self.num_slots}, access {access.num_slots}"
            )
        pos, slots, weights = access.aggregated_pairs()
        n = access.indices.shape[0]
        self.queries += n
        if n == 0:
            return
        positive = weights > 0.0
        self.u_raw += np.bincount(slots[positive], minlength=self.num_slots)
        self.w_raw += np.bincount(slots, weights=weights, minlength=self.num_slots)
        # Order by (position, weight desc, slot asc); first row per position
        # is its argmax winner under the low-index tie rule.
        order = np.lexsort((slots, -weights, pos))
        pos_sorted = pos[order]
        first = np.ones(pos_sorted.size, dtype=bool)
        first[1:] = pos_sorted[1:] != pos_sorted[:-1]
        self.t_raw += np.bincount(slots[order][first], minlength=self.num_slots)

    def merge(self, other: "AccessLog") -> "AccessLog":
        """Fold another log in; equivalent to having logged both streams."""
        if other.num_slots != self.num_slots:
            raise ValueError("cannot merge logs with different slot counts")
        self.u_raw += other.u_raw
        self.t_raw += other.t_raw
        self.w_raw += other.w_raw
        self.queries += other.queries
        return self

    def copy(self) -> "AccessLog":
        out = AccessLog(self.num_slots)
        out.u_raw = self.u_raw.copy()
        out.t_raw = self.t_raw.copy()
        out.w_raw = self.w_raw.copy()
        out.queries = self.queries
        return out

    @property
    def empty(self) -> bool:
        return int(self.u_raw.sum()) == 0


def memory_usage(log: AccessLog) -> tuple[float, float]:
    """(MU, MU_top1): fraction of slots accessed at least once / argmax at least once."""
    mu = float((log.u_raw > 0).sum()) / log.num_slots
    mu_top1 = float((log.t_raw > 0).sum()) / log.num_slots
    return mu, mu_top1


def _kl_from_uniform(counts: np.ndarray, num_slots: int) -> float:
    total = counts.sum()
    if total <= 0:
        raise ValueError("empty log: cannot normalize access distribution")
    p = counts / total
    positive = p > 0
    kl = np.log(num_slots) + float((p[positive] * np.log(p[positive])).sum())
    return max(kl, 0.0)


def kl_uniform(log: AccessLog) -> tuple[float, float]:
    """(KL_u, KL_w): divergence of normalized counts / weights from uniform.

    Both lie in [0, log(num_slots)]; 0 for a uniform distribution, the upper
    bound only for a one-hot one.
    """
    return (
        _kl_from_uniform(log.u_raw.astype(np.float64), log.num_slots),
        _kl_from_uniform(log.w_raw, log.num_slots),
    )


def staleness_histogram(snapshots: list[np.ndarray]) -> np.ndarray:
    """Bucket slots by the last interval in which they were argmax-selected.

    `snapshots` are per-interval t tallies (reset between checkpoints), in
    checkpoint order. Returns counts of length len(snapshots) + 1: bucket 0
    holds never-selected slots, bucket i (1-based) the slots whose last
    use fell in interval i. Buckets partition the slot set exactly.
    """
    if not snapshots:
        raise ValueError("need at least one snapshot")
    num_slots = snapshots[0].shape[0]
    last = np.zeros(num_slots, dtype=np.int64)
    for idx, snap in enumerate(snapshots, start=1):
        if snap.shape[0] != num_slots:
            raise ValueError("snapshots disagree on slot count")
        last[snap > 0] = idx
    return np.bincount(last, minlength=len(snapshots) + 1)


@dataclass
class ClassUsage:
    """Normalized per-class argmax-usage distributions over slots."""

    positive: np.ndarray
    negative: np.ndarray


def class_divergence(pos_counts: np.ndarray, neg_counts: np.ndarray,
                     eps: float = 1e-8) -> tuple[float, float]:
    """(symmetrized KL, IOU) between the two class-usage distributions.

    Counts are normalized to sum 1 per side; the KL is the mean of the two
    directed divergences after additive eps-smoothing (so disjoint supports
    stay finite). IOU = sum(min) / sum(max) is 1 iff the distributions are
    identical and 0 iff their supports are disjoint.
    """
    pos_counts = np.asarray(pos_counts, dtype=np.float64)
    neg_counts = np.asarray(neg_counts, dtype=np.float64)
    if pos_counts.shape != neg_counts.shape:
        raise ValueError("class usage arrays must have equal length")
    if pos_counts.sum() <= 0 or neg_counts.sum() <= 0:
        raise ValueError("one class side is empty")
    p = pos_counts / pos_counts.sum()
    q = neg_counts / neg_counts.sum()

    ps = (p + eps) / (p + eps).sum()
    qs = (q + eps) / (q + eps).sum()
    kl_pq = float((ps * np.log(ps / qs)).sum())
    kl_qp = float((qs * np.log(qs / ps)).sum())
    kl_sym = max(0.5 * (kl_pq + kl_qp), 0.0)

    iou = float(np.minimum(p, q).sum() / np.maximum(p, q).sum())
    return kl_sym, iou


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------

UTILIZATION_FIELDS = ("layer", "MU", "MU_top1", "KL_u", "KL_w")


def utilization_report(logs: dict[int, AccessLog]) -> list[dict]:
    """One row per memory layer (keyed by 1-based position), JSON/CSV ready."""
    rows = []
    for layer in sorted(logs):
        log = logs[layer]
        mu, mu_top1 = memory_usage(log)
        if log.empty:
            kl_u = kl_w = float("nan")
        else:
            kl_u, kl_w = kl_uniform(log)
        rows.append(
            {"layer": layer, "MU": mu, "MU_top1": mu_top1, "KL_u": kl_u, "KL_w": kl_w}
        )
    return rows


def write_utilization_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=UTILIZATION_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in UTILIZATION_FIELDS})


def write_utilization_json(path, rows: list[dict]) -> None:
    Path(path).write_text(json.dumps(rows, indent=2) + "\n")


def write_staleness_csv(path, histogram: np.ndarray) -> None:
    """Columns (checkpoint_index, count); index 0 is the never-used bucket."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["checkpoint_index", "count"])
        for idx, count in enumerate(histogram):
            writer.writerow([idx, int(count)])
