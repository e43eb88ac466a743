"""Greedy graph selection by residual size, plus the curriculum schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

VARIANTS = ("none", "B", "S")
NUM_STAGES = 50


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionPolicy:
    variant: str = "none"
    start_ratio: float = 1.0
    level: str = "graph"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise SelectionError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0.0 < self.start_ratio <= 1.0:
            raise SelectionError(f"start_ratio must lie in (0, 1], got {self.start_ratio}")
        if self.level not in ("graph", "node"):
            raise SelectionError(f"level must be 'graph' or 'node', got {self.level!r}")

    @property
    def enabled(self) -> bool:
        return self.variant != "none"


def residual_scores(outputs: Sequence[np.ndarray], targets: Sequence[np.ndarray], level: str = "graph",
                    node_counts: Sequence[int] | None = None,
                    masks: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """Per-graph residual norms.

    Graph level: Euclidean norm of ``output - target``. Node level: Frobenius
    norm of the node residual matrix divided by the graph's node count.
    Missing labels (mask 0) contribute nothing.
    """
    if len(outputs) != len(targets):
        raise SelectionError(f"{len(outputs)} outputs but {len(targets)} targets")
    if masks is not None and len(masks) != len(outputs):
        raise SelectionError("masks are not aligned with outputs")
    if level == "node":
        if node_counts is None or len(node_counts) != len(outputs):
            raise SelectionError("node level scoring needs one node count per graph")
    elif level != "graph":
        raise SelectionError(f"unknown level {level!r}")
    scores = np.empty(len(outputs))
    for i, (out, y) in enumerate(zip(outputs, targets)):
        r = np.asarray(out, dtype=np.float64) - np.asarray(y, dtype=np.float64)
        if masks is not None:
            r = r * masks[i]
        s = math.sqrt(float(np.sum(r * r)))
        scores[i] = s / node_counts[i] if level == "node" else s
    return scores


def select_top_m(scores: Sequence[float], m: int) -> np.ndarray:
    """Indices of the ``m`` largest scores, largest first; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= m <= scores.size:
        raise SelectionError(f"cannot select {m} of {scores.size}")
    order = np.argsort(-scores, kind="stable")
    return order[:m]


def select_batches_B(batch_scores: Sequence[float], m_batches: int) -> list[int]:
    """Batches with the largest mean residual, returned in original order."""
    return sorted(int(i) for i in select_top_m(batch_scores, m_batches))


def keep_count(size: int, ratio: float) -> int:
    # tolerance guards against 0.3 * 10 = 3.0000000000000004
    return min(size, max(1, math.ceil(ratio * size - 1e-9)))


def select_graphs_S(batches: Sequence[Sequence[int]], scores, ratio: float, batch_size: int) -> list[list[int]]:
    """Keep the top ``ceil(ratio * |batch|)`` graphs of each batch and repack.

    ``scores`` maps a graph index to its residual score (array or mapping).
    Kept graphs are concatenated batch by batch, highest score first, then
    cut into new batches of ``batch_size``.
    """
    if not 0.0 < ratio <= 1.0:
        raise SelectionError(f"ratio must lie in (0, 1], got {ratio}")
    if batch_size < 1:
        raise SelectionError(f"batch_size must be positive, got {batch_size}")
    kept: list[int] = []
    for bi, batch in enumerate(batches):
        if len(batch) == 0:
            raise SelectionError(f"batch {bi} is empty")
        local = [scores[g] for g in batch]
        top = select_top_m(local, keep_count(len(batch), ratio))
        kept.extend(int(batch[j]) for j in top)
    return [kept[i:i + batch_size] for i in range(0, len(kept), batch_size)]


# --- curriculum -------------------------------------------------------------------


@dataclass(frozen=True)
class Stage:
    epoch_start: int
    interval: int
    ratio: float


@dataclass(frozen=True)
class CurriculumSchedule:
    stages: tuple[Stage, ...]
    total_epochs: int

    def stage_at(self, epoch: int) -> Stage:
        """Stage covering 1-based ``epoch``."""
        current = self.stages[0]
        for st in self.stages:
            if st.epoch_start > epoch:
                break
            current = st
        return current

    def is_event(self, epoch: int) -> bool:
        st = self.stage_at(epoch)
        return (epoch - st.epoch_start) % st.interval == 0

    def ratio_at(self, epoch: int) -> float:
        return self.stage_at(epoch).ratio

    def event_epochs(self) -> list[int]:
        return [e for e in range(1, self.total_epochs + 1) if self.is_event(e)]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def build_schedule(start_ratio: float, total_epochs: int, max_interval: int | None = None) -> CurriculumSchedule:
    """Curriculum of up to 50 stages with widening selection intervals.

    Ratios rise linearly from ``start_ratio`` to 1 and intervals linearly
    from 1 to ``max_interval`` (default ``total_epochs // 50``, at least 1).
    Epochs are 1-based; stage ``s`` starts at ``1 + floor(s * T / S)``.
    """
    if not 0.0 < start_ratio <= 1.0:
        raise SelectionError(f"start_ratio must lie in (0, 1], got {start_ratio}")
    if total_epochs < 1:
        raise SelectionError(f"total_epochs must be >= 1, got {total_epochs}")
    if max_interval is None or max_interval <= 0:
        max_interval = max(1, total_epochs // NUM_STAGES)
    n_stages = min(NUM_STAGES, total_epochs)
    stages = []
    for s in range(n_stages):
        frac = s / (n_stages - 1) if n_stages > 1 else 0.0
        stages.append(Stage(
            epoch_start=1 + (s * total_epochs) // n_stages,
            interval=max(1, _round_half_up(1 + (max_interval - 1) * frac)),
            ratio=1.0 if frac == 1.0 else start_ratio + (1.0 - start_ratio) * frac,
        ))
    return CurriculumSchedule(tuple(stages), total_epochs)
