"""Dynamic bit-width freezing driven by rounding-error proximity to quantization bounds."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from .quant import brs, distance_to_level
from .supernet import FreezeEntry, FreezeMask, Supernet

Mode = Literal["bound", "literal"]


@dataclass
class CriterionReport:
    scores: dict[int, float]
    mode: str
    epsilon: float
    step: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "score", "mode", "epsilon", "step"])
        for layer, score in sorted(self.scores.items()):
            w.writerow([layer, repr(float(score)), self.mode, self.epsilon, self.step])
        return buf.getvalue()


def layer_score(weights: np.ndarray, scales: dict[int, float], epsilon: float, mode: Mode = "bound") -> float:
    """Unstable-weight score of one layer given its per-bit weight step sizes."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    n = w.size
    total = 0.0
    for b, gamma in sorted(scales.items()):
        levels = brs(b, gamma)
        if mode == "bound":
            _, dist = distance_to_level(w, levels)
            count = int(np.count_nonzero(dist >= (1.0 - epsilon) * gamma / 2.0))
        elif mode == "literal":
            # one indicator per level, thresholds gamma*((1-eps)/2) + q_b
            thresholds = (1.0 - epsilon) * gamma / 2.0 + levels.levels
            a = np.sort(np.abs(w))
            count = int(np.searchsorted(a, thresholds, side="right").sum())
        else:
            raise ValueError(f"unknown criterion mode {mode!r}")
        total += count / (2 ** (b - 1) * n)
    return total


def unstable_criterion(net: Supernet, epsilon: float = 0.25, mode: Mode = "bound", step: int = 0) -> CriterionReport:
    """Score every non-fixed layer over all of its weight-bit candidates."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    scores = {}
    for layer in net.layers:
        if layer.fixed:
            continue
        scales = {b: q.gamma for b, q in layer.w_quant.items()}
        scores[layer.index] = layer_score(layer.weight.data, scales, epsilon, mode)
    return CriterionReport(scores, mode, epsilon, step)


def rank_layers(scores: dict[int, float], k: int) -> list[int]:
    """Indices of the ``k`` largest scores; ties go to the lower layer index."""
    if k < 0:
        raise ValueError("k must be non-negative")
    order = sorted(scores, key=lambda l: (-scores[l], l))
    return order[:k]


def topk_to_freeze(report: CriterionReport, k: int, net: Supernet, mask: FreezeMask, step: int, duration: int) -> list[FreezeEntry]:
    """Freeze entries for the ``k`` most unstable layers that can spare a candidate.

    Each selected layer loses its smallest currently-unfrozen weight bit
    until ``step + duration``.
    """
    eligible = {l: s for l, s in report.scores.items() if len(mask.available(net.space, l)) > 1}
    if k > len(report.scores):
        raise ValueError(f"k={k} exceeds the {len(report.scores)} scored layers")
    return [FreezeEntry(l, mask.available(net.space, l)[0], step + duration) for l in rank_layers(eligible, k)]


def k_schedule(t: int, total: int, k0: int) -> int:
    """Cosine decay of the Top-K size from ``k0`` at t=0 to 0 at t=total."""
    if total <= 0:
        raise ValueError("k_schedule: total steps must be positive")
    t = min(max(t, 0), total)
    return int(math.floor(k0 * 0.5 * (1.0 + math.cos(math.pi * t / total)) + 0.5))


@dataclass
class ScheduleConfig:
    k0: int
    total_steps: int
    period: int
    duration: int
    epsilon: float = 0.25
    mode: Mode = "bound"

    def __post_init__(self):
        if self.period < 1 or self.duration < 1:
            raise ValueError("period and duration must be >= 1")
        if self.k0 < 0 or self.total_steps < 1:
            raise ValueError("k0 must be >= 0 and total_steps >= 1")


@dataclass
class BitScheduler:
    """Periodically re-scores layers and merges new freezes into the mask."""

    config: ScheduleConfig
    mask: FreezeMask = field(default_factory=FreezeMask)
    last_report: Optional[CriterionReport] = None

    def apply(self, net: Supernet, step: int) -> Optional[CriterionReport]:
        if step % self.config.period != 0:
            return None
        self.mask.purge(step)
        report = unstable_criterion(net, self.config.epsilon, self.config.mode, step)
        k = min(k_schedule(step, self.config.total_steps, self.config.k0), len(report.scores))
        for entry in topk_to_freeze(report, k, net, self.mask, step, self.config.duration):
            self.mask.add(entry, net.space)
        self.last_report = report
        return report


def apply_schedule(scheduler: BitScheduler, net: Supernet, step: int) -> FreezeMask:
    scheduler.apply(net, step)
    return scheduler.mask
