"""Choosing which problems to search: reward-variance ranking, difficulty filter, stratified quotas."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .core import GRADES, Subject
from .errors import EmptyCorpus, InsufficientSamples

EASY_ACCURACY = 0.70


@dataclass(frozen=True)
class CellCount:
    subject: Subject
    grade: int
    count: int

    def __post_init__(self):
        object.__setattr__(self, "subject", Subject(self.subject))
        if self.grade not in GRADES:
            raise ValueError(f"grade must be within 7-12, got {self.grade}")
        if self.count < 0:
            raise ValueError("count must be non-negative")

    @property
    def cell(self) -> tuple[Subject, int]:
        return self.subject, self.grade

    def to_dict(self):
        return {"subject": self.subject.value, "grade": self.grade, "count": self.count}

    @classmethod
    def from_dict(cls, d):
        return cls(Subject(d["subject"]), int(d["grade"]), int(d["count"]))


@dataclass(frozen=True)
class SelectionReport:
    problem_id: str
    variance: float
    mean_reward: float
    prioritized: bool = False

    def to_dict(self):
        return {"problem_id": self.problem_id, "variance": self.variance, "mean_reward": self.mean_reward,
                "prioritized": self.prioritized}


def reward_variance(step_scores_per_solution: Sequence[Sequence[float]]) -> tuple[float, float]:
    """Population mean and variance of per-solution mean step scores."""
    if len(step_scores_per_solution) < 2:
        raise InsufficientSamples("reward variance needs at least 2 solutions")
    if any(len(s) == 0 for s in step_scores_per_solution):
        raise ValueError("every solution needs at least one step score")
    mu, var = _kernels.group_mean_variance(step_scores_per_solution)
    return mu, max(var, 0.0)


def select_samples(reports: Sequence[SelectionReport], top_fraction: float) -> list[str]:
    """Ids of the ceil(top_fraction * n) highest-variance reports; ties by id."""
    if not reports:
        raise ValueError("select_samples needs at least one report")
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError("top_fraction must lie in (0, 1]")
    # the epsilon absorbs binary noise such as 0.1 * 30 = 3.0000000000000004
    k = min(len(reports), math.ceil(top_fraction * len(reports) - 1e-9))
    ranked = sorted(reports, key=lambda r: (-r.variance, r.problem_id))
    return [r.problem_id for r in ranked[:k]]


def stratified_quotas(counts: Sequence[CellCount], total: int) -> dict[tuple[Subject, int], int]:
    """Allocate ``total`` samples across (subject, grade) cells proportionally to their counts.

    Each weight N*T/sum(N) is rounded half-to-even; the rounding residual
    then goes to the cells with the largest (or, when over-allocated, the
    smallest) remainders so that quotas sum to ``total`` exactly. The
    arithmetic is integer, so there is no floating-point drift.
    """
    if total < 1:
        raise ValueError("total must be positive")
    if not counts or all(c.count == 0 for c in counts):
        raise EmptyCorpus("all concept counts are zero")
    q = _kernels.largest_remainder_quotas([c.count for c in counts], total)
    return {c.cell: int(x) for c, x in zip(counts, q)}


def difficulty_filter(problem_stats: Iterable[tuple[str, float, bool]]) -> list[str]:
    """Drop problems that models already solve (> 70% accuracy) or that need no image."""
    kept = []
    for pid, acc, text_only in problem_stats:
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"accuracy for {pid} outside [0, 1]: {acc}")
        if acc <= EASY_ACCURACY and not text_only:
            kept.append(pid)
    return kept


def build_reports(scores: dict[str, Sequence[Sequence[float]]], top_fraction: float) -> list[SelectionReport]:
    reports = []
    for pid in sorted(scores):
        mean, var = reward_variance(scores[pid])
        reports.append(SelectionReport(pid, var, mean))
    chosen = set(select_samples(reports, top_fraction)) if reports else set()
    return [SelectionReport(r.problem_id, r.variance, r.mean_reward, r.problem_id in chosen) for r in reports]


def unrounded_weights(counts: Sequence[CellCount], total: int) -> np.ndarray:
    n = np.array([c.count for c in counts], dtype=np.float64)
    return n / n.sum() * total
