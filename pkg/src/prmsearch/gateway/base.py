"""Model interfaces and PRM step scoring."""

from __future__ import annotations

import math
from typing import Any, Mapping, Optional, Protocol, Sequence, runtime_checkable

from ..core import ActionKind, Problem, ReasoningStep, StepCritique, Trajectory
from ..errors import ScoringError


@runtime_checkable
class ActorModel(Protocol):
    id: str

    def generate(self, problem: Problem, prefix: Sequence[ReasoningStep], action: ActionKind,
                 temperature: float) -> ReasoningStep: ...

    def complete(self, prompt: str, temperature: float,
                 payload: Optional[Mapping[str, Any]] = None) -> str:
        """Free-form completion; ``payload`` carries the structured request for offline mocks."""
        ...


@runtime_checkable
class RewardModel(Protocol):
    id: str

    def critique(self, problem: Problem, prefix: Sequence[ReasoningStep], step: ReasoningStep) -> StepCritique: ...

    def critique_full(self, problem: Problem, trajectory: Trajectory) -> list[StepCritique]: ...


def sample_critiques(reward_model, problem, prefix, step, k_prm: int) -> list[StepCritique]:
    if k_prm < 1:
        raise ValueError(f"k_prm must be >= 1, got {k_prm}")
    out: list[StepCritique] = []
    for _ in range(k_prm):
        try:
            out.append(reward_model.critique(problem, prefix, step))
        except Exception as exc:
            raise ScoringError(f"critique by {getattr(reward_model, 'id', '?')} failed: {exc}",
                               partial=[c.score for c in out]) from exc
    return out


def prm_step_score(reward_model, problem, prefix, step, k_prm: int = 1) -> float:
    """Averaged affirmative score of ``step`` over ``k_prm`` critique calls."""
    scores = [c.score for c in sample_critiques(reward_model, problem, prefix, step, k_prm)]
    return math.fsum(scores) / len(scores)
