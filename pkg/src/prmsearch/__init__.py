"""PRM-guided tree search, Best-of-N reranking and step-annotated dataset construction."""

from .core import (
    ActionKind,
    Grammar,
    Problem,
    ReasoningStep,
    SearchNode,
    StepCritique,
    StepLabel,
    Subject,
    Trajectory,
    grammar_valid,
)
from .mcts import SearchConfig, SearchResult, search
from .inference import BonConfig, Strategy, bon_select, evaluate_suite, sample_candidates

__version__ = "0.1.0"

__all__ = [
    "ActionKind",
    "Grammar",
    "Problem",
    "ReasoningStep",
    "SearchNode",
    "StepCritique",
    "StepLabel",
    "Subject",
    "Trajectory",
    "grammar_valid",
    "SearchConfig",
    "SearchResult",
    "search",
    "BonConfig",
    "Strategy",
    "bon_select",
    "evaluate_suite",
    "sample_candidates",
]
