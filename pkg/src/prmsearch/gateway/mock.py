"""Deterministic scripted stand-ins for actor and reward models.

Actors are stateless: every draw uses a RNG seeded from the mock seed and
the full request (problem, action, prefix digest, temperature), so results
do not depend on call order or threading. Reward scripts may list several
outcomes for one step; those are served round-robin per key, which is the
one piece of mutable state and is guarded by a lock.
"""

from __future__ import annotations

import random
import re
import threading
from typing import Any, Callable, Mapping, Optional, Sequence, Union

from ..core import (
    ERROR_LABELS,
    ActionKind,
    Problem,
    ReasoningStep,
    StepCritique,
    StepLabel,
    Trajectory,
    prefix_hash,
    stable_seed,
)

Outcome = Union[str, BaseException]
OutcomeTable = Union[Outcome, Sequence[tuple[float, Outcome]]]


def _draw(table: OutcomeTable, rng: random.Random) -> Outcome:
    if isinstance(table, (str, BaseException)):
        return table
    weights = [w for w, _ in table]
    return rng.choices([o for _, o in table], weights=weights, k=1)[0]


def _raise_or_return(outcome):
    if isinstance(outcome, BaseException):
        raise outcome
    return outcome


def corrupt_text(text: str, rng: random.Random) -> str:
    """Minimal guaranteed-different rewrite: bump the last digit, else append a wrong claim."""
    digits = [m.start() for m in re.finditer(r"\d", text)]
    if digits:
        i = digits[-1]
        return text[:i] + str((int(text[i]) + 1 + rng.randrange(8)) % 10) + text[i + 1:]
    return text + " (so the opposite must hold)"


def split_sentences(text: str) -> list[str]:
    parts = re.split(r"(?<=[.!?])\s+|\n+", text.strip())
    return [p.strip() for p in parts if p.strip()]


class ScriptedActor:
    """Actor whose outputs come from a lookup table with a seeded fallback.

    ``script`` keys are ``(problem_id, action, prefix_hash)`` tuples; either
    ``problem_id`` or ``prefix_hash`` may be ``None`` as a wildcard. Values
    are a single outcome or a list of ``(weight, outcome)`` pairs; an
    exception outcome is raised.

    ``solutions`` maps problem ids to outcome tables of whole tagged
    solutions, used by ``complete`` for Best-of-N sampling. ``completer``
    overrides ``complete`` entirely: it gets the payload and a seeded RNG.
    """

    def __init__(self, id: str, seed: int = 0,
                 script: Optional[Mapping[tuple, OutcomeTable]] = None,
                 solutions: Optional[Mapping[str, OutcomeTable]] = None,
                 completer: Optional[Callable[[Mapping[str, Any], random.Random], str]] = None,
                 default_branching: int = 2):
        self.id = id
        self.seed = seed
        self.script = {self._norm_key(k): v for k, v in (script or {}).items()}
        self.solutions = dict(solutions or {})
        self.completer = completer
        self.default_branching = default_branching

    @staticmethod
    def _norm_key(key):
        pid, action, phash = key
        return pid, ActionKind(action), phash

    def _rng(self, *parts) -> random.Random:
        return random.Random(stable_seed(self.seed, self.id, *parts))

    def lookup(self, problem_id, action, phash):
        for key in ((problem_id, action, phash), (problem_id, action, None), (None, action, phash),
                    (None, action, None)):
            if key in self.script:
                return self.script[key]
        return None

    def generate(self, problem: Problem, prefix: Sequence[ReasoningStep], action: ActionKind,
                 temperature: float) -> ReasoningStep:
        action = ActionKind(action)
        phash = prefix_hash(prefix)
        rng = self._rng(problem.id, action.value, phash, repr(float(temperature)))
        table = self.lookup(problem.id, action, phash)
        if table is None:
            text = f"{action.value} {len(prefix)}.{rng.randrange(self.default_branching)}"
        else:
            text = _raise_or_return(_draw(table, rng))
        return ReasoningStep(action, text, self.id)

    def complete(self, prompt: str, temperature: float, payload: Optional[Mapping[str, Any]] = None) -> str:
        payload = dict(payload or {})
        rng = self._rng(payload.get("kind"), payload.get("problem_id"), payload.get("slot"),
                        repr(float(temperature)), prompt if not payload else "")
        if self.completer is not None:
            return _raise_or_return(self.completer(payload, rng))
        kind = payload.get("kind")
        if kind == "solve":
            table = self.solutions.get(payload.get("problem_id"))
            if table is not None:
                return _raise_or_return(_draw(table, rng))
            answer = rng.choice("ABCD")
            return (f"[caption] figure for {payload.get('problem_id')}\n[thinking] try option {answer}\n"
                    f"[self_reflection] option {answer} fits\n[answer] {answer}")
        if kind == "inject_error":
            return corrupt_text(payload["step"], rng)
        if kind == "segment":
            return "\n".join(split_sentences(payload["answer"]))
        return f"response {rng.randrange(10 ** 6)}"


CritiqueOutcome = Union[float, StepCritique, tuple, BaseException]


class ScriptedRewardModel:
    """Reward model driven by a script, a scoring callable, or a seeded default.

    Resolution order for one step: ``scorer`` if given; then ``script``
    entries keyed by ``(problem_id, content)`` or by ``content`` alone,
    served round-robin; then a seeded pseudo-random critique that depends
    only on the request. Outcomes may be a bare score, a
    ``(score, label[, explanation])`` tuple, a StepCritique or an exception.
    """

    def __init__(self, id: str = "mock-prm", seed: int = 0,
                 script: Optional[Mapping[Any, Union[CritiqueOutcome, Sequence[CritiqueOutcome]]]] = None,
                 scorer: Optional[Callable[[Problem, Sequence[ReasoningStep], ReasoningStep], CritiqueOutcome]] = None,
                 default_score: Optional[float] = None):
        self.id = id
        self.seed = seed
        self.script = dict(script or {})
        self.scorer = scorer
        self.default_score = default_score
        self._counters: dict[Any, int] = {}
        self._lock = threading.Lock()

    def reset(self):
        with self._lock:
            self._counters.clear()

    def _next(self, key, entry):
        if not isinstance(entry, (list, tuple)) or (isinstance(entry, tuple) and _is_outcome_tuple(entry)):
            return entry
        with self._lock:
            i = self._counters.get(key, 0)
            self._counters[key] = i + 1
        return entry[i % len(entry)]

    def _to_critique(self, outcome: CritiqueOutcome, step: ReasoningStep) -> StepCritique:
        if isinstance(outcome, BaseException):
            raise outcome
        if isinstance(outcome, StepCritique):
            return outcome
        if isinstance(outcome, tuple):
            score, label, *rest = outcome
            return StepCritique(step.content, StepLabel(label), rest[0] if rest else f"scripted {label}", score)
        score = float(outcome)
        label = StepLabel.CORRECT_STEP if score >= 0.5 else StepLabel.LOGICAL_REASONING_ERROR
        return StepCritique(step.content, label, "scripted score", score)

    def critique(self, problem: Problem, prefix: Sequence[ReasoningStep], step: ReasoningStep) -> StepCritique:
        if self.scorer is not None:
            return self._to_critique(self.scorer(problem, prefix, step), step)
        for key in ((problem.id, step.content), step.content):
            if key in self.script:
                return self._to_critique(self._next(key, self.script[key]), step)
        rng = random.Random(stable_seed(self.seed, self.id, problem.id, prefix_hash(prefix), step.action.value,
                                        step.content))
        if self.default_score is not None:
            score = self.default_score
        else:
            score = round(rng.random(), 6)
        if score >= 0.5:
            return StepCritique(step.content, StepLabel.CORRECT_STEP, "looks right", score)
        label = rng.choice(ERROR_LABELS)
        return StepCritique(step.content, label, f"seeded {label.value}", score)

    def critique_full(self, problem: Problem, trajectory: Trajectory) -> list[StepCritique]:
        steps = trajectory.steps
        return [self.critique(problem, steps[:i], s) for i, s in enumerate(steps)]


def _is_outcome_tuple(t: tuple) -> bool:
    return len(t) in (2, 3) and isinstance(t[0], (int, float)) and isinstance(t[1], (str, StepLabel))
