"""Best-of-N sampling and reranking."""

from __future__ import annotations

import enum
import logging
import random
import re
from dataclasses import dataclass
from typing import Optional, Sequence

from . import _kernels
from .core import ActionKind, Problem, ReasoningStep, StepCritique, Trajectory, canonical_json, stable_seed
from .datagen import canonicalize_answer, self_consistency_vote
from .errors import SamplingError
from .gateway.prompts import build_prompt

logger = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    RANDOM = "random"
    SELF_CONSISTENCY = "self_consistency"
    PRM_ACCUMULATED = "prm_accumulated"


@dataclass(frozen=True)
class BonConfig:
    n: int = 8
    strategy: Strategy = Strategy.PRM_ACCUMULATED
    temperature_low: float = 1.1
    temperature_high: float = 1.3
    seed: int = 0
    accumulate: str = "sum"

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.temperature_low > self.temperature_high:
            raise ValueError("temperature_low must not exceed temperature_high")
        if self.accumulate not in ("sum", "mean"):
            raise ValueError("accumulate must be 'sum' or 'mean'")

    @property
    def label(self) -> str:
        return f"{self.strategy.value}@{self.n}"

    def to_dict(self):
        return {"n": self.n, "strategy": self.strategy.value, "temperature_low": self.temperature_low,
                "temperature_high": self.temperature_high, "seed": self.seed, "accumulate": self.accumulate}


_TAG = re.compile(r"^\s*\[(caption|summary|sub_task|thinking|self_reflection|answer)\]\s*(.*)$", re.I)


def parse_tagged_solution(problem_id: str, text: str, producer_id: str = "") -> Trajectory:
    """Turn ``[tag] content`` lines into a trajectory.

    Untagged lines continue the previous step. Text that yields no answer
    step, or no valid structure, becomes a Thinking step holding the whole
    text followed by an Answer step holding its last line.
    """
    steps: list[list] = []
    for line in text.splitlines():
        m = _TAG.match(line)
        if m:
            steps.append([ActionKind(m.group(1).lower()), m.group(2).strip()])
        elif line.strip() and steps:
            steps[-1][1] = (steps[-1][1] + "\n" + line.strip()).strip()
    parsed = [ReasoningStep(a, c, producer_id) for a, c in steps if c]
    actions = [s.action for s in parsed]
    if parsed and actions.count(ActionKind.ANSWER) == 1 and actions[-1] is ActionKind.ANSWER:
        return Trajectory.from_steps(problem_id, parsed)
    body = text.strip() or "(empty)"
    last = next((ln.strip() for ln in reversed(body.splitlines()) if ln.strip()), body)
    last = _TAG.sub(lambda m: m.group(2), last).strip() or body
    return Trajectory.from_steps(problem_id, [ReasoningStep(ActionKind.THINKING, body, producer_id),
                                              ReasoningStep(ActionKind.ANSWER, last, producer_id)])


def candidate_temperatures(problem_id: str, config: BonConfig) -> list[float]:
    rng = random.Random(stable_seed(config.seed, "temperature", problem_id))
    return [rng.uniform(config.temperature_low, config.temperature_high) for _ in range(config.n)]


def sample_candidates(actor, problem: Problem, config: BonConfig) -> list[Trajectory]:
    """Draw ``n`` full solutions, each at its own seeded temperature; failed slots are dropped."""
    prompt = build_prompt("solve", problem)
    out = []
    for slot, temp in enumerate(candidate_temperatures(problem.id, config)):
        payload = {"kind": "solve", "problem_id": problem.id, "slot": slot}
        try:
            text = actor.complete(prompt, temp, payload)
        except Exception as exc:
            logger.warning("candidate %d for %s failed: %s", slot, problem.id, exc)
            continue
        out.append(parse_tagged_solution(problem.id, text, getattr(actor, "id", "")))
    if not out:
        raise SamplingError(f"no candidate could be sampled for {problem.id}")
    return out


def bon_select(candidates: Sequence[tuple[Trajectory, Sequence[StepCritique]]], config: BonConfig) -> Trajectory:
    return candidates[bon_select_index(candidates, config)][0]


def bon_select_index(candidates: Sequence[tuple[Trajectory, Sequence[StepCritique]]], config: BonConfig) -> int:
    if not candidates:
        raise ValueError("bon_select needs at least one candidate")
    if len(candidates) == 1:
        return 0
    use_mean = config.accumulate == "mean"
    if config.strategy is Strategy.RANDOM:
        pid = candidates[0][0].problem_id
        return random.Random(stable_seed(config.seed, "pick", pid, len(candidates))).randrange(len(candidates))
    if config.strategy is Strategy.SELF_CONSISTENCY:
        answered = [i for i, (t, _) in enumerate(candidates) if t.final_answer is not None]
        if answered:
            winner, _ = self_consistency_vote([candidates[i][0].final_answer for i in answered])
            pool = [i for i in answered if canonicalize_answer(candidates[i][0].final_answer) == winner]
            best = _kernels.accumulated_argmax([[c.score for c in candidates[i][1]] for i in pool], use_mean)
            return pool[best]
    return _kernels.accumulated_argmax([[c.score for c in crit] for _, crit in candidates], use_mean)


@dataclass
class SuiteRow:
    strategy: str
    n: int
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def to_dict(self):
        return {"strategy": self.strategy, "n": self.n, "correct": self.correct, "total": self.total,
                "accuracy": round(self.accuracy, 6)}


def evaluate_suite(problems: Sequence[Problem], actor, prm, configs: Sequence[BonConfig],
                   audit: Optional[list] = None) -> list[SuiteRow]:
    """Accuracy of each Best-of-N configuration against the problems' gold answers.

    Candidates and critiques are cached per (problem, n, seed, temperature
    range), so strategies compared at the same n see the same pool.
    """
    for p in problems:
        if not p.ground_truth:
            raise ValueError(f"problem {p.id} has no gold answer")
    cache: dict[tuple, list] = {}
    rows = []
    for cfg in configs:
        row = SuiteRow(cfg.strategy.value, cfg.n, 0, len(problems))
        for p in problems:
            key = (p.id, cfg.n, cfg.seed, cfg.temperature_low, cfg.temperature_high)
            if key not in cache:
                cands = sample_candidates(actor, p, cfg)
                cache[key] = [(t, prm.critique_full(p, t)) for t in cands]
            pool = cache[key]
            idx = bon_select_index(pool, cfg)
            chosen = pool[idx][0]
            ok = chosen.final_answer is not None and canonicalize_answer(chosen.final_answer) == \
                canonicalize_answer(p.ground_truth)
            row.correct += ok
            if audit is not None:
                for i, (t, crit) in enumerate(pool):
                    audit.append({"config": cfg.label, "problem_id": p.id, "candidate": i,
                                  "final_answer": t.final_answer,
                                  "scores": [c.score for c in crit], "selected": i == idx,
                                  "correct": ok if i == idx else None})
        rows.append(row)
    return rows


def rows_to_csv(rows: Sequence[SuiteRow]) -> str:
    lines = ["strategy,n,correct,total,accuracy"]
    lines += [f"{r.strategy},{r.n},{r.correct},{r.total},{r.accuracy:.6f}" for r in rows]
    return "\n".join(lines) + "\n"


def rows_to_json(rows: Sequence[SuiteRow]) -> str:
    return canonical_json([r.to_dict() for r in rows]) + "\n"
