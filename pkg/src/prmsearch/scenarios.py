"""Synthetic problem suites with known answers, for offline ablations and acceptance runs.

Every builder returns plain mocks from ``gateway.mock`` so results are
reproducible from the seed alone.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Sequence

from .core import ActionKind, Problem, ReasoningStep, StepCritique, StepLabel, Subject, prefix_hash, stable_seed
from .gateway.mock import ScriptedActor, ScriptedRewardModel
from .mcts import LINEAR_SCHEDULE

SUBJECTS = list(Subject)


def make_problem(pid: str, rng: random.Random, ground_truth=None) -> Problem:
    return Problem(pid, f"synthetic question {pid}", rng.choice(SUBJECTS), rng.randrange(7, 13),
                   image_refs=(f"img-{pid}",), concept_ids=(f"c{rng.randrange(50)}",), ground_truth=ground_truth)


# --- planted-path search suite --------------------------------------------

@dataclass
class PlantedCase:
    problem: Problem
    path: tuple[ReasoningStep, ...]
    actors: list[ScriptedActor]

    def found(self, result) -> bool:
        want = [s.content for s in self.path]
        return any([s.content for s in t.trajectory.steps] == want for t in result.trajectories)


def planted_case(index: int, seed: int = 0, n_actors: int = 3, actions: Sequence[ActionKind] = LINEAR_SCHEDULE
                 ) -> PlantedCase:
    """One problem whose only correct trajectory is a fixed path through ``actions``.

    At each depth along the path exactly one actor (drawn per depth) emits
    the correct step; everything else comes from the actors' seeded
    default generators.
    """
    rng = random.Random(stable_seed(seed, "planted", index))
    pid = f"planted-{index:04d}"
    problem = make_problem(pid, rng, ground_truth=f"gold-{index}")
    path = []
    scripts: list[dict] = [{} for _ in range(n_actors)]
    for depth, action in enumerate(actions):
        text = f"gold-{index}" if action is ActionKind.ANSWER else f"correct {action.value} for {pid}"
        owner = rng.randrange(n_actors)
        scripts[owner][(pid, action, prefix_hash(path))] = text
        path.append(ReasoningStep(action, text, f"actor-{owner}"))
    actors = [ScriptedActor(f"actor-{j}", seed=stable_seed(seed, index, j), script=scripts[j],
                            default_branching=3) for j in range(n_actors)]
    return PlantedCase(problem, tuple(path), actors)


def planted_oracle_prm(cases: Sequence[PlantedCase], on_path: float = 0.9, off_path: float = 0.2):
    """Scores a step ``on_path`` iff it extends the planted path of its problem."""
    paths = {c.problem.id: [s.content for s in c.path] for c in cases}

    def scorer(problem, prefix, step):
        want = paths.get(problem.id, [])
        d = len(prefix)
        ok = d < len(want) and [s.content for s in prefix] == want[:d] and step.content == want[d]
        if ok:
            return (on_path, StepLabel.CORRECT_STEP, "extends the verified path")
        return (off_path, StepLabel.LOGICAL_REASONING_ERROR, "leaves the verified path")

    return ScriptedRewardModel("oracle-prm", scorer=scorer)


def constant_prm(score: float = 0.7):
    return ScriptedRewardModel("constant-prm", default_score=score)


# --- deceptive tree -------------------------------------------------------

def deceptive_case(index: int = 0, tau: float = 0.5):
    """Greedy first step scores 0.6 but every continuation falls below ``tau``;
    the 0.55 alternative completes along the linear schedule."""
    pid = f"deceptive-{index:03d}"
    problem = Problem(pid, "deceptive question", Subject.PHYSICS, 9, ground_truth="42")
    lure = ReasoningStep(ActionKind.CAPTION, f"tempting caption {index}", "actor-0")
    good = ReasoningStep(ActionKind.CAPTION, f"plain caption {index}", "actor-1")
    script0 = {(pid, ActionKind.CAPTION, prefix_hash([])): lure.content}
    script1 = {(pid, ActionKind.CAPTION, prefix_hash([])): good.content}
    good_path = [good]
    for action in LINEAR_SCHEDULE[1:]:
        text = "42" if action is ActionKind.ANSWER else f"{action.value} after plain caption {index}"
        script0[(pid, action, prefix_hash(good_path))] = text
        script1[(pid, action, prefix_hash(good_path))] = text
        good_path.append(ReasoningStep(action, text, "actor-0"))
    good_contents = {s.content for s in good_path}

    def scorer(prob, prefix, step):
        if step.content == lure.content:
            return 0.6
        if step.content == good.content:
            return 0.55
        if prefix and prefix[0].content == lure.content:
            return (tau / 2, StepLabel.LOGICAL_REASONING_ERROR, "dead end")
        return 0.9 if step.content in good_contents else 0.1

    actors = [ScriptedActor("actor-0", seed=index, script=script0),
              ScriptedActor("actor-1", seed=index + 1000, script=script1)]
    return problem, actors, ScriptedRewardModel("deceptive-prm", scorer=scorer), good_path


# --- analytic Best-of-N suite ---------------------------------------------

@dataclass
class BonSuite:
    problems: list[Problem]
    actor: ScriptedActor
    correct_steps: dict[str, set[str]]

    def prm(self, inverted: bool = False) -> ScriptedRewardModel:
        good = self.correct_steps

        def scorer(problem, prefix, step):
            ok = step.content in good[problem.id]
            if ok != inverted:
                return (1.0, StepLabel.CORRECT_STEP, "consistent with the gold solution")
            return (0.0, StepLabel.COMPUTATIONAL_ERROR, "inconsistent with the gold solution")

        return ScriptedRewardModel("anti-oracle" if inverted else "oracle", scorer=scorer)


def bon_suite(n_problems: int, p_correct: float = 0.5, seed: int = 0) -> BonSuite:
    """Each sampled solution is independently correct with probability ``p_correct``."""
    rng = random.Random(stable_seed(seed, "bon-suite"))
    problems, solutions, correct_steps = [], {}, {}
    for i in range(n_problems):
        pid = f"bon-{i:05d}"
        gold = str(rng.randrange(100, 1000))
        wrong = str(int(gold) + 1 + rng.randrange(50))
        right_text = (f"[caption] diagram for {pid}\n[thinking] derive value {gold}\n"
                      f"[self_reflection] {gold} checks out\n[answer] {gold}")
        wrong_text = (f"[caption] diagram for {pid}\n[thinking] derive value {wrong}\n"
                      f"[self_reflection] {wrong} checks out\n[answer] {wrong}")
        problems.append(make_problem(pid, rng, ground_truth=gold))
        solutions[pid] = [(p_correct, right_text), (1.0 - p_correct, wrong_text)]
        correct_steps[pid] = {ln.split("] ", 1)[1] for ln in right_text.splitlines()}
    actor = ScriptedActor("bon-actor", seed=seed, solutions=solutions)
    return BonSuite(problems, actor, correct_steps)


# --- reference solutions for error injection ------------------------------

def reference_solution(index: int, seed: int = 0) -> tuple[Problem, list[ReasoningStep]]:
    rng = random.Random(stable_seed(seed, "reference", index))
    pid = f"ref-{index:05d}"
    a, b = rng.randrange(2, 50), rng.randrange(2, 50)
    steps = [
        ReasoningStep(ActionKind.CAPTION, f"The figure shows two bars of heights {a} and {b}."),
        ReasoningStep(ActionKind.SUMMARY, "We need the combined height."),
        ReasoningStep(ActionKind.THINKING, f"{a} + {b} = {a + b}"),
        ReasoningStep(ActionKind.SELF_REFLECTION, f"Adding again, {b} + {a} = {a + b}, consistent."),
        ReasoningStep(ActionKind.ANSWER, str(a + b)),
    ]
    return make_problem(pid, rng, ground_truth=str(a + b)), steps


def reference_oracle_prm(references: dict[str, Sequence[str]]) -> ScriptedRewardModel:
    """Judges a step correct iff it is byte-identical to the reference step at the same position."""

    def scorer(problem, prefix, step):
        ref = references[problem.id]
        d = len(prefix)
        if d < len(ref) and step.content == ref[d]:
            return (1.0, StepLabel.CORRECT_STEP, "matches the reference")
        return (0.0, StepLabel.COMPUTATIONAL_ERROR, "differs from the reference")

    return ScriptedRewardModel("reference-oracle", scorer=scorer)


def critique_with(prm, problem, steps) -> list[StepCritique]:
    return [prm.critique(problem, steps[:i], s) for i, s in enumerate(steps)]


