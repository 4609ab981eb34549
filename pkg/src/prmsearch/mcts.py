"""PRM-guided Monte Carlo tree search over typed reasoning actions.

One expansion asks every actor for a candidate of each schedulable action,
scores candidates with the reward model (averaged over ``k_prm`` critique
calls), drops those below ``tau``, inserts the survivors as children and
folds their rewards into every ancestor's running mean. Selection walks
down by UCB over non-exhausted children.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from . import _kernels
from .core import (
    DEFAULT_GRAMMAR,
    ActionKind,
    Grammar,
    Problem,
    ReasoningStep,
    SearchNode,
    StepLabel,
    Trajectory,
    canonical_json,
    content_hash,
    grammar_valid,
    legal_next_actions,
    quantize_score,
)
from .errors import ExpansionError, GrammarError, ScoringError
from .gateway.base import prm_step_score, sample_critiques

logger = logging.getLogger(__name__)

LINEAR_SCHEDULE = (
    ActionKind.CAPTION,
    ActionKind.SUMMARY,
    ActionKind.SUB_TASK,
    ActionKind.THINKING,
    ActionKind.SELF_REFLECTION,
    ActionKind.ANSWER,
)
SCHEDULES = ("grammar", "linear", "flat")


@dataclass
class SearchConfig:
    k_actors: int = 3
    k_prm: int = 1
    tau: float = 0.5
    c_explore: float = 1.414
    max_depth: int = 12
    rollouts: int = 4
    seed: int = 0
    schedule: str = "grammar"
    temperature: float = 0.7
    confidence_floor: float = 0.6
    grammar: Grammar = field(default_factory=lambda: DEFAULT_GRAMMAR)

    def __post_init__(self):
        if isinstance(self.grammar, dict):
            self.grammar = Grammar(**self.grammar)
        if self.k_actors < 1 or self.k_prm < 1 or self.max_depth < 1 or self.rollouts < 1:
            raise ValueError("k_actors, k_prm, max_depth and rollouts must be positive")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.c_explore <= 0:
            raise ValueError("c_explore must be > 0")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ScoredTrajectory:
    trajectory: Trajectory
    step_rewards: tuple[float, ...]
    terminal_reward: float

    def to_dict(self) -> dict:
        return {
            "trajectory": self.trajectory.to_dict(),
            "step_rewards": [quantize_score(r) for r in self.step_rewards],
            "terminal_reward": quantize_score(self.terminal_reward),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(Trajectory.from_dict(d["trajectory"]), tuple(d["step_rewards"]), d["terminal_reward"])


@dataclass
class TreeStats:
    node_count: int = 0
    max_depth_reached: int = 0
    pruned: int = 0
    candidates: int = 0
    dead_branches: int = 0
    aborted_rollouts: int = 0
    completed_rollouts: int = 0


@dataclass
class SearchResult:
    problem_id: str
    trajectories: list[ScoredTrajectory]
    tree_stats: TreeStats
    root: Optional[SearchNode] = field(default=None, repr=False, compare=False)
    trace: list[dict] = field(default_factory=list, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "trajectories": [t.to_dict() for t in self.trajectories],
            "tree_stats": asdict(self.tree_stats),
        }

    def trace_jsonl(self) -> str:
        return "".join(canonical_json(e) + "\n" for e in self.trace)


# --- the four steps -------------------------------------------------------

def next_actions(prefix: Sequence[ReasoningStep], schedule: str = "grammar",
                 grammar: Grammar = DEFAULT_GRAMMAR) -> list[ActionKind]:
    if prefix and prefix[-1].action is ActionKind.ANSWER:
        return []
    if schedule == "grammar":
        return legal_next_actions(prefix, grammar)
    if schedule == "linear":
        if not prefix:
            return [LINEAR_SCHEDULE[0]]
        i = LINEAR_SCHEDULE.index(prefix[-1].action)
        return [LINEAR_SCHEDULE[i + 1]] if i + 1 < len(LINEAR_SCHEDULE) else []
    return list(ActionKind)


def expand(node: SearchNode, problem: Problem, actors: Sequence, next_action: ActionKind,
           config: Optional[SearchConfig] = None) -> list[ReasoningStep]:
    """Ask up to ``k_actors`` actors for one candidate each; identical contents collapse."""
    config = config or SearchConfig()
    if node.depth >= config.max_depth:
        raise ValueError(f"node at depth {node.depth} is at max_depth {config.max_depth}")
    prefix = node.path()
    if config.schedule != "flat" and next_action not in next_actions(prefix, config.schedule, config.grammar):
        raise GrammarError(f"{next_action.value} is not allowed after {[s.action.value for s in prefix]}")
    out: list[ReasoningStep] = []
    seen = set()
    failures = 0
    pool = list(actors)[: config.k_actors]
    for actor in pool:
        try:
            step = actor.generate(problem, prefix, next_action, config.temperature)
        except Exception as exc:  # one actor failing must not sink the expansion
            failures += 1
            logger.warning("actor %s failed on %s/%s: %s", getattr(actor, "id", "?"), problem.id,
                           next_action.value, exc)
            continue
        if step.content in seen:
            continue
        seen.add(step.content)
        out.append(step)
    if pool and failures == len(pool):
        raise ExpansionError(f"all {failures} actors failed expanding {next_action.value} for {problem.id}")
    return out


def score_candidates(candidates, prm, problem, prefix, k_prm):
    return [(c, prm_step_score(prm, problem, prefix, c, k_prm)) for c in candidates]


def score_and_filter(candidates: Sequence[ReasoningStep], prm, problem: Problem,
                     prefix: Sequence[ReasoningStep], config: SearchConfig) -> list[tuple[ReasoningStep, float]]:
    """Score each candidate and keep those with reward >= tau (possibly none)."""
    if not candidates:
        raise ValueError("score_and_filter needs at least one candidate")
    scored = score_candidates(candidates, prm, problem, prefix, config.k_prm)
    return [(c, r) for c, r in scored if r >= config.tau]


def backpropagate(parent_chain: Sequence[SearchNode], surviving: Sequence[tuple[ReasoningStep, float]],
                  next_id: Optional[Callable[[], int]] = None) -> list[SearchNode]:
    """Insert survivors under ``parent_chain[0]`` and fold their rewards into every node of the chain.

    ``parent_chain`` runs from the expanded node up to the root. Each node
    gets V <- (N*V + sum r) / (N + k) and N <- N + k, k = len(surviving).
    New children start at V = r, N = 1. Returns the new children.
    """
    if not parent_chain or not surviving:
        return []
    k = len(surviving)
    total = math.fsum(r for _, r in surviving)
    for s in parent_chain:
        s.value = (s.visits * s.value + total) / (s.visits + k)
        s.visits += k
    parent = parent_chain[0]
    if next_id is None:
        start = max((n.id for n in parent_chain[-1].walk()), default=0)
        ids = iter(range(start + 1, start + 1 + k))
        next_id = ids.__next__
    new = []
    for step, r in surviving:
        child = SearchNode(step=step, reward=r, parent=parent, node_id=next_id())
        parent.children.append(child)
        new.append(child)
    return new


def select(children: Sequence[SearchNode], parent: SearchNode, c_explore: float) -> SearchNode:
    """UCB argmax; the earliest child wins ties."""
    if not children:
        raise ValueError("select needs at least one child")
    idx = _kernels.ucb_argmax([ch.value for ch in children], [ch.visits for ch in children],
                              parent.visits, c_explore)
    return children[idx]


def reflect_verify(trajectory: Trajectory, prm, problem: Problem, confidence_floor: float = 0.6,
                   k_prm: int = 1) -> bool:
    """Self-reflection gate: mean step reward clears the floor and every reflection step is judged correct."""
    if not any(s.action is ActionKind.SELF_REFLECTION for s in trajectory.steps):
        raise ValueError("trajectory has no self-reflection step")
    rewards = []
    reflections_ok = True
    for i, step in enumerate(trajectory.steps):
        critiques = sample_critiques(prm, problem, trajectory.steps[:i], step, k_prm)
        rewards.append(math.fsum(c.score for c in critiques) / len(critiques))
        if step.action is ActionKind.SELF_REFLECTION:
            reflections_ok &= all(c.label is StepLabel.CORRECT_STEP for c in critiques)
    return reflections_ok and math.fsum(rewards) / len(rewards) >= confidence_floor


# --- the search loop ------------------------------------------------------

class SearchTree:
    """A search tree plus bookkeeping; the single writer for its nodes."""

    def __init__(self, problem: Problem, config: SearchConfig):
        self.problem = problem
        self.config = config
        self.root = SearchNode(node_id=0)
        self._next = 1
        self.stats = TreeStats()
        self.trace: list[dict] = [{"event": "search", "problem_id": problem.id, "config": config.to_dict()}]
        self._write = threading.Lock()

    def _new_id(self):
        i = self._next
        self._next += 1
        return i

    def exhaust(self, node: SearchNode):
        node.exhausted = True
        parent = node.parent
        while parent is not None and parent.expanded and all(c.exhausted for c in parent.children):
            parent.exhausted = True
            parent = parent.parent

    def _node_event(self, kind, node):
        return {
            "event": kind,
            "node": node.id,
            "parent": None if node.parent is None else node.parent.id,
            "action": None if node.step is None else node.step.action.value,
            "content_hash": None if node.step is None else content_hash(node.step.content),
            "reward": quantize_score(node.reward),
            "value": quantize_score(node.value),
            "visits": node.visits,
        }

    def expand_node(self, node: SearchNode, prm, actors) -> list[SearchNode]:
        cfg = self.config
        prefix = node.path()
        survivors: list[tuple[ReasoningStep, float]] = []
        for action in next_actions(prefix, cfg.schedule, cfg.grammar):
            candidates = expand(node, self.problem, actors, action, cfg)
            if not candidates:
                continue
            scored = score_candidates(candidates, prm, self.problem, prefix, cfg.k_prm)
            kept = [(c, r) for c, r in scored if r >= cfg.tau]
            self.stats.candidates += len(candidates)
            for c, r in scored:
                if r < cfg.tau:
                    self.stats.pruned += 1
                    self.trace.append({"event": "prune", "parent": node.id, "action": c.action.value,
                                       "content_hash": content_hash(c.content), "reward": quantize_score(r)})
            survivors.extend(kept)
        with self._write:
            node.expanded = True
            new = backpropagate(node.ancestors(), survivors, self._new_id)
            for child in new:
                self.trace.append(self._node_event("insert", child))
            self.stats.node_count += len(new)
            if new:
                self.stats.max_depth_reached = max(self.stats.max_depth_reached, new[0].depth)
        return new

    def rollout(self, prm, actors) -> Optional[bool]:
        """One pass from the root. True when an answer was created, False on a dead end, None if aborted."""
        cfg = self.config
        node = self.root
        while True:
            if not node.expanded:
                if node.depth >= cfg.max_depth or not next_actions(node.path(), cfg.schedule, cfg.grammar):
                    self.exhaust(node)
                    return False
                try:
                    new = self.expand_node(node, prm, actors)
                except (ExpansionError, ScoringError) as exc:
                    logger.warning("rollout aborted at node %d of %s: %s", node.id, self.problem.id, exc)
                    self.stats.aborted_rollouts += 1
                    node.expanded = True
                    self.exhaust(node)
                    return None
                if not new:
                    self.stats.dead_branches += 1
                    self.exhaust(node)
                    return False
                answers = [n for n in new if n.is_terminal]
                for a in answers:
                    self.exhaust(a)
                if answers:
                    return True
            live = [c for c in node.children if not c.exhausted]
            if not live:
                self.exhaust(node)
                return False
            node = select(live, node, cfg.c_explore)

    def results(self) -> list[ScoredTrajectory]:
        out = []
        for node in sorted(self.root.walk(), key=lambda n: n.id):
            if not node.is_terminal:
                continue
            steps = node.path()
            if not grammar_valid(steps, self.config.grammar):
                continue
            out.append(ScoredTrajectory(Trajectory.from_steps(self.problem.id, steps),
                                        tuple(node.path_rewards()), node.reward))
        return out

    def final_events(self) -> list[dict]:
        out = []
        for node in sorted(self.root.walk(), key=lambda n: n.id):
            ev = self._node_event("final", node)
            ev["exhausted"] = node.exhausted
            out.append(ev)
        return out


def search(problem: Problem, actors: Sequence, prm, config: Optional[SearchConfig] = None) -> SearchResult:
    """Run ``config.rollouts`` passes over one shared tree and collect complete trajectories."""
    config = config or SearchConfig()
    if not actors:
        raise ValueError("search needs at least one actor")
    tree = SearchTree(problem, config)
    for _ in range(config.rollouts):
        if tree.root.exhausted:
            break
        if tree.rollout(prm, actors):
            tree.stats.completed_rollouts += 1
    trace = tree.trace + tree.final_events()
    trace.append({"event": "stats", **asdict(tree.stats)})
    return SearchResult(problem.id, tree.results(), tree.stats, root=tree.root, trace=trace)


# --- invariant checks (also used by the verify-traces command) ------------

def subtree_rewards(node: SearchNode) -> list[float]:
    """Rewards of every inserted node in ``node``'s subtree, itself included unless it is the root."""
    return [n.reward for n in node.walk() if n.step is not None]


def check_tree(root: SearchNode, tau: float, tol: float = 1e-9) -> list[str]:
    """Recount visits and recompute values from scratch; return a list of violations."""
    problems = []
    for node in root.walk():
        rewards = subtree_rewards(node)
        if node.visits != len(rewards):
            problems.append(f"node {node.id}: N={node.visits} but {len(rewards)} rewards routed")
        if rewards:
            mean = math.fsum(rewards) / len(rewards)
            if abs(mean - node.value) > tol:
                problems.append(f"node {node.id}: V={node.value!r} but mean of routed rewards is {mean!r}")
        if node.step is not None and node.reward < tau:
            problems.append(f"node {node.id}: reward {node.reward} below tau {tau}")
        if node.visits > 0 and not 0.0 <= node.value <= 1.0:
            problems.append(f"node {node.id}: V={node.value} out of [0, 1]")
    return problems


def check_trace(events: Iterable[dict], tol: float = 1e-6) -> list[str]:
    """Validate a JSONL search trace: visit conservation, value-as-mean, filter soundness, prune count."""
    events = list(events)
    header = next((e for e in events if e.get("event") == "search"), None)
    if header is None:
        return ["trace has no search header"]
    tau = header["config"]["tau"]
    finals = {e["node"]: e for e in events if e["event"] == "final"}
    inserts = [e for e in events if e["event"] == "insert"]
    prunes = [e for e in events if e["event"] == "prune"]
    stats = next((e for e in events if e["event"] == "stats"), None)
    problems = []
    children: dict[int, list[int]] = {}
    for e in inserts:
        children.setdefault(e["parent"], []).append(e["node"])
        if e["reward"] < tau:
            problems.append(f"node {e['node']}: inserted with reward {e['reward']} below tau {tau}")
        if e["node"] not in finals:
            problems.append(f"node {e['node']}: inserted but missing from the final snapshot")

    def routed(nid):
        out = [] if finals[nid]["parent"] is None else [finals[nid]["reward"]]
        for ch in children.get(nid, ()):
            out.extend(routed(ch))
        return out

    for nid, e in finals.items():
        rewards = routed(nid)
        if e["visits"] != len(rewards):
            problems.append(f"node {nid}: N={e['visits']} but {len(rewards)} rewards routed")
        if rewards and abs(math.fsum(rewards) / len(rewards) - e["value"]) > tol:
            problems.append(f"node {nid}: V={e['value']} is not the mean of its routed rewards")
    if stats is not None:
        if stats["pruned"] != len(prunes):
            problems.append(f"stats report {stats['pruned']} pruned but trace holds {len(prunes)} prune events")
        if stats["node_count"] != len(inserts):
            problems.append(f"stats report {stats['node_count']} nodes but trace holds {len(inserts)} inserts")
    return problems
