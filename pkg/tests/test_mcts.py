import logging
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prmsearch.core import ActionKind, Problem, ReasoningStep, SearchNode, StepLabel, Subject, Trajectory, prefix_hash
from prmsearch.errors import ExpansionError, GrammarError, ScoringError
from prmsearch.gateway.mock import ScriptedActor, ScriptedRewardModel
from prmsearch.mcts import (
    SearchConfig,
    backpropagate,
    check_trace,
    check_tree,
    expand,
    reflect_verify,
    score_and_filter,
    search,
    select,
)
from prmsearch.scenarios import deceptive_case

from conftest import step


class FailingActor:
    id = "broken"

    def generate(self, *args):
        raise RuntimeError("endpoint down")


def fixed_actor(name, text):
    return ScriptedActor(name, script={(None, ActionKind.CAPTION, None): text})


# --- expand ---------------------------------------------------------------

def test_expand_distinct_candidates(problem):
    actors = [fixed_actor(f"a{i}", f"text {i}") for i in range(3)]
    out = expand(SearchNode(), problem, actors, ActionKind.CAPTION)
    assert [s.content for s in out] == ["text 0", "text 1", "text 2"]
    assert [s.producer_id for s in out] == ["a0", "a1", "a2"]


def test_expand_deduplicates(problem):
    actors = [fixed_actor(f"a{i}", "same") for i in range(3)]
    assert len(expand(SearchNode(), problem, actors, ActionKind.CAPTION)) == 1


def test_expand_survives_one_failing_actor(problem, caplog):
    actors = [fixed_actor("a0", "x"), FailingActor(), fixed_actor("a2", "y")]
    with caplog.at_level(logging.WARNING, logger="prmsearch.mcts"):
        out = expand(SearchNode(), problem, actors, ActionKind.CAPTION)
    assert len(out) == 2
    assert any("broken" in r.getMessage() for r in caplog.records)


def test_expand_all_fail(problem):
    with pytest.raises(ExpansionError):
        expand(SearchNode(), problem, [FailingActor(), FailingActor()], ActionKind.CAPTION)


def test_expand_respects_k_actors(problem):
    actors = [fixed_actor(f"a{i}", f"text {i}") for i in range(5)]
    assert len(expand(SearchNode(), problem, actors, ActionKind.CAPTION, SearchConfig(k_actors=2))) == 2


def test_expand_rejects_illegal_action(problem):
    with pytest.raises(GrammarError):
        expand(SearchNode(), problem, [fixed_actor("a", "x")], ActionKind.ANSWER)


def test_expand_rejects_nodes_at_max_depth(problem):
    root = SearchNode()
    child = SearchNode(step("caption", "c"), 0.9, root, 1)
    with pytest.raises(ValueError):
        expand(child, problem, [fixed_actor("a", "x")], ActionKind.THINKING, SearchConfig(max_depth=1))


# --- score_and_filter -----------------------------------------------------

def _scored(problem, scores, tau):
    cands = [step("thinking", f"c{i}") for i in range(len(scores))]
    prm = ScriptedRewardModel(script={f"c{i}": s for i, s in enumerate(scores)})
    return score_and_filter(cands, prm, problem, [], SearchConfig(tau=tau))


def test_filter_boundary_is_inclusive(problem):
    assert sorted(r for _, r in _scored(problem, [0.9, 0.5, 0.3], 0.5)) == [0.5, 0.9]


def test_filter_tau_zero_keeps_everything(problem):
    assert len(_scored(problem, [0.0, 0.1, 1.0], 0.0)) == 3


def test_filter_can_empty_the_set(problem):
    scores = [0.45, 0.49]
    out = _scored(problem, scores, 0.5)
    assert out == []
    assert [s for s in scores if s >= 0.5] == []


def test_filter_needs_candidates(problem):
    with pytest.raises(ValueError):
        score_and_filter([], ScriptedRewardModel(), problem, [], SearchConfig())


def test_filter_propagates_scoring_errors(problem):
    prm = ScriptedRewardModel(script={"c": RuntimeError("503")})
    with pytest.raises(ScoringError):
        score_and_filter([step("thinking", "c")], prm, problem, [], SearchConfig())


# --- backpropagate --------------------------------------------------------

def test_backprop_first_visit():
    root = SearchNode()
    new = backpropagate([root], [(step("caption", "a"), 0.8)])
    assert (root.value, root.visits) == (0.8, 1)
    assert (new[0].value, new[0].visits, new[0].parent) == (0.8, 1, root)


def test_backprop_running_mean_matches_brute_force():
    root = SearchNode()
    backpropagate([root], [(step("caption", "a"), 0.2), (step("caption", "b"), 0.8)])
    assert (root.value, root.visits) == (0.5, 2)
    leaf = root.children[0]
    backpropagate([leaf, root], [(step("thinking", "c"), 0.7), (step("thinking", "d"), 0.9)])
    assert root.visits == 4
    assert root.value == pytest.approx((2 * 0.5 + 1.6) / 4, abs=1e-12)
    assert root.value == pytest.approx(sum([0.2, 0.8, 0.7, 0.9]) / 4, abs=1e-12)
    assert leaf.value == pytest.approx(sum([0.2, 0.7, 0.9]) / 3, abs=1e-12)
    assert check_tree(root, 0.0) == []


def test_backprop_empty_survivors_is_a_no_op():
    root = SearchNode()
    backpropagate([root], [(step("caption", "a"), 0.6)])
    before = (root.value, root.visits, len(root.children))
    assert backpropagate([root.children[0], root], []) == []
    assert (root.value, root.visits, len(root.children)) == before


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.floats(0, 1), min_size=0, max_size=4), min_size=1, max_size=25),
       st.randoms(use_true_random=False))
def test_random_backprop_keeps_invariants(batches, rnd):
    root = SearchNode()
    nodes = [root]
    counter = iter(range(1, 10_000))
    for batch in batches:
        parent = rnd.choice(nodes)
        new = backpropagate(parent.ancestors(), [(step("thinking", f"s{r}"), r) for r in batch], counter.__next__)
        nodes.extend(new)
    assert check_tree(root, 0.0) == []


# --- select ---------------------------------------------------------------

def _children(pairs):
    root = SearchNode()
    out = []
    for i, (v, n) in enumerate(pairs):
        ch = SearchNode(step("caption", f"c{i}"), v, root, i + 1)
        ch.value, ch.visits = v, n
        out.append(ch)
    root.visits = sum(n for _, n in pairs)
    return root, out


def test_select_singleton():
    root, kids = _children([(0.1, 3)])
    for c in (0.0, 1.0, 100.0):
        assert select(kids, root, c) is kids[0]


def test_select_without_exploration_is_value_argmax():
    root, kids = _children([(0.9, 10), (0.2, 1)])
    assert root.visits == 11
    assert select(kids, root, 0.0) is kids[0]


def test_select_matches_brute_force():
    rng = random.Random(7)
    for _ in range(200):
        pairs = [(rng.random(), rng.randrange(1, 20)) for _ in range(5)]
        root, kids = _children(pairs)
        scores = [v + 1.414 * math.sqrt(math.log(max(root.visits, 1)) / (1 + n)) for v, n in pairs]
        assert select(kids, root, 1.414) is kids[scores.index(max(scores))]


def test_select_ties_go_to_earliest_child():
    root, kids = _children([(0.5, 2), (0.5, 2), (0.5, 2)])
    assert select(kids, root, 1.414) is kids[0]


@given(st.lists(st.tuples(st.integers(0, 64), st.integers(1, 50)), min_size=1, max_size=8),
       st.integers(-32, 32))
def test_select_shift_invariance_at_zero_exploration(pairs, shift):
    # dyadic values keep the shifted sums exact, so ties survive the shift
    root, kids = _children([(k / 64, n) for k, n in pairs])
    root2, kids2 = _children([((k + shift) / 64, n) for k, n in pairs])
    assert kids.index(select(kids, root, 0.0)) == kids2.index(select(kids2, root2, 0.0))


# --- reflect_verify -------------------------------------------------------

def _reflect(problem, scores, reflection_label=StepLabel.CORRECT_STEP):
    acts = ["caption", "thinking", "self_reflection", "answer"]
    traj = Trajectory.from_steps(problem.id, [step(a, f"s{i}") for i, a in enumerate(acts)])
    script = {f"s{i}": s for i, s in enumerate(scores)}
    script["s2"] = (scores[2], reflection_label, "")
    return reflect_verify(traj, ScriptedRewardModel(script=script), problem)


def test_reflect_verify_dominant_case(problem):
    assert _reflect(problem, [0.9] * 4)


def test_reflect_verify_bad_reflection(problem):
    assert not _reflect(problem, [0.9] * 4, StepLabel.LOGICAL_REASONING_ERROR)


def test_reflect_verify_mean_gate(problem):
    scores = [0.9, 0.9, 0.1, 0.9]
    assert sum(scores) / 4 == pytest.approx(0.7)
    assert _reflect(problem, scores)
    assert not _reflect(problem, [0.5, 0.5, 0.5, 0.6])


def test_reflect_verify_requires_reflection(problem):
    traj = Trajectory.from_steps(problem.id, [step("caption", "a"), step("answer", "b")])
    with pytest.raises(ValueError):
        reflect_verify(traj, ScriptedRewardModel(), problem)


# --- search ---------------------------------------------------------------

PLANTED = [ActionKind.CAPTION, ActionKind.SUMMARY, ActionKind.THINKING, ActionKind.SELF_REFLECTION, ActionKind.ANSWER]


def planted(problem):
    path, scripts = [], [{}, {}, {}]
    for d, a in enumerate(PLANTED):
        text = "7" if a is ActionKind.ANSWER else f"good {a.value}"
        scripts[d % 3][(problem.id, a, prefix_hash(path))] = text
        path.append(ReasoningStep(a, text, f"a{d % 3}"))
    actors = [ScriptedActor(f"a{j}", seed=j, script=scripts[j]) for j in range(3)]
    good = {s.content for s in path}
    prm = ScriptedRewardModel(scorer=lambda p, prefix, s: 0.9 if s.content in good else 0.2)
    return actors, prm, path


def test_search_finds_the_unique_good_path(problem):
    actors, prm, path = planted(problem)
    result = search(problem, actors, prm, SearchConfig(rollouts=8))
    assert len(result.trajectories) == 1
    found = result.trajectories[0]
    assert [(s.action, s.content) for s in found.trajectory.steps] == [(s.action, s.content) for s in path]
    assert len(found.step_rewards) == len(path)
    assert found.terminal_reward == pytest.approx(0.9)
    assert check_tree(result.root, 0.5) == []
    assert check_trace(result.trace) == []


def test_search_with_tau_one_prunes_everything(problem):
    actors = [ScriptedActor(f"a{i}", seed=i) for i in range(3)]
    result = search(problem, actors, ScriptedRewardModel(default_score=0.99), SearchConfig(tau=1.0))
    assert result.trajectories == []
    assert result.tree_stats.node_count == 0
    assert result.tree_stats.candidates > 0
    assert result.tree_stats.pruned == result.tree_stats.candidates


def test_search_more_rollouts_escape_a_deceptive_start():
    problem, actors, prm, good_path = deceptive_case(0)
    cfg = dict(schedule="linear", k_actors=2)
    one = search(problem, actors, prm, SearchConfig(rollouts=1, **cfg))
    four = search(problem, actors, prm, SearchConfig(rollouts=4, **cfg))
    assert one.trajectories == []
    assert [s.content for s in four.trajectories[0].trajectory.steps] == [s.content for s in good_path]


def test_search_aborted_rollout_does_not_abort_search(problem):
    actors = [FailingActor()]
    result = search(problem, actors, ScriptedRewardModel(), SearchConfig(rollouts=3))
    assert result.trajectories == []
    assert result.tree_stats.aborted_rollouts == 1  # the root is exhausted after the first abort


def test_search_is_deterministic(problem):
    def run():
        actors = [ScriptedActor(f"a{i}", seed=i, default_branching=3) for i in range(3)]
        return search(problem, actors, ScriptedRewardModel(seed=4), SearchConfig(rollouts=6, seed=1))

    a, b = run(), run()
    nodes_a = [(n.id, n.parent and n.parent.id, n.step, n.value, n.visits) for n in a.root.walk()]
    nodes_b = [(n.id, n.parent and n.parent.id, n.step, n.value, n.visits) for n in b.root.walk()]
    assert nodes_a == nodes_b
    assert a.trace_jsonl() == b.trace_jsonl()


def test_search_results_are_grammar_valid_and_traces_check(problem):
    actors = [ScriptedActor(f"a{i}", seed=i, default_branching=3) for i in range(3)]
    result = search(problem, actors, ScriptedRewardModel(seed=2), SearchConfig(rollouts=8))
    assert result.trajectories
    for t in result.trajectories:
        assert t.trajectory.is_grammar_valid()
        assert len(t.step_rewards) == len(t.trajectory.steps)
    assert check_tree(result.root, 0.5) == []
    assert check_trace(result.trace) == []


def test_check_trace_catches_tampering(problem):
    actors = [ScriptedActor(f"a{i}", seed=i) for i in range(3)]
    result = search(problem, actors, ScriptedRewardModel(seed=2), SearchConfig(rollouts=4))
    events = [dict(e) for e in result.trace]
    final = next(e for e in events if e["event"] == "final" and e["parent"] is not None)
    final["visits"] += 1
    assert check_trace(events)


def test_search_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(tau=1.5)
    with pytest.raises(ValueError):
        SearchConfig(rollouts=0)
    with pytest.raises(ValueError):
        SearchConfig(schedule="zigzag")
