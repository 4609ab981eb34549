import json

import jsonschema
import pytest
from hypothesis import given, strategies as st

from prmsearch.core import (
    DEFAULT_GRAMMAR,
    NO_GRAMMAR,
    SCHEMAS,
    ActionKind,
    Grammar,
    Problem,
    ReasoningStep,
    SearchNode,
    StepCritique,
    StepLabel,
    Subject,
    Trajectory,
    decode,
    encode,
    grammar_valid,
    legal_next_actions,
    node_to_dict,
)
from prmsearch.errors import GrammarError

from conftest import steps

A = ActionKind


def test_enums_have_expected_sizes_and_names():
    assert len(ActionKind) == 6
    assert len(StepLabel) == 9
    assert [a.value for a in ActionKind] == ["caption", "summary", "sub_task", "thinking", "self_reflection", "answer"]
    assert len(Subject) == 5


@pytest.mark.parametrize("actions, expected", [
    ([], True),
    (["caption", "thinking", "self_reflection", "answer"], True),
    (["thinking", "answer"], False),
    (["caption", "thinking", "answer"], False),
    (["caption", "self_reflection", "answer", "thinking"], False),
    (["caption", "self_reflection", "answer", "answer"], False),
    (["caption", "summary", "sub_task"], True),
])
def test_grammar_examples(actions, expected):
    assert grammar_valid(steps(*actions)) is expected


def test_grammar_rules_can_be_switched_off():
    s = steps("thinking", "answer")
    assert not grammar_valid(s)
    assert grammar_valid(s, NO_GRAMMAR)
    assert grammar_valid(s, Grammar(caption_first=False, reflection_before_answer=False))


action_lists = st.lists(st.sampled_from(list(ActionKind)), max_size=8)


@given(action_lists, action_lists)
def test_rule_a_b_violations_are_never_repaired_by_extension(prefix, suffix):
    # a prefix breaking (a) or (b) stays invalid however it is extended
    only_ab = Grammar(caption_first=True, single_final_answer=True, reflection_before_answer=False)
    p = steps(*[a.value for a in prefix])
    if not grammar_valid(p, only_ab):
        full = steps(*[a.value for a in prefix + suffix])
        assert not grammar_valid(full)


@given(action_lists)
def test_legal_next_actions_agree_with_grammar(prefix):
    p = steps(*[a.value for a in prefix])
    if not grammar_valid(p):
        return
    for kind in ActionKind:
        ext = p + [ReasoningStep(kind, "x")]
        legal = kind in legal_next_actions(p)
        # legal actions keep rules (a) and (b); answers additionally need the reflection
        if legal:
            assert grammar_valid(ext)
        elif kind is A.ANSWER or not p:
            assert not grammar_valid(ext)


def test_trajectory_invariants():
    good = Trajectory.from_steps("p", steps("caption", "self_reflection", "answer"))
    assert good.final_answer == "answer 2"
    with pytest.raises(GrammarError):
        Trajectory("p", tuple(steps("caption", "thinking")), final_answer="x")
    with pytest.raises(GrammarError):
        Trajectory("p", tuple(steps("answer", "answer")))


def test_value_object_validation():
    with pytest.raises(ValueError):
        ReasoningStep(A.THINKING, "")
    with pytest.raises(ValueError):
        StepCritique("c", StepLabel.CORRECT_STEP, "e", 1.2)
    with pytest.raises(ValueError):
        Problem("p", "s", Subject.MATH, 6)
    with pytest.raises(ValueError):
        Problem("p", "s", "astronomy", 8)


def test_score_is_quantized_to_six_digits():
    c = StepCritique("c", StepLabel.CORRECT_STEP, "e", 2 / 3)
    assert c.score == 0.666667
    assert json.loads(encode(c))["score"] == 0.666667


def test_correct_label_with_low_score_is_allowed():
    StepCritique("c", StepLabel.CORRECT_STEP, "models may disagree", 0.1)


def test_critique_triple_projection():
    c = StepCritique("c", StepLabel.HALLUCINATION, "made up", 0.2)
    assert c.triple() == ("c", StepLabel.HALLUCINATION, "made up")


text = st.text(min_size=1, max_size=30)
step_st = st.builds(ReasoningStep, st.sampled_from(list(ActionKind)), text, st.text(max_size=8))
problem_st = st.builds(Problem, text, st.text(max_size=40), st.sampled_from(list(Subject)), st.integers(7, 12),
                       st.lists(text, max_size=3).map(tuple), st.lists(text, max_size=3).map(tuple),
                       st.none() | text)
critique_st = st.builds(StepCritique, text, st.sampled_from(list(StepLabel)), st.text(max_size=30),
                        st.floats(0, 1))


@st.composite
def trajectory_st(draw):
    body = draw(st.lists(st.builds(ReasoningStep, st.sampled_from(list(ActionKind)[:-1]), text), max_size=5))
    if draw(st.booleans()):
        return Trajectory.from_steps(draw(text), body + [ReasoningStep(A.ANSWER, draw(text))])
    return Trajectory(draw(text), tuple(body))


@given(st.one_of(step_st, problem_st, critique_st, trajectory_st()))
def test_round_trip_is_byte_exact(obj):
    data = encode(obj)
    back = decode(type(obj), data)
    assert back == obj
    assert encode(back) == data


@given(st.one_of(step_st, problem_st, critique_st, trajectory_st()))
def test_encodings_match_json_schemas(obj):
    jsonschema.validate(json.loads(encode(obj)), SCHEMAS[type(obj).__name__])


def test_search_node_schema_and_path():
    root = SearchNode(node_id=0)
    a = SearchNode(ReasoningStep(A.CAPTION, "c"), 0.8, root, 1)
    root.children.append(a)
    b = SearchNode(ReasoningStep(A.THINKING, "t"), 0.6, a, 2)
    a.children.append(b)
    assert b.depth == 2 and [s.content for s in b.path()] == ["c", "t"]
    assert b.path_rewards() == [0.8, 0.6]
    assert (b.value, b.visits) == (0.6, 1) and (root.value, root.visits) == (0.0, 0)
    for n in (root, a, b):
        jsonschema.validate(node_to_dict(n), SCHEMAS["SearchNode"])


def test_utf8_canonical_encoding():
    s = ReasoningStep(A.THINKING, "面积 = πr²")
    assert "面积".encode("utf-8") in encode(s)
