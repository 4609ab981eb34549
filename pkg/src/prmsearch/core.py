"""Domain types, the action grammar and their canonical JSON encoding."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from typing import Any, Iterable, Optional, Sequence

from .errors import GrammarError

SCORE_DIGITS = 6


class _SnakeEnum(str, enum.Enum):
    def __str__(self):
        return self.value


class Subject(_SnakeEnum):
    MATH = "math"
    BIOLOGY = "biology"
    PHYSICS = "physics"
    GEOGRAPHY = "geography"
    CHEMISTRY = "chemistry"


class ActionKind(_SnakeEnum):
    CAPTION = "caption"
    SUMMARY = "summary"
    SUB_TASK = "sub_task"
    THINKING = "thinking"
    SELF_REFLECTION = "self_reflection"
    ANSWER = "answer"


class StepLabel(_SnakeEnum):
    CORRECT_STEP = "correct_step"
    VISUAL_MISUNDERSTANDING = "visual_misunderstanding"
    PROBLEM_MISUNDERSTANDING = "problem_misunderstanding"
    LACK_OF_DOMAIN_KNOWLEDGE = "lack_of_domain_knowledge"
    MISAPPLICATION_OF_KNOWLEDGE = "misapplication_of_knowledge"
    LOGICAL_REASONING_ERROR = "logical_reasoning_error"
    HALLUCINATION = "hallucination"
    COMPUTATIONAL_ERROR = "computational_error"
    OFF_TOPIC_OR_INCONGRUENT = "off_topic_or_incongruent"


ERROR_LABELS = tuple(lbl for lbl in StepLabel if lbl is not StepLabel.CORRECT_STEP)

GRADES = range(7, 13)


def quantize_score(x: float) -> float:
    return round(float(x), SCORE_DIGITS)


def _check_unit(name, x):
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {x!r}")


@dataclass(frozen=True)
class Problem:
    id: str
    statement: str
    subject: Subject
    grade: int
    image_refs: tuple[str, ...] = ()
    concept_ids: tuple[str, ...] = ()
    ground_truth: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "subject", Subject(self.subject))
        object.__setattr__(self, "image_refs", tuple(self.image_refs))
        object.__setattr__(self, "concept_ids", tuple(self.concept_ids))
        if self.grade not in GRADES:
            raise ValueError(f"grade must be within 7-12, got {self.grade}")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "statement": self.statement,
            "image_refs": list(self.image_refs),
            "subject": self.subject.value,
            "grade": self.grade,
            "concept_ids": list(self.concept_ids),
            "ground_truth": self.ground_truth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Problem":
        return cls(
            id=d["id"],
            statement=d["statement"],
            subject=Subject(d["subject"]),
            grade=int(d["grade"]),
            image_refs=tuple(d.get("image_refs", ())),
            concept_ids=tuple(d.get("concept_ids", ())),
            ground_truth=d.get("ground_truth"),
        )


@dataclass(frozen=True)
class ReasoningStep:
    action: ActionKind
    content: str
    producer_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "action", ActionKind(self.action))
        if not self.content:
            raise ValueError("step content must be non-empty")

    def to_dict(self) -> dict:
        return {"action": self.action.value, "content": self.content, "producer_id": self.producer_id}

    @classmethod
    def from_dict(cls, d: dict) -> "ReasoningStep":
        return cls(ActionKind(d["action"]), d["content"], d.get("producer_id", ""))


@dataclass(frozen=True)
class Grammar:
    """Switchable ordering rules for action sequences.

    All three rules on is the default engine grammar.
    """

    caption_first: bool = True
    single_final_answer: bool = True
    reflection_before_answer: bool = True


DEFAULT_GRAMMAR = Grammar()
NO_GRAMMAR = Grammar(caption_first=False, single_final_answer=False, reflection_before_answer=False)


def grammar_valid(steps: Sequence[ReasoningStep], grammar: Grammar = DEFAULT_GRAMMAR) -> bool:
    """Check an action sequence against the ordering rules.

    (a) the first step is a caption, (b) at most one answer and it comes
    last, (c) some self-reflection precedes the answer.
    """
    actions = [s.action for s in steps]
    if not actions:
        return True
    if grammar.caption_first and actions[0] is not ActionKind.CAPTION:
        return False
    n_answers = actions.count(ActionKind.ANSWER)
    if grammar.single_final_answer and n_answers and (n_answers > 1 or actions[-1] is not ActionKind.ANSWER):
        return False
    if grammar.reflection_before_answer and n_answers:
        first = actions.index(ActionKind.ANSWER)
        if ActionKind.SELF_REFLECTION not in actions[:first]:
            return False
    return True


def legal_next_actions(prefix: Sequence[ReasoningStep], grammar: Grammar = DEFAULT_GRAMMAR) -> list[ActionKind]:
    """Actions that keep ``prefix + [action]`` grammar-valid, in declaration order."""
    actions = [s.action for s in prefix]
    if grammar.single_final_answer and ActionKind.ANSWER in actions:
        return []
    if not actions and grammar.caption_first:
        return [ActionKind.CAPTION]
    out = []
    for kind in ActionKind:
        if kind is ActionKind.ANSWER and grammar.reflection_before_answer:
            if ActionKind.SELF_REFLECTION not in actions:
                continue
        out.append(kind)
    return out


@dataclass(frozen=True)
class Trajectory:
    problem_id: str
    steps: tuple[ReasoningStep, ...]
    final_answer: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        actions = [s.action for s in self.steps]
        if actions.count(ActionKind.ANSWER) > 1:
            raise GrammarError("a trajectory holds at most one answer step")
        if self.final_answer is not None and (not actions or actions[-1] is not ActionKind.ANSWER):
            raise GrammarError("final_answer requires the last step to be an answer")

    @classmethod
    def from_steps(cls, problem_id: str, steps: Iterable[ReasoningStep]) -> "Trajectory":
        steps = tuple(steps)
        final = steps[-1].content if steps and steps[-1].action is ActionKind.ANSWER else None
        return cls(problem_id, steps, final)

    def is_grammar_valid(self, grammar: Grammar = DEFAULT_GRAMMAR) -> bool:
        return grammar_valid(self.steps, grammar)

    def to_dict(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "steps": [s.to_dict() for s in self.steps],
            "final_answer": self.final_answer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(d["problem_id"], tuple(ReasoningStep.from_dict(s) for s in d["steps"]), d.get("final_answer"))


@dataclass(frozen=True)
class StepCritique:
    content: str
    label: StepLabel
    explanation: str
    score: float

    def __post_init__(self):
        object.__setattr__(self, "label", StepLabel(self.label))
        _check_unit("score", self.score)
        object.__setattr__(self, "score", quantize_score(self.score))

    def triple(self) -> tuple[str, StepLabel, str]:
        """The score-less projection (content, label, explanation)."""
        return self.content, self.label, self.explanation

    def to_dict(self) -> dict:
        return {"content": self.content, "label": self.label.value, "explanation": self.explanation, "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> "StepCritique":
        return cls(d["content"], StepLabel(d["label"]), d["explanation"], float(d["score"]))


class SearchNode:
    """Mutable tree node; only the search engine writes to it."""

    __slots__ = ("id", "step", "value", "visits", "parent", "children", "reward", "depth", "expanded", "exhausted")

    def __init__(self, step=None, reward=0.0, parent=None, node_id=0):
        self.id = node_id
        self.step = step
        self.reward = reward
        self.parent = parent
        self.children: list[SearchNode] = []
        self.depth = 0 if parent is None else parent.depth + 1
        if step is None:
            self.value, self.visits = 0.0, 0
        else:
            self.value, self.visits = reward, 1
        self.expanded = False
        self.exhausted = False

    @property
    def is_root(self):
        return self.parent is None

    @property
    def is_terminal(self):
        return self.step is not None and self.step.action is ActionKind.ANSWER

    def path(self) -> list[ReasoningStep]:
        out = []
        node = self
        while node.step is not None:
            out.append(node.step)
            node = node.parent
        return out[::-1]

    def path_rewards(self) -> list[float]:
        out = []
        node = self
        while node.step is not None:
            out.append(node.reward)
            node = node.parent
        return out[::-1]

    def ancestors(self) -> list["SearchNode"]:
        """This node and every ancestor up to the root, leaf first."""
        out = []
        node = self
        while node is not None:
            out.append(node)
            node = node.parent
        return out

    def walk(self):
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def __repr__(self):
        action = self.step.action.value if self.step else "root"
        return f"SearchNode(id={self.id}, {action}, V={self.value:.4f}, N={self.visits})"


# --- canonical encoding ---------------------------------------------------

def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def encode(obj) -> bytes:
    return canonical_json(obj.to_dict()).encode("utf-8")


def decode(cls, data: bytes):
    return cls.from_dict(json.loads(data.decode("utf-8")))


def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def prefix_hash(steps: Sequence[ReasoningStep]) -> str:
    """Stable digest of a step prefix (actions and contents, not producers)."""
    h = hashlib.sha256()
    for s in steps:
        h.update(s.action.value.encode())
        h.update(b"\x1f")
        h.update(s.content.encode("utf-8"))
        h.update(b"\x1e")
    return h.hexdigest()[:16]


def stable_seed(*parts: Any) -> int:
    """Derive a 64-bit seed from arbitrary printable parts, independent of PYTHONHASHSEED."""
    text = "\x1f".join(repr(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")



# --- JSON schemas ---------------------------------------------------------

def _enum_schema(e):
    return {"type": "string", "enum": [m.value for m in e]}


_STEP_SCHEMA = {
    "type": "object",
    "required": ["action", "content", "producer_id"],
    "additionalProperties": False,
    "properties": {
        "action": _enum_schema(ActionKind),
        "content": {"type": "string", "minLength": 1},
        "producer_id": {"type": "string"},
    },
}

_CRITIQUE_SCHEMA = {
    "type": "object",
    "required": ["content", "label", "explanation", "score"],
    "additionalProperties": False,
    "properties": {
        "content": {"type": "string"},
        "label": _enum_schema(StepLabel),
        "explanation": {"type": "string"},
        "score": {"type": "number", "minimum": 0, "maximum": 1},
    },
}

SCHEMAS = {
    "Problem": {
        "type": "object",
        "required": ["id", "statement", "image_refs", "subject", "grade", "concept_ids", "ground_truth"],
        "additionalProperties": False,
        "properties": {
            "id": {"type": "string"},
            "statement": {"type": "string"},
            "image_refs": {"type": "array", "items": {"type": "string"}},
            "subject": _enum_schema(Subject),
            "grade": {"type": "integer", "minimum": 7, "maximum": 12},
            "concept_ids": {"type": "array", "items": {"type": "string"}},
            "ground_truth": {"type": ["string", "null"]},
        },
    },
    "ReasoningStep": _STEP_SCHEMA,
    "Trajectory": {
        "type": "object",
        "required": ["problem_id", "steps", "final_answer"],
        "additionalProperties": False,
        "properties": {
            "problem_id": {"type": "string"},
            "steps": {"type": "array", "items": _STEP_SCHEMA},
            "final_answer": {"type": ["string", "null"]},
        },
    },
    "StepCritique": _CRITIQUE_SCHEMA,
    "ActionKind": _enum_schema(ActionKind),
    "StepLabel": _enum_schema(StepLabel),
    "SearchNode": {
        "type": "object",
        "required": ["id", "parent_id", "step", "value", "visits", "reward"],
        "properties": {
            "id": {"type": "integer"},
            "parent_id": {"type": ["integer", "null"]},
            "step": {"oneOf": [_STEP_SCHEMA, {"type": "null"}]},
            "value": {"type": "number", "minimum": 0, "maximum": 1},
            "visits": {"type": "integer", "minimum": 0},
            "reward": {"type": "number", "minimum": 0, "maximum": 1},
            "children": {"type": "array", "items": {"type": "integer"}},
        },
    },
}


def node_to_dict(node: SearchNode) -> dict:
    return {
        "id": node.id,
        "parent_id": None if node.parent is None else node.parent.id,
        "step": None if node.step is None else node.step.to_dict(),
        "value": quantize_score(node.value),
        "visits": node.visits,
        "reward": quantize_score(node.reward),
        "children": [c.id for c in node.children],
    }
