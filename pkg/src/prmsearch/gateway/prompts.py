"""Prompt templates for actors, critics and data-construction helpers."""

from __future__ import annotations

import string
from typing import Any, Mapping, Optional, Sequence

from ..core import ActionKind, Problem, ReasoningStep
from ..errors import TemplateError

ACTION_INSTRUCTIONS = {
    ActionKind.CAPTION: "Describe the visual content of the problem: figures, axes, labels and any values you can read.",
    ActionKind.SUMMARY: "Summarize what the question asks and the key given information.",
    ActionKind.SUB_TASK: "Break the problem into the next concrete sub-task to solve.",
    ActionKind.THINKING: "Carry out the next step of reasoning or calculation.",
    ActionKind.SELF_REFLECTION: "Check the reasoning so far for mistakes and confirm or correct it.",
    ActionKind.ANSWER: "State the final answer only.",
}

LABEL_GUIDE = (
    "correct_step, visual_misunderstanding, problem_misunderstanding, lack_of_domain_knowledge, "
    "misapplication_of_knowledge, logical_reasoning_error, hallucination, computational_error, "
    "off_topic_or_incongruent"
)

_ACTION_BODY = """You are solving a {subject} problem for grade {grade}.
Problem: {statement}
Images: {images}

Reasoning so far:
{prefix}

Next step type: {action}
Instruction: {instruction}
Reply with the content of this single step only."""

TEMPLATES: dict[str, str] = {kind.value: _ACTION_BODY for kind in ActionKind}

TEMPLATES["critique_step"] = """You are a strict teacher grading one reasoning step.
Problem: {statement}
Images: {images}

Previous steps:
{prefix}

Step under review ({action}): {step}

Classify the step with exactly one label from: {labels}.
Respond with a JSON object {{"label": ..., "explanation": ..., "score": ...}} where score in [0, 1] is your confidence that the step is correct."""

TEMPLATES["critique_verdict"] = """Problem: {statement}

Previous steps:
{prefix}

Step under review ({action}): {step}

Is this step correct? Answer Yes or No."""

TEMPLATES["critique"] = """You are a strict teacher grading a student's solution step by step.
Problem: {statement}
Images: {images}

Solution:
{steps}

For every step, in order, give one label from: {labels}.
Respond with a JSON array holding one object {{"label": ..., "explanation": ..., "score": ...}} per step."""

TEMPLATES["segment"] = """Split the following answer into its individual reasoning steps.
Problem: {statement}

Answer:
{answer}

Return one step per line, in order, without numbering."""

TEMPLATES["inject_error"] = """Here is a correct reference solution.
Problem: {statement}

{steps}

Rewrite step {step_number} so that it contains a {error_type} error, keeping its style and length.
Original step {step_number}: {step}
Reply with the rewritten step only."""

TEMPLATES["solve"] = """Solve the following {subject} problem for grade {grade}.
Problem: {statement}
Images: {images}

Write your solution as tagged steps, one per line, using the tags
[caption] [summary] [sub_task] [thinking] [self_reflection] [answer].
Finish with exactly one [answer] line."""


def render_steps(steps: Sequence[ReasoningStep]) -> str:
    if not steps:
        return "(none)"
    return "\n".join(f"Step {i}: [{s.action.value}] {s.content}" for i, s in enumerate(steps, 1))


def _fields(template: str) -> list[str]:
    return [name for _, name, _, _ in string.Formatter().parse(template) if name]


def build_prompt(template_id: str, problem: Optional[Problem], prefix: Sequence[ReasoningStep] = (),
                 payload: Optional[Mapping[str, Any]] = None) -> str:
    """Fill ``template_id`` from the problem, the step prefix and an extra payload.

    Payload keys override the derived ones. ``steps`` renders the prefix as
    numbered lines; ``step`` may be a ReasoningStep or plain text.
    """
    try:
        template = TEMPLATES[template_id]
    except KeyError:
        raise TemplateError(f"unknown template {template_id!r}") from None

    values: dict[str, Any] = {"labels": LABEL_GUIDE, "prefix": render_steps(prefix), "steps": render_steps(prefix)}
    if problem is not None:
        values.update(
            statement=problem.statement,
            subject=problem.subject.value,
            grade=problem.grade,
            images=", ".join(problem.image_refs) or "(none)",
        )
    try:
        action = ActionKind(template_id)
    except ValueError:
        pass
    else:
        values.update(action=action.value, instruction=ACTION_INSTRUCTIONS[action])
    for key, val in (payload or {}).items():
        if isinstance(val, ReasoningStep):
            values.setdefault("action", val.action.value)
            val = val.content
        values[key] = val.value if hasattr(val, "value") and not isinstance(val, str) else val

    missing = [name for name in _fields(template) if name not in values]
    if missing:
        raise TemplateError(f"template {template_id!r} has unresolved placeholders: {sorted(set(missing))}")
    return template.format(**values)
