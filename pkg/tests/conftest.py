import pytest

from prmsearch.core import ActionKind, Problem, ReasoningStep, Subject


@pytest.fixture
def problem():
    return Problem("p-1", "What is the total height of the two bars?", Subject.MATH, 8,
                   image_refs=("img-1",), concept_ids=("addition",), ground_truth="7")


def step(action, content, producer="t"):
    return ReasoningStep(ActionKind(action), content, producer)


def steps(*actions):
    return [step(a, f"{a} {i}") for i, a in enumerate(actions)]


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
