"""Post-search trajectory filtering and PRM training-data construction."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import logging
import math
import os
import random
import re
import tempfile
from collections import Counter
from dataclasses import dataclass
from decimal import Decimal, localcontext
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .core import (
    ActionKind,
    Problem,
    ReasoningStep,
    StepCritique,
    StepLabel,
    Trajectory,
    canonical_json,
    stable_seed,
)
from .errors import AlignmentError, ExportError, InjectionFailed, SegmentationError
from .gateway.prompts import build_prompt

logger = logging.getLogger(__name__)

DEFAULT_CONFIDENCE_FLOOR = 0.6
DEFAULT_MAX_ERROR_SHARE = 0.4


class RecordFormat(str, enum.Enum):
    STEPWISE = "stepwise"
    CRITIQUE = "critique"


class RecordSource(str, enum.Enum):
    MCTS_PATH = "mcts_path"
    ERROR_INJECTION = "error_injection"
    DIALOGUE = "dialogue"


class CurriculumStage(str, enum.Enum):
    STAGE1_STEPWISE = "stage1_stepwise"
    STAGE2_CRITIQUE = "stage2_critique"


# --- answer canonicalization ----------------------------------------------

_NUMBER = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)")
_FRACTION = re.compile(r"([+-]?\d+)\s*/\s*([+-]?\d+)")
_LATEX_FRAC = re.compile(r"([+-]?)\\[dt]?frac\{\s*([+-]?\d+)\s*\}\{\s*([+-]?\d+)\s*\}")
_CHOICE = re.compile(r"\(?([A-Za-z])\)?[.:]?")


def _parse_rational(text: str) -> Optional[Fraction]:
    t = text.replace(",", "").replace("$", "").strip()
    m = _LATEX_FRAC.fullmatch(t)
    if m:
        sign, num, den = m.groups()
        t = f"{sign}{num}/{den}"
    m = _FRACTION.fullmatch(t)
    if m:
        den = int(m.group(2))
        return Fraction(int(m.group(1)), den) if den else None
    if _NUMBER.fullmatch(t):
        return Fraction(t)
    return None


def _format_rational(x: Fraction) -> str:
    if x.denominator == 1:
        return str(x.numerator)
    d = x.denominator
    while d % 2 == 0:
        d //= 2
    while d % 5 == 0:
        d //= 5
    if d != 1:
        return f"{x.numerator}/{x.denominator}"
    with localcontext() as ctx:
        ctx.prec = 200
        s = format(Decimal(x.numerator) / Decimal(x.denominator), "f")
    return s.rstrip("0").rstrip(".") if "." in s else s


def canonicalize_answer(text: str) -> str:
    """Normalize an answer for equality tests.

    Whitespace is trimmed and collapsed, numbers become reduced rationals
    (terminating ones as plain decimals), a lone choice letter is
    upper-cased and anything else is case-folded.
    """
    t = " ".join(str(text).split())
    if t.endswith(".") and not _NUMBER.fullmatch(t):
        t = t[:-1].rstrip()
    value = _parse_rational(t)
    if value is not None:
        return _format_rational(value)
    m = _CHOICE.fullmatch(t)
    if m:
        return m.group(1).upper()
    return t.casefold()


def answers_equal(a: str, b: str) -> bool:
    return canonicalize_answer(a) == canonicalize_answer(b)


# --- trajectory filters ---------------------------------------------------

def _check_aligned(trajectory: Trajectory, critiques: Sequence[StepCritique]):
    if len(critiques) != len(trajectory.steps):
        raise AlignmentError(f"{trajectory.problem_id}: {len(critiques)} critiques for {len(trajectory.steps)} steps")
    for i, (s, c) in enumerate(zip(trajectory.steps, critiques)):
        if c.content != s.content:
            raise AlignmentError(f"{trajectory.problem_id}: critique {i} does not describe step {i}")


def passes_confidence_gate(trajectory: Trajectory, critiques: Sequence[StepCritique],
                           confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR) -> bool:
    if not critiques:
        return False
    for s, c in zip(trajectory.steps, critiques):
        if s.action is ActionKind.SELF_REFLECTION and c.label is not StepLabel.CORRECT_STEP:
            return False
    return math.fsum(c.score for c in critiques) / len(critiques) >= confidence_floor


def filter_trajectories(candidates: Sequence[tuple[Trajectory, Sequence[StepCritique]]],
                        confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR) -> list[Trajectory]:
    """Two-stage filter: every step labelled correct, then the confidence/reflection gate."""
    kept = []
    for trajectory, critiques in candidates:
        _check_aligned(trajectory, critiques)
        if any(c.label is not StepLabel.CORRECT_STEP for c in critiques):
            continue
        if passes_confidence_gate(trajectory, critiques, confidence_floor):
            kept.append(trajectory)
    return kept


def self_consistency_vote(answers: Sequence[str]) -> tuple[str, int]:
    """Modal canonical answer and its support; ties go to the smallest canonical form."""
    if not answers:
        raise ValueError("self_consistency_vote needs at least one answer")
    counts = Counter(canonicalize_answer(a) for a in answers)
    winner = min(counts, key=lambda a: (-counts[a], a))
    return winner, counts[winner]


def rejection_sample(trajectories: Sequence[Trajectory], gold: str) -> list[Trajectory]:
    if not str(gold).strip():
        raise ValueError("gold answer must be non-empty")
    target = canonicalize_answer(gold)
    kept = []
    for t in trajectories:
        if t.final_answer is None:
            logger.warning("trajectory for %s has no final answer; skipped", t.problem_id)
            continue
        if canonicalize_answer(t.final_answer) == target:
            kept.append(t)
    return kept


# --- records --------------------------------------------------------------

@dataclass(frozen=True)
class DatasetRecord:
    """One exportable annotated example.

    ``segments`` is the step sequence the annotations are supposed to cover;
    the format check compares it against ``steps``. ``balanced`` is set once
    the record has passed an error-coverage pass, so a later pass leaves it be.
    """

    problem_id: str
    format: RecordFormat
    steps: tuple[StepCritique, ...]
    source: RecordSource
    curriculum_stage: CurriculumStage
    segments: tuple[str, ...] = ()
    balanced: bool = False

    def __post_init__(self):
        object.__setattr__(self, "format", RecordFormat(self.format))
        object.__setattr__(self, "source", RecordSource(self.source))
        object.__setattr__(self, "curriculum_stage", CurriculumStage(self.curriculum_stage))
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "segments", tuple(self.segments) or tuple(c.content for c in self.steps))
        if not self.steps:
            raise ValueError("a dataset record needs at least one step")
        if self.format is RecordFormat.STEPWISE and self.source is RecordSource.DIALOGUE:
            raise ValueError("stepwise records need pre-segmented sources (search paths or injections)")

    @property
    def key(self) -> str:
        body = canonical_json([self.problem_id, self.source.value, list(self.segments)])
        return hashlib.sha256(body.encode("utf-8")).hexdigest()[:16]

    @property
    def labels(self) -> list[StepLabel]:
        return [c.label for c in self.steps]

    def primary_error(self) -> Optional[StepLabel]:
        errors = [lbl for lbl in self.labels if lbl is not StepLabel.CORRECT_STEP]
        if not errors:
            return None
        counts = Counter(errors)
        return max(errors, key=lambda lbl: (counts[lbl], -errors.index(lbl)))

    def to_dict(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "format": self.format.value,
            "steps": [c.to_dict() for c in self.steps],
            "source": self.source.value,
            "curriculum_stage": self.curriculum_stage.value,
            "segments": list(self.segments),
            "balanced": self.balanced,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetRecord":
        return cls(
            problem_id=d["problem_id"],
            format=RecordFormat(d["format"]),
            steps=tuple(StepCritique.from_dict(c) for c in d["steps"]),
            source=RecordSource(d["source"]),
            curriculum_stage=CurriculumStage(d["curriculum_stage"]),
            segments=tuple(d.get("segments", ())),
            balanced=bool(d.get("balanced", False)),
        )


def search_record(trajectory: Trajectory, critiques: Sequence[StepCritique]) -> DatasetRecord:
    _check_aligned(trajectory, critiques)
    return DatasetRecord(trajectory.problem_id, RecordFormat.STEPWISE, tuple(critiques), RecordSource.MCTS_PATH,
                         CurriculumStage.STAGE1_STEPWISE, tuple(s.content for s in trajectory.steps))


@dataclass(frozen=True)
class InjectionSpec:
    step_index: int
    error_type: StepLabel
    generator_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "error_type", StepLabel(self.error_type))
        if self.error_type is StepLabel.CORRECT_STEP:
            raise ValueError("an injected error cannot be correct_step")
        if self.step_index < 0:
            raise ValueError("step_index must be non-negative")


def inject_error(reference_steps: Sequence[str], spec: InjectionSpec, actor, problem: Optional[Problem] = None,
                 annotator=None, temperature: float = 0.7) -> tuple[list[str], list[StepCritique]]:
    """Have ``actor`` rewrite one reference step so it exhibits ``spec.error_type``.

    Gold labels mark that step with the error and every other step correct.
    Scores are 0/1 unless an ``annotator`` reward model supplies them.
    """
    if not 0 <= spec.step_index < len(reference_steps):
        raise IndexError(f"step_index {spec.step_index} out of range for {len(reference_steps)} steps")
    steps = list(reference_steps)
    original = steps[spec.step_index]
    as_steps = [ReasoningStep(ActionKind.THINKING, s) for s in steps]
    payload = {
        "kind": "inject_error",
        "problem_id": problem.id if problem else None,
        "step": original,
        "step_number": spec.step_index + 1,
        "error_type": spec.error_type.value,
    }
    prompt = build_prompt("inject_error", problem, as_steps,
                          {**payload, "statement": problem.statement if problem else "(see steps)"})
    rewritten = actor.complete(prompt, temperature, payload).strip()
    if not rewritten or rewritten == original:
        raise InjectionFailed(f"actor {getattr(actor, 'id', '?')} did not change step {spec.step_index}")
    steps[spec.step_index] = rewritten

    gold = []
    for i, text in enumerate(steps):
        label = spec.error_type if i == spec.step_index else StepLabel.CORRECT_STEP
        if annotator is not None and problem is not None:
            c = annotator.critique(problem, [ReasoningStep(ActionKind.THINKING, s) for s in steps[:i]],
                                   ReasoningStep(ActionKind.THINKING, text))
            score, explanation = c.score, c.explanation
        else:
            score = 0.0 if i == spec.step_index else 1.0
            explanation = f"injected {label.value}" if i == spec.step_index else "unchanged reference step"
        gold.append(StepCritique(text, label, explanation, score))
    return steps, gold


def injection_record(problem_id: str, corrupted: Sequence[str], gold: Sequence[StepCritique]) -> DatasetRecord:
    return DatasetRecord(problem_id, RecordFormat.STEPWISE, tuple(gold), RecordSource.ERROR_INJECTION,
                         CurriculumStage.STAGE1_STEPWISE, tuple(corrupted))


_NUMBERING = re.compile(r"^\s*(?:step\s*\d+\s*[:.)-]|\d+\s*[.):-]|[-*•])\s*", re.I)


def parse_segments(text: str) -> list[str]:
    out = []
    for line in text.splitlines():
        line = _NUMBERING.sub("", line).strip()
        if line:
            out.append(line)
    return out


def build_dialogue_critique(problem: Problem, student_answer: str, teacher, segmenter=None,
                            temperature: float = 0.3) -> DatasetRecord:
    """Split a free-form student answer into steps and have the teacher annotate each."""
    if not student_answer.strip():
        raise ValueError("student answer must be non-empty")
    if segmenter is None:
        from .gateway.mock import split_sentences
        segments = split_sentences(student_answer)
    else:
        payload = {"kind": "segment", "problem_id": problem.id, "answer": student_answer}
        prompt = build_prompt("segment", problem, (), {"answer": student_answer})
        segments = parse_segments(segmenter.complete(prompt, temperature, payload))
    if not segments:
        raise SegmentationError(f"segmentation of the answer to {problem.id} produced no steps")
    steps = [ReasoningStep(ActionKind.THINKING, s, "student") for s in segments]
    critiques = teacher.critique_full(problem, Trajectory(problem.id, tuple(steps)))
    return DatasetRecord(problem.id, RecordFormat.CRITIQUE, tuple(critiques), RecordSource.DIALOGUE,
                         CurriculumStage.STAGE2_CRITIQUE, tuple(segments))


# --- quality control ------------------------------------------------------

def format_problem(record: DatasetRecord) -> Optional[str]:
    if len(record.steps) != len(record.segments):
        return f"{len(record.segments)} steps but {len(record.steps)} quadruples"
    for i, (c, seg) in enumerate(zip(record.steps, record.segments)):
        if c.content != seg:
            return f"quadruple {i} does not annotate step {i}"
        if not c.explanation.strip():
            return f"quadruple {i} has an empty explanation"
    return None


def qc_filters(records: Sequence[DatasetRecord],
               duplicate_annotations: Optional[Mapping[str, Sequence[StepLabel]]] = None,
               max_error_share: float = DEFAULT_MAX_ERROR_SHARE, seed: int = 0
               ) -> tuple[list[DatasetRecord], list[dict]]:
    """Format, annotation-consistency and error-coverage filters.

    ``duplicate_annotations`` maps a record key to the labels a second
    annotator gave; any disagreement drops the record. Coverage caps every
    primary error type at ``max(1, floor(max_error_share * n))`` records of the
    batch, down-sampled with a seeded RNG; records already balanced by an
    earlier pass are exempt and count toward nothing.
    """
    report: list[dict] = []

    def reject(rec, rule, reason):
        report.append({"key": rec.key, "problem_id": rec.problem_id, "rule": rule, "reason": reason})

    stage: list[DatasetRecord] = []
    for rec in records:
        why = format_problem(rec)
        if why:
            reject(rec, "format", why)
            continue
        if duplicate_annotations is not None and rec.key in duplicate_annotations:
            other = [StepLabel(x) for x in duplicate_annotations[rec.key]]
            if other != rec.labels:
                reject(rec, "annotation", "labels differ between annotation passes")
                continue
        stage.append(rec)

    fresh = [i for i, rec in enumerate(stage) if not rec.balanced]
    # at least one record per type survives, otherwise a batch of one error record would vanish
    limit = max(1, math.floor(max_error_share * len(fresh) + 1e-9))
    by_type: dict[StepLabel, list[int]] = {}
    for i in fresh:
        err = stage[i].primary_error()
        if err is not None:
            by_type.setdefault(err, []).append(i)
    dropped = set()
    for err in sorted(by_type, key=lambda e: e.value):
        idx = by_type[err]
        if len(idx) > limit:
            keep = set(random.Random(stable_seed(seed, err.value, len(idx))).sample(idx, limit))
            for i in idx:
                if i not in keep:
                    dropped.add(i)
                    reject(stage[i], "coverage", f"{err.value} over {max_error_share:.0%} of the batch")

    retained = [dataclasses.replace(rec, balanced=True) if not rec.balanced else rec
                for i, rec in enumerate(stage) if i not in dropped]
    return retained, report


# --- export ---------------------------------------------------------------

def atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def export_dataset(records: Sequence[DatasetRecord], root) -> dict:
    """Write JSONL partitions ``<stage>/<source>.jsonl`` under ``root`` plus ``manifest.json``."""
    root = Path(root)
    parts: dict[tuple[str, str], list[str]] = {}
    for rec in records:
        parts.setdefault((rec.curriculum_stage.value, rec.source.value), []).append(canonical_json(rec.to_dict()))
    files = []
    try:
        for (stage, source) in sorted(parts):
            rel = f"{stage}/{source}.jsonl"
            data = "".join(line + "\n" for line in parts[(stage, source)]).encode("utf-8")
            atomic_write(root / rel, data)
            files.append({"path": rel, "curriculum_stage": stage, "source": source,
                          "records": len(parts[(stage, source)]), "sha256": hashlib.sha256(data).hexdigest()})
        manifest = {"files": files, "total_records": sum(f["records"] for f in files)}
        atomic_write(root / "manifest.json", (canonical_json(manifest) + "\n").encode("utf-8"))
    except OSError as exc:
        raise ExportError(f"could not export dataset to {root}: {exc}") from exc
    return manifest


def load_records(path) -> list[DatasetRecord]:
    import json
    with open(path, encoding="utf-8") as fh:
        return [DatasetRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
