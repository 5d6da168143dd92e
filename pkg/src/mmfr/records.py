"""Canonical corpus record schema, verdicts, and record-level validation.

Every stage of the pipeline consumes and produces ``SampleRecord``
values. Records are frozen: stages derive updated copies via
``dataclasses.replace`` and never mutate in place, so records are safe
to share across worker threads.

On the wire (JSONL manifests) the augmented-annotation and metric
fields use their published schema names (``qwen3vl_235b_instruct_caption``,
``qwen3vl_235b_thinking_response``, ``qwen3vl_4b_pass_rate``) for
interoperability with released data; internally they are named by what
they hold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable

from mmfr.errors import MalformedRecordError

# Wire names for fields whose internal name differs.
CAPTION_WIRE = "qwen3vl_235b_instruct_caption"
THINKING_WIRE = "qwen3vl_235b_thinking_response"
PASS_RATE_WIRE = "qwen3vl_4b_pass_rate"

# pass_rate is always k/4 for k in 0..4 (four probe rollouts).
PASS_RATE_VALUES = (0.0, 0.25, 0.5, 0.75, 1.0)

# Pipeline stage names in execution order. Stages at or after "clean"
# guarantee a non-empty question.
STAGE_SEQUENCE = (
    "ingest",
    "clean",
    "caption",
    "distill",
    "filter",
    "difficulty",
    "select",
    "split",
    "stats",
)


class Decision(str, Enum):
    KEEP = "keep"
    DROP = "drop"
    REGENERATE = "regenerate"


class Reason(str, Enum):
    TEMPLATE_ERROR = "TemplateError"
    TOO_SHORT = "TooShort"
    NGRAM_REPETITION = "NgramRepetition"
    INCONSISTENT = "Inconsistent"
    NON_ANSWER_QUESTION = "NonAnswerQuestion"
    CORRUPT_IMAGE = "CorruptImage"
    PARSE_FAILURE = "ParseFailure"
    NONE = "None"


@dataclass(frozen=True)
class FilterVerdict:
    """Keep/drop/regenerate decision with a machine-readable reason.

    ``decision == KEEP`` if and only if ``reason == NONE``; regenerate
    verdicts are only produced by the n-gram repetition stage.
    """

    decision: Decision
    reason: Reason
    stage: str

    def __post_init__(self) -> None:
        if (self.decision is Decision.KEEP) != (self.reason is Reason.NONE):
            raise ValueError(
                f"decision {self.decision.value} inconsistent with reason {self.reason.value}"
            )

    @classmethod
    def keep(cls, stage: str) -> "FilterVerdict":
        return cls(Decision.KEEP, Reason.NONE, stage)

    @classmethod
    def drop(cls, reason: Reason, stage: str) -> "FilterVerdict":
        if reason is Reason.NONE:
            raise ValueError("drop verdict requires a concrete reason")
        return cls(Decision.DROP, reason, stage)

    @classmethod
    def regenerate(cls, stage: str) -> "FilterVerdict":
        return cls(Decision.REGENERATE, Reason.NGRAM_REPETITION, stage)

    def to_dict(self) -> dict[str, str]:
        return {
            "decision": self.decision.value,
            "reason": self.reason.value,
            "stage": self.stage,
        }

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "FilterVerdict":
        return cls(Decision(d["decision"]), Reason(d["reason"]), d["stage"])


@dataclass(frozen=True)
class SampleRecord:
    """One canonical corpus row.

    ``original_question`` and ``original_answer`` preserve the source
    text exactly as ingested and are never touched by later stages.
    Optional fields are ``None`` when absent and omitted from the wire;
    the empty string is a legal, distinct value only for
    ``original_answer`` and ``consistency_analysis``.
    """

    source: str
    id: str
    original_question: str
    original_answer: str
    image: str
    question: str
    answer: str | None = None
    caption: str | None = None
    thinking_response: str | None = None
    pass_rate: float | None = None
    is_consistent: bool | None = None
    consistency_analysis: str | None = None

    def with_fields(self, **updates: Any) -> "SampleRecord":
        return replace(self, **updates)

    def to_wire(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "source": self.source,
            "id": self.id,
            "original_question": self.original_question,
            "original_answer": self.original_answer,
            "image": self.image,
            "question": self.question,
        }
        if self.answer is not None:
            d["answer"] = self.answer
        if self.caption is not None:
            d[CAPTION_WIRE] = self.caption
        if self.thinking_response is not None:
            d[THINKING_WIRE] = self.thinking_response
        if self.pass_rate is not None:
            d[PASS_RATE_WIRE] = self.pass_rate
        if self.is_consistent is not None:
            d["is_consistent"] = self.is_consistent
        if self.consistency_analysis is not None:
            d["consistency_analysis"] = self.consistency_analysis
        return d

    @classmethod
    def from_wire(cls, d: dict[str, Any]) -> "SampleRecord":
        try:
            rec = cls(
                source=_require_str(d, "source"),
                id=_require_str(d, "id"),
                original_question=_require_str(d, "original_question"),
                original_answer=_require_str(d, "original_answer"),
                image=_require_str(d, "image"),
                question=_require_str(d, "question"),
                answer=_optional_str(d, "answer"),
                caption=_optional_str(d, CAPTION_WIRE),
                thinking_response=_optional_str(d, THINKING_WIRE),
                pass_rate=_optional_number(d, PASS_RATE_WIRE),
                is_consistent=_optional_bool(d, "is_consistent"),
                consistency_analysis=_optional_str(d, "consistency_analysis"),
            )
        except MalformedRecordError:
            raise
        except (TypeError, ValueError) as exc:
            raise MalformedRecordError(str(exc)) from exc
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_wire(), ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "SampleRecord":
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRecordError(f"invalid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise MalformedRecordError("record line is not an object")
        return cls.from_wire(d)


def _require_str(d: dict[str, Any], key: str) -> str:
    if key not in d:
        raise MalformedRecordError(f"missing field {key!r}")
    v = d[key]
    if not isinstance(v, str):
        raise MalformedRecordError(f"field {key!r} must be a string")
    return v


def _optional_str(d: dict[str, Any], key: str) -> str | None:
    v = d.get(key)
    if v is None:
        return None
    if not isinstance(v, str):
        raise MalformedRecordError(f"field {key!r} must be a string")
    return v


def _optional_bool(d: dict[str, Any], key: str) -> bool | None:
    v = d.get(key)
    if v is None:
        return None
    if not isinstance(v, bool):
        raise MalformedRecordError(f"field {key!r} must be a boolean")
    return v


def _optional_number(d: dict[str, Any], key: str) -> float | None:
    v = d.get(key)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise MalformedRecordError(f"field {key!r} must be a number")
    return float(v)


def canonical_key(record: SampleRecord) -> tuple[str, str]:
    """Total ordering key for records: (source, id), both non-empty."""
    if not record.source or not record.id:
        raise MalformedRecordError(
            f"record requires non-empty source and id, got ({record.source!r}, {record.id!r})"
        )
    return (record.source, record.id)


def sort_records(records: Iterable[SampleRecord]) -> list[SampleRecord]:
    return sorted(records, key=canonical_key)


def _stage_at_or_after(stage: str, anchor: str) -> bool:
    # Unknown stage names are treated as late-pipeline: all checks apply.
    if stage not in STAGE_SEQUENCE:
        return True
    return STAGE_SEQUENCE.index(stage) >= STAGE_SEQUENCE.index(anchor)


def validate_record(record: SampleRecord, stage: str) -> list[str]:
    """Return every violated invariant applicable at `stage` (empty = ok)."""
    violations: list[str] = []
    if not record.source:
        violations.append("source is empty")
    if not record.id:
        violations.append("id is empty")
    if record.pass_rate is not None and record.pass_rate not in PASS_RATE_VALUES:
        violations.append(
            f"pass_rate {record.pass_rate!r} not in {{0, .25, .5, .75, 1}}"
        )
    if record.is_consistent is not None:
        if record.thinking_response is None:
            violations.append("is_consistent present but thinking_response absent")
        if record.answer is None:
            violations.append("is_consistent present but answer absent")
    if _stage_at_or_after(stage, "clean") and not record.question:
        violations.append("question is empty after cleaning stage")
    return violations
