"""Prompt-driven curation stages: cleaning, answer extraction,
captioning, and chain-of-thought distillation.

Each stage has three separable pieces so tests and the scripted
backend can meet in the middle: an exchange builder (prompt + decode
parameters), the gateway call, and a parser for the structured reply.
Judgment-style stages (cleaning, extraction, verification) decode at
temperature 0; generative stages (caption, distillation) at 1.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum

from mmfr import prompts
from mmfr.errors import (
    CaptionFormatError,
    ExtractionParseError,
    TagMissingError,
)
from mmfr.gateway import Backend, ChatExchange, DecodeParams
from mmfr.records import FilterVerdict, Reason, SampleRecord

CLEAN_DECODE = DecodeParams(temperature=0.0, max_tokens=2048)
EXTRACT_DECODE = DecodeParams(temperature=0.0, max_tokens=512)
CAPTION_DECODE = DecodeParams(temperature=1.0, max_tokens=4096)
DISTILL_DECODE = DecodeParams(temperature=1.0, max_tokens=16384)

# Distillation retries after an n-gram repetition flag: seed+1, seed+2,
# then the record is dropped.
MAX_REGEN_ATTEMPTS = 2

ANSWER_TAG_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
CAPTION_HEADING_RE = re.compile(r"^### Image \d+: .+")


class CleanKind(Enum):
    NO_PROBLEM = "no_problem"
    CORRECTED = "corrected"
    DROP_NON_ANSWER = "drop_non_answer"
    PARSE_FAILURE = "parse_failure"


@dataclass(frozen=True)
class CleanOutcome:
    kind: CleanKind
    error_types: tuple[str, ...] = ()
    corrected_text: str = ""


# ---------------------------------------------------------------------------
# Question cleaning
# ---------------------------------------------------------------------------


def clean_exchange(record: SampleRecord) -> ChatExchange:
    return ChatExchange(
        user_text=prompts.build_clean_prompt(record.question), decode=CLEAN_DECODE
    )


def _strip_line_comments(text: str) -> str:
    """Drop //-to-end-of-line comments that sit outside string literals."""
    out: list[str] = []
    in_string = False
    escaped = False
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if in_string:
            out.append(c)
            if escaped:
                escaped = False
            elif c == "\\":
                escaped = True
            elif c == '"':
                in_string = False
            i += 1
            continue
        if c == '"':
            in_string = True
            out.append(c)
            i += 1
            continue
        if c == "/" and i + 1 < n and text[i + 1] == "/":
            while i < n and text[i] != "\n":
                i += 1
            continue
        out.append(c)
        i += 1
    return "".join(out)


def _find_json_object(text: str) -> str | None:
    """Outermost brace-delimited object, tolerating prose and fences."""
    start = text.find("{")
    if start < 0:
        return None
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        c = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif c == "\\":
                escaped = True
            elif c == '"':
                in_string = False
            continue
        if c == '"':
            in_string = True
        elif c == "{":
            depth += 1
        elif c == "}":
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
    return None


def parse_clean_response(text: str) -> CleanOutcome:
    """Parse a cleaning reply into an outcome; never raises.

    A trimmed, case-insensitive "No Problem" means no changes.
    Otherwise the reply must carry a JSON object with an error_type
    array (only the four known labels) and a corrected_text string;
    trailing //-comments after values are stripped before parsing.
    Anything else is a parse failure, which the pipeline turns into a
    drop.
    """
    if text.strip().lower() == "no problem":
        return CleanOutcome(CleanKind.NO_PROBLEM)
    obj_text = _find_json_object(_strip_line_comments(text))
    if obj_text is None:
        return CleanOutcome(CleanKind.PARSE_FAILURE)
    try:
        obj = json.loads(obj_text)
    except json.JSONDecodeError:
        return CleanOutcome(CleanKind.PARSE_FAILURE)
    if not isinstance(obj, dict):
        return CleanOutcome(CleanKind.PARSE_FAILURE)
    error_types = obj.get("error_type")
    corrected = obj.get("corrected_text")
    if not isinstance(error_types, list) or not isinstance(corrected, str):
        return CleanOutcome(CleanKind.PARSE_FAILURE)
    labels = tuple(str(e) for e in error_types)
    if not labels or any(lbl not in prompts.CLEAN_ERROR_TYPES for lbl in labels):
        return CleanOutcome(CleanKind.PARSE_FAILURE)
    if "non-answer question" in labels:
        return CleanOutcome(CleanKind.DROP_NON_ANSWER, labels, "")
    if not corrected:
        # A correction with empty text is unusable.
        return CleanOutcome(CleanKind.PARSE_FAILURE, labels, "")
    return CleanOutcome(CleanKind.CORRECTED, labels, corrected)


def apply_clean(
    record: SampleRecord, outcome: CleanOutcome, stage: str = "clean"
) -> tuple[SampleRecord, FilterVerdict]:
    """Apply a clean outcome; original_question is never touched."""
    if outcome.kind is CleanKind.NO_PROBLEM:
        return record, FilterVerdict.keep(stage)
    if outcome.kind is CleanKind.CORRECTED:
        return record.with_fields(question=outcome.corrected_text), FilterVerdict.keep(stage)
    if outcome.kind is CleanKind.DROP_NON_ANSWER:
        return record, FilterVerdict.drop(Reason.NON_ANSWER_QUESTION, stage)
    return record, FilterVerdict.drop(Reason.PARSE_FAILURE, stage)


def clean_sample(
    record: SampleRecord, backend: Backend, stage: str = "clean"
) -> tuple[SampleRecord, FilterVerdict]:
    reply = backend.complete(clean_exchange(record))
    return apply_clean(record, parse_clean_response(reply.response_text), stage)


# ---------------------------------------------------------------------------
# Answer extraction
# ---------------------------------------------------------------------------


def extraction_exchange(record: SampleRecord) -> ChatExchange:
    return ChatExchange(
        user_text=prompts.build_extraction_prompt(record.question, record.original_answer),
        decode=EXTRACT_DECODE,
    )


def parse_extraction_reply(text: str) -> str | None:
    """Exactly one answer tag is required; empty content means not-found."""
    matches = ANSWER_TAG_RE.findall(text)
    if len(matches) != 1:
        raise ExtractionParseError(
            f"expected exactly one answer tag, found {len(matches)}"
        )
    content = matches[0].strip()
    return content or None


def extract_answer_via_model(record: SampleRecord, backend: Backend) -> str | None:
    """Fill a missing canonical answer from the raw answer/solution text."""
    if record.answer is not None:
        return record.answer
    if not record.original_answer:
        raise ExtractionParseError("no source answer text to extract from")
    reply = backend.complete(extraction_exchange(record))
    return parse_extraction_reply(reply.response_text)


def extract_answer_tag(text: str) -> str:
    """Trimmed content of the final well-formed answer tag pair."""
    matches = ANSWER_TAG_RE.findall(text)
    if not matches:
        raise TagMissingError("no well-formed <answer> tag pair")
    return matches[-1].strip()


# ---------------------------------------------------------------------------
# Captioning
# ---------------------------------------------------------------------------


def caption_exchange(record: SampleRecord, image: bytes | None) -> ChatExchange:
    return ChatExchange(
        user_text=prompts.build_caption_prompt(record.question),
        image=image,
        decode=CAPTION_DECODE,
    )


def caption_sample(
    record: SampleRecord, backend: Backend, image: bytes | None
) -> SampleRecord:
    """Generate and store a dense structured caption.

    The reply must begin with the category heading line; otherwise the
    record is quarantined for re-annotation (CaptionFormatError).
    """
    reply = backend.complete(caption_exchange(record, image))
    text = reply.response_text
    first_line = text.lstrip().splitlines()[0] if text.strip() else ""
    if not CAPTION_HEADING_RE.match(first_line):
        raise CaptionFormatError(
            f"caption does not start with a category heading: {first_line[:80]!r}"
        )
    return record.with_fields(caption=text)


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------


def distill_exchange(
    record: SampleRecord, seed: int, image: bytes | None
) -> ChatExchange:
    return ChatExchange(
        user_text=prompts.build_distill_prompt(record.question),
        image=image,
        decode=DecodeParams(
            temperature=DISTILL_DECODE.temperature,
            max_tokens=DISTILL_DECODE.max_tokens,
            seed=seed,
        ),
    )


def distill_sample(
    record: SampleRecord, backend: Backend, seed: int, image: bytes | None
) -> SampleRecord:
    """Store the teacher's raw reply; validation happens in the filters."""
    reply = backend.complete(distill_exchange(record, seed, image))
    return record.with_fields(thinking_response=reply.response_text)
