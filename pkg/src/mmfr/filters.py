"""Three-stage reasoning-quality filter.

Order matters and matches the pipeline: structural template and length
validation first (cheap, pure), intra-document n-gram repetition next,
and the expensive judge-backed correctness verification last, only for
records that carry a ground-truth answer. The n-gram stage emits a
regenerate verdict; the orchestrator retries distillation with bumped
seeds before converting it into a drop.
"""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass

from mmfr import prompts
from mmfr.errors import VerifyParseError
from mmfr.gateway import Backend, ChatExchange, DecodeParams
from mmfr.records import Decision, FilterVerdict, Reason, SampleRecord

VERIFY_DECODE = DecodeParams(temperature=0.0, max_tokens=1024)

MIN_THINK_WORDS = 100

THINK_RE = re.compile(r"<think>(.*?)</think>", re.DOTALL)
ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
_JUDGMENT_LINE_RE = re.compile(r"^\s*judgment\s*:\s*(.*)$", re.IGNORECASE)
_ANALYSIS_LINE_RE = re.compile(r"^\s*analysis\s*:\s*(.*)$", re.IGNORECASE)


@dataclass(frozen=True)
class TemplateCheck:
    has_think: bool
    has_answer: bool
    order_ok: bool
    think_word_count: int
    answer_text: str | None


@dataclass(frozen=True)
class NgramPolicy:
    n: int = 50
    min_repeats: int = 3

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.min_repeats < 2:
            raise ValueError("min_repeats must be >= 2")


def check_template(thinking_response: str) -> TemplateCheck:
    """Structural check: exactly one think block, then one answer block.

    Tags are matched literally and case-sensitively. Prose outside the
    blocks is permitted. The word count is over whitespace-delimited
    tokens inside the (first) think block.
    """
    think_spans = [(m.start(), m.end(), m.group(1)) for m in THINK_RE.finditer(thinking_response)]
    answer_spans = [(m.start(), m.end(), m.group(1)) for m in ANSWER_RE.finditer(thinking_response)]
    has_think = len(think_spans) > 0
    has_answer = len(answer_spans) > 0
    order_ok = (
        len(think_spans) == 1
        and len(answer_spans) == 1
        and think_spans[0][1] <= answer_spans[0][0]
    )
    think_word_count = len(think_spans[0][2].split()) if think_spans else 0
    answer_text = answer_spans[-1][2].strip() if answer_spans else None
    return TemplateCheck(has_think, has_answer, order_ok, think_word_count, answer_text)


def length_filter(
    check: TemplateCheck, min_words: int = MIN_THINK_WORDS, stage: str = "filter"
) -> FilterVerdict:
    """Template failures win over length; the 100-word bound is exclusive
    below (99 drops, 100 keeps)."""
    if not check.order_ok:
        return FilterVerdict.drop(Reason.TEMPLATE_ERROR, stage)
    if check.think_word_count < min_words:
        return FilterVerdict.drop(Reason.TOO_SHORT, stage)
    return FilterVerdict.keep(stage)


_HASH_MOD = (1 << 61) - 1
_HASH_BASE = 1_000_003


def detect_ngram_repetition(
    text: str, policy: NgramPolicy = NgramPolicy()
) -> tuple[bool, list[int]]:
    """Flag text containing any n-word window repeated >= min_repeats times.

    Words are Unicode-whitespace tokens; occurrences may overlap. A
    polynomial rolling digest over word hashes finds candidate windows
    in O(L); digest collisions are confirmed by direct comparison, so
    the verdict is exact and independent of hash randomization. When
    flagged, returns the occurrence offsets (word indices) of the
    repeated window with the earliest first occurrence.
    """
    words = text.split()
    n = policy.n
    count = len(words) - n + 1
    if count < policy.min_repeats:
        return False, []

    hashes = [hash(w) & _HASH_MOD for w in words]
    # prefix[i] = polynomial hash of words[:i]
    prefix = [0] * (len(words) + 1)
    for i, h in enumerate(hashes):
        prefix[i + 1] = (prefix[i] * _HASH_BASE + h) % _HASH_MOD
    base_pow = pow(_HASH_BASE, n, _HASH_MOD)

    buckets: dict[int, list[int]] = defaultdict(list)
    for i in range(count):
        digest = (prefix[i + n] - prefix[i] * base_pow) % _HASH_MOD
        buckets[digest].append(i)

    best: list[int] | None = None
    for offsets in buckets.values():
        if len(offsets) < policy.min_repeats:
            continue
        # Confirm equality within the bucket; collisions split it into
        # groups keyed by the first offset holding each distinct window.
        groups: list[list[int]] = []
        for i in offsets:
            for group in groups:
                j = group[0]
                if words[i : i + n] == words[j : j + n]:
                    group.append(i)
                    break
            else:
                groups.append([i])
        for group in groups:
            if len(group) >= policy.min_repeats:
                if best is None or group[0] < best[0]:
                    best = group
    if best is None:
        return False, []
    return True, best


def ngram_repetition_oracle(text: str, policy: NgramPolicy = NgramPolicy()) -> bool:
    """O(L*n) brute-force window counting; the independent reference."""
    words = text.split()
    n = policy.n
    counts: dict[tuple[str, ...], int] = {}
    for i in range(len(words) - n + 1):
        window = tuple(words[i : i + n])
        counts[window] = counts.get(window, 0) + 1
    return any(c >= policy.min_repeats for c in counts.values())


# ---------------------------------------------------------------------------
# Correctness verification
# ---------------------------------------------------------------------------


def trailing_solution_segment(thinking_response: str) -> str:
    """Text after the final think block: the visible solution narrative."""
    matches = list(THINK_RE.finditer(thinking_response))
    if not matches:
        return thinking_response.strip()
    return thinking_response[matches[-1].end() :].strip()


def verify_exchange(record: SampleRecord, generated: str) -> ChatExchange:
    assert record.answer is not None
    return ChatExchange(
        user_text=prompts.build_verify_prompt(record.question, record.answer, generated),
        decode=VERIFY_DECODE,
    )


def parse_verify_reply(text: str) -> tuple[bool, str]:
    """Decode the two-line Analysis/Judgment reply.

    The final Judgment line decides; a missing or unrecognizable
    judgment raises VerifyParseError for the quarantine.
    """
    judgment: bool | None = None
    analysis = ""
    for line in text.splitlines():
        m = _ANALYSIS_LINE_RE.match(line)
        if m:
            analysis = m.group(1).strip()
            continue
        m = _JUDGMENT_LINE_RE.match(line)
        if m:
            value = m.group(1).strip().lower()
            if value.startswith("equivalent"):
                judgment = True
            elif value.startswith("different"):
                judgment = False
            else:
                judgment = None
    if judgment is None:
        raise VerifyParseError("no Equivalent/Different judgment found")
    return judgment, analysis


def verify_consistency(record: SampleRecord, backend: Backend) -> tuple[bool, str]:
    """Judge the generated solution against the reference answer."""
    if record.answer is None:
        raise ValueError("verification requires a ground-truth answer")
    if record.thinking_response is None:
        raise ValueError("verification requires a thinking_response")
    generated = trailing_solution_segment(record.thinking_response)
    reply = backend.complete(verify_exchange(record, generated))
    return parse_verify_reply(reply.response_text)


# ---------------------------------------------------------------------------
# Full chain
# ---------------------------------------------------------------------------


def run_filter_chain(
    record: SampleRecord,
    backend: Backend | None,
    policy: NgramPolicy = NgramPolicy(),
    min_words: int = MIN_THINK_WORDS,
    stage: str = "filter",
) -> tuple[SampleRecord, FilterVerdict]:
    """Template/length, then n-gram, then verification.

    Returns a regenerate verdict on an n-gram flag; the caller decides
    whether to re-distill or drop. Records without a ground-truth
    answer skip verification and keep ``is_consistent`` absent; pass
    ``backend=None`` to skip verification entirely (it then must not be
    needed). VerifyParseError and gateway errors propagate for the
    caller to quarantine.
    """
    text = record.thinking_response or ""
    check = check_template(text)
    verdict = length_filter(check, min_words=min_words, stage=stage)
    if verdict.decision is not Decision.KEEP:
        return record, verdict
    flagged, _ = detect_ngram_repetition(text, policy)
    if flagged:
        return record, FilterVerdict.regenerate(stage)
    if record.answer is None:
        return record, FilterVerdict.keep(stage)
    if backend is None:
        raise ValueError("verification needed but no judge backend provided")
    is_consistent, analysis = verify_consistency(record, backend)
    record = record.with_fields(is_consistent=is_consistent, consistency_analysis=analysis)
    if not is_consistent:
        return record, FilterVerdict.drop(Reason.INCONSISTENT, stage)
    return record, FilterVerdict.keep(stage)
