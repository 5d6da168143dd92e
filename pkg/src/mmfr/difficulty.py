"""Pass-rate difficulty scoring and training-subset selection.

A probe model answers each question k times (k=4 by default) with
consecutive seeds; every rollout's extracted answer is graded against
the ground truth by the consistency judge, and the fraction judged
correct becomes the record's quantized pass rate. Low pass rates mark
genuinely hard problems: the all-fail subset keeps pass rate = 0 and
the not-all-pass subset keeps pass rate < 1.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from mmfr import prompts
from mmfr.errors import MmfrError, TagMissingError
from mmfr.filters import parse_verify_reply
from mmfr.gateway import Backend, ChatExchange, DecodeParams
from mmfr.records import SampleRecord
from mmfr.stages import DISTILL_DECODE, extract_answer_tag

DEFAULT_K = 4
DEFAULT_RL_COUNT = 40000

ROLLOUT_TEMPERATURE = 1.0
VERIFY_DECODE = DecodeParams(temperature=0.0, max_tokens=1024)


@dataclass(frozen=True)
class RolloutVerdict:
    seed: int
    answer_text: str | None
    judged_correct: bool


@dataclass(frozen=True)
class PassRateScore:
    k: int
    correct: int
    pass_rate: float
    rollout_verdicts: tuple[RolloutVerdict, ...]

    def __post_init__(self) -> None:
        if not 0 <= self.correct <= self.k:
            raise ValueError("correct must be within [0, k]")
        if self.pass_rate != self.correct / self.k:
            raise ValueError("pass_rate must equal correct / k")
        if sum(v.judged_correct for v in self.rollout_verdicts) != self.correct:
            raise ValueError("correct must match the rollout verdicts")


def rollout_exchange(
    record: SampleRecord,
    seed: int,
    image: bytes | None,
    temperature: float = ROLLOUT_TEMPERATURE,
) -> ChatExchange:
    # The probe gets the same answer-tag-mandating prompt as distillation
    # so its final answer is mechanically extractable.
    return ChatExchange(
        user_text=prompts.build_distill_prompt(record.question),
        image=image,
        decode=DecodeParams(
            temperature=temperature, max_tokens=DISTILL_DECODE.max_tokens, seed=seed
        ),
    )


def grade_exchange(record: SampleRecord, rollout_answer: str) -> ChatExchange:
    assert record.answer is not None
    return ChatExchange(
        user_text=prompts.build_verify_prompt(
            record.question, record.answer, rollout_answer
        ),
        decode=VERIFY_DECODE,
    )


def score_pass_rate(
    record: SampleRecord,
    probe_backend: Backend,
    judge_backend: Backend | None = None,
    k: int = DEFAULT_K,
    base_seed: int = 0,
    image: bytes | None = None,
    temperature: float = ROLLOUT_TEMPERATURE,
) -> tuple[SampleRecord, PassRateScore]:
    """Run k seeded rollouts, grade each, and store the quantized score.

    Rollouts that produce no extractable answer tag count as incorrect.
    Gateway or judge-parse failures propagate so the caller can
    quarantine the record without a partial score.
    """
    if record.answer is None:
        raise MmfrError("difficulty scoring requires a ground-truth answer")
    judge = judge_backend or probe_backend
    verdicts: list[RolloutVerdict] = []
    for i in range(k):
        seed = base_seed + i
        reply = probe_backend.complete(rollout_exchange(record, seed, image, temperature))
        try:
            answer_text: str | None = extract_answer_tag(reply.response_text)
        except TagMissingError:
            answer_text = None
        if answer_text:
            graded = judge.complete(grade_exchange(record, answer_text))
            correct, _ = parse_verify_reply(graded.response_text)
        else:
            correct = False
        verdicts.append(RolloutVerdict(seed=seed, answer_text=answer_text, judged_correct=correct))
    n_correct = sum(v.judged_correct for v in verdicts)
    score = PassRateScore(
        k=k, correct=n_correct, pass_rate=n_correct / k, rollout_verdicts=tuple(verdicts)
    )
    return record.with_fields(pass_rate=score.pass_rate), score


class SubsetRule(str, Enum):
    ALL_FAIL = "all-fail"
    NOT_ALL_PASS = "not-all-pass"


def select_subset(records: Iterable[SampleRecord], rule: SubsetRule) -> list[SampleRecord]:
    """Keep the hard records: pass rate exactly 0, or anything below 1."""
    out: list[SampleRecord] = []
    for rec in records:
        if rec.pass_rate is None:
            raise MmfrError(
                f"record ({rec.source}, {rec.id}) has no pass_rate; run scoring first"
            )
        if rule is SubsetRule.ALL_FAIL:
            if rec.pass_rate == 0.0:
                out.append(rec)
        else:
            if rec.pass_rate < 1.0:
                out.append(rec)
    return out


def split_rl_sft(
    records: Sequence[SampleRecord], rl_count: int = DEFAULT_RL_COUNT, seed: int = 0
) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Seeded uniform sample without replacement into (rl, sft).

    Deterministic for a fixed seed; the two sides are disjoint and
    partition the input, each preserving input order.
    """
    if len(records) < rl_count:
        raise MmfrError(
            f"cannot sample {rl_count} RL records from {len(records)} available"
        )
    rng = random.Random(seed)
    chosen = set(rng.sample(range(len(records)), rl_count))
    rl = [rec for i, rec in enumerate(records) if i in chosen]
    sft = [rec for i, rec in enumerate(records) if i not in chosen]
    return rl, sft
