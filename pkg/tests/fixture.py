"""Deterministic 50-record pipeline fixture with fully scripted backends.

The builder simulates each record's planned journey through the DAG and
plants exactly the scripted responses the stages will request, so a
strict scripted backend doubles as a planting-mismatch detector: any
unplanned exchange shows up as a quarantine.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from mmfr.difficulty import grade_exchange, rollout_exchange
from mmfr.filters import trailing_solution_segment, verify_exchange
from mmfr.gateway import ScriptStore
from mmfr.manifest import write_manifest
from mmfr.records import SampleRecord
from mmfr.stages import caption_exchange, clean_exchange, distill_exchange
from tests.conftest import png_bytes

N_RECORDS = 50
DISTILL_SEED = 100
ROLLOUT_SEED = 200
SPLIT_SEED = 7
RL_COUNT = 10
K = 4

CLEAN_CORRECTED = lambda i: i % 10 == 0
CLEAN_NON_ANSWER = {1}
CLEAN_GARBAGE = {11}
CLEAN_EMPTY_QUESTION = {21}
CAPTION_BAD_HEADING = {12}
DISTILL_TOO_SHORT = {22}
DISTILL_NO_CLOSE = {32}
DISTILL_TWO_ANSWERS = {42}
DISTILL_NGRAM_ONCE = {2}    # flagged at base seed, fixed on the first retry
DISTILL_NGRAM_ALWAYS = {8}  # flagged at every seed; dropped after retries
NO_ANSWER = lambda i: i % 11 == 4
JUDGED_DIFFERENT = lambda i: i % 7 == 3

CATEGORIES = [
    "Geometric Diagram",
    "Mathematical Plot / Chart",
    "Table / Matrix",
    "Urban / Street Scene",
    "Document / Text Image",
]


def source_of(i: int) -> tuple[str, str]:
    if i < 20:
        return "AlgebraQA", f"a{i:04d}"
    if i < 38:
        return "DiagramBench", f"d{i:04d}"
    return "PuzzleSet", f"p{i:04d}"


def question_of(i: int) -> str:
    if i in CLEAN_EMPTY_QUESTION:
        return ""
    if i in CLEAN_NON_ANSWER:
        return f"Draw a diagram of setup {i}."
    if CLEAN_CORRECTED(i):
        return f"Q{i}. Compute quantity {i} from the figure. http://spam.example"
    return f"Compute quantity {i} from the figure."


def cleaned_question_of(i: int) -> str:
    if CLEAN_CORRECTED(i):
        return f"Compute quantity {i} from the figure."
    return question_of(i)


def answer_of(i: int) -> str | None:
    return None if NO_ANSWER(i) else str(i * 3)


def repeated_phrase(i: int) -> str:
    words = " ".join(f"loop{i}w{j}" for j in range(50))
    return " ".join([words, words, words])


def good_think_text(i: int, words: int = 150) -> str:
    body = " ".join(f"r{i}w{j}" for j in range(words))
    return (
        f"<think> {body} </think>\n"
        f"The computed value is {i * 3}.\n"
        f"Therefore, the final answer is <answer>{i * 3}</answer>."
    )


def distill_reply(i: int, attempt: int) -> str:
    if i in DISTILL_TOO_SHORT:
        body = " ".join(f"s{i}w{j}" for j in range(99))
        return f"<think> {body} </think>\n<answer>{i * 3}</answer>"
    if i in DISTILL_NO_CLOSE:
        return "<think> " + " ".join(f"x{j}" for j in range(500))
    if i in DISTILL_TWO_ANSWERS:
        return good_think_text(i) + f"\n<answer>{i * 3}</answer>"
    if i in DISTILL_NGRAM_ALWAYS:
        return f"<think> {repeated_phrase(i)} </think>\n<answer>{i * 3}</answer>"
    if i in DISTILL_NGRAM_ONCE and attempt == 0:
        return f"<think> {repeated_phrase(i)} </think>\n<answer>{i * 3}</answer>"
    return good_think_text(i)


@dataclass
class FixturePlan:
    """Which records end where, derived from the same rules the builder uses."""

    clean_dropped: set[int] = field(default_factory=set)
    caption_quarantined: set[int] = field(default_factory=set)
    filter_dropped: dict[int, str] = field(default_factory=dict)
    survivors: list[int] = field(default_factory=list)
    scored: list[int] = field(default_factory=list)

    @classmethod
    def derive(cls) -> "FixturePlan":
        plan = cls()
        for i in range(N_RECORDS):
            if i in CLEAN_NON_ANSWER or i in CLEAN_GARBAGE or i in CLEAN_EMPTY_QUESTION:
                plan.clean_dropped.add(i)
                continue
            if i in CAPTION_BAD_HEADING:
                plan.caption_quarantined.add(i)
                continue
            if i in DISTILL_TOO_SHORT:
                plan.filter_dropped[i] = "TooShort"
                continue
            if i in DISTILL_NO_CLOSE or i in DISTILL_TWO_ANSWERS:
                plan.filter_dropped[i] = "TemplateError"
                continue
            if i in DISTILL_NGRAM_ALWAYS:
                plan.filter_dropped[i] = "NgramRepetition"
                continue
            if answer_of(i) is not None and JUDGED_DIFFERENT(i):
                plan.filter_dropped[i] = "Inconsistent"
                continue
            plan.survivors.append(i)
            if answer_of(i) is not None:
                plan.scored.append(i)
        return plan

    def pass_rate_of(self, i: int) -> float:
        return (i % 5) / 4


@dataclass
class Fixture:
    root: Path
    config_path: Path
    input_manifest: Path
    images_root: Path
    workspace: Path
    plan: FixturePlan

    def record_key(self, i: int) -> tuple[str, str]:
        return source_of(i)


def build_fixture(root: Path) -> Fixture:
    root.mkdir(parents=True, exist_ok=True)
    images_root = root / "images"
    workspace = root / "workspace"
    stores = {
        name: ScriptStore(root / "scripts" / name)
        for name in ("teacher", "captioner", "judge", "probe")
    }

    records: list[SampleRecord] = []
    images: dict[int, bytes] = {}
    for i in range(N_RECORDS):
        source, rec_id = source_of(i)
        rel = f"{source}/{rec_id}.png"
        img = png_bytes(4 + i % 5, 4 + i % 3, color=(i * 5 % 255, 100, 200))
        path = images_root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(img)
        images[i] = img
        records.append(
            SampleRecord(
                source=source,
                id=rec_id,
                original_question=question_of(i),
                original_answer="" if answer_of(i) is None else f"solution text {i}",
                image=rel,
                question=question_of(i),
                answer=answer_of(i),
            )
        )
    input_manifest = root / "input.jsonl"
    write_manifest(records, input_manifest)

    plan = FixturePlan.derive()
    for i, record in enumerate(records):
        _plant_record(i, record, images[i], stores, plan)

    config = {
        "stages": ["clean", "caption", "distill", "filter", "difficulty", "select", "split", "stats"],
        "workspace": str(workspace),
        "input_manifest": str(input_manifest),
        "images_root": str(images_root),
        "backends": {
            name: {"kind": "scripted", "script_path": str(root / "scripts" / name), "model_name": name}
            for name in stores
        },
        "policies": {
            "k": K,
            "rl_count": RL_COUNT,
            "seeds": {"distill": DISTILL_SEED, "rollout": ROLLOUT_SEED, "split": SPLIT_SEED},
        },
    }
    config_path = root / "pipeline.json"
    config_path.write_text(json.dumps(config, indent=2))
    return Fixture(root, config_path, input_manifest, images_root, workspace, plan)


def _plant_record(
    i: int,
    record: SampleRecord,
    image: bytes,
    stores: dict[str, ScriptStore],
    plan: FixturePlan,
) -> None:
    # clean (skipped for empty questions: dropped locally without a call)
    if i in CLEAN_EMPTY_QUESTION:
        return
    if i in CLEAN_NON_ANSWER:
        reply = '{"error_type": ["non-answer question"], "corrected_text": ""}'
    elif i in CLEAN_GARBAGE:
        reply = "ERROR: cannot process this request"
    elif CLEAN_CORRECTED(i):
        reply = json.dumps(
            {
                "error_type": ["irrelevant content"],
                "corrected_text": cleaned_question_of(i),
            }
        )
    else:
        reply = "No Problem"
    stores["teacher"].plant(clean_exchange(record), reply)
    if i in plan.clean_dropped:
        return

    cleaned = record.with_fields(question=cleaned_question_of(i))

    # caption
    if i in CAPTION_BAD_HEADING:
        caption_text = "A plain description without the mandated heading."
    else:
        caption_text = (
            f"### Image 1: {CATEGORIES[i % len(CATEGORIES)]}\n"
            f"Scene Summary. Synthetic figure {i}."
        )
    stores["captioner"].plant(caption_exchange(cleaned, image), caption_text)
    if i in plan.caption_quarantined:
        return
    captured = cleaned.with_fields(caption=caption_text)

    # distill, incl. regeneration attempts where the plan needs them
    attempts = 1
    if i in DISTILL_NGRAM_ONCE:
        attempts = 2
    if i in DISTILL_NGRAM_ALWAYS:
        attempts = 3
    final_reply = None
    for attempt in range(attempts):
        seed = DISTILL_SEED + attempt
        final_reply = distill_reply(i, attempt)
        stores["teacher"].plant(distill_exchange(captured, seed, image), final_reply)
    assert final_reply is not None
    distilled = captured.with_fields(thinking_response=final_reply)

    # verification (only for records that reach it with an answer)
    if i in plan.filter_dropped and plan.filter_dropped[i] != "Inconsistent":
        return
    if record.answer is not None:
        judgment = "Different" if JUDGED_DIFFERENT(i) else "Equivalent"
        generated = trailing_solution_segment(distilled.thinking_response)
        stores["judge"].plant(
            verify_exchange(distilled, generated),
            f"Analysis: checked record {i}\nJudgment: {judgment}",
        )
    if i in plan.filter_dropped:
        return

    # difficulty rollouts; first (i % 5) rollouts are correct
    if record.answer is None:
        return
    verified = distilled.with_fields(
        is_consistent=True, consistency_analysis=f"checked record {i}"
    )
    correct_count = i % 5
    for j in range(K):
        seed = ROLLOUT_SEED + j
        correct = j < correct_count
        rollout_answer = f"ok{i}" if correct else f"bad{i}"
        reply = (
            f"<think> probe reasoning {i}-{j} </think>\n"
            f"Therefore, the final answer is <answer>{rollout_answer}</answer>."
        )
        stores["probe"].plant(rollout_exchange(verified, seed, image), reply)
    stores["judge"].plant(
        grade_exchange(verified, f"ok{i}"), f"Analysis: match {i}\nJudgment: Equivalent"
    )
    stores["judge"].plant(
        grade_exchange(verified, f"bad{i}"), f"Analysis: mismatch {i}\nJudgment: Different"
    )
