from __future__ import annotations

import itertools

import pytest

from mmfr.difficulty import (
    PassRateScore,
    RolloutVerdict,
    SubsetRule,
    grade_exchange,
    rollout_exchange,
    score_pass_rate,
    select_subset,
    split_rl_sft,
)
from mmfr.errors import MmfrError
from mmfr.gateway import ScriptedBackend
from tests.conftest import make_record, think_answer
from tests.difficulty_helpers import plant_rollouts


def test_score_pass_rate_counts(script_store):
    backend = ScriptedBackend(script_store)
    for pattern, expected in [
        ((False, False, False, False), 0.0),
        ((True, False, True, False), 0.5),
        ((True, True, True, True), 1.0),
    ]:
        rec = make_record(id=f"case-{expected}")
        plant_rollouts(script_store, rec, pattern)
        scored, score = score_pass_rate(rec, backend, k=4, base_seed=0)
        assert scored.pass_rate == expected
        assert score.correct == sum(pattern)
        assert [v.judged_correct for v in score.rollout_verdicts] == list(pattern)
        assert [v.seed for v in score.rollout_verdicts] == [0, 1, 2, 3]


def test_score_pass_rate_all_16_patterns(script_store):
    backend = ScriptedBackend(script_store)
    for idx, pattern in enumerate(itertools.product([False, True], repeat=4)):
        rec = make_record(id=f"p{idx:02d}")
        plant_rollouts(script_store, rec, pattern)
        scored, score = score_pass_rate(rec, backend, k=4, base_seed=0)
        assert score.correct == sum(pattern)
        assert scored.pass_rate == sum(pattern) / 4


def test_score_pass_rate_missing_tag_counts_incorrect(script_store):
    backend = ScriptedBackend(script_store)
    rec = make_record(id="no-tag")
    for i in range(4):
        store_reply = "I rambled and never gave a tag" if i < 3 else think_answer(120, "12")
        script_store.plant(rollout_exchange(rec, i, None), store_reply)
    script_store.plant(grade_exchange(rec, "12"), "Analysis: ok\nJudgment: Equivalent")
    scored, score = score_pass_rate(rec, backend, k=4, base_seed=0)
    assert score.correct == 1
    assert scored.pass_rate == 0.25
    assert [v.answer_text for v in score.rollout_verdicts[:3]] == [None, None, None]


def test_score_pass_rate_requires_answer(scripted_backend):
    with pytest.raises(MmfrError):
        score_pass_rate(make_record(answer=None), scripted_backend)


def test_pass_rate_score_invariants():
    verdicts = tuple(RolloutVerdict(i, "x", i < 2) for i in range(4))
    with pytest.raises(ValueError):
        PassRateScore(k=4, correct=3, pass_rate=0.75, rollout_verdicts=verdicts)
    with pytest.raises(ValueError):
        PassRateScore(k=4, correct=2, pass_rate=0.3, rollout_verdicts=verdicts)
    ok = PassRateScore(k=4, correct=2, pass_rate=0.5, rollout_verdicts=verdicts)
    assert ok.pass_rate in (0.0, 0.25, 0.5, 0.75, 1.0)


def scored_records():
    return [
        make_record(id=f"r{i}", pass_rate=rate)
        for i, rate in enumerate([0.0, 0.0, 0.25, 0.5, 0.75, 1.0, 1.0])
    ]


def test_select_subset_rules():
    records = scored_records()
    all_fail = select_subset(records, SubsetRule.ALL_FAIL)
    not_all_pass = select_subset(records, SubsetRule.NOT_ALL_PASS)
    assert [r.pass_rate for r in all_fail] == [0.0, 0.0]
    assert [r.pass_rate for r in not_all_pass] == [0.0, 0.0, 0.25, 0.5, 0.75]
    assert set(r.id for r in all_fail) <= set(r.id for r in not_all_pass)
    # 0.25 sits in not-all-pass only; 1.0 in neither
    assert any(r.pass_rate == 0.25 for r in not_all_pass)
    assert all(r.pass_rate != 0.25 for r in all_fail)
    assert all(r.pass_rate != 1.0 for r in not_all_pass)


def test_select_subset_requires_scores():
    with pytest.raises(MmfrError, match="pass_rate"):
        select_subset([make_record(pass_rate=None)], SubsetRule.ALL_FAIL)


def test_split_partition_and_determinism():
    records = [make_record(id=f"{i:03d}") for i in range(100)]
    rl, sft = split_rl_sft(records, rl_count=40, seed=7)
    assert len(rl) == 40 and len(sft) == 60
    rl_ids = {r.id for r in rl}
    sft_ids = {r.id for r in sft}
    assert rl_ids.isdisjoint(sft_ids)
    assert rl_ids | sft_ids == {r.id for r in records}
    rl2, sft2 = split_rl_sft(records, rl_count=40, seed=7)
    assert rl == rl2 and sft == sft2


def test_split_boundary_all_rl():
    records = [make_record(id=f"{i}") for i in range(10)]
    rl, sft = split_rl_sft(records, rl_count=10, seed=0)
    assert len(rl) == 10 and sft == []


def test_split_insufficient_records():
    with pytest.raises(MmfrError):
        split_rl_sft([make_record()], rl_count=2, seed=0)


def test_split_seeds_differ_statistically():
    records = [make_record(id=f"{i:03d}") for i in range(200)]
    picks = []
    for seed in range(5):
        rl, _ = split_rl_sft(records, rl_count=100, seed=seed)
        picks.append(frozenset(r.id for r in rl))
    # at least one pair of seeds must disagree (overwhelmingly all do)
    assert len(set(picks)) > 1
