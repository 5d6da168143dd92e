from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest

import mmfr.pipeline as pipeline
from mmfr.errors import ConfigError, StageError
from mmfr.manifest import load_manifest, read_jsonl
from mmfr.pipeline import PipelineConfig, resume, run, stage_counters
from mmfr.records import canonical_key
from tests.fixture import (
    DISTILL_NGRAM_ALWAYS,
    DISTILL_NGRAM_ONCE,
    RL_COUNT,
    build_fixture,
    source_of,
)


@pytest.fixture(autouse=True)
def _no_workspace_env(monkeypatch):
    monkeypatch.delenv("MMFR_WORKSPACE", raising=False)


@pytest.fixture
def fixture(tmp_path):
    return build_fixture(tmp_path / "fx")


def digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def final_digests(workspace: Path) -> dict[str, str]:
    return {
        name: digest(path)
        for name, path in {
            "difficulty": workspace / "checkpoints" / "difficulty.jsonl",
            "rl": workspace / "outputs" / "rl.jsonl",
            "sft": workspace / "outputs" / "sft.jsonl",
            "all_fail": workspace / "outputs" / "all_fail.jsonl",
            "not_all_pass": workspace / "outputs" / "not_all_pass.jsonl",
        }.items()
    }


def test_full_run_matches_plan(fixture):
    config = PipelineConfig.from_file(fixture.config_path)
    summary = run(config)
    plan = fixture.plan

    clean = summary.stages["clean"]
    assert clean.input == 50
    assert clean.dropped == len(plan.clean_dropped)

    caption = summary.stages["caption"]
    assert caption.quarantined == len(plan.caption_quarantined)

    filt = summary.stages["filter"]
    assert filt.dropped == len(plan.filter_dropped)

    final = load_manifest(fixture.workspace / "checkpoints" / "difficulty.jsonl")
    assert len(final) == len(plan.survivors)
    expected_keys = sorted(source_of(i) for i in plan.survivors)
    assert [canonical_key(r) for r in final] == expected_keys

    by_key = {canonical_key(r): r for r in final}
    for i in plan.survivors:
        rec = by_key[source_of(i)]
        assert rec.original_question  # raw fields preserved
        assert rec.caption is not None and rec.caption.startswith("### Image 1:")
        assert rec.thinking_response is not None
        if i in plan.scored:
            assert rec.pass_rate == plan.pass_rate_of(i)
            assert rec.is_consistent is True
        else:
            assert rec.pass_rate is None
            assert rec.is_consistent is None

    # regenerated record survived with the retry seed's response
    regen = by_key[source_of(next(iter(DISTILL_NGRAM_ONCE)))]
    assert "loop" not in (regen.thinking_response or "")

    dropped_filter = list(read_jsonl(fixture.workspace / "dropped" / "filter.jsonl"))
    reasons = {
        (row["source"], row["id"]): row["verdict"]["reason"] for row in dropped_filter
    }
    for i, reason in plan.filter_dropped.items():
        assert reasons[source_of(i)] == reason
    always = source_of(next(iter(DISTILL_NGRAM_ALWAYS)))
    assert reasons[always] == "NgramRepetition"

    select_counts = summary.outputs["select"]
    assert select_counts["all_fail"] == sum(
        1 for i in plan.scored if plan.pass_rate_of(i) == 0.0
    )
    assert select_counts["not_all_pass"] == sum(
        1 for i in plan.scored if plan.pass_rate_of(i) < 1.0
    )
    split_counts = summary.outputs["split"]
    assert split_counts["rl"] == RL_COUNT
    assert split_counts["rl"] + split_counts["sft"] == len(plan.survivors)

    for name in ("tokens.csv", "retention.csv", "passrate.csv", "categories.csv"):
        assert (fixture.workspace / "reports" / name).exists()


def test_conservation_every_stage(fixture):
    config = PipelineConfig.from_file(fixture.config_path)
    summary = run(config)
    counters = stage_counters(fixture.workspace)
    for stage, stats in summary.stages.items():
        assert stats.input == stats.kept + stats.dropped + stats.quarantined, stage
        per_source = counters.get(stage, {})
        counted = sum(
            c["kept"] + c["quarantined"] + sum(c["dropped"].values())
            for c in per_source.values()
        )
        assert counted == stats.input, stage
    # manifest line counts reconcile with counters
    final = load_manifest(fixture.workspace / "checkpoints" / "difficulty.jsonl")
    kept_by_counters = sum(
        c["kept"] for c in counters["difficulty"].values()
    )
    assert len(final) == kept_by_counters


def test_runs_are_deterministic(fixture):
    config = PipelineConfig.from_file(fixture.config_path)
    run(config)
    first = final_digests(fixture.workspace)

    config2 = PipelineConfig.from_file(fixture.config_path)
    config2.workspace = fixture.root / "workspace2"
    run(config2)
    assert final_digests(config2.workspace) == first


def test_interrupted_run_resumes_to_identical_output(fixture, monkeypatch):
    config = PipelineConfig.from_file(fixture.config_path)
    run(config)
    reference = final_digests(fixture.workspace)

    config2 = PipelineConfig.from_file(fixture.config_path)
    config2.workspace = fixture.root / "workspace_interrupted"

    real = pipeline.distill_sample
    calls = {"n": 0}

    def flaky(record, backend, seed, image):
        calls["n"] += 1
        if calls["n"] > 17:
            raise RuntimeError("simulated crash")
        return real(record, backend, seed, image)

    monkeypatch.setattr(pipeline, "distill_sample", flaky)
    with pytest.raises(StageError, match="distill"):
        run(config2)
    partial = config2.workspace / "checkpoints" / "distill.partial.jsonl"
    assert partial.exists()
    done_before = len(list(read_jsonl(partial)))
    assert 0 < done_before < 46  # crashed mid-stage with progress flushed

    monkeypatch.setattr(pipeline, "distill_sample", real)
    summary = resume(config2)  # auto-detects distill as first incomplete stage
    assert "clean" not in summary.stages
    assert "distill" in summary.stages
    assert final_digests(config2.workspace) == reference
    assert not partial.exists()


def test_resume_finished_run_is_noop(fixture):
    config = PipelineConfig.from_file(fixture.config_path)
    run(config)
    summary = resume(config)
    assert summary.stages == {}


def test_resume_from_explicit_stage_runs_suffix_only(fixture):
    config = PipelineConfig.from_file(fixture.config_path)
    run(config)
    before = final_digests(fixture.workspace)
    summary = resume(config, "difficulty")
    assert set(summary.stages) == {"difficulty", "select", "split", "stats"}
    assert final_digests(fixture.workspace) == before  # idempotent re-run


def test_resume_missing_checkpoint_errors(fixture):
    config = PipelineConfig.from_file(fixture.config_path)
    with pytest.raises(StageError, match="filter"):
        resume(config, "difficulty")


def test_config_rejects_bad_stage_order(fixture):
    config = PipelineConfig.from_file(fixture.config_path)
    config.stages = ["clean", "distill", "select", "filter", "difficulty"]
    with pytest.raises(ConfigError, match="difficulty must run before select"):
        config.validate()


def test_config_rejects_unknown_and_duplicate_stages(fixture):
    config = PipelineConfig.from_file(fixture.config_path)
    config.stages = ["clean", "warp"]
    with pytest.raises(ConfigError, match="unknown stage"):
        config.validate()
    config.stages = ["clean", "clean"]
    with pytest.raises(ConfigError, match="duplicate"):
        config.validate()


def test_workspace_lock(fixture):
    config = PipelineConfig.from_file(fixture.config_path)
    lock = fixture.workspace / ".lock"
    lock.parent.mkdir(parents=True, exist_ok=True)
    lock.write_text("12345")
    with pytest.raises(StageError, match="locked"):
        run(config)
    lock.unlink()
    run(config)
    assert not lock.exists()


def test_env_overrides_workspace(fixture, monkeypatch):
    override = fixture.root / "env_workspace"
    monkeypatch.setenv("MMFR_WORKSPACE", str(override))
    config = PipelineConfig.from_file(fixture.config_path)
    assert config.workspace == override
