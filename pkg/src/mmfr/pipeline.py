"""Stage-DAG orchestration with checkpointing and resume.

Mainline stages (ingest, clean, caption, distill, filter, difficulty)
each read the previous mainline checkpoint and write their own
atomically; side stages (select, split, stats) read the current
mainline without advancing it. Gateway-bound stages additionally keep
an append-only per-record partial log so an aborted run resumes
without repeating finished work. Every record entering a stage leaves
it as exactly one of kept, dropped, or quarantined, which makes the
retention accounting exact.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from mmfr import analytics
from mmfr.difficulty import SubsetRule, score_pass_rate, select_subset, split_rl_sft
from mmfr.errors import ConfigError, GatewayError, ParseError, StageError
from mmfr.filters import NgramPolicy, run_filter_chain
from mmfr.gateway import Backend, BackendConfig, build_backend
from mmfr.ingest import SourceAdapterConfig, ingest_rows, read_source_rows
from mmfr.manifest import (
    Quarantine,
    load_manifest,
    read_jsonl,
    write_jsonl,
    write_manifest,
)
from mmfr.records import (
    Decision,
    FilterVerdict,
    Reason,
    SampleRecord,
    canonical_key,
)
from mmfr.stages import (
    MAX_REGEN_ATTEMPTS,
    caption_sample,
    clean_sample,
    distill_sample,
)

ENV_WORKSPACE = "MMFR_WORKSPACE"

ALL_STAGES = ("ingest", "clean", "caption", "distill", "filter", "difficulty", "select", "split", "stats")
MAINLINE_STAGES = ("ingest", "clean", "caption", "distill", "filter", "difficulty")
GATEWAY_STAGES = ("clean", "caption", "distill", "filter", "difficulty")

# (earlier, later): when both appear, earlier must come first.
ORDER_CONSTRAINTS = (
    ("ingest", "clean"),
    ("clean", "distill"),
    ("clean", "caption"),
    ("filter", "difficulty"),
    ("difficulty", "select"),
    ("difficulty", "split"),
)

DEFAULT_STAGE_BACKENDS = {
    "clean": "teacher",
    "caption": "captioner",
    "distill": "teacher",
    "judge": "judge",
    "probe": "probe",
}


@dataclass(frozen=True)
class PipelinePolicies:
    ngram: NgramPolicy = field(default_factory=NgramPolicy)
    min_words: int = 100
    k: int = 4
    rl_count: int = 40000
    distill_seed: int = 0
    rollout_seed: int = 0
    split_seed: int = 0
    rollout_temperature: float = 1.0
    max_regen_attempts: int = MAX_REGEN_ATTEMPTS

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PipelinePolicies":
        seeds = d.get("seeds", {})
        return cls(
            ngram=NgramPolicy(
                n=int(d.get("ngram_n", 50)),
                min_repeats=int(d.get("ngram_min_repeats", 3)),
            ),
            min_words=int(d.get("min_words", 100)),
            k=int(d.get("k", 4)),
            rl_count=int(d.get("rl_count", 40000)),
            distill_seed=int(seeds.get("distill", 0)),
            rollout_seed=int(seeds.get("rollout", 0)),
            split_seed=int(seeds.get("split", 0)),
            rollout_temperature=float(d.get("rollout_temperature", 1.0)),
            max_regen_attempts=int(d.get("max_regen_attempts", MAX_REGEN_ATTEMPTS)),
        )


@dataclass
class PipelineConfig:
    stages: list[str]
    workspace: Path
    backends: dict[str, BackendConfig] = field(default_factory=dict)
    stage_backends: dict[str, str] = field(default_factory=dict)
    policies: PipelinePolicies = field(default_factory=PipelinePolicies)
    input_manifest: Path | None = None
    images_root: Path | None = None
    ingest: dict[str, Any] | None = None
    tokenizer: str = "whitespace"

    def validate(self) -> None:
        seen: set[str] = set()
        for s in self.stages:
            if s not in ALL_STAGES:
                raise ConfigError(f"unknown stage {s!r}")
            if s in seen:
                raise ConfigError(f"duplicate stage {s!r}")
            seen.add(s)
        if not self.stages:
            raise ConfigError("stages must be non-empty")
        for earlier, later in ORDER_CONSTRAINTS:
            if earlier in seen and later in seen:
                if self.stages.index(earlier) > self.stages.index(later):
                    raise ConfigError(
                        f"stage order violates dependency: {earlier} must run before {later}"
                    )
        if self.stages[0] == "ingest":
            if not self.ingest:
                raise ConfigError("ingest stage requires an ingest config block")
        elif self.input_manifest is None:
            raise ConfigError("input_manifest required when the first stage is not ingest")

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        with open(path, "r", encoding="utf-8") as f:
            d = json.load(f)
        base = path.parent

        def respath(value: str | None) -> Path | None:
            if value is None:
                return None
            p = Path(value)
            return p if p.is_absolute() else base / p

        backends = {
            name: BackendConfig.from_dict(_resolve_backend_paths(cfg, base))
            for name, cfg in d.get("backends", {}).items()
        }
        workspace = os.environ.get(ENV_WORKSPACE) or d.get("workspace")
        if not workspace:
            raise ConfigError("workspace missing (config key or MMFR_WORKSPACE)")
        cfg = cls(
            stages=list(d.get("stages", [])),
            workspace=Path(workspace) if Path(workspace).is_absolute() else base / workspace,
            backends=backends,
            stage_backends=dict(d.get("stage_backends", {})),
            policies=PipelinePolicies.from_dict(d.get("policies", {})),
            input_manifest=respath(d.get("input_manifest")),
            images_root=respath(d.get("images_root")),
            ingest=d.get("ingest"),
            tokenizer=d.get("tokenizer", "whitespace"),
        )
        if cfg.ingest:
            for key in ("adapter", "input_dir"):
                if key in cfg.ingest:
                    cfg.ingest[key] = str(respath(cfg.ingest[key]))
        cfg.validate()
        return cfg


def _resolve_backend_paths(cfg: dict[str, Any], base: Path) -> dict[str, Any]:
    out = dict(cfg)
    if out.get("script_path") and not Path(out["script_path"]).is_absolute():
        out["script_path"] = str(base / out["script_path"])
    return out


# ---------------------------------------------------------------------------
# Per-record outcomes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Outcome:
    status: str  # keep | drop | quarantine
    record: SampleRecord | None = None
    verdict: FilterVerdict | None = None
    error: str | None = None

    def to_row(self, key: tuple[str, str]) -> dict[str, Any]:
        row: dict[str, Any] = {"key": list(key), "status": self.status}
        if self.record is not None:
            row["record"] = self.record.to_wire()
        if self.verdict is not None:
            row["verdict"] = self.verdict.to_dict()
        if self.error is not None:
            row["error"] = self.error
        return row

    @classmethod
    def from_row(cls, row: dict[str, Any]) -> "Outcome":
        return cls(
            status=row["status"],
            record=SampleRecord.from_wire(row["record"]) if "record" in row else None,
            verdict=FilterVerdict.from_dict(row["verdict"]) if "verdict" in row else None,
            error=row.get("error"),
        )


def _keep(record: SampleRecord, stage: str) -> Outcome:
    return Outcome("keep", record=record, verdict=FilterVerdict.keep(stage))


def _drop(record: SampleRecord, verdict: FilterVerdict) -> Outcome:
    return Outcome("drop", record=record, verdict=verdict)


def _quar(record: SampleRecord, error: str) -> Outcome:
    return Outcome("quarantine", record=record, error=error)


# ---------------------------------------------------------------------------
# Run context
# ---------------------------------------------------------------------------


class RunContext:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.workspace = config.workspace
        self.checkpoints = self.workspace / "checkpoints"
        self.dropped_dir = self.workspace / "dropped"
        self.quarantine_dir = self.workspace / "quarantine"
        self.outputs = self.workspace / "outputs"
        self.reports = self.workspace / "reports"
        for d in (self.checkpoints, self.dropped_dir, self.quarantine_dir, self.outputs, self.reports):
            d.mkdir(parents=True, exist_ok=True)
        self._backends: dict[str, Backend] = {}
        self.images_root = config.images_root or (self.workspace / "images")

    def backend_for(self, role: str, required: bool = True) -> Backend | None:
        name = self.config.stage_backends.get(role) or DEFAULT_STAGE_BACKENDS.get(role, role)
        if name not in self.config.backends:
            if required:
                raise ConfigError(f"no backend named {name!r} configured for role {role!r}")
            return None
        if name not in self._backends:
            self._backends[name] = build_backend(self.config.backends[name])
        return self._backends[name]

    def image_bytes(self, record: SampleRecord) -> bytes | None:
        if not record.image:
            return None
        path = self.images_root / record.image
        try:
            return path.read_bytes()
        except OSError:
            return None

    def checkpoint_path(self, stage: str) -> Path:
        return self.checkpoints / f"{stage}.jsonl"

    def done_path(self, stage: str) -> Path:
        return self.checkpoints / f"{stage}.done.json"

    def partial_path(self, stage: str) -> Path:
        return self.checkpoints / f"{stage}.partial.jsonl"

    def stage_done(self, stage: str) -> bool:
        return self.done_path(stage).exists()


# ---------------------------------------------------------------------------
# Stage processors (one record in, one outcome out)
# ---------------------------------------------------------------------------


def _clean_one(ctx: RunContext, record: SampleRecord) -> Outcome:
    if not record.question:
        return _drop(record, FilterVerdict.drop(Reason.NON_ANSWER_QUESTION, "clean"))
    backend = ctx.backend_for("clean")
    assert backend is not None
    try:
        cleaned, verdict = clean_sample(record, backend)
    except GatewayError as exc:
        return _quar(record, f"gateway: {exc}")
    if verdict.decision is Decision.KEEP:
        return _keep(cleaned, "clean")
    return _drop(record, verdict)


def _caption_one(ctx: RunContext, record: SampleRecord) -> Outcome:
    backend = ctx.backend_for("caption")
    assert backend is not None
    image = ctx.image_bytes(record)
    if image is None:
        return _quar(record, f"image unreadable: {record.image!r}")
    try:
        return _keep(caption_sample(record, backend, image), "caption")
    except (GatewayError, ParseError) as exc:
        return _quar(record, str(exc))


def _distill_one(ctx: RunContext, record: SampleRecord) -> Outcome:
    backend = ctx.backend_for("distill")
    assert backend is not None
    image = ctx.image_bytes(record)
    try:
        return _keep(
            distill_sample(record, backend, ctx.config.policies.distill_seed, image),
            "distill",
        )
    except (GatewayError, ParseError) as exc:
        return _quar(record, str(exc))


def _filter_one(ctx: RunContext, record: SampleRecord) -> Outcome:
    judge = ctx.backend_for("judge", required=record.answer is not None)
    teacher = ctx.backend_for("distill", required=False)
    policies = ctx.config.policies
    current = record
    attempt = 0
    try:
        while True:
            current, verdict = run_filter_chain(
                current, judge, policy=policies.ngram, min_words=policies.min_words
            )
            if verdict.decision is not Decision.REGENERATE:
                break
            if teacher is None or attempt >= policies.max_regen_attempts:
                return _drop(current, FilterVerdict.drop(Reason.NGRAM_REPETITION, "filter"))
            attempt += 1
            current = distill_sample(
                current,
                teacher,
                policies.distill_seed + attempt,
                ctx.image_bytes(current),
            )
    except (GatewayError, ParseError) as exc:
        return _quar(record, str(exc))
    if verdict.decision is Decision.KEEP:
        return _keep(current, "filter")
    return _drop(current, verdict)


def _difficulty_one(ctx: RunContext, record: SampleRecord) -> Outcome:
    if record.answer is None:
        return _keep(record, "difficulty")
    probe = ctx.backend_for("probe")
    judge = ctx.backend_for("judge")
    assert probe is not None
    policies = ctx.config.policies
    try:
        scored, _ = score_pass_rate(
            record,
            probe,
            judge,
            k=policies.k,
            base_seed=policies.rollout_seed,
            image=ctx.image_bytes(record),
            temperature=policies.rollout_temperature,
        )
    except (GatewayError, ParseError) as exc:
        return _quar(record, str(exc))
    return _keep(scored, "difficulty")


RECORD_PROCESSORS: dict[str, Callable[[RunContext, SampleRecord], Outcome]] = {
    "clean": _clean_one,
    "caption": _caption_one,
    "distill": _distill_one,
    "filter": _filter_one,
    "difficulty": _difficulty_one,
}


# ---------------------------------------------------------------------------
# Stage driver
# ---------------------------------------------------------------------------


@dataclass
class StageStats:
    input: int = 0
    kept: int = 0
    dropped: int = 0
    quarantined: int = 0
    wall_time_s: float = 0.0


def _stage_max_in_flight(ctx: RunContext, stage: str) -> int:
    role = {"clean": "clean", "caption": "caption", "distill": "distill",
            "filter": "judge", "difficulty": "probe"}[stage]
    backend = ctx.backend_for(role, required=False)
    return backend.max_in_flight if backend is not None else 4


def _run_record_stage(
    ctx: RunContext,
    stage: str,
    inputs: list[SampleRecord],
    counters: "Counters",
    pre_quarantined: int = 0,
) -> StageStats:
    processor = RECORD_PROCESSORS[stage]
    counters.reset_stage(stage)
    for _ in range(pre_quarantined):
        counters.bump(stage, "_unparsed", "quarantined")
    partial = ctx.partial_path(stage)
    done: dict[tuple[str, str], Outcome] = {}
    input_keys = {canonical_key(r) for r in inputs}
    if partial.exists():
        for row in read_jsonl(partial):
            key = (row["key"][0], row["key"][1])
            if key in input_keys:
                done[key] = Outcome.from_row(row)
    pending = [r for r in inputs if canonical_key(r) not in done]

    write_lock = threading.Lock()
    partial.parent.mkdir(parents=True, exist_ok=True)
    with open(partial, "a", encoding="utf-8") as pf:

        def work(rec: SampleRecord) -> tuple[tuple[str, str], Outcome]:
            out = processor(ctx, rec)
            key = canonical_key(rec)
            line = json.dumps(out.to_row(key), ensure_ascii=False)
            with write_lock:
                pf.write(line + "\n")
                pf.flush()
            return key, out

        if pending:
            cap = _stage_max_in_flight(ctx, stage)
            with ThreadPoolExecutor(max_workers=cap) as pool:
                try:
                    for key, out in pool.map(work, pending):
                        done[key] = out
                except Exception as exc:
                    raise StageError(f"stage {stage!r} aborted: {exc}") from exc

    ordered_keys = sorted(done)
    kept = [done[k].record for k in ordered_keys if done[k].status == "keep"]
    dropped_rows = [
        {**done[k].record.to_wire(), "verdict": done[k].verdict.to_dict()}  # type: ignore[union-attr]
        for k in ordered_keys
        if done[k].status == "drop"
    ]
    quarantine_rows = [
        {"stage": stage, "key": list(k), "reason": done[k].error,
         "record": done[k].record.to_wire() if done[k].record else None}
        for k in ordered_keys
        if done[k].status == "quarantine"
    ]
    write_manifest([r for r in kept if r is not None], ctx.checkpoint_path(stage))
    write_jsonl(dropped_rows, ctx.dropped_dir / f"{stage}.jsonl")
    write_jsonl(quarantine_rows, ctx.quarantine_dir / f"{stage}.jsonl")

    for key in ordered_keys:
        out = done[key]
        source = key[0]
        if out.status == "keep":
            counters.bump(stage, source, "kept")
        elif out.status == "drop":
            assert out.verdict is not None
            counters.bump(stage, source, "dropped", out.verdict.reason.value)
        else:
            counters.bump(stage, source, "quarantined")

    stats = StageStats(
        input=len(inputs) + pre_quarantined,
        kept=sum(1 for k in ordered_keys if done[k].status == "keep"),
        dropped=len(dropped_rows),
        quarantined=len(quarantine_rows) + pre_quarantined,
    )
    partial.unlink(missing_ok=True)
    return stats


class Counters:
    """Per-(stage, source) kept/dropped-by-reason/quarantined tallies."""

    def __init__(self) -> None:
        self.data: dict[str, dict[str, dict[str, Any]]] = {}

    def bump(self, stage: str, source: str, status: str, reason: str | None = None) -> None:
        per_source = self.data.setdefault(stage, {}).setdefault(
            source, {"kept": 0, "quarantined": 0, "dropped": {}}
        )
        if status == "dropped":
            assert reason is not None
            per_source["dropped"][reason] = per_source["dropped"].get(reason, 0) + 1
        else:
            per_source[status] += 1

    def reset_stage(self, stage: str) -> None:
        # Re-executed stages recount from scratch; never double-tally.
        self.data.pop(stage, None)

    def merge_file(self, path: Path) -> None:
        if path.exists():
            with open(path, "r", encoding="utf-8") as f:
                self.data.update(json.load(f))

    def save(self, path: Path) -> None:
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(self.data, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)

    def retention_counters(self, stage: str = "filter") -> dict[str, tuple[int, int, int]]:
        """(original, length-drops, template-drops) per source at `stage`."""
        out: dict[str, tuple[int, int, int]] = {}
        for source, c in self.data.get(stage, {}).items():
            dropped = c.get("dropped", {})
            original = (
                c.get("kept", 0)
                + c.get("quarantined", 0)
                + sum(dropped.values())
            )
            out[source] = (
                original,
                dropped.get(Reason.TOO_SHORT.value, 0),
                dropped.get(Reason.TEMPLATE_ERROR.value, 0),
            )
        return out


# ---------------------------------------------------------------------------
# Side stages
# ---------------------------------------------------------------------------


def _run_select(ctx: RunContext, records: list[SampleRecord]) -> dict[str, int]:
    scored = [r for r in records if r.pass_rate is not None]
    all_fail = select_subset(scored, SubsetRule.ALL_FAIL)
    not_all_pass = select_subset(scored, SubsetRule.NOT_ALL_PASS)
    write_manifest(all_fail, ctx.outputs / "all_fail.jsonl")
    write_manifest(not_all_pass, ctx.outputs / "not_all_pass.jsonl")
    return {"all_fail": len(all_fail), "not_all_pass": len(not_all_pass)}


def _run_split(ctx: RunContext, records: list[SampleRecord]) -> dict[str, int]:
    policies = ctx.config.policies
    rl, sft = split_rl_sft(records, rl_count=policies.rl_count, seed=policies.split_seed)
    write_manifest(rl, ctx.outputs / "rl.jsonl")
    write_manifest(sft, ctx.outputs / "sft.jsonl")
    return {"rl": len(rl), "sft": len(sft)}


def _run_stats(ctx: RunContext, records: list[SampleRecord], counters: Counters) -> dict[str, int]:
    tokenizer = analytics.make_tokenizer(ctx.config.tokenizer)
    analytics.write_tokens_report(
        records, ctx.reports / "tokens.csv", tokenizer, ctx.config.tokenizer
    )
    analytics.write_passrate_report(records, ctx.reports / "passrate.csv")
    analytics.write_categories_report(records, ctx.reports / "categories.csv")
    retention = counters.retention_counters("filter")
    if retention:
        analytics.write_retention_report(retention, ctx.reports / "retention.csv")
    if hasattr(tokenizer, "close"):
        tokenizer.close()
    return {"reports": 4 if retention else 3}


# ---------------------------------------------------------------------------
# Run / resume
# ---------------------------------------------------------------------------


@dataclass
class RunSummary:
    stages: dict[str, StageStats] = field(default_factory=dict)
    outputs: dict[str, dict[str, int]] = field(default_factory=dict)
    wall_time_s: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "stages": {
                name: {
                    "input": s.input,
                    "kept": s.kept,
                    "dropped": s.dropped,
                    "quarantined": s.quarantined,
                    "wall_time_s": round(s.wall_time_s, 3),
                }
                for name, s in self.stages.items()
            },
            "outputs": self.outputs,
            "wall_time_s": round(self.wall_time_s, 3),
        }


class _WorkspaceLock:
    def __init__(self, workspace: Path):
        self.path = workspace / ".lock"

    def __enter__(self) -> "_WorkspaceLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StageError(
                f"workspace {self.path.parent} is locked by another run "
                f"(remove {self.path} if stale)"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.path.unlink(missing_ok=True)


def _mainline_input(
    ctx: RunContext, stage: str, stage_list: list[str]
) -> tuple[list[SampleRecord], int]:
    """Records entering `stage`, plus how many input lines were malformed."""
    idx = stage_list.index(stage)
    for prev in reversed(stage_list[:idx]):
        if prev in MAINLINE_STAGES:
            path = ctx.checkpoint_path(prev)
            if not path.exists():
                raise StageError(f"missing checkpoint for stage {prev!r}")
            return load_manifest(path), 0
    if ctx.config.input_manifest is None:
        raise StageError(f"stage {stage!r} has no input manifest")
    quarantine = Quarantine(stage)  # in-memory; flushed atomically below
    records = load_manifest(ctx.config.input_manifest, quarantine)
    if quarantine.entries:
        write_jsonl(quarantine.entries, ctx.quarantine_dir / f"{stage}.input.jsonl")
    return records, len(quarantine)


def _run_ingest(ctx: RunContext, counters: Counters) -> StageStats:
    assert ctx.config.ingest is not None
    counters.reset_stage("ingest")
    cfg = SourceAdapterConfig.from_file(ctx.config.ingest["adapter"])
    input_dir = Path(ctx.config.ingest["input_dir"])
    rows = list(read_source_rows(input_dir))
    kept: list[SampleRecord] = []
    dropped_rows: list[dict[str, Any]] = []
    quarantine_rows: list[dict[str, Any]] = []
    for outcome in ingest_rows(rows, cfg, input_dir, ctx.images_root):
        if outcome.error is not None:
            quarantine_rows.append({"stage": "ingest", "reason": outcome.error})
            counters.bump("ingest", cfg.source_name, "quarantined")
        elif outcome.verdict is not None:
            assert outcome.record is not None
            dropped_rows.append(
                {**outcome.record.to_wire(), "verdict": outcome.verdict.to_dict()}
            )
            counters.bump("ingest", cfg.source_name, "dropped", outcome.verdict.reason.value)
        else:
            assert outcome.record is not None
            kept.append(outcome.record)
            counters.bump("ingest", cfg.source_name, "kept")
    write_manifest(kept, ctx.checkpoint_path("ingest"))
    write_jsonl(dropped_rows, ctx.dropped_dir / "ingest.jsonl")
    write_jsonl(quarantine_rows, ctx.quarantine_dir / "ingest.jsonl")
    return StageStats(
        input=len(rows),
        kept=len(kept),
        dropped=len(dropped_rows),
        quarantined=len(quarantine_rows),
    )


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _execute(
    config: PipelineConfig, stages_to_run: list[str], summary: RunSummary
) -> RunSummary:
    ctx = RunContext(config)
    counters = Counters()
    counters.merge_file(ctx.workspace / "counters.json")
    started = time.perf_counter()
    with _WorkspaceLock(ctx.workspace):
        for stage in stages_to_run:
            t0 = time.perf_counter()
            if stage == "ingest":
                stats = _run_ingest(ctx, counters)
            elif stage in RECORD_PROCESSORS:
                inputs, malformed = _mainline_input(ctx, stage, config.stages)
                stats = _run_record_stage(ctx, stage, inputs, counters, pre_quarantined=malformed)
            else:
                inputs, malformed = _mainline_input(ctx, stage, config.stages)
                if stage == "select":
                    summary.outputs["select"] = _run_select(ctx, inputs)
                elif stage == "split":
                    summary.outputs["split"] = _run_split(ctx, inputs)
                elif stage == "stats":
                    summary.outputs["stats"] = _run_stats(ctx, inputs, counters)
                counters.reset_stage(stage)
                for _ in range(malformed):
                    counters.bump(stage, "_unparsed", "quarantined")
                for rec in inputs:
                    counters.bump(stage, rec.source, "kept")
                stats = StageStats(
                    input=len(inputs) + malformed,
                    kept=len(inputs),
                    quarantined=malformed,
                )
            stats.wall_time_s = time.perf_counter() - t0
            summary.stages[stage] = stats
            counters.save(ctx.workspace / "counters.json")
            done_info: dict[str, Any] = {
                "stage": stage,
                "input": stats.input,
                "kept": stats.kept,
                "dropped": stats.dropped,
                "quarantined": stats.quarantined,
            }
            ckpt = ctx.checkpoint_path(stage)
            if ckpt.exists():
                done_info["digest"] = _file_digest(ckpt)
            with open(ctx.done_path(stage), "w", encoding="utf-8") as f:
                json.dump(done_info, f, indent=2, sort_keys=True)
                f.write("\n")
        summary.wall_time_s = time.perf_counter() - started
        with open(ctx.workspace / "run_summary.json", "w", encoding="utf-8") as f:
            json.dump(summary.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
    return summary


def run(config: PipelineConfig) -> RunSummary:
    """Execute every configured stage from the beginning."""
    config.validate()
    ctx = RunContext(config)
    # A fresh run owns the workspace: clear completion markers so every
    # stage recomputes (partials from an aborted run still short-circuit
    # finished records).
    for stage in config.stages:
        ctx.done_path(stage).unlink(missing_ok=True)
    (ctx.workspace / "counters.json").unlink(missing_ok=True)
    return _execute(config, list(config.stages), RunSummary())


def resume(config: PipelineConfig, from_stage: str | None = None) -> RunSummary:
    """Re-run from `from_stage` (or the first incomplete stage) onward."""
    config.validate()
    ctx = RunContext(config)
    if from_stage is None:
        pending = [s for s in config.stages if not ctx.stage_done(s)]
        if not pending:
            return RunSummary()
        from_stage = pending[0]
    if from_stage not in config.stages:
        raise StageError(f"stage {from_stage!r} is not part of this run")
    idx = config.stages.index(from_stage)
    for prev in reversed(config.stages[:idx]):
        if prev in MAINLINE_STAGES:
            if not ctx.checkpoint_path(prev).exists():
                raise StageError(
                    f"cannot resume from {from_stage!r}: checkpoint for {prev!r} is missing"
                )
            break
    else:
        if config.stages[0] != "ingest" and config.input_manifest is not None:
            if not Path(config.input_manifest).exists():
                raise StageError(
                    f"cannot resume from {from_stage!r}: input manifest is missing"
                )
    return _execute(config, config.stages[idx:], RunSummary())


def stage_counters(workspace: str | Path) -> dict[str, dict[str, dict[str, Any]]]:
    """Per-stage, per-source counters recorded by a run."""
    path = Path(workspace) / "counters.json"
    if not path.exists():
        raise StageError(f"no counters.json under {workspace}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
