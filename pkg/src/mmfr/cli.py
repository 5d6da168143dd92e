"""Command-line entry points.

Single-stage subcommands operate on manifest files directly and are
composable with shell pipelines; ``run``/``resume`` drive the whole
checkpointed DAG from a config file. Every command exits 0 on success
and nonzero with a stage-scoped message otherwise.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click

from mmfr import analytics, pipeline
from mmfr.difficulty import SubsetRule, score_pass_rate, select_subset, split_rl_sft
from mmfr.errors import GatewayError, MmfrError, ParseError
from mmfr.filters import NgramPolicy, run_filter_chain
from mmfr.gateway import Backend, BackendConfig, build_backend
from mmfr.ingest import SourceAdapterConfig, ingest_rows, read_source_rows
from mmfr.manifest import Quarantine, load_manifest, write_jsonl, write_manifest
from mmfr.records import Decision, FilterVerdict, Reason, SampleRecord, canonical_key
from mmfr.stages import (
    clean_sample,
    caption_sample,
    distill_sample,
    extract_answer_via_model,
)


@click.group()
def main() -> None:
    """Multimodal reasoning-corpus curation pipeline."""


def _fail(stage: str, exc: Exception) -> "click.ClickException":
    return click.ClickException(f"[{stage}] {exc}")


def _backend(path: str) -> Backend:
    return build_backend(BackendConfig.from_file(path))


def _image_bytes(images_root: Path, record: SampleRecord) -> bytes | None:
    if not record.image:
        return None
    try:
        return (images_root / record.image).read_bytes()
    except OSError:
        return None


def _report_counts(stage: str, kept: int, dropped: int, quarantined: int) -> None:
    click.echo(f"[{stage}] kept={kept} dropped={dropped} quarantined={quarantined}")


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------


@main.command()
@click.option("--source", default=None, help="Override the adapter's source name.")
@click.option("--adapter", "adapter_path", required=True, type=click.Path(exists=True))
@click.option("--in", "input_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--images-out", required=True, type=click.Path())
@click.option("--quarantine", "quarantine_path", default=None, type=click.Path())
def ingest(source, adapter_path, input_dir, out_path, images_out, quarantine_path):
    """Adapt raw source rows into canonical records and normalize images."""
    try:
        cfg = SourceAdapterConfig.from_file(adapter_path)
        if source:
            cfg = dataclasses.replace(cfg, source_name=source)
        quarantine = Quarantine("ingest", quarantine_path)
        kept: list[SampleRecord] = []
        dropped = 0
        for outcome in ingest_rows(read_source_rows(input_dir), cfg, input_dir, images_out):
            if outcome.error is not None:
                quarantine.add(outcome.error)
            elif outcome.verdict is not None:
                dropped += 1
            else:
                assert outcome.record is not None
                kept.append(outcome.record)
        write_manifest(kept, out_path)
    except MmfrError as exc:
        raise _fail("ingest", exc)
    _report_counts("ingest", len(kept), dropped, len(quarantine))


# ---------------------------------------------------------------------------
# gateway-backed single stages
# ---------------------------------------------------------------------------


def _stage_io(stage, in_path, out_path, dropped_path, quarantine_path, worker):
    """Shared drive loop: read, process per record, write kept/dropped."""
    quarantine = Quarantine(stage, quarantine_path)
    records = load_manifest(in_path, quarantine)
    kept: list[SampleRecord] = []
    dropped_rows: list[dict] = []
    for rec in records:
        try:
            result, verdict = worker(rec)
        except (GatewayError, ParseError) as exc:
            quarantine.add(str(exc), key=canonical_key(rec))
            continue
        if verdict is None or verdict.decision is Decision.KEEP:
            kept.append(result)
        else:
            dropped_rows.append({**result.to_wire(), "verdict": verdict.to_dict()})
    write_manifest(kept, out_path)
    if dropped_path:
        write_jsonl(dropped_rows, dropped_path)
    _report_counts(stage, len(kept), len(dropped_rows), len(quarantine))


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--backend", "backend_path", required=True, type=click.Path(exists=True))
@click.option("--quarantine", "quarantine_path", default=None, type=click.Path())
@click.option("--dropped", "dropped_path", default=None, type=click.Path())
def clean(in_path, out_path, backend_path, quarantine_path, dropped_path):
    """Prompt-driven question cleaning (translate, de-noise, refine)."""
    try:
        backend = _backend(backend_path)

        def worker(rec: SampleRecord):
            if not rec.question:
                return rec, FilterVerdict.drop(Reason.NON_ANSWER_QUESTION, "clean")
            return clean_sample(rec, backend)

        _stage_io("clean", in_path, out_path, dropped_path, quarantine_path, worker)
    except MmfrError as exc:
        raise _fail("clean", exc)


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--backend", "backend_path", required=True, type=click.Path(exists=True))
@click.option("--quarantine", "quarantine_path", default=None, type=click.Path())
@click.option("--images-root", default=None, type=click.Path(exists=True, file_okay=False))
def caption(in_path, out_path, backend_path, quarantine_path, images_root):
    """Generate dense structured captions for each record's image."""
    try:
        backend = _backend(backend_path)
        root = Path(images_root) if images_root else Path(in_path).parent

        def worker(rec: SampleRecord):
            image = _image_bytes(root, rec)
            if image is None:
                raise ParseError(f"image unreadable: {rec.image!r}")
            return caption_sample(rec, backend, image), None

        _stage_io("caption", in_path, out_path, None, quarantine_path, worker)
    except MmfrError as exc:
        raise _fail("caption", exc)


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--backend", "backend_path", required=True, type=click.Path(exists=True))
@click.option("--quarantine", "quarantine_path", default=None, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--images-root", default=None, type=click.Path(exists=True, file_okay=False))
def distill(in_path, out_path, backend_path, quarantine_path, seed, images_root):
    """Distill long reasoning traces from the teacher backend."""
    try:
        backend = _backend(backend_path)
        root = Path(images_root) if images_root else Path(in_path).parent

        def worker(rec: SampleRecord):
            return distill_sample(rec, backend, seed, _image_bytes(root, rec)), None

        _stage_io("distill", in_path, out_path, None, quarantine_path, worker)
    except MmfrError as exc:
        raise _fail("distill", exc)


@main.command("extract-answers")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--backend", "backend_path", required=True, type=click.Path(exists=True))
@click.option("--quarantine", "quarantine_path", default=None, type=click.Path())
def extract_answers(in_path, out_path, backend_path, quarantine_path):
    """Fill missing ground-truth answers from the raw solution text."""
    try:
        backend = _backend(backend_path)

        def worker(rec: SampleRecord):
            if rec.answer is not None or not rec.original_answer:
                return rec, None
            answer = extract_answer_via_model(rec, backend)
            if answer is None:
                return rec, None  # model found no concise answer; leave absent
            return rec.with_fields(answer=answer), None

        _stage_io("extract-answers", in_path, out_path, None, quarantine_path, worker)
    except MmfrError as exc:
        raise _fail("extract-answers", exc)


@main.command("filter")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--dropped", "dropped_path", required=True, type=click.Path())
@click.option("--quarantine", "quarantine_path", default=None, type=click.Path())
@click.option("--backend", "backend_path", required=True, type=click.Path(exists=True),
              help="Judge backend for correctness verification.")
@click.option("--teacher", "teacher_path", default=None, type=click.Path(exists=True),
              help="Optional teacher backend enabling n-gram regeneration.")
@click.option("--ngram-n", default=50, show_default=True, type=int)
@click.option("--ngram-min-repeats", default=3, show_default=True, type=int)
@click.option("--min-words", default=100, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int,
              help="Base distillation seed used for regeneration attempts.")
@click.option("--max-regen-attempts", default=2, show_default=True, type=int)
@click.option("--images-root", default=None, type=click.Path(exists=True, file_okay=False))
def filter_cmd(in_path, out_path, dropped_path, quarantine_path, backend_path,
               teacher_path, ngram_n, ngram_min_repeats, min_words, seed,
               max_regen_attempts, images_root):
    """Template/length validation, n-gram de-dup, and judge verification."""
    try:
        judge = _backend(backend_path)
        teacher = _backend(teacher_path) if teacher_path else None
        policy = NgramPolicy(n=ngram_n, min_repeats=ngram_min_repeats)
        root = Path(images_root) if images_root else Path(in_path).parent

        def worker(rec: SampleRecord):
            current = rec
            attempt = 0
            while True:
                current, verdict = run_filter_chain(
                    current, judge, policy=policy, min_words=min_words
                )
                if verdict.decision is not Decision.REGENERATE:
                    return current, verdict
                if teacher is None or attempt >= max_regen_attempts:
                    return current, FilterVerdict.drop(Reason.NGRAM_REPETITION, "filter")
                attempt += 1
                current = distill_sample(
                    current, teacher, seed + attempt, _image_bytes(root, current)
                )

        _stage_io("filter", in_path, out_path, dropped_path, quarantine_path, worker)
    except MmfrError as exc:
        raise _fail("filter", exc)


# ---------------------------------------------------------------------------
# difficulty
# ---------------------------------------------------------------------------


@main.group()
def difficulty() -> None:
    """Pass-rate scoring and difficulty-based subset selection."""


@difficulty.command("score")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--probe", "probe_path", required=True, type=click.Path(exists=True))
@click.option("--judge", "judge_path", default=None, type=click.Path(exists=True))
@click.option("--k", default=4, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--quarantine", "quarantine_path", default=None, type=click.Path())
@click.option("--images-root", default=None, type=click.Path(exists=True, file_okay=False))
def difficulty_score(in_path, out_path, probe_path, judge_path, k, seed,
                     quarantine_path, images_root):
    """Score each labeled record with k probe rollouts."""
    try:
        probe = _backend(probe_path)
        judge = _backend(judge_path) if judge_path else None
        root = Path(images_root) if images_root else Path(in_path).parent

        def worker(rec: SampleRecord):
            if rec.answer is None:
                return rec, None
            scored, _ = score_pass_rate(
                rec, probe, judge, k=k, base_seed=seed, image=_image_bytes(root, rec)
            )
            return scored, None

        _stage_io("difficulty", in_path, out_path, None, quarantine_path, worker)
    except MmfrError as exc:
        raise _fail("difficulty", exc)


@difficulty.command("select")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--rule", required=True, type=click.Choice([r.value for r in SubsetRule]))
def difficulty_select(in_path, out_path, rule):
    """Keep the hard subset (pass rate = 0, or pass rate < 1)."""
    try:
        records = load_manifest(in_path)
        subset = select_subset(records, SubsetRule(rule))
        write_manifest(subset, out_path)
    except MmfrError as exc:
        raise _fail("select", exc)
    click.echo(f"[select] rule={rule} kept={len(subset)} of {len(records)}")


@main.command("split-rl")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--rl-out", required=True, type=click.Path())
@click.option("--sft-out", required=True, type=click.Path())
@click.option("--count", default=40000, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
def split_rl(in_path, rl_out, sft_out, count, seed):
    """Seeded uniform split into RL and SFT manifests."""
    try:
        records = load_manifest(in_path)
        rl, sft = split_rl_sft(records, rl_count=count, seed=seed)
        write_manifest(rl, rl_out)
        write_manifest(sft, sft_out)
    except MmfrError as exc:
        raise _fail("split", exc)
    click.echo(f"[split] rl={len(rl)} sft={len(sft)}")


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------


@main.group()
def stats() -> None:
    """Corpus statistics reports (CSV plus conventions header)."""


@stats.command("tokens")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--tokenizer", default="whitespace", show_default=True,
              help="'whitespace' or 'external:<cmd>' (line in, count out).")
def stats_tokens(in_path, out_path, tokenizer):
    try:
        tok = analytics.make_tokenizer(tokenizer)
        analytics.write_tokens_report(load_manifest(in_path), out_path, tok, tokenizer)
        if hasattr(tok, "close"):
            tok.close()
    except MmfrError as exc:
        raise _fail("stats", exc)
    click.echo(f"[stats] wrote {out_path}")


@stats.command("retention")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True),
              help="JSON counters: {dataset: [original, len_drops, template_drops]}.")
@click.option("--out", "out_path", required=True, type=click.Path())
def stats_retention(in_path, out_path):
    try:
        with open(in_path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        counters = {
            name: (int(v[0]), int(v[1]), int(v[2]))
            if isinstance(v, list)
            else (int(v["original"]), int(v["filtered_length"]), int(v["filtered_template"]))
            for name, v in raw.items()
        }
        analytics.write_retention_report(counters, out_path)
    except (MmfrError, KeyError, ValueError) as exc:
        raise _fail("stats", exc)
    click.echo(f"[stats] wrote {out_path}")


@stats.command("passrate")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def stats_passrate(in_path, out_path):
    try:
        analytics.write_passrate_report(load_manifest(in_path), out_path)
    except MmfrError as exc:
        raise _fail("stats", exc)
    click.echo(f"[stats] wrote {out_path}")


@stats.command("categories")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def stats_categories(in_path, out_path):
    try:
        analytics.write_categories_report(load_manifest(in_path), out_path)
    except MmfrError as exc:
        raise _fail("stats", exc)
    click.echo(f"[stats] wrote {out_path}")


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def run_cmd(config_path):
    """Execute the full configured stage DAG with checkpointing."""
    try:
        config = pipeline.PipelineConfig.from_file(config_path)
        summary = pipeline.run(config)
    except MmfrError as exc:
        raise _fail("run", exc)
    click.echo(json.dumps(summary.to_dict(), indent=2, sort_keys=True))


@main.command("resume")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--from", "from_stage", default=None,
              help="Stage to resume from (default: first incomplete stage).")
def resume_cmd(config_path, from_stage):
    """Resume an interrupted run, skipping completed stages."""
    try:
        config = pipeline.PipelineConfig.from_file(config_path)
        summary = pipeline.resume(config, from_stage)
    except MmfrError as exc:
        raise _fail("resume", exc)
    click.echo(json.dumps(summary.to_dict(), indent=2, sort_keys=True))


@main.command("report")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True, file_okay=False))
def report_cmd(run_dir):
    """Print a run's per-stage counters and retention table."""
    try:
        counters = pipeline.stage_counters(run_dir)
        summary_path = Path(run_dir) / "run_summary.json"
        if summary_path.exists():
            with open(summary_path, "r", encoding="utf-8") as f:
                click.echo(json.dumps(json.load(f), indent=2, sort_keys=True))
        retention = pipeline.Counters()
        retention.data = counters
        rows = analytics.retention_report(retention.retention_counters("filter"))
        click.echo(f"{'dataset':40s} {'original':>10s} {'len':>8s} {'tem':>8s} {'remain':>10s} {'rate%':>8s}")
        for r in rows:
            click.echo(
                f"{r.dataset:40s} {r.original:>10d} {r.filtered_length:>8d} "
                f"{r.filtered_template:>8d} {r.remain:>10d} {r.rate_percent:>8.2f}"
            )
    except MmfrError as exc:
        raise _fail("report", exc)


if __name__ == "__main__":
    sys.exit(main())
