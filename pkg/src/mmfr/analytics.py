"""Corpus statistics: retention tables, token-length distributions,
pass-rate/consistency tables, and the caption-derived image taxonomy.

Percentiles use the nearest-rank convention (the value at 1-based index
ceil(p/100 * count) of the sorted sample) and std_dev is the population
standard deviation; both conventions are labeled in report headers.
Token counting defaults to whitespace word counting and can be swapped
for an external line-in/line-out tokenizer command.
"""

from __future__ import annotations

import math
import re
import subprocess
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from mmfr.errors import MmfrError, ParseError
from mmfr.prompts import NATURAL_CATEGORIES, STEM_CATEGORIES
from mmfr.records import SampleRecord

UNRECOGNIZED = "Unrecognized"

_GROUP_BY_CATEGORY: dict[str, str] = {}
for _c in STEM_CATEGORIES:
    _GROUP_BY_CATEGORY[_c] = "STEM"
for _c in NATURAL_CATEGORIES:
    _GROUP_BY_CATEGORY[_c] = "Natural"


@dataclass(frozen=True)
class TokenStats:
    count: int
    total_tokens: int
    mean: float
    median: int
    std_dev: float
    min: int
    max: int
    p25: int
    p75: int
    p95: int


def nearest_rank(sorted_values: Sequence[int], p: float) -> int:
    """Value at 1-based index ceil(p/100 * count) of a sorted sample."""
    if not sorted_values:
        raise MmfrError("percentile of empty sample")
    idx = max(1, math.ceil(p / 100.0 * len(sorted_values)))
    return sorted_values[idx - 1]


def token_stats(lengths: Iterable[int]) -> TokenStats:
    values = sorted(lengths)
    if not values:
        raise MmfrError("token_stats requires a non-empty sample")
    count = len(values)
    total = sum(values)
    mean = total / count
    variance = sum((v - mean) ** 2 for v in values) / count
    return TokenStats(
        count=count,
        total_tokens=total,
        mean=round(mean, 2),
        median=nearest_rank(values, 50),
        std_dev=round(math.sqrt(variance), 2),
        min=values[0],
        max=values[-1],
        p25=nearest_rank(values, 25),
        p75=nearest_rank(values, 75),
        p95=nearest_rank(values, 95),
    )


# ---------------------------------------------------------------------------
# Retention
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RetentionRow:
    dataset: str
    original: int
    filtered_length: int
    filtered_template: int
    remain: int
    rate_percent: float


def _retention_row(dataset: str, original: int, f_len: int, f_tem: int) -> RetentionRow:
    if min(original, f_len, f_tem) < 0:
        raise MmfrError(f"negative counter for {dataset}")
    if f_len + f_tem > original:
        raise MmfrError(f"filtered exceeds original for {dataset}")
    remain = original - f_len - f_tem
    rate = 100.0 if original == 0 else round(100.0 * remain / original, 2)
    return RetentionRow(dataset, original, f_len, f_tem, remain, rate)


def retention_report(
    counters: Mapping[str, tuple[int, int, int]]
) -> list[RetentionRow]:
    """One row per dataset plus a Total row recomputed from column sums."""
    rows = [
        _retention_row(name, *counts) for name, counts in sorted(counters.items())
    ]
    total = _retention_row(
        "Total",
        sum(r.original for r in rows),
        sum(r.filtered_length for r in rows),
        sum(r.filtered_template for r in rows),
    )
    rows.append(total)
    return rows


# ---------------------------------------------------------------------------
# Pass rate / consistency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PassRateRow:
    dataset: str
    rows: int
    pr_mean: float | None
    pr_median: float | None
    consistent_count: int


def _pass_rate_row(dataset: str, records: Sequence[SampleRecord]) -> PassRateRow:
    scored = sorted(r.pass_rate for r in records if r.pass_rate is not None)
    consistent = sum(1 for r in records if r.is_consistent is True)
    if scored:
        idx = max(1, math.ceil(0.5 * len(scored)))
        pr_mean = round(sum(scored) / len(scored), 4)
        pr_median = scored[idx - 1]
    else:
        pr_mean = None
        pr_median = None
    return PassRateRow(dataset, len(records), pr_mean, pr_median, consistent)


def pass_rate_report(records: Iterable[SampleRecord]) -> list[PassRateRow]:
    by_source: dict[str, list[SampleRecord]] = {}
    for rec in records:
        by_source.setdefault(rec.source, []).append(rec)
    rows = [_pass_rate_row(name, recs) for name, recs in sorted(by_source.items())]
    everything = [rec for recs in by_source.values() for rec in recs]
    if everything:
        rows.append(_pass_rate_row("Total", everything))
    return rows


# ---------------------------------------------------------------------------
# Caption categories
# ---------------------------------------------------------------------------

_HEADING_RE = re.compile(r"^###\s*Image\s*\d+\s*:\s*(.+?)\s*$")


def parse_caption_category(caption: str) -> str:
    """Primary category from the first heading line of a caption."""
    if not caption:
        raise ParseError("empty caption")
    for line in caption.splitlines():
        m = _HEADING_RE.match(line.strip())
        if m:
            label = m.group(1).strip()
            return label if label in _GROUP_BY_CATEGORY else UNRECOGNIZED
    raise ParseError("caption has no category heading line")


@dataclass(frozen=True)
class CategoryRow:
    group: str
    category: str
    count: int
    ratio_percent: float


def distribution_from_counts(counts: Mapping[str, int]) -> list[CategoryRow]:
    """Counts and within-group percentage ratios for STEM vs Natural."""
    group_totals: Counter[str] = Counter()
    for label, count in counts.items():
        group_totals[_GROUP_BY_CATEGORY.get(label, UNRECOGNIZED)] += count
    rows: list[CategoryRow] = []
    for label in sorted(counts, key=lambda c: (-counts[c], c)):
        group = _GROUP_BY_CATEGORY.get(label, UNRECOGNIZED)
        total = group_totals[group]
        ratio = round(100.0 * counts[label] / total, 2) if total else 0.0
        rows.append(CategoryRow(group, label, counts[label], ratio))
    return rows


def category_distribution(records: Iterable[SampleRecord]) -> list[CategoryRow]:
    counts: Counter[str] = Counter()
    for rec in records:
        if rec.caption is None:
            continue
        counts[parse_caption_category(rec.caption)] += 1
    return distribution_from_counts(counts)


# ---------------------------------------------------------------------------
# Tokenizers
# ---------------------------------------------------------------------------


def whitespace_token_count(text: str) -> int:
    return len(text.split())


class ExternalTokenizer:
    """Counts tokens via a subprocess: one line of text in, one integer out.

    Newlines inside the text are replaced with spaces to honor the
    line-oriented contract. The command must flush after each output
    line (e.g. run Python helpers with -u).
    """

    def __init__(self, command: str):
        self.command = command
        self._proc = subprocess.Popen(
            command,
            shell=True,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )

    def __call__(self, text: str) -> int:
        assert self._proc.stdin is not None and self._proc.stdout is not None
        self._proc.stdin.write(text.replace("\n", " ") + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise MmfrError(f"external tokenizer {self.command!r} closed its output")
        return int(line.strip())

    def close(self) -> None:
        if self._proc.stdin is not None:
            self._proc.stdin.close()
        self._proc.wait(timeout=10)


def make_tokenizer(spec: str):
    """'whitespace' or 'external:<command>' per the stats CLI contract."""
    if spec == "whitespace":
        return whitespace_token_count
    if spec.startswith("external:"):
        return ExternalTokenizer(spec[len("external:") :])
    raise MmfrError(f"unknown tokenizer spec {spec!r}")


# ---------------------------------------------------------------------------
# Report rendering (CSV with a convention-header comment line)
# ---------------------------------------------------------------------------

CONVENTION_NOTE = "percentiles=nearest-rank(1-based ceil); std_dev=population"


def _write_csv(path, comment: str, fieldnames: Sequence[str], rows: Iterable[dict]) -> None:
    import csv
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# {comment}\n")
        writer = csv.DictWriter(f, fieldnames=list(fieldnames))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _stats_row(dataset: str, kind: str, stats: TokenStats) -> dict:
    return {
        "dataset": dataset,
        "type": kind,
        "count": stats.count,
        "total_tokens": stats.total_tokens,
        "mean": f"{stats.mean:.2f}",
        "median": stats.median,
        "std_dev": f"{stats.std_dev:.2f}",
        "min": stats.min,
        "max": stats.max,
        "p25": stats.p25,
        "p75": stats.p75,
        "p95": stats.p95,
    }


def write_tokens_report(
    records: Iterable[SampleRecord],
    path,
    tokenizer=whitespace_token_count,
    tokenizer_label: str = "whitespace",
) -> None:
    """Per-dataset token-length stats for reasoning traces and captions."""
    cot: dict[str, list[int]] = {}
    caps: dict[str, list[int]] = {}
    for rec in records:
        if rec.thinking_response is not None:
            cot.setdefault(rec.source, []).append(tokenizer(rec.thinking_response))
        if rec.caption is not None:
            caps.setdefault(rec.source, []).append(tokenizer(rec.caption))
    rows = []
    for kind, buckets in (("CoT", cot), ("Caption", caps)):
        if buckets:
            everything = [n for lengths in buckets.values() for n in lengths]
            rows.append(_stats_row("ALL", kind, token_stats(everything)))
        for name in sorted(buckets):
            rows.append(_stats_row(name, kind, token_stats(buckets[name])))
    _write_csv(
        path,
        f"tokenizer={tokenizer_label}; {CONVENTION_NOTE}",
        ["dataset", "type", "count", "total_tokens", "mean", "median",
         "std_dev", "min", "max", "p25", "p75", "p95"],
        rows,
    )


def write_retention_report(counters: Mapping[str, tuple[int, int, int]], path) -> None:
    rows = retention_report(counters)
    _write_csv(
        path,
        "remain=original-len-tem; rate=100*remain/original (2dp)",
        ["dataset", "original", "filtered_length", "filtered_template", "remain", "rate_percent"],
        (
            {
                "dataset": r.dataset,
                "original": r.original,
                "filtered_length": r.filtered_length,
                "filtered_template": r.filtered_template,
                "remain": r.remain,
                "rate_percent": f"{r.rate_percent:.2f}",
            }
            for r in rows
        ),
    )


def write_passrate_report(records: Iterable[SampleRecord], path) -> None:
    rows = pass_rate_report(records)
    _write_csv(
        path,
        "rollouts: temperature=1.0 top_p=1.0(default); median=nearest-rank",
        ["dataset", "rows", "pr_mean", "pr_median", "consistent"],
        (
            {
                "dataset": r.dataset,
                "rows": r.rows,
                "pr_mean": "" if r.pr_mean is None else f"{r.pr_mean:.4f}",
                "pr_median": "" if r.pr_median is None else f"{r.pr_median:.4f}",
                "consistent": r.consistent_count,
            }
            for r in rows
        ),
    )


def write_categories_report(records: Iterable[SampleRecord], path) -> None:
    rows = category_distribution(records)
    _write_csv(
        path,
        "ratio normalized within group (STEM / Natural)",
        ["group", "category", "count", "ratio_percent"],
        (
            {
                "group": r.group,
                "category": r.category,
                "count": r.count,
                "ratio_percent": f"{r.ratio_percent:.2f}",
            }
            for r in rows
        ),
    )
