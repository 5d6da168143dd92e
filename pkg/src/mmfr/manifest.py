"""JSONL manifest reading/writing and the quarantine sink.

A manifest holds one record per line, UTF-8. Reads are streaming and
tolerant: malformed lines are diverted to a quarantine sink with their
line number and processing continues. Writes are strict: records are
emitted in canonical (source, id) order, duplicate keys are rejected,
and the file is written to a temp path then renamed so readers never
see a half-written manifest.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Iterable, Iterator

from mmfr.errors import MalformedRecordError
from mmfr.records import SampleRecord, canonical_key, sort_records


class Quarantine:
    """Append-only sink for records that failed to parse or process.

    Entries are JSONL objects with a stage, a free-text reason, and
    whatever locating context is available (line number or record key).
    With ``path=None`` entries are kept in memory only.
    """

    def __init__(self, stage: str, path: str | Path | None = None):
        self.stage = stage
        self.path = Path(path) if path is not None else None
        self.entries: list[dict[str, Any]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def add(
        self,
        reason: str,
        *,
        line: int | None = None,
        key: tuple[str, str] | None = None,
        payload: Any = None,
    ) -> None:
        entry: dict[str, Any] = {"stage": self.stage, "reason": reason}
        if line is not None:
            entry["line"] = line
        if key is not None:
            entry["key"] = list(key)
        if payload is not None:
            entry["payload"] = payload
        self.entries.append(entry)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry, ensure_ascii=False) + "\n")

    def __len__(self) -> int:
        return len(self.entries)


def read_manifest(
    path: str | Path, quarantine: Quarantine | None = None
) -> Iterator[SampleRecord]:
    """Yield records in file order; malformed lines go to `quarantine`."""
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield SampleRecord.from_json(line)
            except MalformedRecordError as exc:
                if quarantine is not None:
                    quarantine.add(str(exc), line=lineno, payload=line.rstrip("\n"))


def load_manifest(path: str | Path, quarantine: Quarantine | None = None) -> list[SampleRecord]:
    return list(read_manifest(path, quarantine))


def write_manifest(records: Iterable[SampleRecord], path: str | Path) -> int:
    """Write records in canonical order, atomically. Returns the count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sort_records(records)
    previous: tuple[str, str] | None = None
    for rec in ordered:
        key = canonical_key(rec)
        if key == previous:
            raise MalformedRecordError(f"duplicate record key {key}")
        previous = key
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for rec in ordered:
            f.write(rec.to_json() + "\n")
    os.replace(tmp, path)
    return len(ordered)


def write_jsonl(rows: Iterable[dict[str, Any]], path: str | Path) -> int:
    """Atomic JSONL writer for non-record rows (verdicts, counters)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    n = 0
    with open(tmp, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")
            n += 1
    os.replace(tmp, path)
    return n


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                yield json.loads(line)
