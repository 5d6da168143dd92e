"""Source-dataset adapters and image normalization.

Each heterogeneous source is described by a small adapter config that
maps its row fields onto the canonical schema and says where the image
lives (inline base64 in a row field, or a path relative to the input
directory). Images are decoded, converted to RGB, capped at 2048 px on
the longest side with aspect ratio preserved, and re-encoded as PNG;
undecodable images yield a discard signal and the record is dropped.
"""

from __future__ import annotations

import base64
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, NamedTuple

from PIL import Image, UnidentifiedImageError

from mmfr.errors import AdapterError, ConfigError
from mmfr.records import FilterVerdict, Reason, SampleRecord

MAX_SIDE = 2048

CANONICAL_TARGETS = ("original_question", "original_answer", "answer", "id")


class NormalizedImage(NamedTuple):
    data: bytes  # PNG-encoded
    width: int
    height: int


@dataclass(frozen=True)
class ImageLocator:
    """How to find a sample's image: inline base64 or a relative path."""

    kind: str  # "inline_base64" | "path"
    field: str

    def __post_init__(self) -> None:
        if self.kind not in ("inline_base64", "path"):
            raise ConfigError(f"unknown image locator kind {self.kind!r}")


@dataclass(frozen=True)
class SourceAdapterConfig:
    source_name: str
    field_mapping: dict[str, str]  # source field -> canonical field
    image_locator: ImageLocator
    optional_fields: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if not self.source_name:
            raise ConfigError("source_name must be non-empty")
        targets = set(self.field_mapping.values())
        unknown = targets - set(CANONICAL_TARGETS)
        if unknown:
            raise ConfigError(f"field_mapping targets unknown fields: {sorted(unknown)}")
        if "original_question" not in targets:
            raise ConfigError("field_mapping must cover original_question")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SourceAdapterConfig":
        loc = d.get("image_locator", {})
        return cls(
            source_name=d["source_name"],
            field_mapping=dict(d["field_mapping"]),
            image_locator=ImageLocator(kind=loc["kind"], field=loc["field"]),
            optional_fields=frozenset(d.get("optional_fields", [])),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "SourceAdapterConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def adapt_sample(raw: dict[str, Any], cfg: SourceAdapterConfig, seq: int) -> SampleRecord:
    """Map one source row into a canonical record.

    The record id comes from the source's mapped id field when present,
    else a zero-padded ordinal. The image path is filled in later by the
    ingest driver once the image has been normalized and written out.
    """
    values: dict[str, str] = {}
    for src_field, target in cfg.field_mapping.items():
        if src_field not in raw or raw[src_field] is None:
            if src_field in cfg.optional_fields:
                continue
            raise AdapterError(target)
        values[target] = str(raw[src_field])

    rec_id = values.get("id") or f"{seq:08d}"
    original_question = values["original_question"]
    return SampleRecord(
        source=cfg.source_name,
        id=rec_id,
        original_question=original_question,
        original_answer=values.get("original_answer", ""),
        image="",
        question=original_question,
        answer=values.get("answer"),
    )


def normalize_image(data: bytes, max_side: int = MAX_SIDE) -> NormalizedImage | None:
    """RGB-convert and cap the longest side; None signals a discard.

    Downscaling uses an area-averaging (box) filter and the result is
    re-encoded as lossless PNG, so normalizing twice gives the same
    dimensions and color space as normalizing once.
    """
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError, ValueError):
        return None
    if img.mode != "RGB":
        img = img.convert("RGB")
    w, h = img.size
    longest = max(w, h)
    if longest > max_side:
        scale = max_side / longest
        new_w = max(1, round(w * scale))
        new_h = max(1, round(h * scale))
        # round() can overshoot the cap on the off-axis only; the longest
        # side maps exactly to max_side.
        if w >= h:
            new_w = max_side
        else:
            new_h = max_side
        img = img.resize((new_w, new_h), Image.BOX)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return NormalizedImage(buf.getvalue(), img.size[0], img.size[1])


def _load_image_bytes(
    raw: dict[str, Any], cfg: SourceAdapterConfig, input_dir: Path
) -> bytes | None:
    loc = cfg.image_locator
    value = raw.get(loc.field)
    if value is None:
        return None
    if loc.kind == "inline_base64":
        try:
            return base64.b64decode(value, validate=True)
        except (ValueError, TypeError):
            return None
    path = Path(value)
    if not path.is_absolute():
        path = input_dir / path
    try:
        return path.read_bytes()
    except OSError:
        return None


class IngestOutcome(NamedTuple):
    record: SampleRecord | None
    verdict: FilterVerdict | None
    error: str | None  # quarantine reason when record is None and no verdict


def ingest_rows(
    rows: Iterable[dict[str, Any]],
    cfg: SourceAdapterConfig,
    input_dir: str | Path,
    images_out: str | Path,
) -> Iterator[IngestOutcome]:
    """Adapt rows, normalize images, and write image files.

    Yields one outcome per row: a finished record, a drop verdict
    (corrupt/missing image), or an adapter error for the quarantine.
    Image files land under ``images_out/<source>/<id>.png`` and the
    record's ``image`` field holds the ``<source>/<id>.png`` relative
    path.
    """
    input_dir = Path(input_dir)
    images_out = Path(images_out)
    for seq, raw in enumerate(rows):
        try:
            record = adapt_sample(raw, cfg, seq)
        except AdapterError as exc:
            yield IngestOutcome(None, None, f"missing mapped field: {exc}")
            continue
        data = _load_image_bytes(raw, cfg, input_dir)
        normalized = normalize_image(data) if data is not None else None
        if normalized is None:
            yield IngestOutcome(
                record, FilterVerdict.drop(Reason.CORRUPT_IMAGE, "ingest"), None
            )
            continue
        rel = f"{cfg.source_name}/{record.id}.png"
        out_path = images_out / rel
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_bytes(normalized.data)
        yield IngestOutcome(record.with_fields(image=rel), None, None)


def read_source_rows(input_dir: str | Path) -> Iterator[dict[str, Any]]:
    """Rows from every *.jsonl under the input dir, in sorted file order."""
    input_dir = Path(input_dir)
    files = sorted(input_dir.glob("*.jsonl"))
    if not files:
        raise ConfigError(f"no *.jsonl source files under {input_dir}")
    for f in files:
        with open(f, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    yield json.loads(line)
