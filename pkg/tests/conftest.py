from __future__ import annotations

import io

import pytest
from PIL import Image

from mmfr.gateway import ScriptedBackend, ScriptStore
from mmfr.records import SampleRecord


def make_record(**overrides) -> SampleRecord:
    base = dict(
        source="Geometry3K",
        id="0001",
        original_question="What is the area?",
        original_answer="12",
        image="Geometry3K/0001.png",
        question="What is the area?",
        answer="12",
    )
    base.update(overrides)
    return SampleRecord(**base)


def png_bytes(width: int = 8, height: int = 8, color=(200, 30, 30), mode="RGB") -> bytes:
    img = Image.new(mode, (width, height), color)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


@pytest.fixture
def script_store(tmp_path):
    return ScriptStore(tmp_path / "script")


@pytest.fixture
def scripted_backend(script_store):
    return ScriptedBackend(script_store)


def think_answer(words: int, answer: str = "C", filler: str = "w") -> str:
    body = " ".join(f"{filler}{i}" for i in range(words))
    return f"<think>{body}</think>\nTherefore, the final answer is <answer>{answer}</answer>."
