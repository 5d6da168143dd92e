"""Uniform access to chat-completion backends.

Two backend kinds share one calling convention: an HTTP backend
speaking the OpenAI-compatible ``/chat/completions`` wire protocol, and
a scripted backend that replays canned responses keyed by a content
digest of the request. The scripted backend makes every downstream
stage testable offline and byte-deterministic; a recording wrapper
captures live responses into a script directory for later replay.

Backends are safe to share across worker threads; ``complete_batch``
bounds in-flight requests and preserves input order.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import requests

from mmfr.errors import (
    BackendUnavailableError,
    ConfigError,
    GatewayError,
    RequestRejectedError,
    ScriptMissError,
)

ENV_BACKEND_URL = "MMFR_BACKEND_URL"
ENV_BACKEND_KEY = "MMFR_BACKEND_KEY"


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 1.0
    max_tokens: int = 4096
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class ChatExchange:
    """One request/response pair against a backend.

    ``image`` carries the normalized image bytes when the request is
    multimodal; ``response_text`` is empty until completion.
    """

    user_text: str
    system_text: str = ""
    image: bytes | None = None
    decode: DecodeParams = field(default_factory=DecodeParams)
    response_text: str = ""

    def __post_init__(self) -> None:
        if not self.user_text:
            raise ValueError("user_text must be non-empty")

    def completed(self, response_text: str) -> "ChatExchange":
        return replace(self, response_text=response_text)


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_base: float = 0.5

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass(frozen=True)
class BackendConfig:
    kind: str  # "http" | "scripted"
    model_name: str = "default"
    endpoint: str | None = None
    api_key: str | None = None
    max_in_flight: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    script_path: str | None = None
    strict: bool = True
    record: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("http", "scripted"):
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be positive")
        if self.kind == "scripted" and not self.script_path:
            raise ConfigError("scripted backend requires script_path")
        if self.kind == "http" and not (self.endpoint or os.environ.get(ENV_BACKEND_URL)):
            raise ConfigError(f"http backend requires endpoint or {ENV_BACKEND_URL}")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BackendConfig":
        retry = d.get("retry", {})
        return cls(
            kind=d["kind"],
            model_name=d.get("model_name", "default"),
            endpoint=d.get("endpoint"),
            api_key=d.get("api_key"),
            max_in_flight=int(d.get("max_in_flight", 4)),
            retry=RetryPolicy(
                max_attempts=int(retry.get("max_attempts", 3)),
                backoff_base=float(retry.get("backoff_base", 0.5)),
            ),
            script_path=d.get("script_path"),
            strict=bool(d.get("strict", True)),
            record=bool(d.get("record", False)),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "BackendConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def script_key(exchange: ChatExchange) -> str:
    """Stable content digest over everything that identifies a request."""
    image_digest = (
        hashlib.sha256(exchange.image).hexdigest() if exchange.image is not None else None
    )
    payload = json.dumps(
        {
            "system_text": exchange.system_text,
            "user_text": exchange.user_text,
            "image_sha256": image_digest,
            "temperature": exchange.decode.temperature,
            "max_tokens": exchange.decode.max_tokens,
            "seed": exchange.decode.seed,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ScriptStore:
    """Directory of (key -> response text) entries, one file per key."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _entry(self, key: str) -> Path:
        return self.root / f"{key}.txt"

    def get(self, key: str) -> str | None:
        p = self._entry(key)
        if not p.exists():
            return None
        return p.read_text(encoding="utf-8")

    def put(self, key: str, text: str) -> None:
        self._entry(key).write_text(text, encoding="utf-8")

    def plant(self, exchange: ChatExchange, text: str) -> str:
        """Store a canned response for the exchange; returns its key."""
        key = script_key(exchange)
        self.put(key, text)
        return key


class Backend:
    """Completion interface; subclasses fill response_text."""

    model_name: str = "default"
    max_in_flight: int = 4

    def complete(self, exchange: ChatExchange) -> ChatExchange:
        raise NotImplementedError


class ScriptedBackend(Backend):
    """Replays canned responses; optionally tracks in-flight concurrency.

    ``latency`` adds an artificial per-request delay so concurrency
    tests can observe overlap; ``peak_in_flight`` exposes the maximum
    number of simultaneously outstanding requests seen.
    """

    def __init__(
        self,
        store: ScriptStore | str | Path,
        model_name: str = "scripted",
        strict: bool = True,
        latency: float = 0.0,
        max_in_flight: int = 4,
    ):
        self.store = store if isinstance(store, ScriptStore) else ScriptStore(store)
        self.model_name = model_name
        self.strict = strict
        self.latency = latency
        self.max_in_flight = max_in_flight
        self._lock = threading.Lock()
        self._in_flight = 0
        self.peak_in_flight = 0
        self.calls = 0

    def complete(self, exchange: ChatExchange) -> ChatExchange:
        with self._lock:
            self._in_flight += 1
            self.calls += 1
            self.peak_in_flight = max(self.peak_in_flight, self._in_flight)
        try:
            if self.latency:
                time.sleep(self.latency)
            key = script_key(exchange)
            text = self.store.get(key)
            if text is None:
                if self.strict:
                    raise ScriptMissError(key)
                text = ""
            return exchange.completed(text)
        finally:
            with self._lock:
                self._in_flight -= 1


class HttpBackend(Backend):
    """OpenAI-compatible chat-completions client with retry/backoff."""

    def __init__(
        self,
        endpoint: str,
        model_name: str,
        api_key: str | None = None,
        retry: RetryPolicy = RetryPolicy(),
        max_in_flight: int = 4,
        session: requests.Session | None = None,
        timeout: float = 600.0,
    ):
        self.endpoint = endpoint.rstrip("/")
        if not self.endpoint.endswith("/chat/completions"):
            self.endpoint = self.endpoint + "/chat/completions"
        self.model_name = model_name
        self.api_key = api_key
        self.retry = retry
        self.max_in_flight = max_in_flight
        self.timeout = timeout
        self._session = session or requests.Session()

    def _body(self, exchange: ChatExchange) -> dict[str, Any]:
        content: list[dict[str, Any]] | str
        if exchange.image is not None:
            b64 = base64.b64encode(exchange.image).decode("ascii")
            content = [
                {"type": "text", "text": exchange.user_text},
                {
                    "type": "image_url",
                    "image_url": {"url": f"data:image/png;base64,{b64}"},
                },
            ]
        else:
            content = exchange.user_text
        messages: list[dict[str, Any]] = []
        if exchange.system_text:
            messages.append({"role": "system", "content": exchange.system_text})
        messages.append({"role": "user", "content": content})
        body: dict[str, Any] = {
            "model": self.model_name,
            "messages": messages,
            "temperature": exchange.decode.temperature,
            "max_tokens": exchange.decode.max_tokens,
        }
        if exchange.decode.seed is not None:
            body["seed"] = exchange.decode.seed
        return body

    def complete(self, exchange: ChatExchange) -> ChatExchange:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = self._body(exchange)
        last_error: Exception | None = None
        for attempt in range(self.retry.max_attempts):
            if attempt:
                time.sleep(self.retry.backoff_base * (2 ** (attempt - 1)))
            try:
                resp = self._session.post(
                    self.endpoint, json=body, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code in (429,) or resp.status_code >= 500:
                last_error = RequestRejectedError(
                    f"transient status {resp.status_code}", status=resp.status_code
                )
                continue
            if resp.status_code != 200:
                raise RequestRejectedError(
                    f"backend rejected request: {resp.status_code} {resp.text[:200]}",
                    status=resp.status_code,
                )
            try:
                text = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise RequestRejectedError(f"malformed completion body: {exc}") from exc
            if not text:
                raise RequestRejectedError("backend returned an empty completion")
            return exchange.completed(text)
        raise BackendUnavailableError(
            f"backend unavailable after {self.retry.max_attempts} attempts: {last_error}"
        )


class RecordingBackend(Backend):
    """Replays the script when possible, otherwise calls live and records."""

    def __init__(self, live: Backend, store: ScriptStore):
        self.live = live
        self.store = store
        self.model_name = live.model_name
        self.max_in_flight = live.max_in_flight

    def complete(self, exchange: ChatExchange) -> ChatExchange:
        key = script_key(exchange)
        text = self.store.get(key)
        if text is not None:
            return exchange.completed(text)
        done = self.live.complete(exchange)
        self.store.put(key, done.response_text)
        return done


def build_backend(config: BackendConfig) -> Backend:
    if config.kind == "scripted":
        return ScriptedBackend(
            ScriptStore(config.script_path),
            model_name=config.model_name,
            strict=config.strict,
            max_in_flight=config.max_in_flight,
        )
    endpoint = config.endpoint or os.environ.get(ENV_BACKEND_URL)
    api_key = config.api_key or os.environ.get(ENV_BACKEND_KEY)
    assert endpoint is not None  # enforced in BackendConfig
    http = HttpBackend(
        endpoint,
        config.model_name,
        api_key=api_key,
        retry=config.retry,
        max_in_flight=config.max_in_flight,
    )
    if config.record:
        if not config.script_path:
            raise ConfigError("record mode requires script_path")
        return RecordingBackend(http, ScriptStore(config.script_path))
    return http


def complete(exchange: ChatExchange, backend: Backend) -> ChatExchange:
    return backend.complete(exchange)


def complete_batch(
    exchanges: Sequence[ChatExchange],
    backend: Backend,
    max_in_flight: int | None = None,
) -> list[ChatExchange | GatewayError]:
    """Complete a batch, input order preserved, failures as error slots."""
    if not exchanges:
        return []
    cap = max_in_flight or backend.max_in_flight

    def one(exchange: ChatExchange) -> ChatExchange | GatewayError:
        try:
            return backend.complete(exchange)
        except GatewayError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=cap) as pool:
        return list(pool.map(one, exchanges))
