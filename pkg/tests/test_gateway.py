from __future__ import annotations

import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from mmfr.errors import (
    BackendUnavailableError,
    ConfigError,
    GatewayError,
    RequestRejectedError,
    ScriptMissError,
)
from mmfr.gateway import (
    BackendConfig,
    ChatExchange,
    DecodeParams,
    HttpBackend,
    RecordingBackend,
    RetryPolicy,
    ScriptedBackend,
    ScriptStore,
    build_backend,
    complete_batch,
    script_key,
)
from tests.conftest import png_bytes


def exchange(**overrides):
    base = dict(user_text="hello", decode=DecodeParams(temperature=0.0, max_tokens=64, seed=1))
    base.update(overrides)
    return ChatExchange(**base)


def test_exchange_requires_user_text():
    with pytest.raises(ValueError):
        ChatExchange(user_text="")


def test_script_key_deterministic_and_sensitive():
    a = exchange()
    assert script_key(a) == script_key(exchange())
    assert script_key(a) != script_key(exchange(user_text="other"))
    assert script_key(a) != script_key(exchange(system_text="sys"))
    assert script_key(a) != script_key(
        exchange(decode=DecodeParams(temperature=0.0, max_tokens=64, seed=2))
    )
    img = png_bytes()
    with_img = exchange(image=img)
    assert script_key(a) != script_key(with_img)
    assert script_key(with_img) != script_key(exchange(image=png_bytes(9, 9)))


def test_scripted_backend_replays_and_misses(script_store):
    backend = ScriptedBackend(script_store)
    ex = exchange()
    script_store.plant(ex, "canned reply")
    assert backend.complete(ex).response_text == "canned reply"
    with pytest.raises(ScriptMissError) as err:
        backend.complete(exchange(user_text="unknown"))
    assert script_key(exchange(user_text="unknown")) in str(err.value)
    lenient = ScriptedBackend(script_store, strict=False)
    assert lenient.complete(exchange(user_text="unknown")).response_text == ""


def test_batch_preserves_order_and_isolates_failures(script_store):
    backend = ScriptedBackend(script_store)
    batch = [exchange(user_text=f"q{i}") for i in range(10)]
    for i, ex in enumerate(batch):
        if i != 4:
            script_store.plant(ex, f"r{i}")
    results = complete_batch(batch, backend, max_in_flight=3)
    assert len(results) == 10
    for i, res in enumerate(results):
        if i == 4:
            assert isinstance(res, GatewayError)
        else:
            assert isinstance(res, ChatExchange)
            assert res.response_text == f"r{i}"


def test_batch_empty():
    backend = ScriptedBackend(ScriptStore("unused-path"), strict=False)
    assert complete_batch([], backend) == []


def test_batch_concurrency_cap(script_store):
    backend = ScriptedBackend(script_store, latency=0.02, max_in_flight=3)
    batch = [exchange(user_text=f"q{i}") for i in range(12)]
    for i, ex in enumerate(batch):
        script_store.plant(ex, f"r{i}")
    results = complete_batch(batch, backend)
    assert all(isinstance(r, ChatExchange) for r in results)
    assert backend.peak_in_flight <= 3
    assert backend.peak_in_flight >= 2  # overlap actually happened


def test_scripted_batch_determinism(script_store):
    backend = ScriptedBackend(script_store)
    batch = [exchange(user_text=f"q{i}") for i in range(5)]
    for i, ex in enumerate(batch):
        script_store.plant(ex, f"r{i}")
    first = [r.response_text for r in complete_batch(batch, backend)]
    second = [r.response_text for r in complete_batch(batch, backend)]
    assert first == second


def test_backend_config_validation(tmp_path, monkeypatch):
    monkeypatch.delenv("MMFR_BACKEND_URL", raising=False)
    with pytest.raises(ConfigError):
        BackendConfig(kind="scripted")
    with pytest.raises(ConfigError):
        BackendConfig(kind="http")
    with pytest.raises(ConfigError):
        BackendConfig(kind="weird")
    cfg = BackendConfig(kind="scripted", script_path=str(tmp_path / "s"))
    assert isinstance(build_backend(cfg), ScriptedBackend)


def test_backend_config_env_endpoint(monkeypatch):
    monkeypatch.setenv("MMFR_BACKEND_URL", "http://example.test/v1")
    monkeypatch.setenv("MMFR_BACKEND_KEY", "sekrit")
    cfg = BackendConfig(kind="http", model_name="m")
    backend = build_backend(cfg)
    assert isinstance(backend, HttpBackend)
    assert backend.endpoint == "http://example.test/v1/chat/completions"
    assert backend.api_key == "sekrit"


class _FakeServer:
    """Tiny OpenAI-compatible endpoint that can fail N times first."""

    def __init__(self, fail_first: int = 0, reject_status: int | None = None):
        self.requests: list[dict] = []
        self.fail_remaining = fail_first
        self.reject_status = reject_status
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers["Content-Length"])
                body = json.loads(self.rfile.read(length))
                outer.requests.append(
                    {"path": self.path, "body": body, "auth": self.headers.get("Authorization")}
                )
                if outer.reject_status is not None:
                    self.send_response(outer.reject_status)
                    self.end_headers()
                    return
                if outer.fail_remaining > 0:
                    outer.fail_remaining -= 1
                    self.send_response(503)
                    self.end_headers()
                    return
                reply = {"choices": [{"message": {"role": "assistant", "content": "pong"}}]}
                data = json.dumps(reply).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = HTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}/v1"

    def stop(self):
        self.server.shutdown()


@pytest.fixture
def fake_server():
    servers = []

    def factory(fail_first=0, reject_status=None):
        s = _FakeServer(fail_first, reject_status)
        servers.append(s)
        return s

    yield factory
    for s in servers:
        s.stop()


def test_http_backend_wire_protocol(fake_server):
    server = fake_server()
    backend = HttpBackend(server.url, "test-model", api_key="tok")
    ex = exchange(system_text="be brief", image=png_bytes())
    done = backend.complete(ex)
    assert done.response_text == "pong"
    req = server.requests[0]
    assert req["path"].endswith("/chat/completions")
    assert req["auth"] == "Bearer tok"
    body = req["body"]
    assert body["model"] == "test-model"
    assert body["temperature"] == 0.0
    assert body["max_tokens"] == 64
    assert body["seed"] == 1
    assert body["messages"][0] == {"role": "system", "content": "be brief"}
    user = body["messages"][1]
    assert user["role"] == "user"
    assert user["content"][0] == {"type": "text", "text": "hello"}
    image_url = user["content"][1]["image_url"]["url"]
    prefix = "data:image/png;base64,"
    assert image_url.startswith(prefix)
    assert base64.b64decode(image_url[len(prefix):]) == ex.image


def test_http_backend_retries_then_succeeds(fake_server):
    server = fake_server(fail_first=2)
    backend = HttpBackend(
        server.url, "m", retry=RetryPolicy(max_attempts=3, backoff_base=0.01)
    )
    assert backend.complete(exchange()).response_text == "pong"
    assert len(server.requests) == 3


def test_http_backend_exhausts_retries(fake_server):
    server = fake_server(fail_first=5)
    backend = HttpBackend(
        server.url, "m", retry=RetryPolicy(max_attempts=2, backoff_base=0.01)
    )
    with pytest.raises(BackendUnavailableError):
        backend.complete(exchange())
    assert len(server.requests) == 2


def test_http_backend_client_error_not_retried(fake_server):
    server = fake_server(reject_status=400)
    backend = HttpBackend(
        server.url, "m", retry=RetryPolicy(max_attempts=3, backoff_base=0.01)
    )
    with pytest.raises(RequestRejectedError) as err:
        backend.complete(exchange())
    assert err.value.status == 400
    assert len(server.requests) == 1


def test_recording_backend_captures_then_replays(fake_server, tmp_path):
    server = fake_server()
    store = ScriptStore(tmp_path / "rec")
    backend = RecordingBackend(HttpBackend(server.url, "m"), store)
    ex = exchange()
    assert backend.complete(ex).response_text == "pong"
    assert len(server.requests) == 1
    # second call replays without touching the network
    assert backend.complete(ex).response_text == "pong"
    assert len(server.requests) == 1
    assert store.get(script_key(ex)) == "pong"
