import json
import math
import threading
from contextlib import contextmanager
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from zoomeye import (
    HttpChatBackend,
    OracleRequest,
    ProtocolError,
    TransportError,
    yes_probability,
)
from conftest import gradient_image


class _StubHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers.get("Content-Length", "0"))
        body = json.loads(self.rfile.read(length)) if length else {}
        self.server.captured.append({"path": self.path, "body": body})
        if self.server.script:
            status, payload = self.server.script.pop(0)
        else:
            status, payload = 200, completion_payload("Yes")
        raw = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def log_message(self, *args):
        pass


@contextmanager
def stub_server(script):
    server = HTTPServer(("127.0.0.1", 0), _StubHandler)
    server.script = list(script)
    server.captured = []
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server, f"http://127.0.0.1:{server.server_address[1]}"
    finally:
        server.shutdown()
        thread.join(timeout=5)
        server.server_close()


def completion_payload(text, top_masses=None):
    choice = {"message": {"role": "assistant", "content": text}}
    if top_masses is not None:
        choice["logprobs"] = {
            "content": [
                {
                    "token": text,
                    "logprob": 0.0,
                    "top_logprobs": [
                        {"token": token, "logprob": math.log(p)}
                        for token, p in top_masses.items()
                    ],
                }
            ]
        }
    return {"choices": [choice]}


def _backend(url, **kwargs):
    kwargs.setdefault("sleep", lambda _delay: None)
    return HttpChatBackend(url, model="test-model", **kwargs)


def test_yes_probability_against_stub_matches_hand_normalization():
    payload = completion_payload("Yes", {"Yes": 0.72, "No": 0.08, "the": 0.20})
    with stub_server([(200, payload)]) as (server, url):
        backend = _backend(url)
        p = yes_probability(backend, OracleRequest((), "Is there a cat? Answer Yes or No."))
    assert abs(p - 0.72 / 0.80) < 1e-9


def test_request_wire_format():
    image = gradient_image(8, 8)
    payload = completion_payload("Yes", {"Yes": 1.0})
    with stub_server([(200, payload)]) as (server, url):
        backend = _backend(url, api_key="secret-key")
        yes_probability(backend, OracleRequest((image,), "Is there a cat? Answer Yes or No."))
    request = server.captured[0]
    assert request["path"] == "/chat/completions"
    body = request["body"]
    assert body["model"] == "test-model"
    assert body["temperature"] == 0
    assert body["logprobs"] is True
    assert body["top_logprobs"] == 20
    assert body["max_tokens"] == 1
    content = body["messages"][-1]["content"]
    assert content[0]["type"] == "image_url"
    assert content[0]["image_url"]["url"].startswith("data:image/png;base64,")
    assert content[-1] == {"type": "text", "text": "Is there a cat? Answer Yes or No."}


def test_history_turns_serialize_as_plain_text_messages():
    payload = completion_payload("the following objects: dog.")
    with stub_server([(200, payload)]) as (server, url):
        backend = _backend(url)
        request = OracleRequest(
            (),
            "Question: Where is the dog? If you want to answer the question, "
            "which objects' information do you need?",
            max_new_tokens=256,
            want_logprobs=False,
            history=(("user", "q1"), ("assistant", "a1")),
        )
        backend.complete(request)
    messages = server.captured[0]["body"]["messages"]
    assert messages[0] == {"role": "user", "content": "q1"}
    assert messages[1] == {"role": "assistant", "content": "a1"}
    assert messages[2]["role"] == "user"
    assert isinstance(messages[2]["content"], str)
    assert "logprobs" not in server.captured[0]["body"]


def test_retry_backoff_on_injected_503s():
    payload = completion_payload("Yes", {"Yes": 1.0})
    script = [(503, {"error": "busy"}), (503, {"error": "busy"}), (200, payload)]
    sleeps = []
    with stub_server(script) as (server, url):
        backend = HttpChatBackend(url, model="m", sleep=sleeps.append)
        p = yes_probability(backend, OracleRequest((), "p?"))
    assert p == 1.0
    assert len(server.captured) == 3
    assert sleeps == [0.5, 1.0]


def test_transport_error_after_exhausted_attempts():
    script = [(503, {"error": "busy"})] * 3
    sleeps = []
    with stub_server(script) as (server, url):
        backend = HttpChatBackend(url, model="m", sleep=sleeps.append)
        with pytest.raises(TransportError) as excinfo:
            backend.complete(OracleRequest((), "p?"))
    assert excinfo.value.attempts == 3
    assert len(server.captured) == 3
    assert sleeps == [0.5, 1.0]


def test_connection_refused_is_transport_error():
    backend = _backend("http://127.0.0.1:1")  # nothing listens there
    with pytest.raises(TransportError) as excinfo:
        backend.complete(OracleRequest((), "p?"))
    assert excinfo.value.attempts == 3


def test_malformed_body_is_protocol_error():
    with stub_server([(200, b"this is not json")]) as (server, url):
        backend = _backend(url)
        with pytest.raises(ProtocolError):
            backend.complete(OracleRequest((), "p?"))


def test_missing_choices_is_protocol_error():
    with stub_server([(200, {"not_choices": []})]) as (server, url):
        backend = _backend(url)
        with pytest.raises(ProtocolError):
            backend.complete(OracleRequest((), "p?"))


def test_client_error_is_protocol_error_without_retry():
    with stub_server([(404, {"error": "no such model"})]) as (server, url):
        backend = _backend(url)
        with pytest.raises(ProtocolError):
            backend.complete(OracleRequest((), "p?"))
    assert len(server.captured) == 1


def test_from_env(monkeypatch):
    monkeypatch.setenv("ZOOMEYE_API_BASE", "http://example.invalid/v1/")
    monkeypatch.setenv("ZOOMEYE_MODEL", "served")
    monkeypatch.setenv("ZOOMEYE_API_KEY", "k")
    backend = HttpChatBackend.from_env()
    assert backend.base_url == "http://example.invalid/v1"
    assert backend.model == "served"
    assert backend.api_key == "k"
    monkeypatch.delenv("ZOOMEYE_API_BASE")
    with pytest.raises(ValueError):
        HttpChatBackend.from_env()
