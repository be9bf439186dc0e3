from __future__ import annotations

import hashlib
import json
import threading

import pytest

from storygen.backend import (
    AuthError,
    ChatRequest,
    HttpBackend,
    RequestRejected,
    ScriptedBackend,
    ScriptExhausted,
    TransportError,
    dump_script,
    load_script,
)

from conftest import openai_body


def req(role: str = "starter", text: str = "hello", system: str = "") -> ChatRequest:
    return ChatRequest(role_tag=role, user_text=text, system_text=system)


def test_request_validation() -> None:
    with pytest.raises(ValueError):
        ChatRequest(role_tag="nobody", user_text="x")
    with pytest.raises(ValueError):
        ChatRequest(role_tag="starter", user_text="")
    with pytest.raises(ValueError):
        ChatRequest(role_tag="starter", user_text="x", temperature=2.5)
    with pytest.raises(ValueError):
        ChatRequest(role_tag="starter", user_text="x", max_tokens=0)


def test_scripted_echo_then_exhausted() -> None:
    backend = ScriptedBackend([("starter", "X")])
    assert backend.complete(req()).text == "X"
    with pytest.raises(ScriptExhausted):
        backend.complete(req())


def test_scripted_fifo_per_role_ignores_interleaving() -> None:
    backend = ScriptedBackend([("writer_sim", "w1"), ("reader_sim", "r1"), ("writer_sim", "w2")])
    assert backend.complete(req("writer_sim")).text == "w1"
    assert backend.complete(req("writer_sim")).text == "w2"
    assert backend.complete(req("reader_sim")).text == "r1"
    assert backend.remaining() == 0


def test_scripted_injected_error_is_raised_and_logged() -> None:
    backend = ScriptedBackend([("starter", TransportError("boom")), ("starter", "ok")])
    with pytest.raises(TransportError):
        backend.complete(req())
    assert backend.complete(req()).text == "ok"
    log = backend.call_log()
    assert len(log) == 2
    assert log[0].response_digest is None and "TransportError" in log[0].error
    assert log[1].error is None


def test_call_log_empty_and_ordered() -> None:
    backend = ScriptedBackend([("starter", "a"), ("judge", "b")])
    assert backend.call_log() == []
    backend.complete(req("starter"))
    backend.complete(req("judge"))
    assert [r.role_tag for r in backend.call_log()] == ["starter", "judge"]


def test_call_log_digests_match_independent_hashes() -> None:
    backend = ScriptedBackend([("starter", "same"), ("starter", "same"), ("starter", "other")])
    request = req(text="identical prompt", system="sys")
    for _ in range(3):
        backend.complete(request)
    log = backend.call_log()
    expected_req = hashlib.sha256(b"sys\n\nidentical prompt").hexdigest()
    assert [r.request_digest for r in log] == [expected_req] * 3
    assert log[0].response_digest == hashlib.sha256(b"same").hexdigest()
    assert log[0].response_digest == log[1].response_digest
    assert log[2].response_digest == hashlib.sha256(b"other").hexdigest()
    assert log[1].response_digest != log[2].response_digest


def test_scripted_determinism_across_instances() -> None:
    script = [("writer_sim", f"w{i}") for i in range(5)] + [("reader_sim", f"r{i}") for i in range(5)]
    roles = ["writer_sim", "reader_sim"] * 5

    def replay() -> list[str]:
        backend = ScriptedBackend(script)
        return [backend.complete(req(r)).text for r in roles]

    assert replay() == replay()


def test_scripted_concurrent_consumers_each_get_one_entry() -> None:
    backend = ScriptedBackend([("judge", str(i)) for i in range(200)])
    got: list[str] = []
    lock = threading.Lock()

    def worker() -> None:
        for _ in range(25):
            text = backend.complete(req("judge")).text
            with lock:
                got.append(text)

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(got, key=int) == [str(i) for i in range(200)]
    assert len(backend.call_log()) == 200


def test_cursor_restore_skips_consumed_entries() -> None:
    script = [("starter", "s0"), ("writer_sim", "w0"), ("writer_sim", "w1")]
    first = ScriptedBackend(script)
    first.complete(req("starter"))
    first.complete(req("writer_sim"))
    second = ScriptedBackend(script)
    second.restore_cursor(first.cursor())
    assert second.complete(req("writer_sim")).text == "w1"
    with pytest.raises(ValueError):
        second.restore_cursor({"writer_sim": 0})


def test_script_file_roundtrip(tmp_path) -> None:
    path = tmp_path / "script.json"
    dump_script([("starter", "A"), ("ender", "B")], path)
    assert json.loads(path.read_text()) == [
        {"role_tag": "starter", "response": "A"},
        {"role_tag": "ender", "response": "B"},
    ]
    assert load_script(path) == [("starter", "A"), ("ender", "B")]
    path.write_text(json.dumps([{"role_tag": "starter", "error": "transport"}]))
    backend = ScriptedBackend.from_file(path)
    with pytest.raises(TransportError):
        backend.complete(req())
    path.write_text(json.dumps([{"role_tag": "wizard", "response": "x"}]))
    with pytest.raises(ValueError):
        ScriptedBackend.from_file(path)


def _http(stub, **kwargs) -> HttpBackend:
    sleeps: list[float] = []
    backend = HttpBackend(stub.url, "test-model", api_key="sk-test", sleep=sleeps.append, **kwargs)
    backend.sleeps = sleeps
    return backend


def test_http_parses_stub_content_byte_for_byte(stub_server) -> None:
    content = "Once upon a time \u2014 “quotes”, ünïcödé and\nnewlines."
    stub_server.responses.append((200, openai_body(content)))
    backend = _http(stub_server)
    resp = backend.complete(ChatRequest("starter", "write", system_text="be brief", temperature=0.3, max_tokens=55))
    assert resp.text.encode("utf-8") == content.encode("utf-8")
    assert resp.token_usage == (11, 7)
    sent = stub_server.requests[0]
    assert sent["model"] == "test-model"
    assert sent["messages"] == [{"role": "system", "content": "be brief"}, {"role": "user", "content": "write"}]
    assert sent["temperature"] == 0.3 and sent["max_tokens"] == 55
    assert stub_server.headers[0]["Authorization"] == "Bearer sk-test"


def test_http_anthropic_shape(stub_server) -> None:
    stub_server.responses.append(
        (200, {"content": [{"type": "text", "text": "hi there"}], "usage": {"input_tokens": 3, "output_tokens": 2}})
    )
    backend = _http(stub_server, vendor="anthropic")
    resp = backend.complete(req(system="sys"))
    assert resp.text == "hi there" and resp.token_usage == (3, 2)
    sent = stub_server.requests[0]
    assert sent["system"] == "sys" and sent["messages"] == [{"role": "user", "content": "hello"}]
    assert stub_server.headers[0]["x-api-key"] == "sk-test"


def test_http_retries_5xx_then_succeeds_with_backoff(stub_server) -> None:
    stub_server.responses += [(503, {}), (429, {}), (200, openai_body("ok"))]
    backend = _http(stub_server)
    assert backend.complete(req()).text == "ok"
    assert backend.attempts == 3
    assert backend.sleeps == [1.0, 2.0]


@pytest.mark.parametrize("max_retries", [0, 1, 3])
def test_http_retry_bound(stub_server, max_retries: int) -> None:
    stub_server.responses += [(500, {})] * 10
    backend = _http(stub_server, max_retries=max_retries)
    with pytest.raises(TransportError):
        backend.complete(req())
    assert backend.attempts == 1 + max_retries
    assert len(stub_server.requests) == 1 + max_retries
    log = backend.call_log()
    assert len(log) == 1 and log[0].response_digest is None and log[0].error.startswith("TransportError")


def test_http_auth_error_is_not_retried(stub_server) -> None:
    stub_server.responses += [(401, {"error": "bad key"}), (200, openai_body("never"))]
    backend = _http(stub_server)
    with pytest.raises(AuthError):
        backend.complete(req())
    assert backend.attempts == 1


def test_http_other_4xx_rejected(stub_server) -> None:
    stub_server.responses.append((400, {"error": "bad request"}))
    with pytest.raises(RequestRejected):
        _http(stub_server).complete(req())


def test_http_connection_refused_is_transport_error() -> None:
    sleeps: list[float] = []
    backend = HttpBackend("http://127.0.0.1:9/v1/chat/completions", "m", api_key="k", max_retries=2, sleep=sleeps.append)
    with pytest.raises(TransportError):
        backend.complete(req())
    assert backend.attempts == 3 and sleeps == [1.0, 2.0]


def test_http_reads_key_from_env(stub_server, monkeypatch) -> None:
    monkeypatch.setenv("MY_KEY", "env-secret")
    stub_server.responses.append((200, openai_body("ok")))
    backend = HttpBackend(stub_server.url, "m", api_key_env="MY_KEY")
    backend.complete(req())
    assert stub_server.headers[0]["Authorization"] == "Bearer env-secret"
