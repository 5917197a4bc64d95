import base64
import json
import threading

import pytest

from storycut.gateway import (
    AgentGateway,
    AgentRequest,
    AgentUnavailable,
    ConfigError,
    MessagePart,
    MockMiss,
    canonical_hash,
    image_part,
    text_part,
)


def req(text="hello", image=b"\x89PNG12345", temperature=0.0, model="gpt-4o", tag=""):
    parts = [text_part(text)]
    if image:
        parts.append(image_part(image))
    return AgentRequest(messages=tuple(parts), temperature=temperature,
                        model_name=model, tag=tag)


def ok_transport(text="fine", usage=(10, 5)):
    body = json.dumps({
        "choices": [{"message": {"content": text}}],
        "usage": {"prompt_tokens": usage[0], "completion_tokens": usage[1]},
    }).encode()

    calls = []

    def transport(url, headers, payload, timeout):
        calls.append((url, headers, payload))
        return 200, body

    transport.calls = calls
    return transport


# -- hashing -------------------------------------------------------------

def test_hash_stable_for_identical_requests():
    assert canonical_hash(req()) == canonical_hash(req())


def test_hash_sensitive_to_image_bytes():
    assert canonical_hash(req(image=b"\x89PNG12345")) != canonical_hash(req(image=b"\x89PNG12346"))


def test_hash_sensitive_to_message_order():
    a = AgentRequest(messages=(text_part("one"), text_part("two")))
    b = AgentRequest(messages=(text_part("two"), text_part("one")))
    assert canonical_hash(a) != canonical_hash(b)


def test_hash_sensitive_to_settings_but_not_tag():
    assert canonical_hash(req(temperature=0.0)) != canonical_hash(req(temperature=0.5))
    assert canonical_hash(req(model="gpt-4o")) != canonical_hash(req(model="other"))
    assert canonical_hash(req(tag="a")) == canonical_hash(req(tag="b"))


def test_request_needs_text_part():
    with pytest.raises(ValueError):
        AgentRequest(messages=(image_part(b"x"),))
    with pytest.raises(ValueError):
        MessagePart(kind="image", data=b"")


# -- mock backend ---------------------------------------------------------

def test_mock_serves_fixture(tmp_path):
    gw = AgentGateway("mock", fixtures_dir=str(tmp_path), strict=True)
    request = req()
    gw.write_fixture(request, "fixture text")
    response = gw.complete(request)
    assert response.text == "fixture text"
    assert response.backend == "mock"


def test_strict_mock_miss(tmp_path):
    gw = AgentGateway("mock", fixtures_dir=str(tmp_path), strict=True)
    with pytest.raises(MockMiss):
        gw.complete(req())


def test_mock_synthesizes_deterministically():
    gw = AgentGateway("mock")
    r = req(tag="structuring")
    first = gw.complete(r)
    second = gw.complete(r)
    assert first.text == second.text
    assert "[Highlight]" in first.text
    # a different request draws a different response
    assert gw.complete(req(text="other", tag="structuring")).text != first.text


# -- replay backend --------------------------------------------------------

def test_replay_requires_cache_dir():
    with pytest.raises(ConfigError):
        AgentGateway("replay")


def test_replay_hits_and_misses(tmp_path):
    cache = str(tmp_path / "cache")
    live = AgentGateway("live", endpoint="http://example", cache_dir=cache,
                        transport=ok_transport("recorded"))
    request = req()
    assert live.complete(request).text == "recorded"

    replay = AgentGateway("replay", cache_dir=cache)
    response = replay.complete(request)
    assert response.text == "recorded"
    assert response.backend == "cache"
    with pytest.raises(MockMiss):
        replay.complete(req(text="never seen"))


# -- live backend -----------------------------------------------------------

def test_live_roundtrip_and_cache(tmp_path):
    transport = ok_transport("live answer")
    gw = AgentGateway("live", endpoint="http://example", cache_dir=str(tmp_path),
                      transport=transport)
    request = req()
    first = gw.complete(request)
    assert first.text == "live answer"
    assert first.backend == "live"
    assert first.usage == (10, 5)

    second = gw.complete(request)
    assert second.backend == "cache"
    assert second.text == "live answer"
    assert len(transport.calls) == 1  # exactly one network call


def test_live_wire_body_shape():
    transport = ok_transport()
    gw = AgentGateway("live", endpoint="http://example/v1", api_key="secret",
                      transport=transport)
    gw.complete(req(text="describe", image=b"IMAGEBYTES"))
    url, headers, payload = transport.calls[0]
    assert url == "http://example/v1/chat/completions"
    assert headers["Authorization"] == "Bearer secret"
    body = json.loads(payload)
    assert body["model"] == "gpt-4o"
    assert body["temperature"] == 0.0
    content = body["messages"][0]["content"]
    assert content[0] == {"type": "text", "text": "describe"}
    expected_b64 = base64.b64encode(b"IMAGEBYTES").decode()
    assert content[1]["image_url"]["url"] == f"data:image/png;base64,{expected_b64}"


def test_live_4xx_is_config_error_never_retried():
    calls = []

    def transport(url, headers, payload, timeout):
        calls.append(1)
        return 401, b'{"error": "bad key"}'

    gw = AgentGateway("live", endpoint="http://example", transport=transport)
    with pytest.raises(ConfigError):
        gw.complete(req())
    assert len(calls) == 1


def test_live_retries_with_backoff_then_unavailable():
    calls = []
    naps = []

    def transport(url, headers, payload, timeout):
        calls.append(1)
        raise OSError("connection refused")

    gw = AgentGateway("live", endpoint="http://example", transport=transport,
                      retry_limit=3, sleeper=naps.append)
    with pytest.raises(AgentUnavailable):
        gw.complete(req())
    assert len(calls) == 4  # initial + 3 retries
    assert naps == [0.5, 1.0, 2.0]  # exponential backoff


def test_live_5xx_retries_then_succeeds():
    answers = [500, 503, 200]
    body = json.dumps({"choices": [{"message": {"content": "eventually"}}],
                       "usage": {}}).encode()

    def transport(url, headers, payload, timeout):
        status = answers.pop(0)
        return status, body if status == 200 else b"oops"

    gw = AgentGateway("live", endpoint="http://example", transport=transport,
                      sleeper=lambda s: None)
    assert gw.complete(req()).text == "eventually"


def test_live_needs_endpoint(monkeypatch):
    monkeypatch.delenv("STORYCUT_ENDPOINT", raising=False)
    with pytest.raises(ConfigError):
        AgentGateway("live")


def test_concurrent_completes_are_safe(tmp_path):
    transport = ok_transport("answer")
    gw = AgentGateway("live", endpoint="http://example", cache_dir=str(tmp_path),
                      transport=transport, in_flight=4)
    requests = [req(text=f"q{i}") for i in range(16)]
    results = [None] * 16

    def work(i):
        results[i] = gw.complete(requests[i]).text

    threads = [threading.Thread(target=work, args=(i,)) for i in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(r == "answer" for r in results)
    assert len(transport.calls) == 16
