"""Uniform client for multimodal chat-completion endpoints.

Backends:
  live    JSON-over-HTTP chat completions (see README for the exact wire
          shape); every response is cached under a content hash of the
          canonicalized request, so identical requests never hit the
          network twice.
  replay  serve strictly from a cache directory recorded by a live run.
  mock    serve from a fixture directory with the same layout; unknown
          requests raise MockMiss in strict mode, otherwise a deterministic
          synthesizer derives a parseable response from the request hash.

Cache/fixture layout: <dir>/<hash>/request.json + <dir>/<hash>/response.txt.
response.txt is the verbatim completion text; request.json records the text
parts and image digests for inspection and is not needed to serve a hit.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Callable, Optional

from . import synthetic

log = logging.getLogger(__name__)

ENDPOINT_ENV = "STORYCUT_ENDPOINT"
API_KEY_ENV = "STORYCUT_API_KEY"

DEFAULT_MODEL = "gpt-4o"
DEFAULT_IN_FLIGHT = 8
DEFAULT_RETRY_LIMIT = 3
BACKOFF_BASE = 0.5  # seconds; doubles per retry


class GatewayError(RuntimeError):
    pass


class AgentUnavailable(GatewayError):
    """Transport kept failing after all retries (or too many clips failed)."""


class ConfigError(GatewayError):
    """The endpoint rejected the request (HTTP 4xx) or setup is incomplete;
    never retried."""


class MockMiss(GatewayError):
    """No fixture/cache entry for this request hash in strict replay."""


@dataclass(frozen=True)
class MessagePart:
    kind: str  # "text" | "image"
    text: str = ""
    data: bytes = b""
    media_type: str = "image/png"

    def __post_init__(self):
        if self.kind not in ("text", "image"):
            raise ValueError(f"unknown part kind {self.kind!r}")
        if self.kind == "image" and not self.data:
            raise ValueError("image part with empty payload")


def text_part(text: str) -> MessagePart:
    return MessagePart(kind="text", text=text)


def image_part(data: bytes, media_type: str = "image/png") -> MessagePart:
    return MessagePart(kind="image", data=data, media_type=media_type)


@dataclass(frozen=True)
class AgentRequest:
    messages: tuple[MessagePart, ...]
    temperature: float = 0.0
    max_output: int = 1024
    model_name: str = DEFAULT_MODEL
    tag: str = ""  # stage hint for the synthetic mock; excluded from the hash

    def __post_init__(self):
        if not any(p.kind == "text" for p in self.messages):
            raise ValueError("request needs at least one text part")


@dataclass(frozen=True)
class AgentResponse:
    text: str
    usage: tuple[int, int] = (0, 0)  # (input_tokens, output_tokens)
    backend: str = "mock"  # live | cache | mock

    def __post_init__(self):
        if not self.text:
            raise ValueError("successful response must carry text")


def canonical_hash(req: AgentRequest) -> str:
    """Stable content hash of a request: sensitive to message order, text,
    image bytes, temperature, max_output and model name; nothing else."""
    h = hashlib.sha256()
    h.update(b"model\x00" + req.model_name.encode("utf-8") + b"\x00")
    h.update(b"temperature\x00" + repr(float(req.temperature)).encode("ascii") + b"\x00")
    h.update(b"max_output\x00" + str(int(req.max_output)).encode("ascii") + b"\x00")
    for part in req.messages:
        if part.kind == "text":
            h.update(b"text\x00" + part.text.encode("utf-8") + b"\x00")
        else:
            h.update(b"image\x00" + part.media_type.encode("utf-8") + b"\x00")
            h.update(hashlib.sha256(part.data).digest())
    return h.hexdigest()


def _wire_body(req: AgentRequest) -> bytes:
    content = []
    for part in req.messages:
        if part.kind == "text":
            content.append({"type": "text", "text": part.text})
        else:
            b64 = base64.b64encode(part.data).decode("ascii")
            content.append({
                "type": "image_url",
                "image_url": {"url": f"data:{part.media_type};base64,{b64}"},
            })
    body = {
        "model": req.model_name,
        "temperature": req.temperature,
        "max_tokens": req.max_output,
        "messages": [{"role": "user", "content": content}],
    }
    return json.dumps(body, ensure_ascii=False).encode("utf-8")


def _urllib_transport(url: str, headers: dict, body: bytes, timeout: float) -> tuple[int, bytes]:
    request = urllib.request.Request(url, data=body, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(request, timeout=timeout) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        return exc.code, exc.read()


Transport = Callable[[str, dict, bytes, float], tuple[int, bytes]]


class AgentGateway:
    """Thread-safe completion client with caching, retries and mock/replay.

    Callers may issue concurrent complete() calls; a semaphore bounds the
    number of in-flight network requests.
    """

    def __init__(self, backend: str = "mock", *,
                 endpoint: Optional[str] = None,
                 api_key: Optional[str] = None,
                 cache_dir: Optional[str] = None,
                 fixtures_dir: Optional[str] = None,
                 strict: bool = False,
                 retry_limit: int = DEFAULT_RETRY_LIMIT,
                 in_flight: int = DEFAULT_IN_FLIGHT,
                 timeout: float = 120.0,
                 transport: Transport = _urllib_transport,
                 sleeper: Callable[[float], None] = time.sleep):
        if backend not in ("live", "mock", "replay"):
            raise ConfigError(f"unknown backend {backend!r}")
        self.backend = backend
        self.endpoint = endpoint if endpoint is not None else os.environ.get(ENDPOINT_ENV)
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.cache_dir = cache_dir
        self.fixtures_dir = fixtures_dir
        self.strict = strict
        self.retry_limit = retry_limit
        self.timeout = timeout
        self.transport = transport
        self.sleeper = sleeper
        self._semaphore = threading.Semaphore(in_flight)
        self._io_lock = threading.Lock()
        self.network_calls = 0

        if backend == "live" and not self.endpoint:
            raise ConfigError(f"live backend needs an endpoint ({ENDPOINT_ENV})")
        if backend == "replay" and not cache_dir:
            raise ConfigError("replay backend needs a cache_dir")

    # -- store ---------------------------------------------------------

    def _entry_dir(self, root: str, request_hash: str) -> str:
        return os.path.join(root, request_hash)

    def _lookup(self, root: Optional[str], request_hash: str) -> Optional[str]:
        if not root:
            return None
        path = os.path.join(root, request_hash, "response.txt")
        if not os.path.exists(path):
            return None
        with open(path, encoding="utf-8") as fh:
            return fh.read()

    def _store(self, root: str, request_hash: str, req: AgentRequest, text: str) -> None:
        entry = self._entry_dir(root, request_hash)
        with self._io_lock:
            os.makedirs(entry, exist_ok=True)
            record = {
                "model": req.model_name,
                "temperature": req.temperature,
                "max_output": req.max_output,
                "parts": [
                    {"kind": "text", "text": p.text} if p.kind == "text"
                    else {"kind": "image", "media_type": p.media_type,
                          "sha256": hashlib.sha256(p.data).hexdigest()}
                    for p in req.messages
                ],
            }
            tmp = os.path.join(entry, ".request.tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(record, fh, ensure_ascii=False, indent=2)
            os.replace(tmp, os.path.join(entry, "request.json"))
            tmp = os.path.join(entry, ".response.tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                fh.write(text)
            os.replace(tmp, os.path.join(entry, "response.txt"))

    def write_fixture(self, req: AgentRequest, text: str) -> str:
        """Author a mock fixture for this request; returns its hash."""
        if not self.fixtures_dir:
            raise ConfigError("gateway has no fixtures_dir")
        request_hash = canonical_hash(req)
        self._store(self.fixtures_dir, request_hash, req, text)
        return request_hash

    # -- completion ----------------------------------------------------

    def complete(self, req: AgentRequest) -> AgentResponse:
        request_hash = canonical_hash(req)

        if self.backend == "mock":
            fixture = self._lookup(self.fixtures_dir, request_hash)
            if fixture is not None:
                return AgentResponse(text=fixture, backend="mock")
            if self.strict:
                raise MockMiss(f"no fixture for request {request_hash}")
            return AgentResponse(text=synthetic.synthesize(req, request_hash), backend="mock")

        if self.backend == "replay":
            cached = self._lookup(self.cache_dir, request_hash)
            if cached is None:
                raise MockMiss(f"no cached response for request {request_hash}")
            return AgentResponse(text=cached, backend="cache")

        # live
        cached = self._lookup(self.cache_dir, request_hash)
        if cached is not None:
            return AgentResponse(text=cached, backend="cache")
        text, usage = self._call_live(req)
        if self.cache_dir:
            self._store(self.cache_dir, request_hash, req, text)
        return AgentResponse(text=text, usage=usage, backend="live")

    def _call_live(self, req: AgentRequest) -> tuple[str, tuple[int, int]]:
        url = self.endpoint.rstrip("/") + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = _wire_body(req)

        last_error: Optional[Exception] = None
        for attempt in range(self.retry_limit + 1):
            if attempt:
                self.sleeper(BACKOFF_BASE * (2 ** (attempt - 1)))
            try:
                with self._semaphore:
                    with self._io_lock:
                        self.network_calls += 1
                    status, payload = self.transport(url, headers, body, self.timeout)
            except Exception as exc:  # noqa: BLE001 - transport errors retry
                last_error = exc
                log.warning("transport error (attempt %d): %s", attempt + 1, exc)
                continue
            if 400 <= status < 500:
                raise ConfigError(f"endpoint rejected request: HTTP {status}: "
                                  f"{payload[:200].decode('utf-8', 'replace')}")
            if status != 200:
                last_error = GatewayError(f"HTTP {status}")
                log.warning("HTTP %d (attempt %d)", status, attempt + 1)
                continue
            try:
                parsed = json.loads(payload)
                text = parsed["choices"][0]["message"]["content"] or ""
                usage_raw = parsed.get("usage") or {}
                usage = (int(usage_raw.get("prompt_tokens", 0)),
                         int(usage_raw.get("completion_tokens", 0)))
            except (KeyError, IndexError, ValueError, TypeError) as exc:
                last_error = exc
                log.warning("malformed response body (attempt %d): %s", attempt + 1, exc)
                continue
            if not text:
                last_error = GatewayError("empty completion text")
                continue
            return text, usage
        raise AgentUnavailable(f"endpoint unreachable after {self.retry_limit + 1} attempts: "
                               f"{last_error}")


def gateway_from_options(backend: str, *, cache_dir: Optional[str] = None,
                         fixtures_dir: Optional[str] = None, strict: bool = False,
                         retry_limit: int = DEFAULT_RETRY_LIMIT,
                         in_flight: int = DEFAULT_IN_FLIGHT) -> AgentGateway:
    """CLI-facing constructor; endpoint and credential come from env vars."""
    return AgentGateway(backend, cache_dir=cache_dir, fixtures_dir=fixtures_dir,
                        strict=strict, retry_limit=retry_limit, in_flight=in_flight)
