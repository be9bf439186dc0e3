"""Chat-completion backends shared by every agent.

Two implementations sit behind the same ``complete()`` call: an HTTP client
speaking OpenAI-style (or Anthropic-style) chat JSON with bounded retries, and
a scripted backend that replays canned responses FIFO per role tag so the whole
pipeline can run offline and deterministically.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import defaultdict, deque
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import httpx

logger = logging.getLogger(__name__)

ROLE_TAGS = frozenset(
    {
        "starter",
        "plain_outline",
        "twist_outline",
        "writer_sim",
        "reader_sim",
        "writer_edit",
        "ender",
        "memory_summarizer",
        "kg_extract",
        "kg_info",
        "kg_abstract",
        "kg_obstacle",
        "judge",
        "scorer",
    }
)

DEFAULT_API_KEY_ENV = "STORYGEN_API_KEY"
DEFAULT_BACKOFF = (1.0, 2.0, 4.0)


class BackendError(Exception):
    """Base class for failures raised by ``complete()``."""


class TransportError(BackendError):
    """Network failure or HTTP 429/5xx that survived every retry."""


class AuthError(BackendError):
    """The endpoint rejected the credential (HTTP 401/403)."""


class RequestRejected(BackendError):
    """Non-retryable 4xx other than an auth failure."""


class ResponseFormatError(BackendError):
    """The endpoint answered 2xx but the body is not a chat completion."""


class ScriptExhausted(BackendError):
    """The scripted backend has no entry left for the requested role tag."""


@dataclass(frozen=True)
class ChatRequest:
    role_tag: str
    user_text: str
    system_text: str = ""
    temperature: float = 0.7
    max_tokens: int = 2048

    def __post_init__(self) -> None:
        if self.role_tag not in ROLE_TAGS:
            raise ValueError(f"unknown role_tag {self.role_tag!r}")
        if not self.user_text:
            raise ValueError("user_text must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: int = 0

    @property
    def token_usage(self) -> tuple[int, int]:
        return (self.prompt_tokens, self.completion_tokens)


class CallRecord(NamedTuple):
    """One ``complete()`` invocation. ``response_digest`` is None when it failed."""

    role_tag: str
    request_digest: str
    response_digest: str | None
    error: str | None = None


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def request_digest(request: ChatRequest) -> str:
    """sha256 over ``system_text + "\\n\\n" + user_text``."""
    return text_digest(request.system_text + "\n\n" + request.user_text)


class Backend:
    """Common call logging; subclasses implement ``_send``."""

    def __init__(self) -> None:
        self._log: list[CallRecord] = []
        self._log_lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        req_digest = request_digest(request)
        try:
            response = self._send(request)
        except BackendError as exc:
            record = CallRecord(request.role_tag, req_digest, None, f"{type(exc).__name__}: {exc}")
            with self._log_lock:
                self._log.append(record)
            raise
        with self._log_lock:
            self._log.append(CallRecord(request.role_tag, req_digest, text_digest(response.text)))
        return response

    def call_log(self) -> list[CallRecord]:
        with self._log_lock:
            return list(self._log)

    def _send(self, request: ChatRequest) -> ChatResponse:  # pragma: no cover - abstract
        raise NotImplementedError


class ScriptedBackend(Backend):
    """Deterministic mock: each role tag has its own FIFO of canned responses.

    An entry may be an exception instance instead of text; it is raised when
    consumed, which lets tests inject failures at an exact point in a run.
    Every request is kept in ``requests`` for prompt inspection.
    """

    def __init__(self, script: Iterable[tuple[str, str | BaseException]] = ()) -> None:
        super().__init__()
        self._lock = threading.Lock()
        self._queues: dict[str, deque[str | BaseException]] = defaultdict(deque)
        self._consumed: dict[str, int] = defaultdict(int)
        self.requests: list[ChatRequest] = []
        self.extend(script)

    def extend(self, script: Iterable[tuple[str, str | BaseException]]) -> None:
        with self._lock:
            for role_tag, response in script:
                if role_tag not in ROLE_TAGS:
                    raise ValueError(f"unknown role_tag {role_tag!r} in script")
                self._queues[role_tag].append(response)

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedBackend:
        return cls(load_script(path))

    def remaining(self, role_tag: str | None = None) -> int:
        with self._lock:
            if role_tag is not None:
                return len(self._queues.get(role_tag, ()))
            return sum(len(q) for q in self._queues.values())

    def cursor(self) -> dict[str, int]:
        """Consumed-entry count per role tag."""
        with self._lock:
            return {k: v for k, v in sorted(self._consumed.items()) if v}

    def restore_cursor(self, cursor: dict[str, int]) -> None:
        """Skip entries so that ``cursor()`` matches a previously saved one."""
        with self._lock:
            for role_tag, target in cursor.items():
                already = self._consumed[role_tag]
                if target < already:
                    raise ValueError(f"cannot rewind {role_tag!r} from {already} to {target}")
                queue = self._queues[role_tag]
                for _ in range(target - already):
                    if not queue:
                        raise ScriptExhausted(f"script too short to restore cursor for {role_tag!r}")
                    queue.popleft()
                self._consumed[role_tag] = target

    def _send(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.requests.append(request)
            queue = self._queues.get(request.role_tag)
            if not queue:
                raise ScriptExhausted(f"no scripted response left for role_tag {request.role_tag!r}")
            entry = queue.popleft()
            self._consumed[request.role_tag] += 1
        if isinstance(entry, BaseException):
            raise entry
        return ChatResponse(text=entry, completion_tokens=len(entry.split()))


_SCRIPT_ERRORS: dict[str, type[BackendError]] = {
    "transport": TransportError,
    "auth": AuthError,
}


def load_script(path: str | Path) -> list[tuple[str, str | BaseException]]:
    """Read a mock script: a JSON array of ``{"role_tag", "response"}`` objects.

    ``{"role_tag": ..., "error": "transport" | "auth"}`` injects a failure.
    """
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise ValueError("mock script must be a JSON array")
    script: list[tuple[str, str | BaseException]] = []
    for i, item in enumerate(data):
        if not isinstance(item, dict) or "role_tag" not in item:
            raise ValueError(f"script entry {i} needs a role_tag")
        if "error" in item:
            exc_type = _SCRIPT_ERRORS.get(item["error"])
            if exc_type is None:
                raise ValueError(f"script entry {i}: unknown error kind {item['error']!r}")
            script.append((item["role_tag"], exc_type(f"scripted {item['error']} failure")))
        elif isinstance(item.get("response"), str):
            script.append((item["role_tag"], item["response"]))
        else:
            raise ValueError(f"script entry {i} needs a string response")
    return script


def dump_script(script: Sequence[tuple[str, str]], path: str | Path) -> None:
    payload = [{"role_tag": role, "response": text} for role, text in script]
    Path(path).write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


@dataclass
class BackendConfig:
    kind: str = "mock"  # "http" | "mock"
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-3.5-turbo"
    vendor: str = "openai"  # "openai" | "anthropic"
    temperature: float = 0.7
    max_tokens: int = 2048
    max_retries: int = 3
    timeout_s: float = 120.0
    api_key_env: str = DEFAULT_API_KEY_ENV
    script: str | None = None
    extra_headers: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> BackendConfig:
        return cls(**data)


class HttpBackend(Backend):
    """Chat-completion client with exponential backoff.

    Retries transport errors and HTTP 429/5xx; at most ``1 + max_retries``
    physical attempts per ``complete()``. ``sleep`` is injectable so tests do
    not wait out the backoff.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        api_key: str | None = None,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        vendor: str = "openai",
        max_retries: int = 3,
        backoff: Sequence[float] = DEFAULT_BACKOFF,
        timeout_s: float = 120.0,
        extra_headers: dict[str, str] | None = None,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        super().__init__()
        if vendor not in ("openai", "anthropic"):
            raise ValueError(f"unsupported vendor {vendor!r}")
        if max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        self.endpoint = endpoint
        self.model = model
        self.vendor = vendor
        self.api_key = api_key if api_key is not None else os.environ.get(api_key_env)
        self.max_retries = max_retries
        self.backoff = tuple(backoff) or (1.0,)
        self.extra_headers = dict(extra_headers or {})
        self._client = client or httpx.Client(timeout=timeout_s)
        self._sleep = sleep
        self.attempts = 0  # physical HTTP attempts, across all calls

    @classmethod
    def from_config(cls, config: BackendConfig, **kwargs: Any) -> HttpBackend:
        return cls(
            config.endpoint,
            config.model,
            api_key_env=config.api_key_env,
            vendor=config.vendor,
            max_retries=config.max_retries,
            timeout_s=config.timeout_s,
            extra_headers=config.extra_headers,
            **kwargs,
        )

    def close(self) -> None:
        self._client.close()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            if self.vendor == "anthropic":
                headers["x-api-key"] = self.api_key
                headers["anthropic-version"] = "2023-06-01"
            else:
                headers["Authorization"] = f"Bearer {self.api_key}"
        headers.update(self.extra_headers)
        return headers

    def _body(self, request: ChatRequest) -> dict[str, Any]:
        if self.vendor == "anthropic":
            body: dict[str, Any] = {
                "model": self.model,
                "messages": [{"role": "user", "content": request.user_text}],
                "temperature": request.temperature,
                "max_tokens": request.max_tokens,
            }
            if request.system_text:
                body["system"] = request.system_text
            return body
        messages = []
        if request.system_text:
            messages.append({"role": "system", "content": request.system_text})
        messages.append({"role": "user", "content": request.user_text})
        return {
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }

    def _parse(self, data: Any, latency_ms: int) -> ChatResponse:
        try:
            if self.vendor == "anthropic":
                text = "".join(
                    block.get("text", "") for block in data["content"] if block.get("type", "text") == "text"
                )
                usage = data.get("usage") or {}
                prompt_tokens = usage.get("input_tokens", 0)
                completion_tokens = usage.get("output_tokens", 0)
            else:
                text = data["choices"][0]["message"]["content"]
                usage = data.get("usage") or {}
                prompt_tokens = usage.get("prompt_tokens", 0)
                completion_tokens = usage.get("completion_tokens", 0)
        except (KeyError, IndexError, TypeError, AttributeError) as exc:
            raise ResponseFormatError(f"unexpected response shape: {exc!r}") from exc
        if not isinstance(text, str):
            raise ResponseFormatError("response content is not a string")
        return ChatResponse(
            text=text,
            prompt_tokens=int(prompt_tokens or 0),
            completion_tokens=int(completion_tokens or 0),
            latency_ms=latency_ms,
        )

    def _send(self, request: ChatRequest) -> ChatResponse:
        body = self._body(request)
        headers = self._headers()
        last_error = "no attempt made"
        for attempt in range(self.max_retries + 1):
            if attempt:
                delay = self.backoff[min(attempt - 1, len(self.backoff) - 1)]
                logger.warning("retrying %s in %.1fs after: %s", request.role_tag, delay, last_error)
                self._sleep(delay)
            self.attempts += 1
            started = time.monotonic()
            try:
                resp = self._client.post(self.endpoint, json=body, headers=headers)
            except httpx.TransportError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                continue
            latency_ms = int((time.monotonic() - started) * 1000)
            status = resp.status_code
            if status in (401, 403):
                raise AuthError(f"HTTP {status}: {resp.text[:200]}")
            if status == 429 or status >= 500:
                last_error = f"HTTP {status}"
                continue
            if status >= 400:
                raise RequestRejected(f"HTTP {status}: {resp.text[:200]}")
            try:
                data = resp.json()
            except ValueError as exc:
                raise ResponseFormatError("response body is not JSON") from exc
            return self._parse(data, latency_ms)
        raise TransportError(f"gave up after {self.max_retries + 1} attempts: {last_error}")


def make_backend(config: BackendConfig) -> Backend:
    if config.kind == "mock":
        if not config.script:
            raise ValueError("mock backend needs a script file")
        return ScriptedBackend.from_file(config.script)
    if config.kind == "http":
        return HttpBackend.from_config(config)
    raise ValueError(f"unknown backend kind {config.kind!r}")
