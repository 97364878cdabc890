"""Client for chat-completions backends with retries, caching and bounded concurrency.

The wire protocol is the OpenAI-compatible chat-completions JSON shape with
mixed text/image_url content parts. Transport is an injectable callable
``(profile, payload, headers) -> (status, body)`` so tests can fault-inject
without sockets; the default transport POSTs over HTTP(S) with `requests`.

Retry policy: 429 and 5xx statuses and connection/timeout failures are retried
up to the profile's budget with exponential backoff and jitter; 401/403 raise
AuthError immediately and are never retried; other statuses and unparseable
bodies raise ProtocolError. In-flight requests per backend are capped by a
semaphore sized from the profile.
"""

from __future__ import annotations

import json
import os
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import requests

from .jsonio import canonical_json, sha256_hex


class TransportError(RuntimeError):
    """Retry budget exhausted on transient transport failures."""


class ProtocolError(RuntimeError):
    """Backend returned a status or body the protocol does not allow."""


class AuthError(RuntimeError):
    """Authentication rejected (HTTP 401/403)."""


class CacheIOError(RuntimeError):
    """Reading or writing the response cache failed."""


_ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    image: str  # URL, data URL, or raw base64 payload
    media_type: str = "image/jpeg"


@dataclass(frozen=True)
class ChatMessage:
    role: str
    parts: tuple[Any, ...]

    def __post_init__(self) -> None:
        if self.role not in _ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        object.__setattr__(self, "parts", tuple(self.parts))
        if not self.parts:
            raise ValueError("message needs at least one part")


def text_message(role: str, text: str) -> ChatMessage:
    return ChatMessage(role=role, parts=(TextPart(text),))


@dataclass(frozen=True)
class ChatRequest:
    backend_id: str
    model: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("request needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: str = "stop"
    usage: Mapping[str, int] = field(default_factory=dict)
    latency_ms: float = 0.0


@dataclass(frozen=True)
class BackendProfile:
    backend_id: str
    endpoint: str
    model: str
    api_key_env: str | None = None
    max_in_flight: int = 4
    retry_budget: int = 2
    backoff_base: float = 0.5
    timeout: float = 60.0

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.retry_budget < 0:
            raise ValueError("retry_budget must be >= 0")


def _part_payload(part: Any) -> dict[str, Any]:
    if isinstance(part, TextPart):
        return {"type": "text", "text": part.text}
    if isinstance(part, ImagePart):
        url = part.image
        if not url.startswith(("http://", "https://", "data:")):
            url = f"data:{part.media_type};base64,{part.image}"
        return {"type": "image_url", "image_url": {"url": url}}
    raise TypeError(f"unknown message part {part!r}")


def request_payload(req: ChatRequest) -> dict[str, Any]:
    """OpenAI-compatible JSON body for the request."""
    payload: dict[str, Any] = {
        "model": req.model,
        "messages": [
            {"role": m.role, "content": [_part_payload(p) for p in m.parts]}
            for m in req.messages
        ],
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    }
    if req.seed is not None:
        payload["seed"] = req.seed
    return payload


def _canonical_part(part: Any) -> dict[str, Any]:
    if isinstance(part, TextPart):
        return {"kind": "text", "text": part.text}
    return {"kind": "image", "image": part.image, "media_type": part.media_type}


def canonical_request(req: ChatRequest) -> dict[str, Any]:
    return {
        "backend_id": req.backend_id,
        "model": req.model,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
        "seed": req.seed,
        "messages": [
            {"role": m.role, "parts": [_canonical_part(p) for p in m.parts]}
            for m in req.messages
        ],
    }


def request_key(req: ChatRequest) -> str:
    """Stable digest of the request value; any field change changes the key."""
    return sha256_hex(canonical_json(canonical_request(req)))


Transport = Callable[[BackendProfile, dict, dict], "tuple[int, str]"]


def http_transport(profile: BackendProfile, payload: dict, headers: dict) -> tuple[int, str]:
    url = profile.endpoint.rstrip("/")
    if not url.endswith("/chat/completions"):
        url = url + "/chat/completions"
    try:
        resp = requests.post(url, json=payload, headers=headers, timeout=profile.timeout)
    except requests.RequestException as exc:
        raise ConnectionError(str(exc)) from exc
    return resp.status_code, resp.text


class ResponseCache:
    """Append-only line cache: one JSON object per line, keyed by request digest.

    Writes are serialized through a single lock; entries are immutable once
    stored, so a key is only ever appended once.
    """

    def __init__(self, path: str | os.PathLike):
        self.path = str(path)
        self._entries: dict[str, ChatResponse] = {}
        self._lock = threading.Lock()
        if os.path.exists(self.path):
            self._load()

    def _load(self) -> None:
        try:
            with open(self.path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        entry = json.loads(line)
                        key = entry["key"]
                        resp = entry["response"]
                        self._entries[key] = ChatResponse(
                            text=resp["text"],
                            finish_reason=resp.get("finish_reason", "stop"),
                            usage=dict(resp.get("usage") or {}),
                            latency_ms=float(resp.get("latency_ms", 0.0)),
                        )
                    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                        raise CacheIOError(
                            f"corrupt cache line {lineno} in {self.path}: {exc}"
                        ) from exc
        except OSError as exc:
            raise CacheIOError(f"cannot read cache {self.path}: {exc}") from exc

    def get(self, key: str) -> ChatResponse | None:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, request_digest: str, response: ChatResponse) -> None:
        entry = {
            "key": key,
            "request_digest": request_digest,
            "response": {
                "text": response.text,
                "finish_reason": response.finish_reason,
                "usage": dict(response.usage),
                "latency_ms": response.latency_ms,
            },
            "timestamp": time.time(),
        }
        line = json.dumps(entry, ensure_ascii=False, sort_keys=True)
        with self._lock:
            if key in self._entries:
                return
            try:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
            except OSError as exc:
                raise CacheIOError(f"cannot write cache {self.path}: {exc}") from exc
            self._entries[key] = response

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


class Gateway:
    """Dispatches chat requests to named backends under their concurrency bounds."""

    def __init__(
        self,
        profiles: Mapping[str, BackendProfile] | list[BackendProfile],
        transport: Transport | None = None,
        transports: Mapping[str, Transport] | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        if isinstance(profiles, Mapping):
            self.profiles = dict(profiles)
        else:
            self.profiles = {p.backend_id: p for p in profiles}
        self._default_transport = transport or http_transport
        self._transports = dict(transports or {})
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._semaphores = {
            bid: threading.BoundedSemaphore(p.max_in_flight) for bid, p in self.profiles.items()
        }
        self._lock = threading.Lock()
        self.transport_calls = 0
        self.cache_hits = 0
        self.cache_misses = 0

    def profile(self, backend_id: str) -> BackendProfile:
        try:
            return self.profiles[backend_id]
        except KeyError:
            raise ValueError(f"unknown backend {backend_id!r}") from None

    def _backoff_delay(self, profile: BackendProfile, step: int) -> float:
        jitter = 0.5 + self._rng.random()  # expectation 1.0, so delays grow in expectation
        return profile.backoff_base * (2**step) * jitter

    def complete(self, req: ChatRequest) -> ChatResponse:
        profile = self.profile(req.backend_id)
        transport = self._transports.get(req.backend_id, self._default_transport)
        payload = request_payload(req)
        headers = {"Content-Type": "application/json"}
        if profile.api_key_env:
            api_key = os.environ.get(profile.api_key_env)
            if api_key:
                headers["Authorization"] = f"Bearer {api_key}"

        last_failure: BaseException | str | None = None
        for attempt in range(profile.retry_budget + 1):
            if attempt:
                self._sleep(self._backoff_delay(profile, attempt - 1))
            started = time.monotonic()
            try:
                with self._semaphores[req.backend_id]:
                    with self._lock:
                        self.transport_calls += 1
                    status, body = transport(profile, payload, headers)
            except (ConnectionError, TimeoutError) as exc:
                last_failure = exc
                continue
            latency_ms = (time.monotonic() - started) * 1000.0
            if status in (401, 403):
                raise AuthError(f"backend {req.backend_id!r} rejected credentials (HTTP {status})")
            if status == 429 or 500 <= status <= 599:
                last_failure = f"HTTP {status}"
                continue
            if status != 200:
                raise ProtocolError(f"unexpected HTTP {status}: {body[:200]}")
            return self._parse_body(body, latency_ms)
        raise TransportError(
            f"{profile.retry_budget + 1} attempts to backend {req.backend_id!r} failed: {last_failure}"
        )

    @staticmethod
    def _parse_body(body: str, latency_ms: float) -> ChatResponse:
        try:
            data = json.loads(body)
            choice = data["choices"][0]
            text = choice["message"]["content"]
            finish = choice.get("finish_reason") or "stop"
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"unparseable response body: {exc}") from exc
        if not isinstance(text, str):
            raise ProtocolError("message content is not a string")
        usage = data.get("usage") or {}
        if not isinstance(usage, dict):
            usage = {}
        return ChatResponse(text=text, finish_reason=finish, usage=usage, latency_ms=latency_ms)

    def complete_cached(self, req: ChatRequest, cache: ResponseCache) -> ChatResponse:
        """Serve from cache when possible; a hit performs zero transport calls."""
        key = request_key(req)
        hit = cache.get(key)
        if hit is not None:
            with self._lock:
                self.cache_hits += 1
            return hit
        with self._lock:
            self.cache_misses += 1
        response = self.complete(req)
        cache.put(key, sha256_hex(canonical_json(request_payload(req))), response)
        return response

    def ask(self, req: ChatRequest, cache: ResponseCache | None = None) -> ChatResponse:
        if cache is not None:
            return self.complete_cached(req, cache)
        return self.complete(req)
