"""Deterministic scripted backend speaking the chat-completions wire shape.

Scripts are JSON: either a top-level array of entries, or an object
``{"default": str | null, "entries": [...]}``. Each entry has a ``reply`` and
a ``match`` that is either a bare substring or an object with any of:

* ``contains``    substring of the latest user message text
* ``turn_index``  1-based count of user messages in the request
* ``call_index``  0-based position of the request in this backend's lifetime

The first matching entry wins; matching is deterministic given the request
sequence. Unmatched requests return the default reply; a null default turns
them into errors.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Mapping

from . import __version__
from .gateway import BackendProfile


class ScriptParseError(ValueError):
    """Mock script file does not follow the expected shape."""


class NoMatch(LookupError):
    """No script entry matched and the default reply is disabled."""


DEFAULT_REPLY = "ok"


@dataclass(frozen=True)
class ScriptEntry:
    reply: str
    contains: str | None = None
    turn_index: int | None = None
    call_index: int | None = None

    def matches(self, last_user_text: str, turn_index: int, call_index: int) -> bool:
        if self.contains is not None and self.contains not in last_user_text:
            return False
        if self.turn_index is not None and self.turn_index != turn_index:
            return False
        if self.call_index is not None and self.call_index != call_index:
            return False
        return True


def _content_text(message: Mapping[str, Any]) -> str:
    content = message.get("content")
    if isinstance(content, str):
        return content
    if isinstance(content, list):
        return "\n".join(
            part.get("text", "") for part in content if isinstance(part, Mapping) and part.get("type") == "text"
        )
    return ""


def _parse_entry(raw: Any, position: int) -> ScriptEntry:
    if not isinstance(raw, Mapping) or "reply" not in raw:
        raise ScriptParseError(f"entry {position} must be an object with a reply")
    reply = raw["reply"]
    if not isinstance(reply, str):
        raise ScriptParseError(f"entry {position} reply must be a string")
    match = raw.get("match")
    if match is None:
        return ScriptEntry(reply=reply)
    if isinstance(match, str):
        return ScriptEntry(reply=reply, contains=match)
    if isinstance(match, Mapping):
        unknown = set(match) - {"contains", "turn_index", "call_index"}
        if unknown:
            raise ScriptParseError(f"entry {position} has unknown match keys {sorted(unknown)}")
        return ScriptEntry(
            reply=reply,
            contains=match.get("contains"),
            turn_index=match.get("turn_index"),
            call_index=match.get("call_index"),
        )
    raise ScriptParseError(f"entry {position} match must be a string or object")


class MockBackend:
    """Scripted responder. Thread-safe; the call counter is the only state."""

    def __init__(self, entries: list[ScriptEntry] | tuple[ScriptEntry, ...], default_reply: str | None = DEFAULT_REPLY):
        self.entries = tuple(entries)
        self.default_reply = default_reply
        self._lock = threading.Lock()
        self._calls = 0

    @classmethod
    def from_script(cls, data: Any) -> "MockBackend":
        default: str | None = DEFAULT_REPLY
        if isinstance(data, Mapping):
            if "entries" not in data:
                raise ScriptParseError("script object needs an entries array")
            default = data.get("default", DEFAULT_REPLY)
            if default is not None and not isinstance(default, str):
                raise ScriptParseError("default must be a string or null")
            data = data["entries"]
        if not isinstance(data, list):
            raise ScriptParseError("script must be a JSON array or object")
        entries = [_parse_entry(raw, i) for i, raw in enumerate(data)]
        return cls(entries, default_reply=default)

    @classmethod
    def load(cls, path: str) -> "MockBackend":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ScriptParseError(f"cannot load script {path}: {exc}") from exc
        return cls.from_script(data)

    @property
    def calls(self) -> int:
        with self._lock:
            return self._calls

    def reply_for(self, payload: Mapping[str, Any]) -> str:
        user_messages = [
            m for m in payload.get("messages", []) if isinstance(m, Mapping) and m.get("role") == "user"
        ]
        last_user_text = _content_text(user_messages[-1]) if user_messages else ""
        turn_index = len(user_messages)
        with self._lock:
            call_index = self._calls
            self._calls += 1
        for entry in self.entries:
            if entry.matches(last_user_text, turn_index, call_index):
                return entry.reply
        if self.default_reply is None:
            raise NoMatch(f"no script entry matches request (user turn {turn_index})")
        return self.default_reply

    def response_payload(self, payload: Mapping[str, Any]) -> dict[str, Any]:
        """Full chat-completions response body for a request payload."""
        reply = self.reply_for(payload)
        prompt_chars = sum(len(_content_text(m)) for m in payload.get("messages", []) if isinstance(m, Mapping))
        prompt_tokens = prompt_chars // 4
        completion_tokens = max(1, len(reply) // 4)
        return {
            "id": "mock",
            "object": "chat.completion",
            "model": payload.get("model", "mock"),
            "choices": [
                {
                    "index": 0,
                    "message": {"role": "assistant", "content": reply},
                    "finish_reason": "stop",
                }
            ],
            "usage": {
                "prompt_tokens": prompt_tokens,
                "completion_tokens": completion_tokens,
                "total_tokens": prompt_tokens + completion_tokens,
            },
        }


def mock_transport(mock: MockBackend):
    """Adapt a MockBackend to the gateway transport interface."""

    def transport(profile: BackendProfile, payload: dict, headers: dict) -> tuple[int, str]:
        return 200, json.dumps(mock.response_payload(payload), ensure_ascii=False)

    return transport


def _make_handler(backend: MockBackend):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):  # keep test output quiet
            pass

        def _send_json(self, status: int, obj: dict) -> None:
            body = json.dumps(obj, ensure_ascii=False).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path.rstrip("/").endswith("health") or self.path == "/":
                self._send_json(
                    200,
                    {
                        "protocol": "chat-completions",
                        "version": __version__,
                        "entries": len(backend.entries),
                    },
                )
            else:
                self._send_json(404, {"error": "not found"})

        def do_POST(self):
            if not self.path.rstrip("/").endswith("chat/completions"):
                self._send_json(404, {"error": "not found"})
                return
            length = int(self.headers.get("Content-Length", "0"))
            raw = self.rfile.read(length)
            try:
                payload = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                self._send_json(400, {"error": "invalid JSON body"})
                return
            try:
                self._send_json(200, backend.response_payload(payload))
            except NoMatch as exc:
                self._send_json(400, {"error": str(exc)})

    return Handler


class MockServer:
    """Local HTTP server exposing a MockBackend behind the wire protocol."""

    def __init__(self, backend: MockBackend, host: str = "127.0.0.1", port: int = 0):
        self.backend = backend
        self._server = ThreadingHTTPServer((host, port), _make_handler(backend))
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/v1"

    def start(self) -> "MockServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "MockServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()
