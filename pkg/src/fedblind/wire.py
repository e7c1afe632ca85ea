"""Envelope codec, message routing and the TCP service binding.

Every message is one JSON object per line::

    {"body": {...}, "session_id": "...", "type": "eval_request"}

Integer fields travel as canonical lowercase hex. The same :class:`Router`
delivers envelopes to in-process role objects or to remote services, so a
federation can run either way without touching protocol code.
"""

from __future__ import annotations

import json
import logging
import os
import re
import socket
import socketserver
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol

from .errors import (
    BadHex,
    BindFailure,
    ConfigError,
    FedblindError,
    MalformedFrame,
    PeerUnavailable,
    UnknownField,
    UnknownType,
    WireError,
)
from .numcore import from_hex, to_hex

log = logging.getLogger(__name__)

MAX_FRAME = 1 << 20
CONFIG_ENV = "FEDBLIND_CONFIG"

HEX, HEXLIST, NONCE, TEXT = "hex", "hexlist", "nonce", "text"
_NONCE_RE = re.compile(r"[0-9a-f]{64}")

# type -> (required fields, optional fields)
SCHEMA: dict[str, tuple[dict[str, str], dict[str, str]]] = {
    "eval_request": ({"x": HEX}, {}),
    "eval_response": ({"y": HEX}, {}),
    "transform_request": ({"x": HEX}, {"idp": TEXT}),
    "transform_response": ({"t": HEX}, {}),
    "exchange_request": ({"m": HEX}, {}),
    "exchange_response": ({"s": HEX}, {}),
    "challenge": ({"nonce": NONCE}, {}),
    "challenge_response": ({"sig": HEX}, {}),
    "token_issue_request": ({"pid": HEX, "user_n": HEX, "user_e": HEX}, {}),
    "token_issue_response": ({"pid": HEX, "user_n": HEX, "user_e": HEX, "sig": HEX}, {}),
    "registry_match_request": ({"pids": HEXLIST}, {}),
    "registry_match_response": ({}, {"matched_pid": HEX}),
    "alarm_insert": ({"pid": HEX}, {}),
    "ack": ({}, {}),
    "error": ({"code": TEXT, "detail": TEXT}, {}),
}

# Error details come only from this table so that no secret is ever echoed.
ERROR_DETAILS = {
    "malformed_frame": "frame could not be parsed",
    "unknown_field": "frame carries an unexpected field",
    "unknown_type": "message type not recognised",
    "bad_hex": "integer field is not canonical lowercase hex",
    "unknown_session": "no open session with this id",
    "out_of_phase": "message not valid in the current session phase",
    "out_of_range": "value outside the group",
    "input_not_unit": "value is not a unit",
    "already_registered": "pseudonym already registered",
    "alarm_locked": "pseudonym carries an alarm",
    "proof_of_possession_failed": "challenge response did not verify",
    "stale_nonce": "challenge nonce already used",
    "peer_unavailable": "a peer identity provider did not respond",
    "unknown_idp": "identity provider not in directory",
    "unexpected_message": "message not accepted by this role",
    "invalid_key": "public key fields are invalid",
    "internal": "internal error",
}


@dataclass
class Envelope:
    type: str
    session_id: str = ""
    body: dict[str, Any] = field(default_factory=dict)


def error_envelope(code: str, session_id: str = "") -> Envelope:
    detail = ERROR_DETAILS.get(code, "request rejected")
    return Envelope("error", session_id, {"code": code, "detail": detail})


# -- codec -------------------------------------------------------------------

def _check_fields(env_type: str, body: Mapping[str, Any]) -> dict[str, str]:
    if env_type not in SCHEMA:
        raise UnknownType(f"unknown message type {env_type!r:.40}")
    required, optional = SCHEMA[env_type]
    allowed = {**required, **optional}
    extra = set(body) - set(allowed)
    if extra:
        raise UnknownField(f"unexpected field(s) {sorted(extra)!r:.60}")
    missing = set(required) - set(body)
    if missing:
        raise MalformedFrame(f"missing field(s) {sorted(missing)}")
    return allowed


def _encode_value(kind: str, value: Any) -> Any:
    if kind == HEX:
        return to_hex(value)
    if kind == HEXLIST:
        return [to_hex(v) for v in value]
    if kind == NONCE:
        return bytes(value).hex()
    return str(value)


def _decode_value(kind: str, raw: Any) -> Any:
    if kind == HEX:
        if not isinstance(raw, str):
            raise BadHex("integer field must be a hex string")
        return from_hex(raw)
    if kind == HEXLIST:
        if not isinstance(raw, list):
            raise MalformedFrame("list field must be an array")
        return [_decode_value(HEX, v) for v in raw]
    if kind == NONCE:
        if not isinstance(raw, str) or not _NONCE_RE.fullmatch(raw):
            raise BadHex("nonce must be 64 lowercase hex digits")
        return bytes.fromhex(raw)
    if not isinstance(raw, str):
        raise MalformedFrame("text field must be a string")
    return raw


def encode(env: Envelope) -> bytes:
    allowed = _check_fields(env.type, env.body)
    body = {name: _encode_value(allowed[name], value) for name, value in env.body.items()}
    obj = {"type": env.type, "session_id": env.session_id, "body": body}
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode() + b"\n"


def decode(data: bytes) -> Envelope:
    """Parse one newline-terminated frame.

    Raises MalformedFrame (and its UnknownField subclass), UnknownType or
    BadHex; never anything else.
    """
    if not isinstance(data, (bytes, bytearray)) or not data.endswith(b"\n"):
        raise MalformedFrame("frame must end with a newline")
    if data.count(b"\n") != 1:
        raise MalformedFrame("frame contains more than one line")
    if len(data) > MAX_FRAME:
        raise MalformedFrame("frame too large")
    try:
        obj = json.loads(bytes(data[:-1]).decode("utf-8"))
    except (UnicodeDecodeError, ValueError, RecursionError):
        raise MalformedFrame("frame is not a UTF-8 JSON object") from None
    if not isinstance(obj, dict):
        raise MalformedFrame("frame is not a JSON object")
    if set(obj) - {"type", "session_id", "body"}:
        raise UnknownField("unexpected top-level field")
    env_type, session_id, body = obj.get("type"), obj.get("session_id"), obj.get("body")
    if not isinstance(env_type, str) or not isinstance(session_id, str) or not isinstance(body, dict):
        raise MalformedFrame("type, session_id and body are required")
    allowed = _check_fields(env_type, body)
    decoded = {name: _decode_value(allowed[name], value) for name, value in body.items()}
    return Envelope(env_type, session_id, decoded)


# -- dispatch ----------------------------------------------------------------

class Handler(Protocol):
    def handle(self, env: Envelope) -> Envelope: ...


def dispatch(handler: Handler, env: Envelope) -> Envelope:
    """Run a role handler, mapping failures to error envelopes.

    The reply always carries the request's session id.
    """
    try:
        reply = handler.handle(env)
    except FedblindError as exc:
        reply = error_envelope(exc.code)
    except Exception:  # noqa: BLE001 - never let a request kill the service
        log.exception("handler failed on %s", env.type)
        reply = error_envelope("internal")
    reply.session_id = env.session_id
    return reply


def dispatch_bytes(handler: Handler, frame: bytes) -> bytes:
    try:
        env = decode(frame)
    except (WireError, BadHex) as exc:
        return encode(error_envelope(exc.code))
    return encode(dispatch(handler, env))


# -- client ------------------------------------------------------------------

def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = str(text).rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"address must be host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


class Client:
    """Persistent newline-framed connection; reconnects once after a failure."""

    def __init__(self, address: tuple[str, int] | str, timeout: float = 10.0):
        self.address = parse_address(address) if isinstance(address, str) else address
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._reader = None
        self._lock = threading.Lock()

    def _connect(self) -> None:
        self._sock = socket.create_connection(self.address, timeout=self.timeout)
        self._reader = self._sock.makefile("rb")

    def close(self) -> None:
        with self._lock:
            self._drop()

    def _drop(self) -> None:
        if self._reader is not None:
            self._reader.close()
        if self._sock is not None:
            self._sock.close()
        self._sock = self._reader = None

    def request_bytes(self, frame: bytes) -> bytes:
        with self._lock:
            for attempt in (0, 1):
                try:
                    if self._sock is None:
                        self._connect()
                    self._sock.sendall(frame)
                    line = self._reader.readline(MAX_FRAME + 1)
                    if line.endswith(b"\n"):
                        return line
                    raise ConnectionError("connection closed mid-frame")
                except OSError as exc:
                    self._drop()
                    if attempt:
                        raise PeerUnavailable(f"{self.address}: {exc}") from None
        raise AssertionError("unreachable")

    def request(self, env: Envelope) -> Envelope:
        return decode(self.request_bytes(encode(env)))


# -- routing -----------------------------------------------------------------

Recorder = Callable[[str, str, Envelope], None]


class Router:
    """Delivers envelopes between named roles.

    Roles are either local objects with a ``handle`` method or remote
    addresses. ``recorder`` sees every request and reply in order, which is
    how transcripts are captured.
    """

    def __init__(self, recorder: Recorder | None = None):
        self.recorder = recorder
        self._local: dict[str, Handler] = {}
        self._remote: dict[str, Client] = {}
        self._down: set[str] = set()

    def register(self, name: str, handler: Handler) -> None:
        self._local[name] = handler

    def route(self, name: str, address: tuple[str, int] | str) -> None:
        self._remote[name] = Client(address)

    def set_down(self, name: str, down: bool = True) -> None:
        (self._down.add if down else self._down.discard)(name)

    def knows(self, name: str) -> bool:
        return name in self._local or name in self._remote

    def send(self, src: str, dst: str, env: Envelope) -> Envelope:
        if dst in self._down or not self.knows(dst):
            raise PeerUnavailable(f"{dst} unreachable")
        frame = encode(env)
        if self.recorder:
            self.recorder(src, dst, env)
        if dst in self._local:
            reply = decode(encode(dispatch(self._local[dst], decode(frame))))
        else:
            reply = decode(self._remote[dst].request_bytes(frame))
        if self.recorder:
            self.recorder(dst, src, reply)
        return reply

    def close(self) -> None:
        for client in self._remote.values():
            client.close()


# -- service -----------------------------------------------------------------

class _ConnectionHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        role = self.server.role  # type: ignore[attr-defined]
        while True:
            try:
                frame = self.rfile.readline(MAX_FRAME + 1)
            except OSError:
                return
            if not frame:
                return
            if not frame.endswith(b"\n"):
                # truncated or oversized; answer once, then drop the connection
                self.wfile.write(encode(error_envelope("malformed_frame")))
                return
            self.wfile.write(dispatch_bytes(role, frame))
            self.wfile.flush()


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class Service:
    """A running CTS or IdP endpoint."""

    def __init__(self, role: Handler, address: tuple[str, int]):
        try:
            self._server = _Server(address, _ConnectionHandler)
        except OSError as exc:
            raise BindFailure(f"cannot bind {address}: {exc}") from None
        self._server.role = role  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._server.server_address[:2]
        return host, port

    @property
    def address_text(self) -> str:
        return "%s:%d" % self.address

    def start(self) -> "Service":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "Service":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


def serve(role: Handler, address: tuple[str, int] | str = ("127.0.0.1", 0), start: bool = True) -> Service:
    """Bind ``role`` to a TCP endpoint; port 0 picks a free port."""
    if isinstance(address, str):
        address = parse_address(address)
    service = Service(role, address)
    return service.start() if start else service


# -- config ------------------------------------------------------------------

def load_config(path: str | Path | None = None) -> dict[str, str]:
    """Read a flat ``key=value`` file; falls back to ``$FEDBLIND_CONFIG``."""
    if path is None:
        path = os.environ.get(CONFIG_ENV)
        if not path:
            return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    config: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        config[key.strip()] = value.strip()
    return config
