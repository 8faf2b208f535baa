"""A small in-memory pet store with switchable faults, served on localhost."""

from __future__ import annotations

import json
import logging
import re
import threading
import time
import zlib
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any
from urllib.parse import parse_qs, urlsplit

import requests

from ..errors import FatalConfigError, PortUnavailable
from ..executor import DEFAULT_TIMEOUT

log = logging.getLogger(__name__)

DROP_STATUS_UPDATE = "drop-status-update"
INVALID_EXPIRES_HEADER = "invalid-expires-header"
CRASH_ON_SEQUENCE = "crash-on-sequence"
SLOW_ENDPOINT = "slow-endpoint"
REJECT_MISSING_FIELD = "reject-missing-field"
FAULTS = (DROP_STATUS_UPDATE, INVALID_EXPIRES_HEADER, CRASH_ON_SEQUENCE, SLOW_ENDPOINT, REJECT_MISSING_FIELD)

DEFAULT_CRASH_SEQUENCE = (("POST", "/pet"), ("GET", "/pet/{petId}"), ("GET", "/pet/{petId}"))
RESET_PATH = "/_testbed/reset"


@dataclass(frozen=True)
class FaultProfile:
    flags: frozenset[str] = frozenset()
    crash_sequence: tuple[tuple[str, str], ...] = DEFAULT_CRASH_SEQUENCE
    slow_delay: float = DEFAULT_TIMEOUT + 0.5
    slow_operation: tuple[str, str] = ("DELETE", "/pet/{petId}")

    def __post_init__(self):
        object.__setattr__(self, "flags", frozenset(self.flags))
        unknown = self.flags - set(FAULTS)
        if unknown:
            raise FatalConfigError(f"unknown fault flag(s): {', '.join(sorted(unknown))}")
        if CRASH_ON_SEQUENCE in self.flags and not self.crash_sequence:
            raise FatalConfigError("crash-on-sequence needs a non-empty crash_sequence")

    @classmethod
    def only(cls, *flags: str, **kwargs) -> "FaultProfile":
        return cls(frozenset(flags), **kwargs)

    def check_timeout(self, per_request_timeout: float) -> None:
        """The slow endpoint must outlast the client's timeout, or it proves nothing."""
        if SLOW_ENDPOINT in self.flags and self.slow_delay <= per_request_timeout:
            raise FatalConfigError(
                f"slow_delay {self.slow_delay:g} s must exceed the request timeout {per_request_timeout:g} s"
            )


_ROUTES = [
    ("POST", "/pet", re.compile(r"^/pet$")),
    ("GET", "/pet/{petId}", re.compile(r"^/pet/(?P<petId>[^/]+)$")),
    ("POST", "/pet/{petId}", re.compile(r"^/pet/(?P<petId>[^/]+)$")),
    ("DELETE", "/pet/{petId}", re.compile(r"^/pet/(?P<petId>[^/]+)$")),
    ("POST", "/user", re.compile(r"^/user$")),
    ("GET", "/user/login", re.compile(r"^/user/login$")),
]


class PetStoreState:
    """Resources plus the request history the crash fault watches."""

    def __init__(self, profile: FaultProfile):
        self.profile = profile
        self.lock = threading.Lock()
        self.reset()

    def reset(self) -> None:
        self.pets: dict[int, dict[str, Any]] = {}
        self.users: dict[str, dict[str, Any]] = {}
        self.history: list[tuple[str, str]] = []
        self.next_id = 1

    # Each handler returns (status, body, extra headers).

    def handle(self, method: str, template: str, params: dict[str, str], query: dict[str, str], body: Any):
        flags = self.profile.flags
        with self.lock:
            self.history.append((method, template))
            seq = self.profile.crash_sequence
            if CRASH_ON_SEQUENCE in flags and tuple(self.history[-len(seq):]) == tuple(seq):
                return 500, {"code": 500, "message": "Internal Server Error"}, {}
            if template == "/pet" and method == "POST":
                return self._create_pet(body)
            if template == "/pet/{petId}":
                try:
                    pet_id = int(params["petId"])
                except ValueError:
                    return 400, {"code": 400, "message": "Invalid ID supplied"}, {}
                pet = self.pets.get(pet_id)
                if method == "GET":
                    return (200, pet, {}) if pet else (404, {"code": 404, "message": "Pet not found"}, {})
                if method == "POST":
                    if pet is None:
                        return 404, {"code": 404, "message": "Pet not found"}, {}
                    if "name" in query:
                        pet["name"] = query["name"]
                    if "status" in query and DROP_STATUS_UPDATE not in flags:
                        pet["status"] = query["status"]
                    return 200, pet, {}
                if pet is None:
                    return 404, {"code": 404, "message": "Pet not found"}, {}
                del self.pets[pet_id]
                return 200, {"code": 200, "message": "Pet deleted"}, {}
            if template == "/user":
                if not isinstance(body, dict):
                    return 400, {"code": 400, "message": "Invalid input"}, {}
                self.users[str(body.get("username", ""))] = body
                return 200, body, {}
            return self._login(query)

    def _create_pet(self, body: Any):
        if not isinstance(body, dict):
            return 400, {"code": 400, "message": "Invalid input"}, {}
        if REJECT_MISSING_FIELD in self.profile.flags and "name" not in body:
            return 400, {"code": 400, "message": "name is required"}, {}
        pet = dict(body)
        if not isinstance(pet.get("id"), int) or isinstance(pet.get("id"), bool):
            while self.next_id in self.pets:
                self.next_id += 1
            pet["id"] = self.next_id
        self.next_id = max(self.next_id, pet["id"] + 1)
        pet.setdefault("photoUrls", [])
        self.pets[pet["id"]] = pet
        return 200, pet, {}

    def _login(self, query: dict[str, str]):
        expires = datetime.now(timezone.utc).replace(microsecond=0) + timedelta(hours=1)
        if INVALID_EXPIRES_HEADER in self.profile.flags:
            # java.util.Date#toString style, which is not a date-time
            expires_text = expires.strftime("%a %b %d %H:%M:%S UTC %Y")
        else:
            expires_text = expires.isoformat().replace("+00:00", "Z")
        headers = {"X-Rate-Limit": "5000", "X-Expires-After": expires_text}
        user = query.get("username", "")
        return 200, f"logged in user session:{zlib.crc32(user.encode())}", headers


class _Handler(BaseHTTPRequestHandler):
    server_version = "PetStoreTestbed/1.0"

    def log_message(self, fmt, *args):  # keep test output quiet
        log.debug("testbed: " + fmt, *args)

    def _send(self, status: int, body: Any, headers: dict[str, str] | None = None) -> None:
        data = b"" if body is None else json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(data)

    def _dispatch(self) -> None:
        state: PetStoreState = self.server.state  # type: ignore[attr-defined]
        parts = urlsplit(self.path)
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if self.command == "POST" and parts.path == RESET_PATH:
            with state.lock:
                state.reset()
            self._send(200, {"reset": True})
            return
        body = None
        if raw:
            try:
                body = json.loads(raw)
            except ValueError:
                self._send(400, {"code": 400, "message": "malformed JSON"})
                return
        query = {k: v[-1] for k, v in parse_qs(parts.query, keep_blank_values=True).items()}
        for method, template, pattern in _ROUTES:
            m = pattern.match(parts.path)
            if m and method == self.command:
                profile = state.profile
                if SLOW_ENDPOINT in profile.flags and (method, template) == tuple(profile.slow_operation):
                    time.sleep(profile.slow_delay)
                status, payload, headers = state.handle(method, template, m.groupdict(), query, body)
                try:
                    self._send(status, payload, headers)
                except (BrokenPipeError, ConnectionResetError):
                    pass  # client gave up (timeout)
                return
        self._send(404, {"code": 404, "message": f"no route for {self.command} {parts.path}"})

    do_GET = do_POST = do_PUT = do_DELETE = do_PATCH = _dispatch


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    block_on_close = False


@dataclass
class TestbedHandle:
    base_url: str
    profile: FaultProfile
    state: PetStoreState
    _server: _Server = field(repr=False)
    _thread: threading.Thread = field(repr=False)

    __test__ = False  # not a pytest class

    def reset(self) -> None:
        requests.post(self.base_url + RESET_PATH, timeout=5).raise_for_status()

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    def __enter__(self) -> "TestbedHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


def start_testbed(profile: FaultProfile | None = None, port: int = 0, host: str = "127.0.0.1") -> TestbedHandle:
    """Serve the pet store on ``host:port`` (0 picks a free port) in a background thread."""
    profile = profile or FaultProfile()
    try:
        server = _Server((host, port), _Handler)
    except OSError as exc:
        raise PortUnavailable(f"cannot bind {host}:{port}: {exc}") from exc
    server.state = PetStoreState(profile)  # type: ignore[attr-defined]
    thread = threading.Thread(target=server.serve_forever, name="testbed", daemon=True)
    thread.start()
    bound_host, bound_port = server.server_address[:2]
    return TestbedHandle(f"http://{bound_host}:{bound_port}", profile, server.state, server, thread)


def reset_state(handle: TestbedHandle) -> bool:
    handle.reset()
    return True
