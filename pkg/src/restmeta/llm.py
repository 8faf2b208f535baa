"""Model clients: an OpenAI-compatible chat-completions client and a scripted replay client."""

from __future__ import annotations

import logging
import os
import re
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import requests

from .errors import FatalConfigError, LlmTransportError

log = logging.getLogger(__name__)

ROLES = ("mr_generator", "mr_refiner", "test_generator", "code_refiner")
DEFAULT_MODEL = "gpt-4o"
TOKEN_ENV = "RESTMETA_LLM_TOKEN"


@dataclass
class AgentConfig:
    role_name: str
    model_id: str = DEFAULT_MODEL
    temperature: float = 0.0
    seed: int | None = None
    max_output_tokens: int = 4096

    def __post_init__(self):
        if self.temperature < 0:
            raise FatalConfigError(f"{self.role_name}: temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise FatalConfigError(f"{self.role_name}: max_output_tokens must be positive")


def default_agent_configs(model_id: str = DEFAULT_MODEL, temperature: float = 0.0, seed: int | None = None):
    return {role: AgentConfig(role, model_id, temperature, seed) for role in ROLES}


class LlmClient(ABC):
    """Anything that turns a prompt into completion text."""

    @abstractmethod
    def complete(self, prompt: str, config: AgentConfig, task: str = "") -> str:
        """Return the model's text for ``prompt``. ``task`` names the prompt template."""


class HttpChatClient(LlmClient):
    """Chat-completions over HTTP. The bearer token is read from the environment."""

    def __init__(
        self,
        endpoint: str,
        token_env: str = TOKEN_ENV,
        timeout: float = 120.0,
        retries: int = 2,
        backoff: float = 1.0,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint
        self.token_env = token_env
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.session = session or requests.Session()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def complete(self, prompt: str, config: AgentConfig, task: str = "") -> str:
        payload = {
            "model": config.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": config.temperature,
            "max_tokens": config.max_output_tokens,
        }
        if config.seed is not None:
            payload["seed"] = config.seed

        last_error = "no attempt made"
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.session.post(self.endpoint, json=payload, headers=self._headers(), timeout=self.timeout)
            except requests.Timeout:
                last_error = "timed out"
                continue
            except requests.RequestException as exc:
                raise LlmTransportError(f"{self.endpoint}: {exc}") from exc
            if resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise LlmTransportError(f"{self.endpoint}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise LlmTransportError(f"unexpected completion payload: {exc}") from exc
        raise LlmTransportError(f"{self.endpoint}: giving up after {self.retries + 1} attempts ({last_error})")


_SCRIPT_NAME = re.compile(r"^(\d+)(?:[_-]([A-Za-z_]+))?(?:\.\w+)?$")


class ScriptedClient(LlmClient):
    """Replays canned responses in call order.

    Responses come from numbered files (``001.txt``, ``002_mr_generate.txt``,
    ...). A name suffix, when present, must match the task or role of the call
    consuming it; that keeps hand-written fixtures honest.
    """

    def __init__(self, responses: list[tuple[str | None, str]], source: str = "<memory>"):
        self._responses = list(responses)
        self._cursor = 0
        self.source = source
        self.calls: list[tuple[str, str]] = []

    @classmethod
    def from_directory(cls, directory: str | Path) -> "ScriptedClient":
        directory = Path(directory)
        if not directory.is_dir():
            raise FatalConfigError(f"scripted response directory {directory} does not exist")
        entries = []
        for path in directory.iterdir():
            m = _SCRIPT_NAME.match(path.name)
            if path.is_file() and m:
                entries.append((int(m.group(1)), m.group(2), path))
        entries.sort(key=lambda e: e[0])
        return cls([(tag, path.read_text(encoding="utf-8")) for _, tag, path in entries], str(directory))

    @classmethod
    def from_texts(cls, texts) -> "ScriptedClient":
        return cls([(None, t) for t in texts])

    @property
    def remaining(self) -> int:
        return len(self._responses) - self._cursor

    def complete(self, prompt: str, config: AgentConfig, task: str = "") -> str:
        self.calls.append((task or config.role_name, prompt))
        if self._cursor >= len(self._responses):
            raise LlmTransportError(f"scripted responses in {self.source} exhausted")
        tag, text = self._responses[self._cursor]
        if tag and tag not in (task, config.role_name):
            raise LlmTransportError(
                f"scripted response #{self._cursor + 1} in {self.source} is for {tag!r}, "
                f"but {task or config.role_name!r} was requested"
            )
        self._cursor += 1
        return text


def client_from_spec(spec: str, model_endpoint: str | None = None) -> LlmClient:
    """Build a client from a ``--llm`` value: ``scripted:<dir>`` or ``http``."""
    if spec.startswith("scripted:"):
        return ScriptedClient.from_directory(spec.split(":", 1)[1])
    if spec == "http" or spec.startswith(("http://", "https://")):
        endpoint = model_endpoint or (spec if spec != "http" else None)
        if not endpoint:
            raise FatalConfigError("--llm http needs --llm-endpoint")
        return HttpChatClient(endpoint)
    raise FatalConfigError(f"unknown --llm value {spec!r} (expected scripted:<dir> or http)")
