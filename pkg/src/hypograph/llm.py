"""Chat-completion gateway with per-agent backend routing.

Every outbound call is recorded (input/output digests, attempt count)
before complete() returns, so session logs can prove what each agent saw.
Backends: an OpenAI-style chat endpoint, a local server speaking the
/api/chat shape on port 11434, and a deterministic scripted mock.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import httpx

AGENT_NAMES = frozenset({
    "cypher_query", "query_verification", "text_evaluator",
    "reasoning", "summarizer", "prediction_interpreter"})
BACKENDS = frozenset({"openai_compatible", "local_http", "mock"})
KEY_FILE_ENV = "HYPOGRAPH_KEY_FILE"

_ROLES = ("system", "user", "assistant")
_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")
_BODY_PREVIEW = 200


class GatewayError(Exception):
    def __init__(self, message: str, code: str = "internal",
                 agent: Optional[str] = None):
        super().__init__(message)
        self.code = code
        self.agent = agent


def digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in _ROLES:
            raise GatewayError(f"unknown message role {self.role!r}")
        if self.role != "system" and not self.content:
            raise GatewayError(f"{self.role} message content must be non-empty")


def system(content: str) -> ChatMessage:
    return ChatMessage("system", content)


def user(content: str) -> ChatMessage:
    return ChatMessage("user", content)


def assistant(content: str) -> ChatMessage:
    return ChatMessage("assistant", content)


@dataclass(frozen=True)
class AgentConfig:
    agent_name: str
    backend: str = "mock"
    model: str = ""
    endpoint: str = ""
    temperature: float = 0.0
    max_retries: int = 3

    def __post_init__(self):
        if self.agent_name not in AGENT_NAMES:
            raise GatewayError(f"unknown agent {self.agent_name!r}")
        if self.backend not in BACKENDS:
            raise GatewayError(f"unknown backend {self.backend!r}")
        if self.temperature < 0:
            raise GatewayError("temperature must be >= 0")
        if self.max_retries < 1:
            raise GatewayError("max_retries must be >= 1")


@dataclass(frozen=True)
class MockRule:
    pattern: str
    response: str


@dataclass(frozen=True)
class MockScript:
    rules: tuple[MockRule, ...] = ()
    default: str = ""

    def reply(self, text: str) -> str:
        for rule in self.rules:
            if rule.pattern in text:
                return rule.response
        return self.default


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    template: str
    required_placeholders: frozenset[str] = field(default_factory=frozenset)

    @classmethod
    def from_template(cls, name: str, template: str) -> "PromptTemplate":
        names = frozenset(_PLACEHOLDER.findall(template))
        return cls(name=name, template=template, required_placeholders=names)


def render(template: PromptTemplate, bindings: Mapping[str, object]) -> str:
    """Single-pass substitution; inserted values are never re-expanded."""
    missing = sorted(template.required_placeholders - set(bindings))
    if missing:
        raise GatewayError(
            f"template {template.name!r} is missing bindings: "
            + ", ".join(missing))
    return _PLACEHOLDER.sub(
        lambda m: str(bindings[m.group(1)]), template.template)


def load_agent_configs(path: str | Path) -> dict[str, AgentConfig]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    configs = {}
    for name, raw in data.items():
        configs[name] = AgentConfig(
            agent_name=name,
            backend=raw.get("backend", "mock"),
            model=raw.get("model", ""),
            endpoint=raw.get("endpoint", ""),
            temperature=float(raw.get("temperature", 0.0)),
            max_retries=int(raw.get("max_retries", 3)))
    return configs


def load_prompts(path: str | Path) -> dict[str, PromptTemplate]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return {name: PromptTemplate.from_template(name, text)
            for name, text in data.items()}


class Gateway:
    """Routes complete() calls to the backend configured per agent."""

    def __init__(self, agents: Mapping[str, AgentConfig],
                 prompts: Optional[Mapping[str, PromptTemplate]] = None,
                 *, mock_scripts: Optional[Mapping[str, MockScript]] = None,
                 key_file: Optional[str | Path] = None,
                 transport: Optional[httpx.BaseTransport] = None,
                 sleep: Callable[[float], None] = time.sleep,
                 backoff_base: float = 0.5,
                 timeout: float = 30.0,
                 on_record: Optional[Callable[[dict], None]] = None):
        self._agents = dict(agents)
        self._prompts = dict(prompts or {})
        self._mock_scripts = dict(mock_scripts or {})
        self._key_file = key_file
        self._sleep = sleep
        self._backoff_base = backoff_base
        self._on_record = on_record
        self._client = httpx.Client(transport=transport, timeout=timeout)
        self.records: list[dict] = []

    def prompt(self, name: str) -> PromptTemplate:
        if name not in self._prompts:
            raise GatewayError(f"no prompt template named {name!r}")
        return self._prompts[name]

    def complete(self, agent: str, messages: Sequence[ChatMessage]) -> str:
        if agent not in self._agents:
            raise GatewayError(f"agent {agent!r} is not configured",
                               code="bad_request", agent=agent)
        if not messages:
            raise GatewayError("messages must be non-empty",
                               code="bad_request", agent=agent)
        config = self._agents[agent]
        text = "\n".join(m.content for m in messages)
        record = {"agent": agent, "backend": config.backend,
                  "model": config.model, "attempts": 0,
                  "input": text, "input_digest": digest(text),
                  "output": None, "output_digest": None,
                  "failures": [], "error": None}
        try:
            if config.backend == "mock":
                output = self._complete_mock(agent, text, record)
            else:
                output = self._complete_http(config, messages, record)
        except GatewayError as exc:
            record["error"] = str(exc)
            self._log(record)
            raise
        record["output"] = output
        record["output_digest"] = digest(output)
        self._log(record)
        return output

    def complete_prompt(self, agent: str, template_name: str,
                        bindings: Mapping[str, object],
                        preamble: Optional[str] = None) -> str:
        text = render(self.prompt(template_name), bindings)
        messages = ([system(preamble)] if preamble else []) + [user(text)]
        return self.complete(agent, messages)

    def _log(self, record: dict) -> None:
        self.records.append(record)
        if self._on_record is not None:
            self._on_record(record)

    def _complete_mock(self, agent: str, text: str, record: dict) -> str:
        record["attempts"] = 1
        script = self._mock_scripts.get(agent)
        if script is None:
            raise GatewayError(f"mock backend for {agent!r} has no script",
                               code="bad_request", agent=agent)
        return script.reply(text)

    def _read_key(self) -> Optional[str]:
        path = os.environ.get(KEY_FILE_ENV) or self._key_file
        if not path:
            return None
        try:
            return Path(path).read_text(encoding="utf-8").strip()
        except OSError as exc:
            raise GatewayError(f"cannot read API key file {path}: {exc}",
                               code="internal")

    def _complete_http(self, config: AgentConfig,
                       messages: Sequence[ChatMessage], record: dict) -> str:
        base = config.endpoint.rstrip("/")
        wire = [{"role": m.role, "content": m.content} for m in messages]
        headers = {}
        if config.backend == "openai_compatible":
            url = f"{base}/v1/chat/completions"
            payload = {"model": config.model, "messages": wire,
                       "temperature": config.temperature}
            key = self._read_key()
            if key:
                headers["Authorization"] = f"Bearer {key}"
        else:
            url = f"{base}/api/chat"
            payload = {"model": config.model, "messages": wire,
                       "stream": False,
                       "options": {"temperature": config.temperature}}

        agent = config.agent_name
        for attempt in range(1, config.max_retries + 1):
            record["attempts"] = attempt
            try:
                response = self._client.post(url, json=payload,
                                             headers=headers)
            except httpx.TransportError as exc:
                record["failures"].append(f"attempt {attempt}: {exc}")
                if attempt == config.max_retries:
                    raise GatewayError(
                        f"agent {agent}: backend unreachable after "
                        f"{attempt} attempts: {exc}",
                        code="backend_unavailable", agent=agent)
                self._sleep(self._backoff_base * 2 ** (attempt - 1))
                continue
            if response.status_code // 100 != 2:
                body = response.text[:_BODY_PREVIEW]
                raise GatewayError(
                    f"agent {agent}: backend returned "
                    f"{response.status_code}: {body}",
                    code="backend_unavailable", agent=agent)
            return self._parse(config.backend, response, agent)
        raise GatewayError(f"agent {agent}: no attempts made",
                           code="internal", agent=agent)  # pragma: no cover

    @staticmethod
    def _parse(backend: str, response: httpx.Response, agent: str) -> str:
        try:
            data = response.json()
            if backend == "openai_compatible":
                content = data["choices"][0]["message"]["content"]
            else:
                content = data["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise GatewayError(
                f"agent {agent}: malformed backend response",
                code="internal", agent=agent)
        if not isinstance(content, str):
            raise GatewayError(
                f"agent {agent}: malformed backend response",
                code="internal", agent=agent)
        return content
