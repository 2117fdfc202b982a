"""Text-generation backends, the structured-output parser, and agent memory.

A backend turns a message history into raw text. The scripted backend is the
deterministic test double: responses are keyed by agent label and turn index,
so concurrency can never reorder an agent's turns.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Any

import requests

from .model import Message, AgentDirective, SchemaError
from .prompts import DIRECTIVE_SCHEMA_REMINDER


class BackendError(Exception):
    """Base class for backend failures that fail the calling agent."""


class TransportError(BackendError):
    pass


class AuthError(BackendError):
    pass


class ScriptError(BackendError):
    """Missing script entry: a test-setup error, not an analysis outcome."""


class ParseError(Exception):
    def __init__(self, stage: str, detail: str):
        super().__init__(f"{stage}: {detail}")
        self.stage = stage
        self.detail = detail


class FatalParse(Exception):
    """Raised after the bounded feedback-retry budget is exhausted."""

    def __init__(self, attempts: int, last: ParseError, usage: tuple[int, int] = (0, 0)):
        super().__init__(f"unparseable after {attempts} attempts: {last}")
        self.attempts = attempts
        self.last = last
        self.prompt_tokens, self.completion_tokens = usage


class BudgetStop(Exception):
    """The per-agent backend-call budget ran out mid-exchange."""

    def __init__(self, calls: int, usage: tuple[int, int] = (0, 0)):
        super().__init__("backend call budget exhausted")
        self.calls = calls
        self.prompt_tokens, self.completion_tokens = usage


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "scripted"
    model: str = "scripted"
    temperature: float = 0.0
    max_retries: int = 3
    timeout_s: float = 60.0
    endpoint: str = ""
    api_key_env: str = "TAINTFOREST_API_KEY"

    def __post_init__(self) -> None:
        if self.kind not in ("scripted", "http-llm", "oracle"):
            raise ValueError(f"unknown backend kind: {self.kind!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")


@dataclass(frozen=True)
class Completion:
    text: str
    prompt_tokens: int
    completion_tokens: int


# --- memory -----------------------------------------------------------------

_WIRE_ROLES = {"system": "system", "user": "user", "assistant": "assistant"}


def memory_append(history: list[Message], role: str, content: str) -> list[Message]:
    """Append-only memory; returns the same list for chaining."""
    history.append(Message(role=role, content=content))
    return history


def render_message(message: Message) -> tuple[str, str]:
    """Map the six memory roles onto two-role wire APIs: tool/error/parse_error
    become user-role observations carrying a role-tag prefix."""
    wire = _WIRE_ROLES.get(message.role)
    if wire is not None:
        return wire, message.content
    return "user", f"[{message.role}] {message.content}"


def memory_render(history: list[Message]) -> list[dict[str, str]]:
    return [{"role": role, "content": content} for role, content in map(render_message, history)]


def _payload_chars(history: list[Message]) -> int:
    return sum(len(m["content"]) + len(m["role"]) for m in memory_render(history))


# --- scripted backend -------------------------------------------------------


class Script:
    """Ordered mapping from (agent label, turn index) to raw response text.

    File form: a JSON object whose keys are "<label>/turn-<N>".
    """

    KEY_RE = re.compile(r"^(?P<label>.+)/turn-(?P<turn>\d+)$")

    def __init__(self, entries: dict[tuple[str, int], str] | None = None):
        self.entries: dict[tuple[str, int], str] = dict(entries or {})

    def add(self, label: str, turn: int, text: str) -> "Script":
        self.entries[(label, turn)] = text
        return self

    def lookup(self, label: str, turn: int) -> str:
        try:
            return self.entries[(label, turn)]
        except KeyError:
            raise ScriptError(f"no scripted response for agent {label!r} turn {turn}") from None

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "Script":
        script = cls()
        for key, text in mapping.items():
            match = cls.KEY_RE.match(key)
            if match is None:
                raise ValueError(f"bad script key {key!r}; expected '<label>/turn-<N>'")
            script.add(match.group("label"), int(match.group("turn")), text)
        return script

    @classmethod
    def from_file(cls, path: str) -> "Script":
        with open(path, encoding="utf-8") as handle:
            return cls.from_mapping(json.load(handle))

    def to_mapping(self) -> dict[str, str]:
        return {f"{label}/turn-{turn}": text for (label, turn), text in self.entries.items()}


class ScriptedBackend:
    """Deterministic backend replaying pre-authored turns.

    Token usage is a chars/4 proxy so metrics stay populated in LLM-free runs.
    """

    token_accounting = "chars/4 proxy"

    def __init__(self, script: Script, config: BackendConfig | None = None):
        self.script = script
        self.config = config or BackendConfig(kind="scripted")
        self._turns: dict[str, int] = {}
        self._lock = threading.Lock()

    def complete(self, messages: list[Message], label: str) -> Completion:
        if not messages:
            raise ValueError("messages must be non-empty")
        if messages[0].role != "system":
            raise ValueError("first message must have role=system")
        with self._lock:
            turn = self._turns.get(label, 0) + 1
            self._turns[label] = turn
        text = self.script.lookup(label, turn)
        return Completion(
            text=text,
            prompt_tokens=_payload_chars(messages) // 4,
            completion_tokens=len(text) // 4,
        )


class HttpBackend:
    """Chat-completion style HTTP backend.

    Transport errors (timeouts, non-2xx) are retried with exponential backoff;
    parse errors never are — those go through the feedback-retry loop.
    """

    token_accounting = "backend"
    TRANSPORT_ATTEMPTS = 3

    def __init__(self, config: BackendConfig, backoff_s: float = 0.5, debug_log=None):
        if not config.endpoint:
            raise ValueError("http-llm backend requires an endpoint")
        self.config = config
        self.backoff_s = backoff_s
        self.debug_log = debug_log

    def _api_key(self) -> str:
        key = os.environ.get(self.config.api_key_env, "")
        if not key:
            raise AuthError(f"API key environment variable {self.config.api_key_env} is not set")
        return key

    def complete(self, messages: list[Message], label: str) -> Completion:
        if not messages:
            raise ValueError("messages must be non-empty")
        if messages[0].role != "system":
            raise ValueError("first message must have role=system")
        key = self._api_key()
        body = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": memory_render(messages),
        }
        headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
        last_error: Exception | None = None
        for attempt in range(self.TRANSPORT_ATTEMPTS):
            try:
                response = requests.post(
                    self.config.endpoint,
                    json=body,
                    headers=headers,
                    timeout=self.config.timeout_s,
                )
                if response.status_code >= 300:
                    raise TransportError(f"HTTP {response.status_code}: {response.text[:200]}")
                data = response.json()
                if self.debug_log is not None:
                    self.debug_log(
                        {"request": {**body, "api_key": "<redacted>"}, "response": data}
                    )
                text = data["choices"][0]["message"]["content"]
                usage = data.get("usage", {})
                return Completion(
                    text=text,
                    prompt_tokens=int(usage.get("prompt_tokens", _payload_chars(messages) // 4)),
                    completion_tokens=int(usage.get("completion_tokens", len(text) // 4)),
                )
            except (requests.RequestException, TransportError) as exc:
                last_error = exc
                if attempt + 1 < self.TRANSPORT_ATTEMPTS:
                    time.sleep(self.backoff_s * (2**attempt))
        raise TransportError(f"transport failed after {self.TRANSPORT_ATTEMPTS} attempts: {last_error}")


def make_backend(config: BackendConfig, script: Script | None = None):
    if config.kind == "scripted":
        if script is None:
            raise ValueError("scripted backend requires a script")
        return ScriptedBackend(script, config)
    if config.kind == "http-llm":
        return HttpBackend(config)
    raise ValueError(f"cannot build backend of kind {config.kind!r} here")


# --- structured-output parsing ----------------------------------------------

_FENCE_RE = re.compile(r"```[a-zA-Z0-9_+-]*[ \t]*\n?(.*?)```", re.DOTALL)
_DECODER = json.JSONDecoder()


def extract_json_object(text: str) -> dict[str, Any] | None:
    """Return the first balanced top-level JSON object in the text, if any."""
    for start in range(len(text)):
        if text[start] != "{":
            continue
        try:
            value, _ = _DECODER.raw_decode(text, start)
        except json.JSONDecodeError:
            continue
        if isinstance(value, dict):
            return value
    return None


def parse_directive(raw: str, strict: bool = True) -> AgentDirective:
    """Extract and schema-check one directive from raw backend text.

    Pipeline: fenced code block content if present, else the first balanced
    top-level JSON object, then strict validation of the four-field schema.
    """
    fenced = _FENCE_RE.search(raw)
    candidate_text = fenced.group(1) if fenced else raw
    data = extract_json_object(candidate_text)
    if data is None and fenced:
        data = extract_json_object(raw)
    if data is None:
        raise ParseError("extraction", "no JSON object found in response")
    try:
        return AgentDirective.from_dict(data, strict=strict)
    except SchemaError as exc:
        raise ParseError("schema", str(exc)) from None


@dataclass
class DirectiveExchange:
    """Outcome of one obtain-a-directive round trip, retries included."""

    directive: AgentDirective
    raw: str
    backend_calls: int
    retries: int
    prompt_tokens: int
    completion_tokens: int


def request_directive(
    backend,
    config: BackendConfig,
    history: list[Message],
    label: str,
    *,
    strict: bool = True,
    on_retry=None,
    call_allowance: int | None = None,
) -> DirectiveExchange:
    """Run the bounded feedback-retry loop: call the backend, append its raw
    reply to memory, parse, and on parse failure append a parse_error message
    restating the schema and try again, up to ``config.max_retries`` retries
    (1 + max_retries calls total).

    ``call_allowance`` caps total backend calls for this exchange (budget
    enforcement); exhausting it raises BudgetStop.
    """
    calls = 0
    prompt_tokens = 0
    completion_tokens = 0
    last_error: ParseError | None = None
    for attempt in range(config.max_retries + 1):
        if call_allowance is not None and calls >= call_allowance:
            raise BudgetStop(calls, (prompt_tokens, completion_tokens))
        completion = backend.complete(history, label)
        calls += 1
        prompt_tokens += completion.prompt_tokens
        completion_tokens += completion.completion_tokens
        memory_append(history, "assistant", completion.text)
        try:
            directive = parse_directive(completion.text, strict=strict)
            return DirectiveExchange(
                directive=directive,
                raw=completion.text,
                backend_calls=calls,
                retries=attempt,
                prompt_tokens=prompt_tokens,
                completion_tokens=completion_tokens,
            )
        except ParseError as exc:
            last_error = exc
            memory_append(
                history,
                "parse_error",
                f"Your previous response could not be used ({exc.stage} error: {exc.detail}). "
                + DIRECTIVE_SCHEMA_REMINDER,
            )
            if on_retry is not None:
                on_retry(attempt + 1, exc)
    assert last_error is not None
    raise FatalParse(calls, last_error, (prompt_tokens, completion_tokens))
