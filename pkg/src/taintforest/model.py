"""Domain types and the JSON artifact schemas shared by every other module.

Artifacts that cross a process boundary (evidence chains, verdicts, final
reports, agent directives) serialize with fixed field names and field order;
``serialize``/``deserialize`` are the only supported paths in and out.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

PROPAGATION_PREFIXES = ("Source: ", "Step: ", "Sink: ")

CWE_RE = re.compile(r"^CWE-\d+$")

# Handoff caps: a child's initial context must stay constant-bounded no matter
# how deep the tree grows.
TASK_FIELD_MAX = 2048
CONTEXT_NOTE_MAX = 1024


class SchemaError(ValueError):
    """Raised when JSON text does not satisfy an artifact schema."""

    def __init__(self, message: str, field_name: str | None = None):
        super().__init__(message)
        self.field_name = field_name


def format_address(value: int) -> str:
    return f"0x{value:x}"


def parse_address(value: Any, field_name: str = "address") -> int:
    if isinstance(value, bool):
        raise SchemaError(f"{field_name}: expected address, got bool", field_name)
    if isinstance(value, int):
        parsed = value
    elif isinstance(value, str):
        try:
            parsed = int(value, 16) if value.lower().startswith("0x") else int(value)
        except ValueError:
            raise SchemaError(f"{field_name}: not a hex address: {value!r}", field_name) from None
    else:
        raise SchemaError(f"{field_name}: expected address, got {type(value).__name__}", field_name)
    if parsed < 0:
        raise SchemaError(f"{field_name}: address must be non-negative", field_name)
    return parsed


def check_propagation(
    steps: list[str],
    *,
    source_first: bool = True,
    sink_last: bool = True,
    allow_empty: bool = False,
) -> None:
    """Enforce the Source/Step/Sink prefix rules on a propagation list."""
    if not steps:
        if allow_empty:
            return
        raise ValueError("propagation: must not be empty")
    for i, step in enumerate(steps):
        if not isinstance(step, str) or not step.startswith(PROPAGATION_PREFIXES):
            raise ValueError(
                f"propagation[{i}]: must start with one of {PROPAGATION_PREFIXES}, got {step!r}"
            )
    if source_first and not steps[0].startswith("Source: "):
        raise ValueError("propagation[0]: must start with 'Source: '")
    if sink_last and not steps[-1].startswith("Sink: "):
        raise ValueError(f"propagation[{len(steps) - 1}]: must end with 'Sink: '")


@dataclass(frozen=True)
class ExplorationTask:
    """Unit of recursive taint tracing: a function, where taint enters it,
    where the taint came from, and what to prove about it."""

    function_name: str
    address: int
    taint_entry: str
    taint_source: str
    objective: str
    context_note: str | None = None

    def __post_init__(self) -> None:
        if self.address < 0:
            raise ValueError("address must be non-negative")
        for name in ("function_name", "taint_entry", "taint_source", "objective"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise ValueError(f"{name} must be a non-empty string")
            if len(value) > TASK_FIELD_MAX:
                raise ValueError(f"{name} exceeds {TASK_FIELD_MAX} characters")
        if self.context_note is not None and len(self.context_note) > CONTEXT_NOTE_MAX:
            raise ValueError(f"context_note exceeds {CONTEXT_NOTE_MAX} characters")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "function": {"name": self.function_name, "address": format_address(self.address)},
            "taint_entry": self.taint_entry,
            "taint_source": self.taint_source,
            "objective": self.objective,
        }
        if self.context_note is not None:
            out["context_note"] = self.context_note
        return out

    def render(self) -> str:
        """Render the task block of an agent's initial user message."""
        lines = [
            "Exploration task",
            f"Function: {self.function_name} @ {format_address(self.address)}",
            f"Taint entry: {self.taint_entry}",
            f"Taint source: {self.taint_source}",
            f"Objective: {self.objective}",
        ]
        if self.context_note:
            lines.append(f"Context: {self.context_note}")
        return "\n".join(lines)


MESSAGE_ROLES = frozenset({"system", "user", "assistant", "tool", "error", "parse_error"})


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in MESSAGE_ROLES:
            raise ValueError(f"unknown message role: {self.role!r}")


@dataclass(frozen=True)
class EvidenceFragment:
    """One concrete observation tied to an address: snippet, variable states,
    and a one-line interpretation."""

    addr: int
    note: str
    snippet: str = ""
    vars: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.addr < 0:
            raise ValueError("addr must be non-negative")
        if not self.note:
            raise ValueError("note must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "addr": format_address(self.addr),
            "snippet": self.snippet,
            "vars": dict(self.vars),
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EvidenceFragment":
        if "addr" not in data:
            raise SchemaError("addr: missing", "addr")
        if "note" not in data or not isinstance(data.get("note"), str) or not data["note"]:
            raise SchemaError("note: missing", "note")
        vars_in = data.get("vars", {})
        if not isinstance(vars_in, dict):
            raise SchemaError("vars: expected object", "vars")
        return cls(
            addr=parse_address(data["addr"], "addr"),
            note=data["note"],
            snippet=str(data.get("snippet", "")),
            vars={str(k): str(v) for k, v in vars_in.items()},
        )


class StatusTag(str, Enum):
    SINK_REACHED = "SINK_REACHED"
    PATH_COMPLETE = "PATH_COMPLETE"
    NO_PATH = "NO_PATH"
    PRUNED = "PRUNED"
    ERROR = "ERROR"


@dataclass(frozen=True)
class AgentResult:
    """What an agent hands back to its parent when it finishes."""

    status_tag: StatusTag
    path_segment: list[str] = field(default_factory=list)
    reason_snippet: str = ""
    fragments: list[EvidenceFragment] = field(default_factory=list)
    # Raw finishing payload; lets the pipeline read report fields (scores,
    # extra weaknesses, multiple paths) that the typed result does not carry.
    payload: dict[str, Any] | None = None

    def __post_init__(self) -> None:
        if self.status_tag in (StatusTag.SINK_REACHED, StatusTag.PATH_COMPLETE):
            if not self.path_segment:
                raise ValueError(f"{self.status_tag.value} requires a non-empty path_segment")
        check_propagation(
            self.path_segment, source_first=False, sink_last=False, allow_empty=True
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "status": self.status_tag.value,
            "path_segment": list(self.path_segment),
            "reason_snippet": self.reason_snippet,
            "fragments": [f.to_dict() for f in self.fragments],
        }


class AgentState(str, Enum):
    CREATED = "created"
    RUNNING = "running"
    AWAITING_CHILDREN = "awaiting_children"
    COMPLETED = "completed"
    FAILED = "failed"
    BUDGET_EXCEEDED = "budget_exceeded"


TERMINAL_STATES = frozenset(
    {AgentState.COMPLETED, AgentState.FAILED, AgentState.BUDGET_EXCEEDED}
)

_ALLOWED_TRANSITIONS: dict[AgentState, frozenset[AgentState]] = {
    AgentState.CREATED: frozenset({AgentState.RUNNING}),
    AgentState.RUNNING: frozenset(
        {
            AgentState.AWAITING_CHILDREN,
            AgentState.COMPLETED,
            AgentState.FAILED,
            AgentState.BUDGET_EXCEEDED,
        }
    ),
    AgentState.AWAITING_CHILDREN: frozenset({AgentState.RUNNING, AgentState.FAILED}),
    AgentState.COMPLETED: frozenset(),
    AgentState.FAILED: frozenset(),
    AgentState.BUDGET_EXCEEDED: frozenset(),
}


@dataclass
class AgentNode:
    """Runtime tree node. Identifiers are structural labels ("0", "0.2.1"),
    stable regardless of scheduling. Mutated only by the runtime engine."""

    id: str
    task: ExplorationTask
    parent: str | None = None
    tree: str = ""
    depth: int = 0
    state: AgentState = AgentState.CREATED
    step_count: int = 0
    backend_calls: int = 0
    children: list[str] = field(default_factory=list)
    result: AgentResult | None = None
    messages: list[Message] = field(default_factory=list)
    fail_reason: str | None = None

    def transition(self, new_state: AgentState) -> None:
        if new_state not in _ALLOWED_TRANSITIONS[self.state]:
            raise ValueError(f"illegal transition {self.state.value} -> {new_state.value}")
        self.state = new_state

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_STATES


class Forest:
    """Disjoint rooted trees of agents. Structure changes only through
    spawn/delegate in the runtime engine."""

    def __init__(self) -> None:
        self.roots: list[str] = []
        self.nodes: dict[str, AgentNode] = {}

    def add_root(self, node: AgentNode) -> None:
        if node.id in self.nodes:
            raise ValueError(f"duplicate agent id {node.id!r}")
        if node.parent is not None:
            raise ValueError("root nodes have no parent")
        self.roots.append(node.id)
        self.nodes[node.id] = node

    def add_child(self, parent_id: str, node: AgentNode) -> None:
        if node.id in self.nodes:
            raise ValueError(f"duplicate agent id {node.id!r}")
        parent = self.nodes[parent_id]
        node.parent = parent_id
        node.tree = parent.tree
        node.depth = parent.depth + 1
        parent.children.append(node.id)
        self.nodes[node.id] = node

    def depth_of(self, agent_id: str) -> int:
        return self.nodes[agent_id].depth

    def children_of(self, agent_id: str) -> list[AgentNode]:
        return [self.nodes[c] for c in self.nodes[agent_id].children]

    def tree_size(self, root_id: str) -> int:
        return sum(1 for n in self.nodes.values() if n.tree == root_id)

    def check(self) -> None:
        """Assert the forest invariants: disjoint rooted trees, resolvable
        identifiers, parent links reaching a root within depth steps."""
        seen_as_child: set[str] = set()
        for node in self.nodes.values():
            for child_id in node.children:
                if child_id not in self.nodes:
                    raise AssertionError(f"dangling child id {child_id!r}")
                if child_id in seen_as_child:
                    raise AssertionError(f"{child_id!r} appears under two parents")
                seen_as_child.add(child_id)
                if self.nodes[child_id].parent != node.id:
                    raise AssertionError(f"{child_id!r} parent link mismatch")
        for root_id in self.roots:
            if root_id not in self.nodes:
                raise AssertionError(f"dangling root id {root_id!r}")
            if self.nodes[root_id].parent is not None:
                raise AssertionError(f"root {root_id!r} has a parent")
        for node in self.nodes.values():
            cursor, hops = node, 0
            while cursor.parent is not None:
                cursor = self.nodes[cursor.parent]
                hops += 1
                if hops > node.depth:
                    raise AssertionError(f"{node.id!r} does not reach a root in depth steps")
            if cursor.id not in self.roots:
                raise AssertionError(f"{node.id!r} does not reach a registered root")
            if cursor.id != node.tree:
                raise AssertionError(f"{node.id!r} tree tag mismatch")


# --- serialized artifacts -------------------------------------------------


def _require_str(data: dict[str, Any], key: str) -> str:
    if key not in data:
        raise SchemaError(f"{key}: missing", key)
    value = data[key]
    if not isinstance(value, str):
        raise SchemaError(f"{key}: expected string, got {type(value).__name__}", key)
    return value


def _require_str_list(data: dict[str, Any], key: str) -> list[str]:
    if key not in data:
        raise SchemaError(f"{key}: missing", key)
    value = data[key]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise SchemaError(f"{key}: expected array of strings", key)
    return list(value)


def _reject_extras(data: dict[str, Any], known: tuple[str, ...], strict: bool) -> dict[str, Any]:
    extras = {k: v for k, v in data.items() if k not in known}
    if extras and strict:
        first = next(iter(extras))
        raise SchemaError(f"{first}: unexpected field", first)
    return extras


@dataclass(frozen=True)
class AgentDirective:
    """One parsed reasoning step: thought, tool action, input, loop status."""

    FIELDS = ("thought", "action", "action_input", "status")

    thought: str
    action: str
    action_input: dict[str, Any]
    status: str
    extras: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not isinstance(self.thought, str):
            raise SchemaError("thought: expected string", "thought")
        if not isinstance(self.action, str) or not self.action:
            raise SchemaError("action: expected non-empty string", "action")
        if not isinstance(self.action_input, dict):
            raise SchemaError("action_input: expected object", "action_input")
        if self.status not in ("continue", "complete"):
            raise SchemaError(
                f"status: expected 'continue' or 'complete', got {self.status!r}", "status"
            )
        if self.status == "complete" and self.action != "finish":
            raise SchemaError("status: 'complete' requires action 'finish'", "status")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "thought": self.thought,
            "action": self.action,
            "action_input": self.action_input,
            "status": self.status,
        }
        out.update(self.extras)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any], strict: bool = True) -> "AgentDirective":
        if not isinstance(data, dict):
            raise SchemaError("directive: expected object")
        for key in cls.FIELDS:
            if key not in data:
                raise SchemaError(f"{key}: missing", key)
        if not isinstance(data["status"], str):
            raise SchemaError("status: expected string", "status")
        if not isinstance(data["thought"], str):
            raise SchemaError("thought: expected string", "thought")
        if not isinstance(data["action"], str):
            raise SchemaError("action: expected string", "action")
        if not isinstance(data["action_input"], dict):
            raise SchemaError("action_input: expected object", "action_input")
        extras = _reject_extras(data, cls.FIELDS, strict)
        return cls(
            thought=data["thought"],
            action=data["action"],
            action_input=data["action_input"],
            status=data["status"],
            extras=extras,
        )


@dataclass(frozen=True)
class EvidenceChain:
    """Discovery output: an ordered, prefixed propagation record plus the
    tainted identifiers and target file."""

    FIELDS = ("type", "identifier", "propagation", "reason", "file_path")

    type: str
    identifier: list[str]
    propagation: list[str]
    reason: str
    file_path: str
    extras: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not CWE_RE.match(self.type):
            raise SchemaError(f"type: must match CWE-<digits>, got {self.type!r}", "type")
        try:
            check_propagation(self.propagation)
        except ValueError as exc:
            raise SchemaError(str(exc), "propagation") from None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "type": self.type,
            "identifier": list(self.identifier),
            "propagation": list(self.propagation),
            "reason": self.reason,
            "file_path": self.file_path,
        }
        out.update(self.extras)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any], strict: bool = True) -> "EvidenceChain":
        if not isinstance(data, dict):
            raise SchemaError("evidence chain: expected object")
        type_ = _require_str(data, "type")
        identifier = _require_str_list(data, "identifier")
        propagation = _require_str_list(data, "propagation")
        reason = _require_str(data, "reason")
        file_path = _require_str(data, "file_path")
        extras = _reject_extras(data, cls.FIELDS, strict)
        return cls(
            type=type_,
            identifier=identifier,
            propagation=propagation,
            reason=reason,
            file_path=file_path,
            extras=extras,
        )


@dataclass(frozen=True)
class ValidationVerdict:
    """Validation output: accurate/inaccurate plus the replayed (possibly
    address-corrected) propagation."""

    FIELDS = ("accuracy", "vulnerability", "propagation", "reason")

    accuracy: str
    vulnerability: bool
    propagation: list[str]
    reason: str
    extras: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.accuracy not in ("accurate", "inaccurate"):
            raise SchemaError(
                f"accuracy: expected 'accurate' or 'inaccurate', got {self.accuracy!r}",
                "accuracy",
            )
        if self.accuracy == "accurate":
            try:
                check_propagation(self.propagation)
            except ValueError as exc:
                raise SchemaError(str(exc), "propagation") from None
        elif not self.reason:
            raise SchemaError("reason: inaccurate verdicts must state a cause", "reason")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "accuracy": self.accuracy,
            "vulnerability": self.vulnerability,
            "propagation": list(self.propagation),
            "reason": self.reason,
        }
        out.update(self.extras)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any], strict: bool = True) -> "ValidationVerdict":
        if not isinstance(data, dict):
            raise SchemaError("verdict: expected object")
        accuracy = _require_str(data, "accuracy")
        if "vulnerability" not in data:
            raise SchemaError("vulnerability: missing", "vulnerability")
        if not isinstance(data["vulnerability"], bool):
            raise SchemaError("vulnerability: expected boolean", "vulnerability")
        propagation = _require_str_list(data, "propagation")
        reason = _require_str(data, "reason")
        extras = _reject_extras(data, cls.FIELDS, strict)
        return cls(
            accuracy=accuracy,
            vulnerability=data["vulnerability"],
            propagation=propagation,
            reason=reason,
            extras=extras,
        )


@dataclass(frozen=True)
class FinalReport:
    """User-facing report assembled from a chain and an accurate verdict."""

    FIELDS = (
        "type",
        "additional_weaknesses",
        "identifier",
        "propagation",
        "reason",
        "risk_score",
        "confidence",
        "file_path",
    )

    type: str
    additional_weaknesses: list[str]
    identifier: list[str]
    propagation: list[str]
    reason: str
    risk_score: float
    confidence: float
    file_path: str
    extras: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not CWE_RE.match(self.type):
            raise SchemaError(f"type: must match CWE-<digits>, got {self.type!r}", "type")
        for name in ("risk_score", "confidence"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise SchemaError(f"{name}: expected number", name)
            if not math.isfinite(value) or not 0 <= value <= 10:
                raise SchemaError(f"{name}: must be within [0, 10], got {value}", name)
        for i, weakness in enumerate(self.additional_weaknesses):
            if not CWE_RE.match(weakness):
                raise SchemaError(
                    f"additional_weaknesses[{i}]: must match CWE-<digits>",
                    "additional_weaknesses",
                )
        try:
            check_propagation(self.propagation)
        except ValueError as exc:
            raise SchemaError(str(exc), "propagation") from None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "type": self.type,
            "additional_weaknesses": list(self.additional_weaknesses),
            "identifier": list(self.identifier),
            "propagation": list(self.propagation),
            "reason": self.reason,
            "risk_score": float(self.risk_score),
            "confidence": float(self.confidence),
            "file_path": self.file_path,
        }
        out.update(self.extras)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any], strict: bool = True) -> "FinalReport":
        if not isinstance(data, dict):
            raise SchemaError("report: expected object")
        type_ = _require_str(data, "type")
        weaknesses = _require_str_list(data, "additional_weaknesses")
        identifier = _require_str_list(data, "identifier")
        propagation = _require_str_list(data, "propagation")
        reason = _require_str(data, "reason")
        for key in ("risk_score", "confidence"):
            if key not in data:
                raise SchemaError(f"{key}: missing", key)
            if not isinstance(data[key], (int, float)) or isinstance(data[key], bool):
                raise SchemaError(f"{key}: expected number", key)
        file_path = _require_str(data, "file_path")
        extras = _reject_extras(data, cls.FIELDS, strict)
        return cls(
            type=type_,
            additional_weaknesses=weaknesses,
            identifier=identifier,
            propagation=propagation,
            reason=reason,
            risk_score=float(data["risk_score"]),
            confidence=float(data["confidence"]),
            file_path=file_path,
            extras=extras,
        )


Artifact = AgentDirective | EvidenceChain | ValidationVerdict | FinalReport

ARTIFACT_KINDS: dict[str, type] = {
    "agent_directive": AgentDirective,
    "evidence_chain": EvidenceChain,
    "validation_verdict": ValidationVerdict,
    "final_report": FinalReport,
}


def serialize(artifact: Artifact, indent: int | None = 4) -> str:
    """Serialize an artifact with the schema's exact field names and order."""
    return json.dumps(artifact.to_dict(), indent=indent, ensure_ascii=False)


def deserialize(text: str, kind: str | type, strict: bool = True) -> Artifact:
    """Parse JSON text into an artifact, raising SchemaError on the first
    missing or ill-typed field. Unknown fields are rejected when strict,
    preserved verbatim otherwise."""
    cls = ARTIFACT_KINDS[kind] if isinstance(kind, str) else kind
    if cls not in (AgentDirective, EvidenceChain, ValidationVerdict, FinalReport):
        raise ValueError(f"unknown artifact kind: {kind!r}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise SchemaError("artifact: JSON root must be an object")
    return cls.from_dict(data, strict=strict)


@dataclass
class RunMetrics:
    """Monotone counters for one run. reasoning_steps counts directives
    obtained; backend_calls additionally counts parse-retry rounds."""

    agents_created: int = 0
    reasoning_steps: int = 0
    backend_calls: int = 0
    parse_retries: int = 0
    tokens_discovery: int = 0
    tokens_validation: int = 0
    wall_time_s: float = 0.0
    per_tree: dict[str, dict[str, int]] = field(default_factory=dict)
    token_accounting: str = "backend"

    def tree_bucket(self, tree: str) -> dict[str, int]:
        return self.per_tree.setdefault(
            tree,
            {"agents_created": 0, "reasoning_steps": 0, "backend_calls": 0, "tokens": 0},
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "agents_created": self.agents_created,
            "reasoning_steps": self.reasoning_steps,
            "backend_calls": self.backend_calls,
            "parse_retries": self.parse_retries,
            "tokens_discovery": self.tokens_discovery,
            "tokens_validation": self.tokens_validation,
            "wall_time_s": self.wall_time_s,
            "token_accounting": self.token_accounting,
            "per_tree": {k: dict(v) for k, v in self.per_tree.items()},
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunMetrics":
        metrics = cls(
            agents_created=int(data.get("agents_created", 0)),
            reasoning_steps=int(data.get("reasoning_steps", 0)),
            backend_calls=int(data.get("backend_calls", 0)),
            parse_retries=int(data.get("parse_retries", 0)),
            tokens_discovery=int(data.get("tokens_discovery", 0)),
            tokens_validation=int(data.get("tokens_validation", 0)),
            wall_time_s=float(data.get("wall_time_s", 0.0)),
            token_accounting=str(data.get("token_accounting", "backend")),
        )
        metrics.per_tree = {k: dict(v) for k, v in data.get("per_tree", {}).items()}
        return metrics
