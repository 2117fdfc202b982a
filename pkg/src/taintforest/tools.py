"""Tool registry: the only observable channel between agents and the binary.

Tool handlers get a ToolContext (the acting agent plus whatever view or
session the run bound) and return a ToolResult whose text becomes the agent's
observation. Registry errors come back as observations too, never as crashes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

from .model import EvidenceFragment


class UnknownTool(Exception):
    pass


class InputSchemaError(Exception):
    pass


@dataclass
class ToolResult:
    output: str
    fragments: list[EvidenceFragment] = field(default_factory=list)
    error: bool = False


@dataclass
class ToolContext:
    agent_id: str
    engine: Any = None
    view: Any = None


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    # Minimal input contract: required key -> python type name
    # ("string" | "object" | "array" | "number"). Extra keys are allowed.
    input_schema: dict[str, str]
    handler: Callable[[ToolContext, dict[str, Any]], ToolResult] | None = None

    def prompt_line(self) -> str:
        params = ", ".join(f"{k}: {v}" for k, v in self.input_schema.items()) or "no parameters"
        return f"- {self.name}: {self.description} ({params})"


_TYPE_CHECKS = {
    "string": str,
    "object": dict,
    "array": list,
    "number": (int, float),
    "boolean": bool,
}


def check_input(spec: ToolSpec, payload: dict[str, Any]) -> None:
    if not isinstance(payload, dict):
        raise InputSchemaError(f"{spec.name}: input must be an object")
    for key, type_name in spec.input_schema.items():
        if key not in payload:
            raise InputSchemaError(f"{spec.name}: missing input field {key!r}")
        expected = _TYPE_CHECKS.get(type_name)
        if expected is not None and not isinstance(payload[key], expected):
            raise InputSchemaError(f"{spec.name}: field {key!r} must be {type_name}")


AGENT_TOOL = "AgentTool"

AGENT_TOOL_SPEC = ToolSpec(
    name=AGENT_TOOL,
    description=(
        "Delegate exploration to child agents. Accepts a structured request "
        "{mode: 'parallel'|'sequential', subtasks: [{function, taint_entry, "
        "taint_source, objective, context_note?}]} or a free-form {task: '...'}"
    ),
    input_schema={},
)

GRIGHRA_TOOL_SPEC = ToolSpec(
    name="GrighraTool",
    description="Provides Grighra commands for reverse engineering and analysis.",
    input_schema={},
    handler=lambda ctx, payload: ToolResult(
        output="GrighraTool is unavailable in this build.", error=True
    ),
)


class ToolRegistry:
    """Named tools with unique names; the delegation tool is always present."""

    def __init__(self) -> None:
        self._specs: dict[str, ToolSpec] = {}
        self.register(AGENT_TOOL_SPEC)

    def register(self, spec: ToolSpec) -> "ToolRegistry":
        if spec.name in self._specs:
            raise ValueError(f"tool {spec.name!r} already registered")
        self._specs[spec.name] = spec
        return self

    def names(self) -> list[str]:
        return list(self._specs)

    def get(self, name: str) -> ToolSpec:
        if name not in self._specs:
            raise UnknownTool(name)
        return self._specs[name]

    def prompt_lines(self, allow: list[str] | None = None) -> list[str]:
        names = allow if allow is not None else self.names()
        return [self._specs[n].prompt_line() for n in names if n in self._specs]

    def invoke(self, name: str, payload: dict[str, Any], ctx: ToolContext) -> ToolResult:
        """Dispatch one tool call. AgentTool routes through the engine so
        delegation stays a runtime primitive rather than a plain handler."""
        spec = self.get(name)
        check_input(spec, payload)
        if name == AGENT_TOOL:
            if ctx.engine is None:
                raise UnknownTool("AgentTool requires a running engine")
            return ctx.engine.handle_agent_tool(ctx.agent_id, payload)
        if spec.handler is None:
            raise UnknownTool(f"{name} has no handler bound")
        return spec.handler(ctx, payload)


def make_query_tool(view) -> ToolSpec:
    """Structured queries over a binary view (synthetic or radare2-backed)."""
    from .synthetic import synth_query

    def handler(ctx: ToolContext, payload: dict[str, Any]) -> ToolResult:
        query = payload["query"]
        args = {k: v for k, v in payload.items() if k != "query"}
        output = synth_query(view, query, **args)
        return ToolResult(output=output)

    return ToolSpec(
        name="BinaryQueryTool",
        description=(
            "Query the binary under analysis: list_functions, disasm(function), "
            "callers(function), callees(function), strings, xrefs_to(address)"
        ),
        input_schema={"query": "string"},
        handler=handler,
    )


def make_r2_tool(session) -> ToolSpec:
    """Raw radare2 commands against a live or transcript-backed session."""

    def handler(ctx: ToolContext, payload: dict[str, Any]) -> ToolResult:
        return ToolResult(output=session.cmd(payload["cmd"]))

    return ToolSpec(
        name="Radare2Tool",
        description=(
            "Provides Radare2 commands for binary analysis including disassembly, "
            "decompilation, and control flow analysis."
        ),
        input_schema={"cmd": "string"},
        handler=handler,
    )
