"""Oracle-guided backends: deterministic stand-ins for the LLM whose answers
are synthesized from the brute-force taint oracle.

The discovery backend plays the delegation protocol honestly — the root agent
queries the binary, delegates one child per candidate path, and assembles its
final answer from the child observations it actually received — so a transport
bug anywhere in the runtime (lost, reordered, or mangled child results) shows
up as a mismatch against the oracle's path set.
"""

from __future__ import annotations

import json
import threading

from .backends import Completion, BackendConfig, ScriptError
from .model import Message, format_address
from .oracle import oracle_taint_paths, verify_chain
from .synthetic import SyntheticProgram


def _directive_text(thought: str, action: str, action_input: dict, status: str) -> str:
    return json.dumps(
        {"thought": thought, "action": action, "action_input": action_input, "status": status},
        indent=2,
        ensure_ascii=False,
    )


def _completion(messages: list[Message], text: str) -> Completion:
    prompt_chars = sum(len(m.role) + len(m.content) for m in messages)
    return Completion(text=text, prompt_tokens=prompt_chars // 4, completion_tokens=len(text) // 4)


def _program_of(view_or_program) -> SyntheticProgram:
    return getattr(view_or_program, "program", view_or_program)


class OracleDiscoveryBackend:
    """Discovery double: one tree per source, one child per oracle path."""

    token_accounting = "chars/4 proxy"

    def __init__(self, view_or_program):
        self.program = _program_of(view_or_program)
        self.config = BackendConfig(kind="scripted", model="oracle-discovery")
        self.paths: list[list[tuple[str, ...]]] = [
            sorted(oracle_taint_paths(self.program, sources=[src]))
            for src in self.program.sources
        ]
        self._turns: dict[str, int] = {}
        self._lock = threading.Lock()

    def _bump(self, label: str) -> int:
        with self._lock:
            self._turns[label] = self._turns.get(label, 0) + 1
            return self._turns[label]

    def complete(self, messages: list[Message], label: str) -> Completion:
        turn = self._bump(label)
        parts = label.split(".")
        if len(parts) == 1:
            text = self._root_turn(int(parts[0]), turn, messages)
        else:
            text = self._child_turn(int(parts[0]), int(parts[-1]), turn)
        return _completion(messages, text)

    def _root_turn(self, source_index: int, turn: int, messages: list[Message]) -> str:
        source = self.program.sources[source_index]
        paths = self.paths[source_index]
        if turn == 1:
            return _directive_text(
                f"Enumerate callees of {source.function} to map where "
                f"{source.symbol} input can flow.",
                "BinaryQueryTool",
                {"query": "callees", "function": source.function},
                "continue",
            )
        if turn == 2:
            if not paths:
                return _directive_text(
                    f"No unsanitized flow from {source.symbol} reaches a dangerous sink.",
                    "finish",
                    {
                        "final_response": {
                            "status": "NO_PATH",
                            "reason_snippet": (
                                f"no unsanitized flow from {source.symbol} reaches a sink"
                            ),
                        }
                    },
                    "complete",
                )
            subtasks = [
                {
                    "function": {
                        "name": source.function,
                        "address": format_address(source.address),
                    },
                    "taint_entry": source.entry,
                    "taint_source": f"{source.category} input via {source.symbol}",
                    "objective": (
                        f"Confirm candidate propagation path {i} from {source.symbol} "
                        f"step by step and report the suffix."
                    ),
                    "context_note": f"path-index={i}",
                }
                for i in range(len(paths))
            ]
            mode = "sequential" if len(subtasks) == 1 else "parallel"
            return _directive_text(
                f"Delegating {len(subtasks)} candidate path(s) from {source.symbol} "
                f"to function-level agents.",
                "AgentTool",
                {"mode": mode, "subtasks": subtasks},
                "continue",
            )
        # final turn: merge the segments the children actually reported
        merged: list[list[str]] = []
        source_element = paths[0][0] if paths else ""
        for message in messages:
            if message.role != "tool" or not message.content.startswith("Child agent"):
                continue
            from .backends import extract_json_object

            data = extract_json_object(message.content)
            if not data:
                continue
            segment = data.get("path_segment") or []
            if not segment:
                continue
            if segment[0].startswith("Source: "):
                segment = ["Step: " + segment[0][len("Source: ") :], *segment[1:]]
            merged.append([source_element, *segment])
        if not merged:
            return _directive_text(
                "No child agent returned a usable segment; closing this branch.",
                "finish",
                {
                    "final_response": {
                        "status": "NO_PATH",
                        "reason_snippet": "children reported no sink-reaching segments",
                    }
                },
                "complete",
            )
        report_paths = [
            {
                "propagation": path,
                "identifier": [source.symbol],
                "reason": (
                    f"{source.category} input via {source.symbol} reaches a dangerous sink "
                    f"without sanitization."
                ),
            }
            for path in merged
        ]
        return _directive_text(
            f"All child agents reported; assembling {len(merged)} complete path(s).",
            "finish",
            {
                "final_response": {
                    "status": "PATH_COMPLETE",
                    "full_path": merged[0],
                    "paths": report_paths,
                    "reason_snippet": (
                        f"unsanitized {source.category} input via {source.symbol} "
                        f"reaches {len(merged)} sink call(s)"
                    ),
                }
            },
            "complete",
        )

    def _child_turn(self, source_index: int, path_index: int, turn: int) -> str:
        source = self.program.sources[source_index]
        try:
            path = self.paths[source_index][path_index]
        except IndexError:
            raise ScriptError(
                f"no oracle path {path_index} for source {source_index}"
            ) from None
        if turn == 1:
            return _directive_text(
                f"Disassemble {source.function} to ground the propagation evidence.",
                "BinaryQueryTool",
                {"query": "disasm", "function": source.function},
                "continue",
            )
        return _directive_text(
            f"Confirmed candidate path {path_index}; reporting the segment.",
            "finish",
            {
                "final_response": {
                    "status": "SINK_REACHED",
                    "path_segment": list(path[1:]),
                    "reason_snippet": f"taint from {source.symbol} reaches the sink call",
                }
            },
            "complete",
        )


class OracleValidationBackend:
    """Validation double: re-checks every chain element against the program
    and answers with an accurate/inaccurate verdict naming the failing step."""

    token_accounting = "chars/4 proxy"

    def __init__(self, view_or_program):
        self.program = _program_of(view_or_program)
        self.config = BackendConfig(kind="scripted", model="oracle-validation")
        self._turns: dict[str, int] = {}
        self._lock = threading.Lock()

    def complete(self, messages: list[Message], label: str) -> Completion:
        with self._lock:
            self._turns[label] = self._turns.get(label, 0) + 1
            turn = self._turns[label]
        if turn == 1:
            return _completion(
                messages,
                _directive_text(
                    "List functions to anchor the chain's addresses.",
                    "BinaryQueryTool",
                    {"query": "list_functions"},
                    "continue",
                ),
            )
        chain = self._chain_from_messages(messages)
        propagation = [str(s) for s in chain.get("propagation", [])] if chain else []
        check = verify_chain(self.program, propagation)
        if check.ok:
            verdict = {
                "accuracy": "accurate",
                "vulnerability": True,
                "propagation": propagation,
                "reason": check.reason(),
            }
        else:
            verdict = {
                "accuracy": "inaccurate",
                "vulnerability": False,
                "propagation": [],
                "reason": check.reason(),
            }
        return _completion(
            messages,
            _directive_text(
                "Every element was re-checked in order against the binary.",
                "finish",
                {"final_response": verdict},
                "complete",
            ),
        )

    @staticmethod
    def _chain_from_messages(messages: list[Message]) -> dict | None:
        from .backends import extract_json_object

        for message in messages:
            if message.role == "user" and "Evidence chain" in message.content:
                return extract_json_object(message.content)
        return None
