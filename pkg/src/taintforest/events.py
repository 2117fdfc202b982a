"""Structured JSONL event log: the substrate for invariant audits and replay.

One record per spawn / step / delegate / tool invocation / finish, each
carrying the agent label, tree label, a per-agent sequence number, and a wall
timestamp. Because worker interleaving varies between runs, equality checks
go through ``canonical()``, which drops arrival order and timestamps and
sorts by (tree, agent, per-agent sequence).
"""

from __future__ import annotations

import json
import threading
from typing import Any, Iterable


class EventLog:
    def __init__(self, path: str | None = None):
        self.path = path
        self.records: list[dict[str, Any]] = []
        self._lock = threading.Lock()
        self._seq = 0
        self._agent_seq: dict[str, int] = {}
        self._handle = open(path, "w", encoding="utf-8") if path else None

    def emit(self, type_: str, agent: str | None = None, tree: str | None = None, **fields) -> None:
        import time

        with self._lock:
            self._seq += 1
            record: dict[str, Any] = {"seq": self._seq, "ts": time.time(), "type": type_}
            if agent is not None:
                record["agent"] = agent
                self._agent_seq[agent] = self._agent_seq.get(agent, 0) + 1
                record["agent_seq"] = self._agent_seq[agent]
            if tree is not None:
                record["tree"] = tree
            record.update(fields)
            self.records.append(record)
            if self._handle is not None:
                self._handle.write(json.dumps(record, ensure_ascii=False) + "\n")
                self._handle.flush()

    def close(self) -> None:
        with self._lock:
            if self._handle is not None:
                self._handle.close()
                self._handle = None

    def __enter__(self) -> "EventLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def load_events(path: str) -> list[dict[str, Any]]:
    records = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def _label_key(label: str | None) -> tuple:
    if label is None:
        return ((-1,),)
    parts = []
    for part in label.split("."):
        try:
            parts.append((0, int(part)))
        except ValueError:
            parts.append((1, part))
    return tuple(parts)


def canonical(records: Iterable[dict[str, Any]]) -> list[dict[str, Any]]:
    """Scheduling-independent view of a log: timestamp and arrival order
    removed, records sorted by (tree, agent, per-agent sequence)."""
    cleaned = []
    for record in records:
        kept = {k: v for k, v in record.items() if k not in ("seq", "ts")}
        cleaned.append(kept)
    return sorted(
        cleaned,
        key=lambda r: (
            _label_key(r.get("tree")),
            _label_key(r.get("agent")),
            r.get("agent_seq", 0),
            r.get("type", ""),
        ),
    )


def canonical_bytes(records: Iterable[dict[str, Any]]) -> bytes:
    return json.dumps(canonical(records), sort_keys=True, ensure_ascii=False).encode("utf-8")


# --- audits -----------------------------------------------------------------


def audit_delegation_edges(records: list[dict[str, Any]]) -> None:
    """Every parent/child edge must originate from a delegate record whose
    acting agent is the edge's parent."""
    delegated: set[tuple[str, str]] = set()
    for record in records:
        if record["type"] == "delegate":
            for child in record["children"]:
                delegated.add((record["agent"], child))
    for record in records:
        if record["type"] == "spawn" and record.get("parent") is not None:
            edge = (record["parent"], record["agent"])
            if edge not in delegated:
                raise AssertionError(f"edge {edge} was not created by a delegate call")


def audit_step_budget(records: list[dict[str, Any]], max_steps: int) -> None:
    """Backend calls per agent never exceed max_steps; budget exhaustion
    happens exactly at the cap and only without a finish."""
    calls: dict[str, int] = {}
    finished: set[str] = set()
    exceeded: set[str] = set()
    for record in records:
        agent = record.get("agent")
        if record["type"] == "step":
            calls[agent] = calls.get(agent, 0) + 1 + record.get("retries", 0)
        elif record["type"] == "parse_failure":
            calls[agent] = calls.get(agent, 0) + record.get("calls", 0)
        elif record["type"] == "finish":
            if record.get("state") == "budget_exceeded":
                exceeded.add(agent)
            elif record.get("state") == "completed":
                finished.add(agent)
    for agent, count in calls.items():
        if count > max_steps:
            raise AssertionError(f"agent {agent} made {count} backend calls (> {max_steps})")
    for agent in exceeded:
        if calls.get(agent, 0) != max_steps:
            raise AssertionError(
                f"agent {agent} exceeded budget at {calls.get(agent, 0)} calls, not {max_steps}"
            )
        if agent in finished:
            raise AssertionError(f"agent {agent} both finished and exceeded budget")


def audit_retry_bound(records: list[dict[str, Any]], max_retries: int) -> None:
    """Backend call count per obtained directive is at most 1 + max_retries."""
    for record in records:
        if record["type"] == "step" and record.get("retries", 0) > max_retries:
            raise AssertionError(
                f"agent {record['agent']} needed {record['retries']} retries (> {max_retries})"
            )


def max_initial_context_bytes(records: list[dict[str, Any]]) -> int:
    return max(
        (r.get("init_bytes", 0) for r in records if r["type"] == "spawn"),
        default=0,
    )
