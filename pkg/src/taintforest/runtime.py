"""Forest execution engine.

Agents run a reasoning–action–observation loop against a backend; delegation
through AgentTool grows the forest along parent–child edges only; parents
suspend while children run and resume once every outstanding child result has
been appended to their memory. Scheduling is work-driven: a fixed worker pool
drives whichever agents are runnable, and a suspended parent never occupies a
worker. Results are deterministic for a deterministic backend regardless of
worker count because agent identities are structural and child results are
always delivered in creation order.
"""

from __future__ import annotations

import json
import threading
import time
from collections import deque
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from .backends import (
    BackendConfig,
    BackendError,
    BudgetStop,
    FatalParse,
    memory_append,
    request_directive,
)
from .events import EventLog
from .model import (
    AgentNode,
    AgentResult,
    AgentState,
    EvidenceFragment,
    ExplorationTask,
    Forest,
    Message,
    RunMetrics,
    StatusTag,
    parse_address,
)
from .prompts import DISCOVERY_SYSTEM_PROMPT, NO_PRUNE_SUFFIX, render_task_message
from .tools import AGENT_TOOL, InputSchemaError, ToolContext, ToolRegistry, ToolResult, UnknownTool


@dataclass(frozen=True)
class Budget:
    max_steps: int = 30
    max_depth: int = 12
    max_children: int = 8
    max_agents_per_tree: int = 128

    def __post_init__(self) -> None:
        for name in ("max_steps", "max_depth", "max_children", "max_agents_per_tree"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class DelegationRequest:
    mode: str
    subtasks: list[ExplorationTask]

    def __post_init__(self) -> None:
        if self.mode not in ("parallel", "sequential"):
            raise ValueError(f"unknown delegation mode {self.mode!r}")
        if not self.subtasks:
            raise ValueError("delegation requires at least one subtask")
        if self.mode == "sequential" and len(self.subtasks) != 1:
            raise ValueError("sequential delegation takes exactly one subtask")


class DelegationError(Exception):
    """Capacity/state violations; surfaced to the agent as an observation."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class CapacityError(Exception):
    pass


class StepOutcome(str, Enum):
    CONTINUE = "continue"
    DELEGATED = "delegated"
    FINISHED = "finished"
    FAILED = "failed"
    BUDGET_EXCEEDED = "budget_exceeded"


def _inherit_task(parent: ExplorationTask, text: str, note: str | None) -> ExplorationTask:
    return ExplorationTask(
        function_name=parent.function_name,
        address=parent.address,
        taint_entry=parent.taint_entry,
        taint_source=parent.taint_source,
        objective=text,
        context_note=note,
    )


def _subtask_from_value(value: Any, parent: ExplorationTask) -> ExplorationTask:
    if isinstance(value, str):
        return _inherit_task(parent, value, None)
    if not isinstance(value, dict):
        raise InputSchemaError("AgentTool: subtask must be a string or object")
    function = value.get("function")
    if isinstance(function, dict):
        name = function.get("name") or parent.function_name
        address = function.get("address", parent.address)
    elif isinstance(function, str):
        name = function
        address = value.get("address", parent.address)
    else:
        name = parent.function_name
        address = value.get("address", parent.address)
    objective = value.get("objective") or value.get("task")
    if not objective:
        raise InputSchemaError("AgentTool: subtask needs an 'objective' or 'task' text")
    try:
        return ExplorationTask(
            function_name=str(name),
            address=parse_address(address),
            taint_entry=str(value.get("taint_entry", parent.taint_entry)),
            taint_source=str(value.get("taint_source", parent.taint_source)),
            objective=str(objective),
            context_note=value.get("context_note") or value.get("context"),
        )
    except ValueError as exc:
        raise InputSchemaError(f"AgentTool: invalid subtask: {exc}") from None


def parse_delegation(payload: dict[str, Any], parent: ExplorationTask) -> DelegationRequest:
    """Accept the structured form {mode, subtasks} and the free-text forms
    {task: "..."} / {tasks: [...]}; free-text subtasks inherit the parent's
    function and taint fields and carry the text as their objective."""
    try:
        if "subtasks" in payload:
            raw = payload["subtasks"]
            if not isinstance(raw, list) or not raw:
                raise InputSchemaError("AgentTool: 'subtasks' must be a non-empty array")
            mode = payload.get("mode", "parallel" if len(raw) > 1 else "sequential")
            return DelegationRequest(
                mode=str(mode), subtasks=[_subtask_from_value(v, parent) for v in raw]
            )
        if "task" in payload:
            note = payload.get("context") or payload.get("context_note")
            return DelegationRequest(
                mode="sequential", subtasks=[_inherit_task(parent, str(payload["task"]), note)]
            )
        if "tasks" in payload:
            raw = payload["tasks"]
            if not isinstance(raw, list) or not raw:
                raise InputSchemaError("AgentTool: 'tasks' must be a non-empty array")
            return DelegationRequest(
                mode="parallel" if len(raw) > 1 else "sequential",
                subtasks=[_subtask_from_value(v, parent) for v in raw],
            )
    except ValueError as exc:
        raise InputSchemaError(f"AgentTool: {exc}") from None
    raise InputSchemaError("AgentTool: expected 'subtasks', 'task', or 'tasks'")


def result_from_payload(action_input: dict[str, Any]) -> AgentResult:
    """Build an AgentResult from a finish directive's action_input.

    Accepts the reporting shapes agents actually produce: a status plus
    path_segment/full_path, a bare report object with a propagation list, or
    a multi-path payload ({"paths": [...]}) when one agent reports several
    complete flows. The raw payload rides along for the pipeline.
    """
    payload = action_input.get("final_response", action_input)
    if not isinstance(payload, dict):
        raise ValueError("final_response must be an object")
    segment = None
    for key in ("path_segment", "full_path", "propagation"):
        if isinstance(payload.get(key), list) and payload[key]:
            segment = [str(v) for v in payload[key]]
            break
    if segment is None and isinstance(payload.get("paths"), list):
        for entry in payload["paths"]:
            steps = entry.get("propagation") if isinstance(entry, dict) else entry
            if isinstance(steps, list) and steps:
                segment = [str(v) for v in steps]
                break
    status = payload.get("status")
    if status is None:
        status = "PATH_COMPLETE" if segment else "NO_PATH"
    tag = StatusTag(str(status))
    fragments = [EvidenceFragment.from_dict(f) for f in payload.get("fragments", [])]
    reason = str(payload.get("reason_snippet") or payload.get("reason") or "")
    return AgentResult(
        status_tag=tag,
        path_segment=segment or [],
        reason_snippet=reason,
        fragments=fragments,
        payload=payload,
    )


def aggregate(
    parent_prefix: list[str], child_results: list[AgentResult]
) -> tuple[list[list[str]], list[EvidenceFragment]]:
    """Merge sink-reaching child segments onto the parent's prefix.

    One output path per contributing child, in order; NO_PATH/PRUNED children
    contribute nothing; a child segment's leading "Source: " element becomes a
    "Step: " once it sits behind a non-empty prefix, because only the tree
    root owns the source. With no children at all, the parent's own segments
    stand alone.
    """
    if not child_results:
        return ([list(parent_prefix)] if parent_prefix else [], [])
    paths: list[list[str]] = []
    fragments: list[EvidenceFragment] = []
    for result in child_results:
        if result.status_tag not in (StatusTag.SINK_REACHED, StatusTag.PATH_COMPLETE):
            continue
        segment = list(result.path_segment)
        if parent_prefix and segment and segment[0].startswith("Source: "):
            segment[0] = "Step: " + segment[0][len("Source: ") :]
        paths.append(list(parent_prefix) + segment)
        fragments.extend(result.fragments)
    return paths, fragments


def render_child_observation(label: str, result: AgentResult) -> str:
    return f"Child agent {label} finished:\n" + json.dumps(
        result.to_dict(), indent=2, ensure_ascii=False
    )


class Engine:
    """Owns one forest run: lifecycle, budgets, scheduling, metrics."""

    def __init__(
        self,
        backend,
        registry: ToolRegistry | None = None,
        budget: Budget | None = None,
        *,
        system_prompt: str = DISCOVERY_SYSTEM_PROMPT,
        phase: str = "discovery",
        parallelism: int = 1,
        events: EventLog | None = None,
        metrics: RunMetrics | None = None,
        strict_json: bool = True,
        no_prune: bool = False,
        max_trees: int | None = None,
        allowed_tools: list[str] | None = None,
        view: Any = None,
    ):
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        self.backend = backend
        self.backend_config = getattr(backend, "config", None) or BackendConfig()
        self.registry = registry or ToolRegistry()
        self.budget = budget or Budget()
        self.system_prompt = system_prompt + (NO_PRUNE_SUFFIX if no_prune else "")
        self.phase = phase
        self.parallelism = parallelism
        self.events = events or EventLog()
        self.metrics = metrics or RunMetrics()
        self.metrics.token_accounting = getattr(self.backend, "token_accounting", "backend")
        self.strict_json = strict_json
        self.max_trees = max_trees
        self.allowed_tools = allowed_tools
        self.view = view
        self.forest: Forest | None = None
        self._lock = threading.Lock()
        self._delivered: dict[str, set[str]] = {}

    # --- lifecycle --------------------------------------------------------

    def _bind(self, forest: Forest) -> None:
        if self.forest is None:
            self.forest = forest
        elif self.forest is not forest:
            raise ValueError("engine is bound to a different forest")

    def _init_messages(self, node: AgentNode, extra_user_text: str | None = None) -> int:
        content = render_task_message(node.task, self.registry.prompt_lines(self.allowed_tools))
        if extra_user_text:
            content += "\n\n" + extra_user_text
        node.messages = [
            Message(role="system", content=self.system_prompt),
            Message(role="user", content=content),
        ]
        return sum(len(m.role) + len(m.content.encode("utf-8")) for m in node.messages)

    def initial_context_bound(self) -> int:
        """Upper bound on any delegated agent's initial message bytes:
        system prompt + task template + field caps, independent of depth."""
        from .model import CONTEXT_NOTE_MAX, TASK_FIELD_MAX

        template_overhead = 512 + sum(
            len(line) for line in self.registry.prompt_lines(self.allowed_tools)
        )
        return (
            len(self.system_prompt.encode("utf-8"))
            + template_overhead
            + 4 * TASK_FIELD_MAX * 4  # UTF-8 worst case per task field
            + CONTEXT_NOTE_MAX * 4
        )

    def spawn_root(
        self,
        forest: Forest,
        task: ExplorationTask,
        label: str | None = None,
        extra_user_text: str | None = None,
    ) -> str:
        self._bind(forest)
        with self._lock:
            if self.max_trees is not None and len(forest.roots) >= self.max_trees:
                raise CapacityError(f"configured max trees ({self.max_trees}) exceeded")
            agent_id = label if label is not None else str(len(forest.roots))
            node = AgentNode(id=agent_id, task=task, tree=agent_id)
            forest.add_root(node)
            init_bytes = self._init_messages(node, extra_user_text)
            self.metrics.agents_created += 1
            self.metrics.tree_bucket(agent_id)["agents_created"] += 1
        self.events.emit(
            "spawn",
            agent=agent_id,
            tree=agent_id,
            parent=None,
            task=task.to_dict(),
            init_bytes=init_bytes,
        )
        return agent_id

    def delegate(self, forest: Forest, parent_id: str, request: DelegationRequest) -> list[str]:
        """Create one child per subtask; the parent suspends until all of its
        outstanding children are terminal. Children receive ONLY the handoff
        fields — never the parent's message history."""
        self._bind(forest)
        with self._lock:
            parent = forest.nodes[parent_id]
            if parent.state != AgentState.RUNNING:
                raise DelegationError(
                    "BadParentState", f"parent {parent_id} is {parent.state.value}"
                )
            if parent.depth + 1 > self.budget.max_depth:
                raise DelegationError(
                    "DepthExceeded", f"depth {parent.depth + 1} exceeds {self.budget.max_depth}"
                )
            if len(parent.children) + len(request.subtasks) > self.budget.max_children:
                raise DelegationError(
                    "ChildrenExceeded",
                    f"{len(parent.children)} existing + {len(request.subtasks)} new children "
                    f"exceed {self.budget.max_children}",
                )
            if forest.tree_size(parent.tree) + len(request.subtasks) > self.budget.max_agents_per_tree:
                raise DelegationError(
                    "TreeCapacityExceeded",
                    f"tree {parent.tree} would exceed {self.budget.max_agents_per_tree} agents",
                )
            child_ids: list[str] = []
            spawn_records = []
            for subtask in request.subtasks:
                child_id = f"{parent_id}.{len(parent.children)}"
                child = AgentNode(id=child_id, task=subtask)
                forest.add_child(parent_id, child)
                init_bytes = self._init_messages(child)
                self.metrics.agents_created += 1
                self.metrics.tree_bucket(parent.tree)["agents_created"] += 1
                child_ids.append(child_id)
                spawn_records.append((child_id, subtask, init_bytes))
            parent.transition(AgentState.AWAITING_CHILDREN)
        for child_id, subtask, init_bytes in spawn_records:
            self.events.emit(
                "spawn",
                agent=child_id,
                tree=forest.nodes[child_id].tree,
                parent=parent_id,
                task=subtask.to_dict(),
                init_bytes=init_bytes,
            )
        self.events.emit(
            "delegate",
            agent=parent_id,
            tree=forest.nodes[parent_id].tree,
            mode=request.mode,
            children=child_ids,
        )
        return child_ids

    def handle_agent_tool(self, agent_id: str, payload: dict[str, Any]) -> ToolResult:
        assert self.forest is not None
        node = self.forest.nodes[agent_id]
        request = parse_delegation(payload, node.task)
        children = self.delegate(self.forest, agent_id, request)
        return ToolResult(output="delegated to agents: " + ", ".join(children))

    # --- stepping -----------------------------------------------------------

    def _fail(self, node: AgentNode, reason: str) -> None:
        node.fail_reason = reason
        node.result = AgentResult(status_tag=StatusTag.ERROR, reason_snippet=reason)
        node.transition(AgentState.FAILED)
        self.events.emit(
            "finish", agent=node.id, tree=node.tree, state=node.state.value, reason=reason
        )

    def _exhaust(self, node: AgentNode) -> None:
        node.result = AgentResult(status_tag=StatusTag.ERROR, reason_snippet="step budget exhausted")
        node.transition(AgentState.BUDGET_EXCEEDED)
        self.events.emit(
            "finish",
            agent=node.id,
            tree=node.tree,
            state=node.state.value,
            reason="step budget exhausted",
        )

    def _account(self, node: AgentNode, calls: int, retries: int, tokens: int, steps: int) -> None:
        with self._lock:
            self.metrics.backend_calls += calls
            self.metrics.parse_retries += retries
            self.metrics.reasoning_steps += steps
            if self.phase == "validation":
                self.metrics.tokens_validation += tokens
            else:
                self.metrics.tokens_discovery += tokens
            bucket = self.metrics.tree_bucket(node.tree)
            bucket["backend_calls"] += calls
            bucket["reasoning_steps"] += steps
            bucket["tokens"] += tokens

    def step(self, forest: Forest, agent_id: str) -> StepOutcome:
        """One full loop iteration: obtain a directive (bounded parse retry),
        then finish, delegate, or invoke the named tool."""
        self._bind(forest)
        node = forest.nodes[agent_id]
        if node.state != AgentState.RUNNING:
            raise ValueError(f"agent {agent_id} is not running ({node.state.value})")
        allowance = self.budget.max_steps - node.backend_calls
        if allowance <= 0:
            self._exhaust(node)
            return StepOutcome.BUDGET_EXCEEDED

        retry_events: list[tuple[int, str]] = []
        try:
            exchange = request_directive(
                self.backend,
                self.backend_config,
                node.messages,
                agent_id,
                strict=self.strict_json,
                on_retry=lambda attempt, err: retry_events.append((attempt, str(err))),
                call_allowance=allowance,
            )
        except FatalParse as exc:
            node.backend_calls += exc.attempts
            self._account(
                node, exc.attempts, exc.attempts - 1, exc.prompt_tokens + exc.completion_tokens, 0
            )
            self.events.emit(
                "parse_failure",
                agent=agent_id,
                tree=node.tree,
                calls=exc.attempts,
                detail=str(exc.last),
            )
            self._fail(node, f"unparseable responses after {exc.attempts} attempts: {exc.last}")
            return StepOutcome.FAILED
        except BudgetStop as exc:
            node.backend_calls += exc.calls
            self._account(
                node, exc.calls, len(retry_events), exc.prompt_tokens + exc.completion_tokens, 0
            )
            self._exhaust(node)
            return StepOutcome.BUDGET_EXCEEDED
        except BackendError as exc:
            self._fail(node, f"backend error: {exc}")
            return StepOutcome.FAILED

        node.backend_calls += exchange.backend_calls
        node.step_count += 1
        self._account(
            node,
            exchange.backend_calls,
            exchange.retries,
            exchange.prompt_tokens + exchange.completion_tokens,
            1,
        )
        directive = exchange.directive
        self.events.emit(
            "step",
            agent=agent_id,
            tree=node.tree,
            turn=node.step_count,
            raw=exchange.raw,
            action=directive.action,
            status=directive.status,
            retries=exchange.retries,
        )

        if directive.action == "finish":
            try:
                node.result = result_from_payload(directive.action_input)
            except ValueError as exc:
                self._fail(node, f"invalid final response: {exc}")
                return StepOutcome.FAILED
            node.transition(AgentState.COMPLETED)
            self.events.emit(
                "finish",
                agent=agent_id,
                tree=node.tree,
                state=node.state.value,
                status_tag=node.result.status_tag.value,
                result=node.result.to_dict(),
            )
            return StepOutcome.FINISHED

        if self.allowed_tools is not None and directive.action not in (
            *self.allowed_tools,
            AGENT_TOOL,
        ):
            memory_append(
                node.messages, "error", f"tool {directive.action!r} is not allowed in this phase"
            )
            return StepOutcome.CONTINUE

        try:
            tool_result = self.registry.invoke(
                directive.action,
                directive.action_input,
                ToolContext(agent_id=agent_id, engine=self, view=self.view),
            )
        except UnknownTool as exc:
            memory_append(node.messages, "error", f"unknown tool: {exc}")
            self.events.emit(
                "tool", agent=agent_id, tree=node.tree, tool=directive.action, ok=False
            )
            return StepOutcome.CONTINUE
        except (InputSchemaError, DelegationError) as exc:
            memory_append(node.messages, "error", str(exc))
            self.events.emit(
                "tool", agent=agent_id, tree=node.tree, tool=directive.action, ok=False
            )
            return StepOutcome.CONTINUE
        except Exception as exc:  # tool crash: observation, not engine failure
            memory_append(node.messages, "error", f"tool {directive.action} failed: {exc}")
            self.events.emit(
                "tool", agent=agent_id, tree=node.tree, tool=directive.action, ok=False
            )
            return StepOutcome.CONTINUE

        memory_append(node.messages, "error" if tool_result.error else "tool", tool_result.output)
        self.events.emit("tool", agent=agent_id, tree=node.tree, tool=directive.action, ok=True)
        if directive.action == AGENT_TOOL and node.state == AgentState.AWAITING_CHILDREN:
            return StepOutcome.DELEGATED
        return StepOutcome.CONTINUE

    # --- scheduling -----------------------------------------------------------

    def _drive(self, agent_id: str) -> str:
        assert self.forest is not None
        node = self.forest.nodes[agent_id]
        if node.state == AgentState.CREATED:
            node.transition(AgentState.RUNNING)
        while True:
            self.step(self.forest, agent_id)
            if node.state == AgentState.AWAITING_CHILDREN:
                return "suspended"
            if node.terminal:
                return "terminal"

    def _drive_safe(self, agent_id: str) -> str:
        try:
            return self._drive(agent_id)
        except Exception as exc:  # unexpected engine bug: fail the agent, keep siblings alive
            node = self.forest.nodes[agent_id]
            if not node.terminal:
                if node.state == AgentState.CREATED:
                    node.transition(AgentState.RUNNING)
                self._fail(node, f"internal error: {exc}")
            return "terminal"

    def _resume_parent_if_ready(self, forest: Forest, parent_id: str) -> bool:
        parent = forest.nodes[parent_id]
        if parent.state != AgentState.AWAITING_CHILDREN:
            return False
        children = forest.children_of(parent_id)
        if not all(c.terminal for c in children):
            return False
        delivered = self._delivered.setdefault(parent_id, set())
        for child in children:  # children list order IS creation order
            if child.id in delivered:
                continue
            assert child.result is not None
            memory_append(
                parent.messages, "tool", render_child_observation(child.id, child.result)
            )
            delivered.add(child.id)
        parent.transition(AgentState.RUNNING)
        return True

    def _schedule(self, forest: Forest, seeds: list[str], parallelism: int) -> list[AgentResult]:
        self._bind(forest)
        started: set[str] = set()
        ready: deque[str] = deque()
        for seed in seeds:
            node = forest.nodes[seed]
            if node.state == AgentState.CREATED:
                ready.append(seed)
            elif not node.terminal:
                raise ValueError(f"agent {seed} already running")
        seed_set = set(seeds)
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            futures: dict = {}

            def pump() -> None:
                while ready and len(futures) < parallelism:
                    agent_id = ready.popleft()
                    if agent_id in started:
                        continue
                    started.add(agent_id)
                    futures[pool.submit(self._drive_safe, agent_id)] = agent_id

            def requeue(agent_id: str) -> None:
                started.discard(agent_id)
                ready.append(agent_id)

            pump()
            while futures:
                finished, _ = wait(list(futures), return_when=FIRST_COMPLETED)
                for future in finished:
                    agent_id = futures.pop(future)
                    verdict = future.result()
                    node = forest.nodes[agent_id]
                    if verdict == "suspended":
                        for child_id in node.children:
                            if child_id not in started:
                                ready.append(child_id)
                        # children might already be terminal (capacity error path)
                        if self._resume_parent_if_ready(forest, agent_id):
                            requeue(agent_id)
                        continue
                    if node.tree == agent_id:
                        self.events.emit(
                            "tree_complete", agent=agent_id, tree=node.tree, state=node.state.value
                        )
                    if agent_id in seed_set:
                        continue
                    parent_id = node.parent
                    if parent_id is not None and self._resume_parent_if_ready(forest, parent_id):
                        requeue(parent_id)
                pump()
        results: list[AgentResult] = []
        for seed in seeds:
            result = forest.nodes[seed].result
            assert result is not None
            results.append(result)
        return results

    def run_agent(self, forest: Forest, agent_id: str) -> AgentResult:
        """Drive one agent (and any subtree it delegates) to a terminal state."""
        return self._schedule(forest, [agent_id], parallelism=1)[0]

    def run(self, forest: Forest) -> list[AgentResult]:
        """Drive every tree to completion; a failing subtree never aborts its
        siblings. Returns one result per root, in root order."""
        started_at = time.monotonic()
        seeds = [r for r in forest.roots if forest.nodes[r].state == AgentState.CREATED]
        self._schedule(forest, seeds, parallelism=self.parallelism)
        self.metrics.wall_time_s += time.monotonic() - started_at
        results = []
        for root in forest.roots:
            result = forest.nodes[root].result
            assert result is not None
            results.append(result)
        return results


def run_forest(
    forest: Forest,
    backend,
    registry: ToolRegistry | None = None,
    budget: Budget | None = None,
    parallelism: int = 1,
    **engine_options,
) -> tuple[list[AgentResult], RunMetrics]:
    """Drive a pre-spawned forest (all roots Created) to completion."""
    engine = Engine(
        backend, registry, budget, parallelism=parallelism, **engine_options
    )
    for node in forest.nodes.values():
        engine.metrics.agents_created += 1
        engine.metrics.tree_bucket(node.tree)["agents_created"] += 1
    results = engine.run(forest)
    return results, engine.metrics
