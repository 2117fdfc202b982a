"""Two-phase pipeline: source-rooted discovery producing evidence chains,
then evidence-constrained validation producing verdicts and final reports.

Both phases run the same forest engine with the same execution semantics and
differ only in system prompt, seeding, and how results are read back out.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Any

from .events import EventLog
from .model import (
    AgentResult,
    EvidenceChain,
    ExplorationTask,
    FinalReport,
    Forest,
    RunMetrics,
    SchemaError,
    StatusTag,
    ValidationVerdict,
    check_propagation,
    parse_address,
    serialize,
)
from .prompts import (
    DISCOVERY_SYSTEM_PROMPT,
    VALIDATION_SYSTEM_PROMPT,
    render_chain_message,
)
from .runtime import Budget, Engine
from .tools import GRIGHRA_TOOL_SPEC, ToolRegistry, make_query_tool, make_r2_tool

_HEX_RE = re.compile(r"0x[0-9a-fA-F]+")
_CWE_MENTION_RE = re.compile(r"CWE-\d+")
_SOURCE_HEAD_RE = re.compile(r"^Source: .*?enters (?P<function>\S+) at (?P<addr>0x[0-9a-f]+)")

SEVERITY_DEFAULTS = {
    "CWE-78": 9.0,
    "CWE-134": 8.0,
    "CWE-120": 7.5,
    "CWE-22": 7.5,
    "CWE-73": 7.0,
    "CWE-200": 5.0,
}
SEVERITY_FALLBACK = 5.0
CONFIDENCE_DEFAULT = 7.0
# Missing-authentication escalates severity to the ceiling of the table.
AUTH_BYPASS_CWE = "CWE-862"
AUTH_BYPASS_SCORE = 9.0


class EmptyBinary(Exception):
    pass


@dataclass(frozen=True)
class PhaseConfig:
    phase: str
    system_prompt: str
    budget: Budget = field(default_factory=Budget)
    tool_allowlist: list[str] | None = None

    def __post_init__(self) -> None:
        if self.phase not in ("discovery", "validation"):
            raise ValueError(f"unknown phase {self.phase!r}")


def discovery_phase(budget: Budget | None = None) -> PhaseConfig:
    return PhaseConfig("discovery", DISCOVERY_SYSTEM_PROMPT, budget or Budget())


def validation_phase(budget: Budget | None = None) -> PhaseConfig:
    return PhaseConfig("validation", VALIDATION_SYSTEM_PROMPT, budget or Budget())


# --- source/sink tables -------------------------------------------------


def _load_packaged(name: str) -> dict:
    with resources.files("taintforest.data").joinpath(name).open(encoding="utf-8") as handle:
        return json.load(handle)


def load_source_table(path: str | None = None) -> dict[str, list[str]]:
    table = json.load(open(path, encoding="utf-8")) if path else _load_packaged("sources.json")
    if not isinstance(table, dict):
        raise ValueError("source table must map category -> [symbols]")
    return {str(k): [str(s) for s in v] for k, v in table.items()}


def load_sink_table(path: str | None = None) -> dict[str, dict[str, Any]]:
    table = json.load(open(path, encoding="utf-8")) if path else _load_packaged("sinks.json")
    if not isinstance(table, dict):
        raise ValueError("sink table must map symbol -> {cwe, arg_index}")
    return {str(k): dict(v) for k, v in table.items()}


def _strip_import_prefix(name: str) -> str:
    for prefix in ("sym.imp.", "sym.", "imp."):
        if name.startswith(prefix):
            return name[len(prefix) :]
    return name


def enumerate_sources(view, source_table: dict[str, list[str]] | None = None) -> list:
    """Match imported/called symbols against the category table.

    Synthetic views return their declared sources (filtered to table symbols);
    radare2 views locate each matching import's first call xref. Deduplicated
    by (symbol, category).
    """
    from .synthetic import SourceSpec

    table = source_table or load_source_table()
    if not view.functions():
        raise EmptyBinary(f"no functions found in {view.path_label}")
    out: list[SourceSpec] = []
    seen: set[tuple[str, str]] = set()

    if view.kind == "synthetic":
        for src in view.declared_sources():
            if src.symbol not in table.get(src.category, []):
                continue
            key = (src.symbol, src.category)
            if key in seen:
                continue
            seen.add(key)
            out.append(src)
        return out

    category_of: dict[str, str] = {}
    for category, symbols in table.items():
        for symbol in symbols:
            category_of.setdefault(symbol, category)
    for raw_name in view.imports():
        symbol = _strip_import_prefix(raw_name)
        category = category_of.get(symbol)
        if category is None:
            continue
        key = (symbol, category)
        if key in seen:
            continue
        seen.add(key)
        callers = view.callers_of(symbol)
        if callers:
            function, addr = callers[0]
        else:
            function, addr = symbol, 0
        out.append(
            SourceSpec(
                category=category, symbol=symbol, function=function, address=addr, entry=symbol
            )
        )
    if "argv" in table and any(name == "main" for name, _ in view.functions()):
        if ("argv", "argv") not in seen and table.get("argv"):
            main_addr = next(addr for name, addr in view.functions() if name == "main")
            out.append(
                SourceSpec(
                    category="argv", symbol="argv", function="main", address=main_addr, entry="argv"
                )
            )
    return out


def enumerate_sinks(view, sink_table: dict[str, dict[str, Any]] | None = None) -> list[dict[str, Any]]:
    """Match symbols against the dangerous-function table; each entry carries
    the inferred CWE class."""
    table = sink_table or load_sink_table()
    if not view.functions():
        raise EmptyBinary(f"no functions found in {view.path_label}")
    out: list[dict[str, Any]] = []
    seen: set[str] = set()
    if view.kind == "synthetic":
        for sink in view.declared_sinks():
            symbol = _strip_import_prefix(sink.function)
            if symbol not in table or symbol in seen:
                continue
            seen.add(symbol)
            out.append(
                {
                    "symbol": symbol,
                    "function": sink.function,
                    "arg_index": sink.arg_index,
                    "cwe": table[symbol]["cwe"],
                }
            )
        return out
    for raw_name in view.imports():
        symbol = _strip_import_prefix(raw_name)
        if symbol not in table or symbol in seen:
            continue
        seen.add(symbol)
        out.append(
            {
                "symbol": symbol,
                "function": raw_name,
                "arg_index": int(table[symbol].get("arg_index", 0)),
                "cwe": table[symbol]["cwe"],
            }
        )
    return out


def infer_cwe(sink_element: str, sink_table: dict[str, dict[str, Any]]) -> str | None:
    """Sink-class-table lookup on the chain's final element."""
    best: str | None = None
    best_len = 0
    for symbol, spec in sink_table.items():
        if symbol in sink_element and len(symbol) > best_len:
            best = spec["cwe"]
            best_len = len(symbol)
    return best


def sink_address_of(sink_element: str) -> str:
    matches = _HEX_RE.findall(sink_element)
    return matches[-1].lower() if matches else ""


def build_registry(view) -> ToolRegistry:
    registry = ToolRegistry()
    registry.register(GRIGHRA_TOOL_SPEC)
    if view is not None:
        if view.kind == "synthetic":
            registry.register(make_query_tool(view))
        else:
            registry.register(make_r2_tool(view.session))
    return registry


def task_from_source(source, binary_label: str) -> ExplorationTask:
    return ExplorationTask(
        function_name=source.function,
        address=source.address,
        taint_entry=source.entry,
        taint_source=f"{source.category} input via {source.symbol}",
        objective=(
            f"Trace taint from {source.symbol} in {source.function} to dangerous sink calls"
            f" in {binary_label}; report every complete unsanitized source-to-sink path."
        ),
    )


def _task_from_chain(chain: EvidenceChain) -> ExplorationTask:
    head = _SOURCE_HEAD_RE.match(chain.propagation[0])
    function = head.group("function") if head else "binary"
    address = parse_address(head.group("addr")) if head else 0
    return ExplorationTask(
        function_name=function,
        address=address,
        taint_entry=", ".join(chain.identifier) or "unknown",
        taint_source=chain.propagation[0][:512],
        objective=(
            "Strictly verify each propagation step of the provided evidence chain in order;"
            " finish with an accurate or inaccurate verdict and its cause."
        ),
    )


@dataclass
class ChainRecord:
    chain: EvidenceChain
    payload: dict[str, Any]
    root: str


@dataclass
class DiscoveryOutcome:
    chains: list[EvidenceChain]
    records: list[ChainRecord]
    failures: list[dict[str, str]]
    results: list[AgentResult]
    metrics: RunMetrics


def discover(
    view,
    backend,
    phase: PhaseConfig | None = None,
    *,
    parallelism: int = 1,
    events: EventLog | None = None,
    metrics: RunMetrics | None = None,
    source_table: dict[str, list[str]] | None = None,
    sink_table: dict[str, dict[str, Any]] | None = None,
    strict_json: bool = True,
    no_prune: bool = False,
) -> DiscoveryOutcome:
    """Run one exploration tree per enumerated source and assemble every
    sink-reaching root result into evidence chains, deduplicated by
    (type, identifier, sink address). Per-tree failures become chain-less
    entries; sibling trees always run to completion."""
    phase = phase or discovery_phase()
    sink_table = sink_table or load_sink_table()
    sources = enumerate_sources(view, source_table)
    engine = Engine(
        backend,
        build_registry(view),
        phase.budget,
        system_prompt=phase.system_prompt,
        phase="discovery",
        parallelism=parallelism,
        events=events,
        metrics=metrics,
        strict_json=strict_json,
        no_prune=no_prune,
        allowed_tools=phase.tool_allowlist,
        view=view,
    )
    forest = Forest()
    roots = [engine.spawn_root(forest, task_from_source(src, view.path_label)) for src in sources]
    results = engine.run(forest) if roots else []

    chains: list[EvidenceChain] = []
    records: list[ChainRecord] = []
    failures: list[dict[str, str]] = []
    seen_keys: set[tuple] = set()
    for root, result in zip(roots, results):
        if result.status_tag == StatusTag.ERROR:
            failures.append({"tree": root, "reason": result.reason_snippet})
            continue
        if result.status_tag not in (StatusTag.PATH_COMPLETE, StatusTag.SINK_REACHED):
            continue
        payload = result.payload or {}
        entries = payload.get("paths")
        if not isinstance(entries, list) or not entries:
            entries = [payload]
        for entry in entries:
            if not isinstance(entry, dict):
                continue
            propagation = entry.get("propagation") or entry.get("full_path")
            if propagation is None and entry is payload:
                propagation = result.path_segment
            if not propagation:
                continue
            propagation = [str(s) for s in propagation]
            try:
                check_propagation(propagation)
            except ValueError as exc:
                failures.append({"tree": root, "reason": f"malformed path: {exc}"})
                continue
            cwe = entry.get("type") or payload.get("type") or infer_cwe(propagation[-1], sink_table)
            if cwe is None:
                failures.append({"tree": root, "reason": "no CWE class for sink element"})
                continue
            identifier = entry.get("identifier") or payload.get("identifier") or []
            reason = (
                entry.get("reason")
                or payload.get("reason")
                or result.reason_snippet
                or "unsanitized source-to-sink flow"
            )
            file_path = entry.get("file_path") or payload.get("file_path") or view.path_label
            try:
                chain = EvidenceChain(
                    type=str(cwe),
                    identifier=[str(v) for v in identifier],
                    propagation=propagation,
                    reason=str(reason),
                    file_path=str(file_path),
                )
            except SchemaError as exc:
                failures.append({"tree": root, "reason": f"invalid chain: {exc}"})
                continue
            key = (chain.type, tuple(chain.identifier), sink_address_of(chain.propagation[-1]))
            if key in seen_keys:
                continue
            seen_keys.add(key)
            chains.append(chain)
            records.append(ChainRecord(chain=chain, payload=payload, root=root))
    return DiscoveryOutcome(
        chains=chains,
        records=records,
        failures=failures,
        results=results,
        metrics=engine.metrics,
    )


VALIDATION_FAILED_REASON = "validation agent failed"


def validate(
    view,
    chain: EvidenceChain,
    backend,
    phase: PhaseConfig | None = None,
    *,
    label: str = "v0",
    events: EventLog | None = None,
    metrics: RunMetrics | None = None,
    strict_json: bool = True,
) -> ValidationVerdict:
    """Replay one chain through a single validation agent seeded with the
    chain in its user message. A failed agent yields an inaccurate verdict
    flagged distinctly in the metrics rather than an exception."""
    phase = phase or validation_phase()
    engine = Engine(
        backend,
        build_registry(view),
        phase.budget,
        system_prompt=phase.system_prompt,
        phase="validation",
        parallelism=1,
        events=events,
        metrics=metrics,
        strict_json=strict_json,
        allowed_tools=phase.tool_allowlist,
        view=view,
    )
    forest = Forest()
    root = engine.spawn_root(
        forest,
        _task_from_chain(chain),
        label=label,
        extra_user_text=render_chain_message(serialize(chain)),
    )
    result = engine.run(forest)[0]
    if result.status_tag == StatusTag.ERROR or result.payload is None:
        engine.metrics.tree_bucket(root)["validation_failed"] = 1
        return ValidationVerdict(
            accuracy="inaccurate",
            vulnerability=False,
            propagation=[],
            reason=VALIDATION_FAILED_REASON,
        )
    payload = result.payload
    try:
        return ValidationVerdict(
            accuracy=str(payload.get("accuracy", "")),
            vulnerability=bool(payload.get("vulnerability", False)),
            propagation=[str(s) for s in payload.get("propagation", [])],
            reason=str(payload.get("reason", "")) or "unspecified",
        )
    except SchemaError:
        engine.metrics.tree_bucket(root)["validation_failed"] = 1
        return ValidationVerdict(
            accuracy="inaccurate",
            vulnerability=False,
            propagation=[],
            reason=VALIDATION_FAILED_REASON,
        )


def assemble_report(
    chain: EvidenceChain,
    verdict: ValidationVerdict,
    scoring: dict[str, Any] | None = None,
) -> FinalReport:
    """Compose the final report from an accurate verdict: corrected
    propagation, merged reason, scores from the finishing payload when
    present, severity-table defaults otherwise."""
    if verdict.accuracy != "accurate":
        raise ValueError("assemble_report requires an accurate verdict")
    scoring = scoring or {}
    cwe = str(scoring.get("type") or chain.type)
    weaknesses: list[str] = []
    for value in scoring.get("additional_weaknesses", []) or []:
        if isinstance(value, str) and _CWE_MENTION_RE.fullmatch(value) and value != cwe:
            weaknesses.append(value)
    for mention in _CWE_MENTION_RE.findall(verdict.reason):
        if mention != cwe and mention not in weaknesses:
            weaknesses.append(mention)

    risk = scoring.get("risk_score")
    if not isinstance(risk, (int, float)) or isinstance(risk, bool):
        risk = SEVERITY_DEFAULTS.get(cwe, SEVERITY_FALLBACK)
        if AUTH_BYPASS_CWE in weaknesses:
            risk = max(risk, AUTH_BYPASS_SCORE)
    confidence = scoring.get("confidence")
    if not isinstance(confidence, (int, float)) or isinstance(confidence, bool):
        confidence = CONFIDENCE_DEFAULT

    reason = verdict.reason if verdict.reason else chain.reason
    return FinalReport(
        type=cwe,
        additional_weaknesses=weaknesses,
        identifier=list(chain.identifier),
        propagation=list(verdict.propagation),
        reason=reason,
        risk_score=float(risk),
        confidence=float(confidence),
        file_path=chain.file_path,
    )


# --- precision arithmetic -----------------------------------------------


def precision_estimate(samples: list[tuple[Any, bool]]) -> dict[str, Any]:
    """Per-type and overall precision from manually labeled samples.

    Percentages are exact (unrounded); display rounding is the caller's
    business. Empty inputs yield absent entries rather than zeros.
    """
    by_type: dict[str, list[bool]] = {}
    for report, verified in samples:
        type_ = report if isinstance(report, str) else report.type
        by_type.setdefault(type_, []).append(bool(verified))
    per_type = {}
    for type_, labels in sorted(by_type.items()):
        per_type[type_] = {
            "verified": sum(labels),
            "total": len(labels),
            "precision_pct": 100.0 * sum(labels) / len(labels),
        }
    total = sum(len(v) for v in by_type.values())
    verified = sum(sum(v) for v in by_type.values())
    out: dict[str, Any] = {"per_type": per_type}
    if total:
        out["overall_pct"] = 100.0 * verified / total
        out["verified"] = verified
        out["total"] = total
    return out


def estimate_verified(
    per_type_precision: dict[str, float], underlying_counts: dict[str, int]
) -> dict[str, Any]:
    """Scale per-type precision up to underlying finding counts: estimated
    verified totals and the weighted overall percentage."""
    est: dict[str, float] = {}
    for type_, count in underlying_counts.items():
        if type_ not in per_type_precision:
            continue
        est[type_] = per_type_precision[type_] / 100.0 * count
    total_underlying = sum(underlying_counts[t] for t in est)
    total_est = sum(est.values())
    out: dict[str, Any] = {"per_type_estimate": est, "estimated_verified": total_est}
    if total_underlying:
        out["weighted_pct"] = 100.0 * total_est / total_underlying
    return out
