"""Run orchestration: the analyze/validate entry points behind the CLI,
the output directory layout, event-log replay, and run statistics.

Output layout:
    chains/chain-NNN.json      evidence chains (discovery)
    verdicts/verdict-NNN.json  one verdict per chain, same index
    reports/report-NNN.json    final reports for accurate verdicts
    run.metrics.json           counters for the whole run
    events.jsonl               every spawn/step/delegate/tool/finish record
"""

from __future__ import annotations

import json
import os
import tempfile
from typing import Any

from .backends import Script, ScriptedBackend
from .events import EventLog, canonical_bytes, load_events
from .model import EvidenceChain, RunMetrics, deserialize, serialize
from .pipeline import (
    assemble_report,
    discover,
    discovery_phase,
    enumerate_sources,
    validate,
    validation_phase,
)
from .runtime import Budget


def load_scripts(path: str) -> tuple[Script, Script]:
    """Script files are either one flat "<label>/turn-N" mapping used for both
    phases, or {"discovery": {...}, "validation": {...}}."""
    with open(path, encoding="utf-8") as handle:
        data = json.load(handle)
    if "discovery" in data or "validation" in data:
        return (
            Script.from_mapping(data.get("discovery", {})),
            Script.from_mapping(data.get("validation", {})),
        )
    flat = Script.from_mapping(data)
    return flat, flat


def _write_artifact(directory: str, stem: str, index: int, text: str) -> str:
    path = os.path.join(directory, f"{stem}-{index:03d}.json")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(text + "\n")
    return path


def run_analysis(
    view,
    discovery_backend,
    validation_backend,
    *,
    out_dir: str,
    budget: Budget | None = None,
    parallelism: int = 1,
    source_table=None,
    sink_table=None,
    strict_json: bool = True,
    no_prune: bool = False,
    run_meta: dict[str, Any] | None = None,
) -> dict[str, Any]:
    """Discovery, then validation over every chain, then report assembly."""
    budget = budget or Budget()
    for sub in ("chains", "verdicts", "reports"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    metrics = RunMetrics()
    events = EventLog(os.path.join(out_dir, "events.jsonl"))
    meta = dict(run_meta or {})
    meta.setdefault("input", view.path_label)
    meta["budget"] = {
        "max_steps": budget.max_steps,
        "max_depth": budget.max_depth,
        "max_children": budget.max_children,
        "max_agents_per_tree": budget.max_agents_per_tree,
    }
    meta["parallelism"] = parallelism
    if view.kind == "synthetic":
        meta["input_kind"] = "synthetic"
        meta["program"] = view.program.to_dict()
    else:
        meta.setdefault("input_kind", "binary")
    events.emit("run_start", **meta)

    sources = enumerate_sources(view, source_table)
    outcome = discover(
        view,
        discovery_backend,
        discovery_phase(budget),
        parallelism=parallelism,
        events=events,
        metrics=metrics,
        source_table=source_table,
        sink_table=sink_table,
        strict_json=strict_json,
        no_prune=no_prune,
    )

    accurate = 0
    inaccurate = 0
    reports = 0
    for index, record in enumerate(outcome.records):
        _write_artifact(os.path.join(out_dir, "chains"), "chain", index, serialize(record.chain))
        verdict = validate(
            view,
            record.chain,
            validation_backend,
            validation_phase(budget),
            label=f"v{index}",
            events=events,
            metrics=metrics,
            strict_json=strict_json,
        )
        _write_artifact(os.path.join(out_dir, "verdicts"), "verdict", index, serialize(verdict))
        if verdict.accuracy == "accurate":
            accurate += 1
            report = assemble_report(record.chain, verdict, record.payload)
            _write_artifact(os.path.join(out_dir, "reports"), "report", index, serialize(report))
            reports += 1
        else:
            inaccurate += 1

    events.emit("run_complete", metrics=metrics.to_dict())
    events.close()
    with open(os.path.join(out_dir, "run.metrics.json"), "w", encoding="utf-8") as handle:
        json.dump(metrics.to_dict(), handle, indent=2)
        handle.write("\n")
    return {
        "sources": len(sources),
        "chains": len(outcome.chains),
        "accurate": accurate,
        "inaccurate": inaccurate,
        "reports": reports,
        "tree_failures": len(outcome.failures),
        "metrics": metrics,
        "out_dir": out_dir,
    }


def run_validation(
    view,
    chains: list[EvidenceChain],
    validation_backend,
    *,
    out_dir: str,
    budget: Budget | None = None,
    strict_json: bool = True,
) -> dict[str, Any]:
    budget = budget or Budget()
    os.makedirs(os.path.join(out_dir, "verdicts"), exist_ok=True)
    metrics = RunMetrics()
    events = EventLog(os.path.join(out_dir, "events.jsonl"))
    events.emit("run_start", input=view.path_label, mode="validate-only")
    accurate = 0
    for index, chain in enumerate(chains):
        verdict = validate(
            view,
            chain,
            validation_backend,
            validation_phase(budget),
            label=f"v{index}",
            events=events,
            metrics=metrics,
            strict_json=strict_json,
        )
        _write_artifact(os.path.join(out_dir, "verdicts"), "verdict", index, serialize(verdict))
        accurate += verdict.accuracy == "accurate"
    events.emit("run_complete", metrics=metrics.to_dict())
    events.close()
    with open(os.path.join(out_dir, "run.metrics.json"), "w", encoding="utf-8") as handle:
        json.dump(metrics.to_dict(), handle, indent=2)
        handle.write("\n")
    return {
        "chains": len(chains),
        "accurate": accurate,
        "inaccurate": len(chains) - accurate,
        "metrics": metrics,
        "out_dir": out_dir,
    }


def load_chain_files(path: str) -> list[EvidenceChain]:
    """A single chain JSON or a directory of them, sorted by filename."""
    paths: list[str] = []
    if os.path.isdir(path):
        inner = os.path.join(path, "chains")
        root = inner if os.path.isdir(inner) else path
        paths = sorted(
            os.path.join(root, name) for name in os.listdir(root) if name.endswith(".json")
        )
    else:
        paths = [path]
    chains = []
    for file_path in paths:
        with open(file_path, encoding="utf-8") as handle:
            text = handle.read()
        try:
            chains.append(deserialize(text, EvidenceChain))
        except Exception as exc:
            raise ValueError(f"{file_path}: {exc}") from None
    return chains


REPLAY_SKIP_TYPES = {"run_start", "run_complete"}


def _scripts_from_events(records: list[dict[str, Any]]) -> tuple[Script, Script]:
    discovery = Script()
    validation = Script()
    for record in records:
        if record["type"] != "step":
            continue
        target = validation if str(record.get("tree", "")).startswith("v") else discovery
        target.add(record["agent"], record["turn"], record["raw"])
    return discovery, validation


def replay_run(events_path: str, out_dir: str | None = None) -> bool:
    """Re-execute a recorded run from its own event log and check the fresh
    canonical log is byte-identical. The run_start snapshot carries the
    synthetic program (or transcript path) needed to rebuild the view."""
    from .r2 import R2View, TranscriptSession
    from .synthetic import SynthView, SyntheticProgram

    old = load_events(events_path)
    start = next((r for r in old if r["type"] == "run_start"), None)
    if start is None:
        raise ValueError("event log has no run_start record")
    if start.get("input_kind") == "synthetic":
        program = SyntheticProgram.from_dict(start["program"])
        view = SynthView(program, path_label=start.get("input"))
    elif start.get("transcript"):
        view = R2View(
            TranscriptSession.from_file(start["transcript"]),
            path_label=start.get("input", "binary"),
        )
    else:
        raise ValueError("event log is not replayable: no program snapshot or transcript")
    discovery_script, validation_script = _scripts_from_events(old)
    budget_data = start.get("budget", {})
    budget = Budget(**budget_data) if budget_data else Budget()

    target = out_dir or tempfile.mkdtemp(prefix="taintforest-replay-")
    run_analysis(
        view,
        ScriptedBackend(discovery_script),
        ScriptedBackend(validation_script),
        out_dir=target,
        budget=budget,
        parallelism=1,
    )
    new = load_events(os.path.join(target, "events.jsonl"))
    old_core = [r for r in old if r["type"] not in REPLAY_SKIP_TYPES]
    new_core = [r for r in new if r["type"] not in REPLAY_SKIP_TYPES]
    return canonical_bytes(old_core) == canonical_bytes(new_core)


def collect_stats(run_dirs: list[str]) -> dict[str, Any]:
    """Means over runs, from each run's run.metrics.json."""
    rows = []
    for run_dir in run_dirs:
        path = os.path.join(run_dir, "run.metrics.json")
        with open(path, encoding="utf-8") as handle:
            metrics = RunMetrics.from_dict(json.load(handle))
        rows.append(
            {
                "run": run_dir,
                "agents": metrics.agents_created,
                "steps": metrics.reasoning_steps,
                "backend_calls": metrics.backend_calls,
                "tokens": metrics.tokens_discovery + metrics.tokens_validation,
                "wall_time_s": metrics.wall_time_s,
            }
        )
    count = len(rows)
    means = {}
    if count:
        for key in ("agents", "steps", "backend_calls", "tokens", "wall_time_s"):
            means[key] = sum(r[key] for r in rows) / count
    return {"runs": rows, "means": means, "count": count}
