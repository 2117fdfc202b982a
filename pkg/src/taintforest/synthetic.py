"""Synthetic program model: the ground-truth substrate for LLM-free runs.

A program is a call graph plus per-function taint transfer maps. Sources say
where taint enters, sinks say which argument of which function is dangerous,
and call edges carry an argument-flow map and a sanitizer flag. The model is
deliberately function-granular: just enough structure for source-to-sink path
sets to be well-defined and exhaustively enumerable.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Any

from .model import format_address, parse_address

SOURCE_CATEGORIES = ("network", "env", "file", "argv", "other")


class UnknownFunction(KeyError):
    pass


class UnknownAddress(KeyError):
    pass


@dataclass(frozen=True)
class SourceSpec:
    category: str
    symbol: str
    function: str
    address: int
    entry: str = ""

    def __post_init__(self) -> None:
        if self.category not in SOURCE_CATEGORIES:
            raise ValueError(f"unknown source category {self.category!r}")
        if not self.entry:
            object.__setattr__(self, "entry", self.symbol)

    def to_dict(self) -> dict[str, Any]:
        return {
            "category": self.category,
            "symbol": self.symbol,
            "function": self.function,
            "address": format_address(self.address),
            "entry": self.entry,
        }


@dataclass(frozen=True)
class SinkSpec:
    function: str
    arg_index: int

    def to_dict(self) -> dict[str, Any]:
        return {"function": self.function, "arg_index": self.arg_index}


@dataclass(frozen=True)
class CallEdge:
    caller: str
    callee: str
    site: int
    flow: dict[str, str] = field(default_factory=dict)
    sanitized: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "caller": self.caller,
            "callee": self.callee,
            "site": format_address(self.site),
            "flow": dict(self.flow),
            "sanitized": self.sanitized,
        }


@dataclass(frozen=True)
class FunctionInfo:
    name: str
    address: int
    instructions: int = 16

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "address": format_address(self.address),
            "instructions": self.instructions,
        }


@dataclass
class SyntheticProgram:
    name: str
    functions: list[FunctionInfo]
    calls: list[CallEdge]
    taint_rules: dict[str, dict[str, list[str]]]
    sources: list[SourceSpec]
    sinks: list[SinkSpec]
    strings: list[tuple[int, str]] = field(default_factory=list)

    def __post_init__(self) -> None:
        names = {f.name for f in self.functions}
        addresses = [f.address for f in self.functions]
        if len(set(addresses)) != len(addresses):
            raise ValueError("function addresses must be unique")
        for edge in self.calls:
            if edge.caller not in names or edge.callee not in names:
                raise ValueError(f"call edge references unknown function: {edge}")
        for src in self.sources:
            if src.function not in names:
                raise ValueError(f"source names unknown function {src.function!r}")
        for sink in self.sinks:
            if sink.function not in names:
                raise ValueError(f"sink names unknown function {sink.function!r}")
        vocab = self._location_vocabulary()
        for fn, rules in self.taint_rules.items():
            if fn not in names:
                raise ValueError(f"taint rule for unknown function {fn!r}")
            for entry, exits in rules.items():
                for loc in [entry, *exits]:
                    if loc not in vocab[fn]:
                        raise ValueError(f"taint rule in {fn!r} uses undeclared location {loc!r}")

    def _location_vocabulary(self) -> dict[str, set[str]]:
        vocab: dict[str, set[str]] = {f.name: set() for f in self.functions}
        for fn, rules in self.taint_rules.items():
            for entry, exits in rules.items():
                vocab.setdefault(fn, set()).update([entry, *exits])
        for edge in self.calls:
            vocab.setdefault(edge.caller, set()).update(edge.flow.keys())
            vocab.setdefault(edge.callee, set()).update(edge.flow.values())
        for src in self.sources:
            vocab.setdefault(src.function, set()).add(src.entry)
        return vocab

    # lookups -----------------------------------------------------------

    def function(self, name: str) -> FunctionInfo:
        for fn in self.functions:
            if fn.name == name:
                return fn
        raise UnknownFunction(name)

    def function_at(self, address: int) -> FunctionInfo:
        for fn in self.functions:
            if fn.address == address:
                return fn
        raise UnknownAddress(format_address(address))

    def edges_from(self, name: str) -> list[CallEdge]:
        return sorted((e for e in self.calls if e.caller == name), key=lambda e: e.site)

    def edges_to(self, name: str) -> list[CallEdge]:
        return sorted((e for e in self.calls if e.callee == name), key=lambda e: e.site)

    def exits(self, fn: str, loc: str) -> set[str]:
        return {loc} | set(self.taint_rules.get(fn, {}).get(loc, []))

    # serialization ------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "functions": [f.to_dict() for f in self.functions],
            "calls": [e.to_dict() for e in self.calls],
            "taint_rules": {k: {e: list(x) for e, x in v.items()} for k, v in self.taint_rules.items()},
            "sources": [s.to_dict() for s in self.sources],
            "sinks": [s.to_dict() for s in self.sinks],
            "strings": [[format_address(a), t] for a, t in self.strings],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SyntheticProgram":
        return cls(
            name=str(data.get("name", "program")),
            functions=[
                FunctionInfo(
                    name=f["name"],
                    address=parse_address(f["address"]),
                    instructions=int(f.get("instructions", 16)),
                )
                for f in data["functions"]
            ],
            calls=[
                CallEdge(
                    caller=e["caller"],
                    callee=e["callee"],
                    site=parse_address(e["site"]),
                    flow=dict(e.get("flow", {})),
                    sanitized=bool(e.get("sanitized", False)),
                )
                for e in data.get("calls", [])
            ],
            taint_rules={
                fn: {entry: list(exits) for entry, exits in rules.items()}
                for fn, rules in data.get("taint_rules", {}).items()
            },
            sources=[
                SourceSpec(
                    category=s["category"],
                    symbol=s["symbol"],
                    function=s["function"],
                    address=parse_address(s["address"]),
                    entry=s.get("entry", ""),
                )
                for s in data.get("sources", [])
            ],
            sinks=[
                SinkSpec(function=s["function"], arg_index=int(s["arg_index"]))
                for s in data.get("sinks", [])
            ],
            strings=[(parse_address(a), t) for a, t in data.get("strings", [])],
        )

    @classmethod
    def from_file(cls, path: str) -> "SyntheticProgram":
        with open(path, encoding="utf-8") as handle:
            return cls.from_dict(json.load(handle))

    def to_file(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle, indent=2)
            handle.write("\n")


# --- queries ----------------------------------------------------------------

QUERIES = ("list_functions", "disasm", "callers", "callees", "strings", "xrefs_to")


def _disasm_lines(program: SyntheticProgram, fn: FunctionInfo) -> list[str]:
    lines = [f"{format_address(fn.address)}  push {{fp, lr}}"]
    cursor = fn.address
    for edge in program.edges_from(fn.name):
        site = max(edge.site, cursor + 4)
        flow = ",".join(f"{a}->{b}" for a, b in sorted(edge.flow.items()))
        guard = " ; sanitized" if edge.sanitized else ""
        lines.append(f"{format_address(site)}  bl sym.{edge.callee} ; flow {flow or 'none'}{guard}")
        cursor = site
    lines.append(f"{format_address(cursor + 4)}  pop {{fp, pc}}")
    return lines


def synth_query(view, query: str, **args) -> str:
    """Deterministic textual rendering of a structured query so scripted
    agents can key on stable output."""
    program: SyntheticProgram = view.program if hasattr(view, "program") else view
    if query == "list_functions":
        rows = sorted(program.functions, key=lambda f: f.address)
        return "\n".join(f"{format_address(f.address)}  {f.name}" for f in rows)
    if query == "disasm":
        fn = program.function(str(args.get("function", "")))
        return "\n".join(_disasm_lines(program, fn))
    if query == "callers":
        fn = program.function(str(args.get("function", "")))
        rows = program.edges_to(fn.name)
        return "\n".join(f"{e.caller} {format_address(e.site)}" for e in rows)
    if query == "callees":
        fn = program.function(str(args.get("function", "")))
        rows = program.edges_from(fn.name)
        return "\n".join(f"{e.callee} {format_address(e.site)}" for e in rows)
    if query == "strings":
        return "\n".join(f"{format_address(a)} {t}" for a, t in program.strings)
    if query == "xrefs_to":
        addr = parse_address(args.get("address", ""), "address")
        fn = program.function_at(addr)
        rows = program.edges_to(fn.name)
        return "\n".join(f"{e.caller} {format_address(e.site)} [CALL] bl sym.{fn.name}" for e in rows)
    raise ValueError(f"unknown query {query!r}")


class SynthView:
    """Binary-view interface over a synthetic program."""

    kind = "synthetic"

    def __init__(self, program: SyntheticProgram, path_label: str | None = None):
        self.program = program
        self.path_label = path_label or program.name

    def functions(self) -> list[tuple[str, int]]:
        return [(f.name, f.address) for f in sorted(self.program.functions, key=lambda f: f.address)]

    def imports(self) -> list[str]:
        symbols = [s.symbol for s in self.program.sources]
        symbols += [s.function for s in self.program.sinks]
        return sorted(set(symbols))

    def declared_sources(self) -> list[SourceSpec]:
        return list(self.program.sources)

    def declared_sinks(self) -> list[SinkSpec]:
        return list(self.program.sinks)


# --- random program generator -------------------------------------------

_SOURCE_POOL = {
    "network": ["recv", "recvfrom", "accept", "get_querry_var", "websGetVar"],
    "env": ["getenv", "nvram_get", "nvram_safe_get"],
    "file": ["fgets", "fread", "fscanf"],
    "argv": ["argv"],
}

_SINK_POOL = ["system", "popen", "execve", "strcpy", "strcat", "sprintf", "printf", "syslog"]


def generate_program(seed: int, max_functions: int = 50) -> SyntheticProgram:
    """Random layered call graph with declared sources/sinks and a bounded,
    collision-free oracle path set: at most 8 paths per source (one
    delegation round under the default children budget) and no two paths
    sharing source symbol plus final sink call site, so per-path findings
    survive deduplication."""
    from .oracle import oracle_taint_paths, path_sink_site

    for attempt in range(64):
        rng = random.Random((seed << 8) | attempt)
        program = _generate_once(rng, max_functions)
        paths_by_source = {
            src.symbol: oracle_taint_paths(program, sources=[src]) for src in program.sources
        }
        flat: dict[tuple[str, str], int] = {}
        ok = True
        for symbol, paths in paths_by_source.items():
            if len(paths) > 8:
                ok = False
                break
            for path in paths:
                key = (symbol, path_sink_site(path))
                flat[key] = flat.get(key, 0) + 1
                if flat[key] > 1:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return program
    raise RuntimeError(f"could not generate a collision-free program for seed {seed}")


def _generate_once(rng: random.Random, max_functions: int) -> SyntheticProgram:
    n = rng.randint(6, max(6, max_functions))
    names = [f"fn_{i:02d}" for i in range(n)]
    n_sinks = rng.randint(1, 2)
    sink_symbols = rng.sample(_SINK_POOL, n_sinks)
    for j, symbol in enumerate(sink_symbols):
        names[n - 1 - j] = f"sym.imp.{symbol}"
    functions = [
        FunctionInfo(name=name, address=0x1000 * (i + 1), instructions=rng.randint(8, 40))
        for i, name in enumerate(names)
    ]
    sinks = [SinkSpec(function=f"sym.imp.{symbol}", arg_index=0) for symbol in sink_symbols]
    sink_names = {s.function for s in sinks}

    # Per-function taint behavior: some functions move taint into a local
    # buffer before passing it on.
    taint_rules: dict[str, dict[str, list[str]]] = {}
    out_loc: dict[str, str] = {}
    for fn in names:
        if fn in sink_names:
            out_loc[fn] = "arg0"
        elif rng.random() < 0.3:
            taint_rules[fn] = {"arg0": ["buf"]}
            out_loc[fn] = "buf"
        else:
            out_loc[fn] = "arg0"

    edges: list[CallEdge] = []
    sites_used: dict[str, int] = {name: 0 for name in names}

    def add_edge(caller_i: int, callee_i: int, sanitized: bool) -> None:
        caller, callee = names[caller_i], names[callee_i]
        sites_used[caller] += 1
        site = functions[caller_i].address + 8 * sites_used[caller]
        flow = {out_loc[caller]: "arg0"}
        edges.append(CallEdge(caller=caller, callee=callee, site=site, flow=flow, sanitized=sanitized))

    interior = n - n_sinks
    for i in range(interior):
        for _ in range(rng.randint(0, 2)):
            j = rng.randint(i + 1, n - 1)
            if not any(e.caller == names[i] and e.callee == names[j] for e in edges):
                add_edge(i, j, sanitized=rng.random() < 0.18)

    n_sources = rng.randint(1, min(3, interior))
    source_fns = rng.sample(range(max(1, interior // 2)), min(n_sources, max(1, interior // 2)))
    categories = [c for c in _SOURCE_POOL if c != "argv"]
    sources = []
    used_symbols: set[str] = set()
    for idx, fi in enumerate(sorted(source_fns)):
        category = rng.choice(categories)
        pool = [s for s in _SOURCE_POOL[category] if s not in used_symbols]
        if not pool:
            continue
        symbol = rng.choice(pool)
        used_symbols.add(symbol)
        sources.append(
            SourceSpec(
                category=category,
                symbol=symbol,
                function=names[fi],
                address=functions[fi].address + 4,
                entry="arg0",
            )
        )

    # Guarantee at least one clean source-to-sink chain for the first source.
    if sources:
        fi = names.index(sources[0].function)
        hops = sorted(rng.sample(range(fi + 1, interior), min(rng.randint(0, 2), max(0, interior - fi - 1))))
        chain = [fi, *hops, n - 1]
        for a, b in zip(chain, chain[1:]):
            existing = [e for e in edges if e.caller == names[a] and e.callee == names[b]]
            if existing:
                if existing[0].sanitized:
                    edges.remove(existing[0])
                    edges.append(
                        CallEdge(
                            caller=existing[0].caller,
                            callee=existing[0].callee,
                            site=existing[0].site,
                            flow=existing[0].flow,
                            sanitized=False,
                        )
                    )
            else:
                add_edge(a, b, sanitized=False)

    return SyntheticProgram(
        name=f"synth-{rng.randint(0, 10**9):09d}",
        functions=functions,
        calls=edges,
        taint_rules=taint_rules,
        sources=sources,
        sinks=sinks,
        strings=[(0x100, "GET /index"), (0x140, "admin")] if rng.random() < 0.5 else [],
    )
