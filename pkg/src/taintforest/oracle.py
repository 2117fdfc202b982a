"""Brute-force taint oracle over synthetic programs.

Enumerates every unsanitized source-to-sink flow by depth-first search over
the call graph composed with per-function transfer maps, and renders each
path in the same Source/Step/Sink string format evidence chains use, so
oracle output and discovered chains are directly comparable.

Also houses the inverse direction: parsing a propagation list back into graph
steps and checking each one against a program, which is what the deterministic
validation double uses to confirm or reject chains.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .model import format_address, parse_address
from .synthetic import CallEdge, SourceSpec, SyntheticProgram

ORACLE_FUNCTION_LIMIT = 10_000

_SOURCE_TMPL = "Source: {category} input via {symbol} enters {function} at {addr} (taint in {entry})"
_STEP_TMPL = "Step: {caller} passes tainted {loc} to {callee} via call at {site}"
_SINK_TMPL = "Sink: {callee} argument {arg} receives tainted {loc} from {caller} at {site}"

_SOURCE_RE = re.compile(
    r"^Source: (?P<category>\w+) input via (?P<symbol>\S+) enters (?P<function>\S+) "
    r"at (?P<addr>0x[0-9a-f]+) \(taint in (?P<entry>[^)]+)\)$"
)
_STEP_RE = re.compile(
    r"^Step: (?P<caller>\S+) passes tainted (?P<loc>\S+) to (?P<callee>\S+) "
    r"via call at (?P<site>0x[0-9a-f]+)$"
)
_SINK_RE = re.compile(
    r"^Sink: (?P<callee>\S+) argument (?P<arg>\d+) receives tainted (?P<loc>\S+) "
    r"from (?P<caller>\S+) at (?P<site>0x[0-9a-f]+)$"
)

_ARG_RE = re.compile(r"^arg(\d+)$")


def render_source(src: SourceSpec) -> str:
    return _SOURCE_TMPL.format(
        category=src.category,
        symbol=src.symbol,
        function=src.function,
        addr=format_address(src.address),
        entry=src.entry,
    )


def render_step(edge: CallEdge, loc: str) -> str:
    return _STEP_TMPL.format(
        caller=edge.caller, loc=loc, callee=edge.callee, site=format_address(edge.site)
    )


def render_sink(edge: CallEdge, arg: int, loc: str) -> str:
    return _SINK_TMPL.format(
        callee=edge.callee,
        arg=arg,
        loc=loc,
        caller=edge.caller,
        site=format_address(edge.site),
    )


def path_sink_site(path: tuple[str, ...]) -> str:
    match = _SINK_RE.match(path[-1])
    return match.group("site") if match else ""


def oracle_taint_paths(
    program: SyntheticProgram,
    sources: list[SourceSpec] | None = None,
    sinks=None,
) -> set[tuple[str, ...]]:
    """Exhaustively enumerate unsanitized source-to-sink propagation paths.

    A path is emitted iff every call edge along it is non-sanitizing and the
    final edge delivers taint into a sink's dangerous argument. Simple paths
    only: a (function, location) state never repeats within one path.
    """
    if len(program.functions) > ORACLE_FUNCTION_LIMIT:
        raise ValueError(f"program too large for exhaustive search (> {ORACLE_FUNCTION_LIMIT})")
    sources = program.sources if sources is None else sources
    sinks = program.sinks if sinks is None else sinks
    sink_args = {(s.function, s.arg_index) for s in sinks}
    edges_from: dict[str, list[CallEdge]] = {}
    for edge in program.calls:
        edges_from.setdefault(edge.caller, []).append(edge)
    for rows in edges_from.values():
        rows.sort(key=lambda e: e.site)

    paths: set[tuple[str, ...]] = set()

    def walk(fn: str, loc: str, visited: frozenset, elements: tuple[str, ...]) -> None:
        exits = sorted(program.exits(fn, loc))
        for edge in edges_from.get(fn, []):
            if edge.sanitized:
                continue
            for out in exits:
                if out not in edge.flow:
                    continue
                target = edge.flow[out]
                arg_match = _ARG_RE.match(target)
                if arg_match and (edge.callee, int(arg_match.group(1))) in sink_args:
                    paths.add(elements + (render_sink(edge, int(arg_match.group(1)), out),))
                state = (edge.callee, target)
                if state not in visited:
                    walk(
                        edge.callee,
                        target,
                        visited | {state},
                        elements + (render_step(edge, out),),
                    )

    for src in sources:
        start = (src.function, src.entry)
        walk(src.function, src.entry, frozenset({start}), (render_source(src),))
    return paths


# --- chain verification -------------------------------------------------

CAUSE_NO_PATH = "path does not exist"
CAUSE_SANITIZED = "data is sanitized"
CAUSE_NO_SINK = "sink is not reached"


@dataclass(frozen=True)
class ChainCheck:
    ok: bool
    cause: str = ""
    step_index: int = 0  # 1-based index of the failing propagation element
    detail: str = ""

    def reason(self) -> str:
        if self.ok:
            return "all propagation steps verified"
        return f"{self.cause}: step {self.step_index} failed — {self.detail}"


def _find_edge(program: SyntheticProgram, caller: str, callee: str, site: int) -> CallEdge | None:
    for edge in program.calls:
        if edge.caller == caller and edge.callee == callee and edge.site == site:
            return edge
    return None


def verify_chain(program: SyntheticProgram, propagation: list[str]) -> ChainCheck:
    """Re-check every propagation element against the program, in order.

    Tracks the tainted (function, location) state across elements; the first
    element must match a declared source, every Step must cross an existing
    unsanitized call edge continuing the tracked state, and the final element
    must deliver taint into a declared sink argument.
    """
    if not propagation:
        return ChainCheck(False, CAUSE_NO_PATH, 1, "empty propagation")
    source_match = _SOURCE_RE.match(propagation[0])
    if source_match is None:
        return ChainCheck(False, CAUSE_NO_PATH, 1, f"unrecognized source element {propagation[0]!r}")
    src_addr = parse_address(source_match.group("addr"))
    declared = [
        s
        for s in program.sources
        if s.symbol == source_match.group("symbol")
        and s.function == source_match.group("function")
        and s.category == source_match.group("category")
        and s.address == src_addr
        and s.entry == source_match.group("entry")
    ]
    if not declared:
        return ChainCheck(
            False, CAUSE_NO_PATH, 1, f"no such source {source_match.group('symbol')!r} at {source_match.group('addr')}"
        )
    fn, loc = declared[0].function, declared[0].entry

    sink_args = {(s.function, s.arg_index) for s in program.sinks}

    for index, element in enumerate(propagation[1:], start=2):
        is_last = index == len(propagation)
        step_match = _STEP_RE.match(element)
        sink_match = _SINK_RE.match(element)
        if is_last:
            if sink_match is None:
                return ChainCheck(False, CAUSE_NO_SINK, index, f"final element is not a sink: {element!r}")
            caller = sink_match.group("caller")
            callee = sink_match.group("callee")
            site = parse_address(sink_match.group("site"))
            out = sink_match.group("loc")
            arg = int(sink_match.group("arg"))
            if caller != fn:
                return ChainCheck(
                    False, CAUSE_NO_PATH, index, f"sink is called from {caller!r} but taint is in {fn!r}"
                )
            edge = _find_edge(program, caller, callee, site)
            if edge is None:
                return ChainCheck(
                    False, CAUSE_NO_PATH, index, f"no call {caller} -> {callee} at {sink_match.group('site')}"
                )
            if edge.sanitized:
                return ChainCheck(False, CAUSE_SANITIZED, index, f"edge {caller} -> {callee} sanitizes its argument")
            if out not in program.exits(fn, loc):
                return ChainCheck(False, CAUSE_NO_PATH, index, f"taint never reaches {out!r} in {fn!r}")
            if edge.flow.get(out) != f"arg{arg}":
                return ChainCheck(False, CAUSE_NO_SINK, index, f"{out!r} does not flow into argument {arg}")
            if (callee, arg) not in sink_args:
                return ChainCheck(False, CAUSE_NO_SINK, index, f"{callee!r} argument {arg} is not a declared sink")
            return ChainCheck(True)
        if step_match is None:
            return ChainCheck(False, CAUSE_NO_PATH, index, f"unrecognized step element {element!r}")
        caller = step_match.group("caller")
        callee = step_match.group("callee")
        site = parse_address(step_match.group("site"))
        out = step_match.group("loc")
        if caller != fn:
            return ChainCheck(
                False, CAUSE_NO_PATH, index, f"step claims caller {caller!r} but taint is in {fn!r}"
            )
        edge = _find_edge(program, caller, callee, site)
        if edge is None:
            return ChainCheck(
                False, CAUSE_NO_PATH, index, f"no call {caller} -> {callee} at {step_match.group('site')}"
            )
        if edge.sanitized:
            return ChainCheck(False, CAUSE_SANITIZED, index, f"edge {caller} -> {callee} sanitizes its argument")
        if out not in program.exits(fn, loc):
            return ChainCheck(False, CAUSE_NO_PATH, index, f"taint never reaches {out!r} in {fn!r}")
        if out not in edge.flow:
            return ChainCheck(False, CAUSE_NO_PATH, index, f"call at {step_match.group('site')} does not pass {out!r}")
        fn, loc = callee, edge.flow[out]

    return ChainCheck(False, CAUSE_NO_SINK, len(propagation), "propagation ended before any sink")
