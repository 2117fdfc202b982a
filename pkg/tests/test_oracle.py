import numpy as np
import pytest

from taintforest.oracle import (
    CAUSE_NO_PATH,
    CAUSE_NO_SINK,
    CAUSE_SANITIZED,
    oracle_taint_paths,
    render_source,
    verify_chain,
)
from taintforest.synthetic import (
    CallEdge,
    FunctionInfo,
    SinkSpec,
    SourceSpec,
    SyntheticProgram,
    generate_program,
)


def chain_program(sanitize_last: bool = False) -> SyntheticProgram:
    """source fn -> f -> sink, all flows through arg0."""
    return SyntheticProgram(
        name="chain3",
        functions=[
            FunctionInfo("entry", 0x1000),
            FunctionInfo("middle", 0x2000),
            FunctionInfo("sym.imp.system", 0x3000, 1),
        ],
        calls=[
            CallEdge("entry", "middle", 0x1010, {"arg0": "arg0"}),
            CallEdge("middle", "sym.imp.system", 0x2010, {"arg0": "arg0"}, sanitized=sanitize_last),
        ],
        taint_rules={},
        sources=[SourceSpec("env", "getenv", "entry", 0x1004, "arg0")],
        sinks=[SinkSpec("sym.imp.system", 0)],
    )


def diamond_program() -> SyntheticProgram:
    return SyntheticProgram(
        name="diamond",
        functions=[
            FunctionInfo("entry", 0x1000),
            FunctionInfo("a", 0x2000),
            FunctionInfo("b", 0x3000),
            FunctionInfo("sym.imp.system", 0x4000, 1),
        ],
        calls=[
            CallEdge("entry", "a", 0x1010, {"arg0": "arg0"}),
            CallEdge("entry", "b", 0x1018, {"arg0": "arg0"}),
            CallEdge("a", "sym.imp.system", 0x2010, {"arg0": "arg0"}),
            CallEdge("b", "sym.imp.system", 0x3010, {"arg0": "arg0"}, sanitized=True),
        ],
        taint_rules={},
        sources=[SourceSpec("network", "recv", "entry", 0x1004, "arg0")],
        sinks=[SinkSpec("sym.imp.system", 0)],
    )


def test_three_function_chain_single_path():
    paths = oracle_taint_paths(chain_program())
    assert len(paths) == 1
    (path,) = paths
    assert len(path) == 3
    assert path[0].startswith("Source: ")
    assert path[1].startswith("Step: ")
    assert path[2].startswith("Sink: ")


def test_sanitizer_blocks_taint():
    assert oracle_taint_paths(chain_program(sanitize_last=True)) == set()


def test_diamond_only_unsanitized_route():
    paths = oracle_taint_paths(diamond_program())
    assert len(paths) == 1
    (path,) = paths
    assert " a " in path[1] or "a passes" in path[1]


def test_cycle_does_not_hang():
    program = SyntheticProgram(
        name="loop",
        functions=[
            FunctionInfo("x", 0x1000),
            FunctionInfo("y", 0x2000),
            FunctionInfo("sym.imp.system", 0x3000, 1),
        ],
        calls=[
            CallEdge("x", "y", 0x1010, {"arg0": "arg0"}),
            CallEdge("y", "x", 0x2010, {"arg0": "arg0"}),
            CallEdge("y", "sym.imp.system", 0x2018, {"arg0": "arg0"}),
        ],
        taint_rules={},
        sources=[SourceSpec("env", "getenv", "x", 0x1004, "arg0")],
        sinks=[SinkSpec("sym.imp.system", 0)],
    )
    paths = oracle_taint_paths(program)
    assert len(paths) == 1


def test_transfer_map_moves_taint_between_locations():
    program = SyntheticProgram(
        name="xfer",
        functions=[
            FunctionInfo("entry", 0x1000),
            FunctionInfo("sym.imp.system", 0x2000, 1),
        ],
        calls=[CallEdge("entry", "sym.imp.system", 0x1010, {"buf": "arg0"})],
        taint_rules={"entry": {"arg0": ["buf"]}},
        sources=[SourceSpec("env", "getenv", "entry", 0x1004, "arg0")],
        sinks=[SinkSpec("sym.imp.system", 0)],
    )
    paths = oracle_taint_paths(program)
    assert len(paths) == 1
    # without the rule the flow key never matches
    program_no_rule = SyntheticProgram.from_dict(program.to_dict())
    program_no_rule.taint_rules = {}
    assert oracle_taint_paths(program_no_rule) == set()


# --- independent matrix-reachability cross-check ----------------------------


def _matrix_reachable(program: SyntheticProgram, source: SourceSpec) -> bool:
    """Boolean-matrix closure over (function, location) states; includes a
    pseudo-state per sink argument. Independent of the DFS enumerator."""
    states: list = []

    def state_id(state) -> int:
        if state not in states:
            states.append(state)
        return states.index(state)

    sink_args = {(s.function, s.arg_index) for s in program.sinks}
    edges = []
    for edge in program.calls:
        if edge.sanitized:
            continue
        for fn_loc_out, callee_loc in edge.flow.items():
            edges.append((edge.caller, fn_loc_out, edge.callee, callee_loc))

    # expand intra-function transfers into state edges
    transitions: list[tuple] = []
    locs_by_fn: dict[str, set[str]] = {}
    for caller, out, callee, into in edges:
        locs_by_fn.setdefault(caller, set()).add(out)
        locs_by_fn.setdefault(callee, set()).add(into)
    locs_by_fn.setdefault(source.function, set()).add(source.entry)
    for fn, rules in program.taint_rules.items():
        for entry, exits in rules.items():
            locs_by_fn.setdefault(fn, set()).add(entry)
            locs_by_fn.setdefault(fn, set()).update(exits)
            for out in exits:
                transitions.append(((fn, entry), (fn, out)))
    for caller, out, callee, into in edges:
        import re

        arg = re.fullmatch(r"arg(\d+)", into)
        if arg and (callee, int(arg.group(1))) in sink_args:
            transitions.append(((caller, out), ("SINK", f"{callee}#{arg.group(1)}")))
        transitions.append(((caller, out), (callee, into)))

    n_guess = len(transitions) * 2 + 2
    adjacency = np.zeros((n_guess, n_guess), dtype=bool)
    for src, dst in transitions:
        adjacency[state_id(src), state_id(dst)] = True
    n = len(states)
    if n == 0:
        return False
    adjacency = adjacency[:n, :n]
    reach = adjacency.copy()
    np.fill_diagonal(reach, True)
    for _ in range(n):
        new = reach | (reach @ reach)
        if (new == reach).all():
            break
        reach = new
    start = (source.function, source.entry)
    if start not in states:
        return False
    start_index = states.index(start)
    sink_indices = [i for i, s in enumerate(states) if s[0] == "SINK"]
    return bool(any(reach[start_index, i] for i in sink_indices))


def test_oracle_agrees_with_matrix_reachability():
    checked = 0
    for seed in range(30):
        program = generate_program(seed, max_functions=20)
        for source in program.sources:
            dfs_paths = oracle_taint_paths(program, sources=[source])
            assert bool(dfs_paths) == _matrix_reachable(program, source), (
                seed,
                source.symbol,
            )
            checked += 1
    assert checked >= 30


def test_every_oracle_path_verifies_against_its_program():
    for seed in range(12):
        program = generate_program(seed, max_functions=30)
        for path in oracle_taint_paths(program):
            check = verify_chain(program, list(path))
            assert check.ok, (seed, path, check.reason())


# --- chain verification causes ----------------------------------------------


def test_verify_rejects_perturbed_address():
    program = chain_program()
    (path,) = oracle_taint_paths(program)
    broken = list(path)
    broken[1] = broken[1].replace("0x1010", "0x1012")
    check = verify_chain(program, broken)
    assert not check.ok
    assert check.cause == CAUSE_NO_PATH
    assert check.step_index == 2
    assert "step 2" in check.reason()


def test_verify_rejects_deleted_step():
    program = chain_program()
    (path,) = oracle_taint_paths(program)
    broken = [path[0], path[2]]
    check = verify_chain(program, broken)
    assert not check.ok
    assert check.step_index == 2


def test_verify_rejects_sanitized_edge():
    program = chain_program()
    (path,) = oracle_taint_paths(program)
    sanitized = chain_program(sanitize_last=True)
    check = verify_chain(sanitized, list(path))
    assert not check.ok
    assert check.cause == CAUSE_SANITIZED


def test_verify_rejects_unknown_source_and_missing_sink():
    program = chain_program()
    (path,) = oracle_taint_paths(program)
    wrong_source = ["Source: env input via putenv enters entry at 0x1004 (taint in arg0)"] + list(
        path[1:]
    )
    check = verify_chain(program, wrong_source)
    assert not check.ok and check.step_index == 1

    no_sink = list(path[:-1])
    check = verify_chain(program, no_sink)
    assert not check.ok
    assert check.cause == CAUSE_NO_SINK


def test_render_source_shape():
    source = SourceSpec("env", "getenv", "entry", 0x1004, "arg0")
    text = render_source(source)
    assert text == "Source: env input via getenv enters entry at 0x1004 (taint in arg0)"


def test_program_size_guard():
    functions = [FunctionInfo(f"f{i}", 0x1000 + i * 16) for i in range(10_001)]
    program = SyntheticProgram(
        name="big", functions=functions, calls=[], taint_rules={}, sources=[], sinks=[]
    )
    with pytest.raises(ValueError):
        oracle_taint_paths(program)
