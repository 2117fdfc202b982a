from __future__ import annotations

import json
import os
import random
import string

import pytest

from taintforest.backends import Script
from taintforest.model import ExplorationTask
from taintforest.synthetic import SynthView, SyntheticProgram

DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")
FIXTURE_DIR = os.path.join(DATA_DIR, "fixture")


def data_path(name: str) -> str:
    return os.path.join(DATA_DIR, name)


@pytest.fixture(scope="session")
def appendix_program() -> SyntheticProgram:
    return SyntheticProgram.from_file(data_path("appendix_program.json"))


@pytest.fixture()
def appendix_view(appendix_program) -> SynthView:
    return SynthView(appendix_program, path_label=data_path("appendix_program.json"))


@pytest.fixture(scope="session")
def golden_script_data() -> dict:
    with open(data_path("golden_script.json"), encoding="utf-8") as handle:
        return json.load(handle)


@pytest.fixture()
def golden_discovery_script(golden_script_data) -> Script:
    return Script.from_mapping(golden_script_data["discovery"])


@pytest.fixture()
def golden_validation_script(golden_script_data) -> Script:
    return Script.from_mapping(golden_script_data["validation"])


def simple_task(objective: str = "trace taint to sinks") -> ExplorationTask:
    return ExplorationTask(
        function_name="do_request_process",
        address=0x9E6C,
        taint_entry="HTTP request path",
        taint_source="network input via get_querry_var",
        objective=objective,
    )


def directive_text(action: str, action_input: dict, status: str = "continue", thought: str = "t") -> str:
    return json.dumps(
        {"thought": thought, "action": action, "action_input": action_input, "status": status}
    )


def finish_text(final_response: dict, thought: str = "done") -> str:
    return directive_text("finish", {"final_response": final_response}, "complete", thought)


LEAF_SEGMENT = ["Source: probe data enters the leaf", "Sink: probe sink is reached"]
NODE_SEGMENT = ["Source: probe data enters the node", "Sink: probe sink is reached"]


def _subtask(label: str) -> dict:
    return {
        "function": {"name": f"fn_{label.replace('.', '_')}", "address": "0x1000"},
        "taint_entry": "arg0",
        "taint_source": "synthetic probe",
        "objective": f"probe branch {label}",
    }


def plan_tree(script: Script, root_label: str, spine_depth: int, total_nodes: int) -> int:
    """Author script turns for one tree: a sequential spine of ``spine_depth``
    nodes padded with leaf children to exactly ``total_nodes`` agents.
    Returns the number of nodes planned."""
    assert spine_depth >= 1
    spine = [root_label]
    for _ in range(spine_depth - 1):
        spine.append(spine[-1] + ".0")
    fillers_needed = total_nodes - spine_depth
    assert fillers_needed >= 0
    delegating = spine[:-1]
    leaves: list[str] = [spine[-1]]
    filler_of: dict[str, int] = {label: 0 for label in delegating}
    index = 0
    while fillers_needed > 0 and delegating:
        label = delegating[index % len(delegating)]
        if filler_of[label] < 7:  # spine child occupies one slot of eight
            filler_of[label] += 1
            fillers_needed -= 1
        index += 1
        if index > 10_000:
            raise AssertionError("cannot place filler nodes under the children cap")

    for label in delegating:
        subtasks = [_subtask(label + ".0")]
        for i in range(filler_of[label]):
            child = f"{label}.{i + 1}"
            subtasks.append(_subtask(child))
            leaves.append(child)
        script.add(
            label,
            1,
            directive_text("AgentTool", {"mode": "parallel", "subtasks": subtasks}),
        )
        script.add(
            label,
            2,
            finish_text({"status": "PATH_COMPLETE", "full_path": NODE_SEGMENT}),
        )
    for label in leaves:
        script.add(
            label,
            1,
            finish_text({"status": "SINK_REACHED", "path_segment": LEAF_SEGMENT}),
        )
    return spine_depth + sum(filler_of.values())


def prose(rng: random.Random, words: int) -> str:
    """Brace- and backtick-free filler text for wrap-and-recover tests."""
    alphabet = string.ascii_letters + "     ..,;:!?"
    chunks = []
    for _ in range(words):
        length = rng.randint(2, 10)
        chunks.append("".join(rng.choice(alphabet) for _ in range(length)))
    return " ".join(chunks)
