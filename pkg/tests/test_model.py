import json
import random

import pytest

from taintforest.model import (
    AgentDirective,
    AgentNode,
    AgentResult,
    AgentState,
    EvidenceChain,
    EvidenceFragment,
    ExplorationTask,
    FinalReport,
    Forest,
    Message,
    RunMetrics,
    SchemaError,
    StatusTag,
    ValidationVerdict,
    check_propagation,
    deserialize,
    format_address,
    parse_address,
    serialize,
)

from conftest import data_path, simple_task


def test_address_rendering_roundtrip():
    assert format_address(0x9E6C) == "0x9e6c"
    assert parse_address("0x9e6c") == 0x9E6C
    assert parse_address(64) == 64
    with pytest.raises(SchemaError):
        parse_address("-0x4")
    with pytest.raises(SchemaError):
        parse_address("not hex")


def test_exploration_task_invariants():
    task = simple_task()
    assert task.to_dict()["function"]["address"] == "0x9e6c"
    with pytest.raises(ValueError):
        ExplorationTask("f", -1, "e", "s", "o")
    with pytest.raises(ValueError):
        ExplorationTask("", 0, "e", "s", "o")
    with pytest.raises(ValueError):
        ExplorationTask("f", 0, "e", "s", "o", context_note="x" * 1025)
    # cap accepted exactly at the boundary
    ExplorationTask("f", 0, "e", "s", "o", context_note="x" * 1024)


def test_message_role_closed_set():
    Message("parse_error", "x")
    with pytest.raises(ValueError):
        Message("observer", "x")


def test_agent_result_requires_segment_for_sink_statuses():
    with pytest.raises(ValueError):
        AgentResult(status_tag=StatusTag.SINK_REACHED)
    with pytest.raises(ValueError):
        AgentResult(status_tag=StatusTag.PATH_COMPLETE, path_segment=[])
    AgentResult(status_tag=StatusTag.NO_PATH)
    with pytest.raises(ValueError):
        AgentResult(status_tag=StatusTag.SINK_REACHED, path_segment=["no prefix here"])


def test_state_transitions_absorbing():
    node = AgentNode(id="0", task=simple_task(), tree="0")
    node.transition(AgentState.RUNNING)
    node.transition(AgentState.AWAITING_CHILDREN)
    node.transition(AgentState.RUNNING)
    node.transition(AgentState.COMPLETED)
    with pytest.raises(ValueError):
        node.transition(AgentState.RUNNING)
    with pytest.raises(ValueError):
        node.transition(AgentState.FAILED)


def test_forest_check_catches_corruption():
    forest = Forest()
    root = AgentNode(id="0", task=simple_task(), tree="0")
    forest.add_root(root)
    child = AgentNode(id="0.0", task=simple_task())
    forest.add_child("0", child)
    forest.check()
    # dangling child id
    root.children.append("0.9")
    with pytest.raises(AssertionError):
        forest.check()
    root.children.pop()
    # shared child across two parents
    other = AgentNode(id="1", task=simple_task(), tree="1")
    forest.add_root(other)
    other.children.append("0.0")
    with pytest.raises(AssertionError):
        forest.check()


def test_directive_schema_and_complete_requires_finish():
    directive = AgentDirective.from_dict(
        {"thought": "", "action": "finish", "action_input": {}, "status": "complete"}
    )
    assert directive.action == "finish"
    with pytest.raises(SchemaError):
        AgentDirective.from_dict(
            {"thought": "", "action": "Radare2Tool", "action_input": {}, "status": "complete"}
        )
    with pytest.raises(SchemaError) as err:
        AgentDirective.from_dict({"thought": "", "action": "x", "status": "continue"})
    assert "action_input: missing" in str(err.value)


def test_serialize_field_order_matches_listings():
    chain = EvidenceChain(
        type="CWE-78",
        identifier=["dev_name"],
        propagation=["Source: a", "Sink: b"],
        reason="r",
        file_path="p",
    )
    keys = list(json.loads(serialize(chain), object_pairs_hook=lambda pairs: [k for k, _ in pairs]))
    assert keys == ["type", "identifier", "propagation", "reason", "file_path"]

    report = FinalReport(
        type="CWE-78",
        additional_weaknesses=[],
        identifier=["dev_name"],
        propagation=["Source: a", "Sink: b"],
        reason="r",
        risk_score=9.0,
        confidence=9.0,
        file_path="p",
    )
    keys = list(json.loads(serialize(report), object_pairs_hook=lambda pairs: [k for k, _ in pairs]))
    assert keys == list(FinalReport.FIELDS)


def test_turn5_report_serializes_to_listing_values(golden_script_data):
    raw = golden_script_data["discovery"]["0/turn-2"]
    payload = json.loads(raw)["action_input"]["final_response"]
    report = FinalReport.from_dict(payload)
    assert json.loads(serialize(report)) == payload
    assert report.risk_score == 9.0
    assert report.confidence == 9.0
    assert len(report.propagation) == 5


def test_deserialize_listing_chain():
    with open(data_path("listing_chain.json"), encoding="utf-8") as handle:
        text = handle.read()
    chain = deserialize(text, EvidenceChain)
    assert chain.type == "CWE-78"
    assert chain.identifier == ["dev_name"]
    assert chain.file_path.endswith("app_data_center")
    assert chain.propagation[0].startswith("Source: ")
    assert chain.propagation[-1].startswith("Sink: ")


def test_deserialize_listing_verdict_and_enum_violation():
    with open(data_path("listing_verdict.json"), encoding="utf-8") as handle:
        data = json.load(handle)
    verdict = deserialize(json.dumps(data), ValidationVerdict)
    assert verdict.accuracy == "accurate"
    assert verdict.vulnerability is True
    data["accuracy"] = "maybe"
    with pytest.raises(SchemaError):
        deserialize(json.dumps(data), ValidationVerdict)


def test_empty_object_reports_first_missing_field():
    with pytest.raises(SchemaError) as err:
        deserialize("{}", EvidenceChain)
    assert str(err.value) == "type: missing"
    with pytest.raises(SchemaError) as err:
        deserialize("{}", "final_report")
    assert str(err.value) == "type: missing"


def test_strict_rejects_unknown_fields_lenient_preserves():
    data = {
        "accuracy": "accurate",
        "vulnerability": True,
        "propagation": ["Source: a", "Sink: b"],
        "reason": "ok",
        "extra_note": "kept",
    }
    with pytest.raises(SchemaError) as err:
        deserialize(json.dumps(data), ValidationVerdict)
    assert "extra_note" in str(err.value)
    verdict = deserialize(json.dumps(data), ValidationVerdict, strict=False)
    assert verdict.extras == {"extra_note": "kept"}
    assert json.loads(serialize(verdict))["extra_note"] == "kept"


def test_chain_prefix_invariants():
    with pytest.raises(SchemaError):
        EvidenceChain(type="CWE-78", identifier=[], propagation=[], reason="r", file_path="p")
    with pytest.raises(SchemaError):
        EvidenceChain(
            type="CWE-78",
            identifier=[],
            propagation=["Step: a", "Sink: b"],
            reason="r",
            file_path="p",
        )
    with pytest.raises(SchemaError):
        EvidenceChain(
            type="CWE-78",
            identifier=[],
            propagation=["Source: a", "Step: b"],
            reason="r",
            file_path="p",
        )
    with pytest.raises(SchemaError):
        EvidenceChain(
            type="CWE78", identifier=[], propagation=["Source: a", "Sink: b"], reason="r", file_path="p"
        )


def test_report_score_bounds():
    kwargs = dict(
        type="CWE-78",
        additional_weaknesses=[],
        identifier=[],
        propagation=["Source: a", "Sink: b"],
        reason="r",
        file_path="p",
    )
    with pytest.raises(SchemaError):
        FinalReport(risk_score=10.5, confidence=5.0, **kwargs)
    with pytest.raises(SchemaError):
        FinalReport(risk_score=5.0, confidence=-0.1, **kwargs)
    FinalReport(risk_score=0.0, confidence=10.0, **kwargs)


def test_verdict_invariants():
    with pytest.raises(SchemaError):
        ValidationVerdict(accuracy="accurate", vulnerability=True, propagation=[], reason="r")
    with pytest.raises(SchemaError):
        ValidationVerdict(accuracy="inaccurate", vulnerability=False, propagation=[], reason="")
    ValidationVerdict(accuracy="inaccurate", vulnerability=False, propagation=[], reason="cause")


# --- round-trip property over random schema-conforming artifacts ---------


def _random_propagation(rng: random.Random) -> list[str]:
    middle = [f"Step: hop {i} at {format_address(rng.randrange(2**20))}" for i in range(rng.randint(0, 4))]
    return [f"Source: entry {rng.randrange(1000)}", *middle, f"Sink: exit {rng.randrange(1000)}"]


def _random_text(rng: random.Random) -> str:
    return "".join(rng.choice("abcdefghij XYZ'\"\\/\n{}") for _ in range(rng.randint(1, 24)))


def random_artifact(rng: random.Random):
    kind = rng.randrange(4)
    if kind == 0:
        status = rng.choice(["continue", "complete"])
        return AgentDirective(
            thought=_random_text(rng),
            action="finish" if status == "complete" else rng.choice(["Radare2Tool", "AgentTool"]),
            action_input={"k": _random_text(rng), "n": rng.randrange(100)},
            status=status,
        )
    if kind == 1:
        return EvidenceChain(
            type=f"CWE-{rng.randrange(1, 1000)}",
            identifier=[_random_text(rng) for _ in range(rng.randint(0, 3))],
            propagation=_random_propagation(rng),
            reason=_random_text(rng),
            file_path=_random_text(rng),
        )
    if kind == 2:
        accurate = rng.random() < 0.5
        return ValidationVerdict(
            accuracy="accurate" if accurate else "inaccurate",
            vulnerability=accurate,
            propagation=_random_propagation(rng) if accurate else [],
            reason=_random_text(rng),
        )
    return FinalReport(
        type=f"CWE-{rng.randrange(1, 1000)}",
        additional_weaknesses=[f"CWE-{rng.randrange(1, 1000)}" for _ in range(rng.randint(0, 2))],
        identifier=[_random_text(rng)],
        propagation=_random_propagation(rng),
        reason=_random_text(rng),
        risk_score=round(rng.uniform(0, 10), 2),
        confidence=round(rng.uniform(0, 10), 2),
        file_path=_random_text(rng),
    )


def test_serialize_deserialize_roundtrip_1000():
    rng = random.Random(20240817)
    for _ in range(1000):
        artifact = random_artifact(rng)
        back = deserialize(serialize(artifact), type(artifact))
        assert back == artifact


def test_propagation_prefix_checker():
    check_propagation(["Source: a", "Step: b", "Sink: c"])
    with pytest.raises(ValueError):
        check_propagation(["Source: a", "middle", "Sink: c"])
    with pytest.raises(ValueError):
        check_propagation([])
    check_propagation([], allow_empty=True)


def test_fragment_roundtrip_and_invariants():
    fragment = EvidenceFragment(addr=0x401B20, note="propagated via R0", snippet="mov r0, r4")
    data = fragment.to_dict()
    assert data["addr"] == "0x401b20"
    assert EvidenceFragment.from_dict(data) == fragment
    with pytest.raises(ValueError):
        EvidenceFragment(addr=1, note="")
    with pytest.raises(SchemaError):
        EvidenceFragment.from_dict({"snippet": "x"})


def test_run_metrics_buckets_and_roundtrip():
    metrics = RunMetrics()
    metrics.agents_created = 3
    bucket = metrics.tree_bucket("0")
    bucket["agents_created"] = 3
    metrics.tokens_discovery = 40
    data = metrics.to_dict()
    back = RunMetrics.from_dict(data)
    assert back.agents_created == 3
    assert back.per_tree["0"]["agents_created"] == 3
    assert back.tokens_discovery == 40
