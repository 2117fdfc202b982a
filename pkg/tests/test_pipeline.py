import json
import os
import re

import pytest

from taintforest.backends import Script, ScriptedBackend
from taintforest.guided import OracleDiscoveryBackend, OracleValidationBackend
from taintforest.model import EvidenceChain, SchemaError, ValidationVerdict, deserialize
from taintforest.oracle import oracle_taint_paths
from taintforest.pipeline import (
    EmptyBinary,
    VALIDATION_FAILED_REASON,
    assemble_report,
    discover,
    enumerate_sinks,
    enumerate_sources,
    estimate_verified,
    infer_cwe,
    load_sink_table,
    load_source_table,
    precision_estimate,
    sink_address_of,
    validate,
)
from taintforest.r2 import R2View, TranscriptSession
from taintforest.synthetic import (
    FunctionInfo,
    SinkSpec,
    SourceSpec,
    SynthView,
    SyntheticProgram,
    generate_program,
)

from conftest import FIXTURE_DIR, data_path

TRANSCRIPT_PATH = os.path.join(FIXTURE_DIR, "fixture.r2transcript.jsonl")


# --- enumeration ------------------------------------------------------------


def test_enumerate_sources_on_appendix_view(appendix_view):
    sources = enumerate_sources(appendix_view)
    assert len(sources) == 1
    assert sources[0].category == "network"
    assert sources[0].symbol == "get_querry_var"
    assert sources[0].function == "do_request_process"


def test_enumerate_sinks_on_appendix_view(appendix_view):
    sinks = enumerate_sinks(appendix_view)
    assert sinks == [
        {"symbol": "system", "function": "sym.imp.system", "arg_index": 0, "cwe": "CWE-78"}
    ]


def test_enumerate_on_fixture_transcript():
    view = R2View(TranscriptSession.from_file(TRANSCRIPT_PATH), path_label="fixture")
    sources = enumerate_sources(view)
    assert any(s.category == "env" and s.symbol == "getenv" for s in sources)
    sinks = enumerate_sinks(view)
    assert any(k["symbol"] == "system" and k["cwe"] == "CWE-78" for k in sinks)


def test_enumerate_no_table_matches_is_empty():
    program = SyntheticProgram(
        name="quiet",
        functions=[FunctionInfo("f", 0x1000), FunctionInfo("g", 0x2000)],
        calls=[],
        taint_rules={},
        sources=[SourceSpec("other", "custom_reader", "f", 0x1004)],
        sinks=[SinkSpec("g", 0)],
    )
    view = SynthView(program)
    assert enumerate_sources(view) == []
    assert enumerate_sinks(view) == []


def test_enumerate_empty_binary_raises():
    program = SyntheticProgram(
        name="empty", functions=[], calls=[], taint_rules={}, sources=[], sinks=[]
    )
    with pytest.raises(EmptyBinary):
        enumerate_sources(SynthView(program))


def test_categories_always_in_closed_set():
    table = load_source_table()
    assert set(table) <= {"network", "env", "file", "argv", "other"}
    for seed in range(10):
        program = generate_program(seed, max_functions=20)
        for source in enumerate_sources(SynthView(program)):
            assert source.category in {"network", "env", "file", "argv", "other"}


def test_source_dedup_by_symbol_and_category():
    program = SyntheticProgram(
        name="dups",
        functions=[FunctionInfo("f", 0x1000), FunctionInfo("g", 0x2000)],
        calls=[],
        taint_rules={},
        sources=[
            SourceSpec("env", "getenv", "f", 0x1004),
            SourceSpec("env", "getenv", "g", 0x2004),
        ],
        sinks=[],
    )
    assert len(enumerate_sources(SynthView(program))) == 1


def test_infer_cwe_and_sink_address():
    table = load_sink_table()
    assert infer_cwe("Sink: sym.imp.system argument 0 ...", table) == "CWE-78"
    assert infer_cwe("Sink: strcpy overflows buffer at 0x4", table) == "CWE-120"
    assert infer_cwe("Sink: nothing dangerous", table) is None
    assert sink_address_of("Sink: `system` at 0xa7c0 executes the command.") == "0xa7c0"
    assert sink_address_of("Sink: no address") == ""


# --- discovery --------------------------------------------------------------


def test_discover_golden_chain_matches_listing_shape(appendix_view, golden_discovery_script):
    outcome = discover(appendix_view, ScriptedBackend(golden_discovery_script))
    assert len(outcome.chains) == 1
    chain = outcome.chains[0]
    assert chain.type == "CWE-78"
    assert chain.identifier == ["dev_name"]
    assert chain.propagation[0].startswith("Source: ")
    assert chain.propagation[-1].startswith("Sink: ")
    assert len(chain.propagation) == 5
    assert chain.file_path.endswith("app_data_center")
    assert outcome.failures == []


def test_discover_zero_sources_yields_no_chains():
    program = SyntheticProgram(
        name="nosrc",
        functions=[FunctionInfo("f", 0x1000)],
        calls=[],
        taint_rules={},
        sources=[],
        sinks=[],
    )
    outcome = discover(SynthView(program), ScriptedBackend(Script()))
    assert outcome.chains == []
    assert outcome.results == []


def test_discover_failed_tree_recorded_not_fatal(appendix_view):
    outcome = discover(appendix_view, ScriptedBackend(Script()))  # empty script
    assert outcome.chains == []
    assert len(outcome.failures) == 1
    assert outcome.failures[0]["tree"] == "0"


def test_discover_oracle_differential_on_random_programs():
    for seed in range(12):
        program = generate_program(seed, max_functions=40)
        view = SynthView(program)
        outcome = discover(view, OracleDiscoveryBackend(view))
        got = {tuple(chain.propagation) for chain in outcome.chains}
        expected = oracle_taint_paths(program)
        assert got == expected, f"seed {seed}"
        assert outcome.failures == []


def test_discovered_chains_pass_prefix_invariant():
    for seed in (3, 5):
        program = generate_program(seed, max_functions=30)
        view = SynthView(program)
        outcome = discover(view, OracleDiscoveryBackend(view))
        for chain in outcome.chains:
            assert chain.propagation[0].startswith("Source: ")
            assert chain.propagation[-1].startswith("Sink: ")
            assert all(
                step.startswith(("Source: ", "Step: ", "Sink: ")) for step in chain.propagation
            )


# --- validation -------------------------------------------------------------


def test_validate_confirming_script(golden_validation_script, appendix_view):
    chain = deserialize(
        open(data_path("listing_chain.json"), encoding="utf-8").read(), EvidenceChain
    )
    verdict = validate(appendix_view, chain, ScriptedBackend(golden_validation_script), label="v0")
    assert verdict.accuracy == "accurate"
    assert verdict.vulnerability is True
    assert len(verdict.propagation) == 5


def test_validate_oracle_confirms_unmutated_chains():
    program = generate_program(2, max_functions=24)
    view = SynthView(program)
    outcome = discover(view, OracleDiscoveryBackend(view))
    backend = OracleValidationBackend(view)
    for index, chain in enumerate(outcome.chains):
        verdict = validate(view, chain, backend, label=f"v{index}")
        assert verdict.accuracy == "accurate"
        assert verdict.propagation == chain.propagation


def test_validate_failed_agent_yields_flagged_inaccurate(appendix_view):
    chain = deserialize(
        open(data_path("listing_chain.json"), encoding="utf-8").read(), EvidenceChain
    )
    verdict = validate(appendix_view, chain, ScriptedBackend(Script()), label="v0")
    assert verdict.accuracy == "inaccurate"
    assert verdict.reason == VALIDATION_FAILED_REASON


def test_invalid_chain_rejected_before_any_agent_runs():
    with pytest.raises(SchemaError):
        EvidenceChain(
            type="CWE-78", identifier=[], propagation=[], reason="r", file_path="p"
        )


def _mutate_chain(chain: EvidenceChain, mode: str) -> EvidenceChain | None:
    propagation = list(chain.propagation)
    if mode == "address":
        for index in range(len(propagation)):
            match = re.search(r"0x[0-9a-f]+", propagation[index])
            if match:
                bumped = hex(int(match.group(0), 16) + 2)
                propagation[index] = (
                    propagation[index][: match.start()] + bumped + propagation[index][match.end() :]
                )
                break
        else:
            return None
    elif mode == "delete":
        if len(propagation) < 3:
            return None
        propagation.pop(len(propagation) // 2)
    return EvidenceChain(
        type=chain.type,
        identifier=chain.identifier,
        propagation=propagation,
        reason=chain.reason,
        file_path=chain.file_path,
    )


def test_mutation_rejection_modes():
    program = generate_program(4, max_functions=30)
    view = SynthView(program)
    outcome = discover(view, OracleDiscoveryBackend(view))
    assert outcome.chains
    backend = OracleValidationBackend(view)
    checked = 0
    for chain in outcome.chains:
        for mode in ("address", "delete"):
            mutated = _mutate_chain(chain, mode)
            if mutated is None:
                continue
            verdict = validate(view, mutated, backend, label=f"m{checked}")
            assert verdict.accuracy == "inaccurate", (mode, mutated.propagation)
            assert re.search(r"step \d+", verdict.reason)
            checked += 1
    assert checked >= 1

    # sanitizer insertion: mutate the program, keep the chain
    chain = outcome.chains[0]
    data = program.to_dict()
    step_sites = [
        site for site in (re.findall(r"0x[0-9a-f]+", el)[-1] for el in chain.propagation[1:])
    ]
    for call in data["calls"]:
        if call["site"] in step_sites:
            call["sanitized"] = True
            break
    sanitized_program = SyntheticProgram.from_dict(data)
    verdict = validate(
        SynthView(sanitized_program),
        chain,
        OracleValidationBackend(sanitized_program),
        label="vs",
    )
    assert verdict.accuracy == "inaccurate"
    assert "sanitized" in verdict.reason


# --- report assembly ----------------------------------------------------


def _accurate_verdict(propagation, reason="confirmed"):
    return ValidationVerdict(
        accuracy="accurate", vulnerability=True, propagation=propagation, reason=reason
    )


def test_assemble_report_turn5_inputs(golden_script_data):
    payload = json.loads(golden_script_data["discovery"]["0/turn-2"])["action_input"][
        "final_response"
    ]
    chain = EvidenceChain(
        type=payload["type"],
        identifier=payload["identifier"],
        propagation=payload["propagation"],
        reason=payload["reason"],
        file_path=payload["file_path"],
    )
    verdict = _accurate_verdict(payload["propagation"])
    report = assemble_report(chain, verdict, payload)
    assert report.type == "CWE-78"
    assert report.additional_weaknesses == ["CWE-862"]
    assert report.identifier == ["dev_name"]
    assert report.propagation == payload["propagation"]
    assert report.risk_score == 9.0
    assert report.confidence == 9.0
    assert report.file_path == payload["file_path"]


def test_assemble_report_defaults_by_severity_table():
    chain = EvidenceChain(
        type="CWE-78",
        identifier=["p"],
        propagation=["Source: a", "Sink: b"],
        reason="r",
        file_path="f",
    )
    report = assemble_report(chain, _accurate_verdict(["Source: a", "Sink: b"]), {})
    assert report.risk_score == 9.0  # command injection default
    assert report.confidence == 7.0
    assert report.additional_weaknesses == []

    chain_info = EvidenceChain(
        type="CWE-200",
        identifier=["p"],
        propagation=["Source: a", "Sink: b"],
        reason="r",
        file_path="f",
    )
    report = assemble_report(chain_info, _accurate_verdict(["Source: a", "Sink: b"]), {})
    assert report.risk_score == 5.0


def test_assemble_report_escalates_on_missing_auth():
    chain = EvidenceChain(
        type="CWE-200",
        identifier=["p"],
        propagation=["Source: a", "Sink: b"],
        reason="r",
        file_path="f",
    )
    verdict = _accurate_verdict(
        ["Source: a", "Sink: b"], reason="confirmed; also missing auth (CWE-862)"
    )
    report = assemble_report(chain, verdict, {})
    assert report.additional_weaknesses == ["CWE-862"]
    assert report.risk_score == 9.0


def test_assemble_report_requires_accurate_verdict():
    chain = EvidenceChain(
        type="CWE-78",
        identifier=[],
        propagation=["Source: a", "Sink: b"],
        reason="r",
        file_path="f",
    )
    bad = ValidationVerdict(
        accuracy="inaccurate", vulnerability=False, propagation=[], reason="nope"
    )
    with pytest.raises(ValueError):
        assemble_report(chain, bad, {})


# --- precision arithmetic -----------------------------------------------


def test_precision_per_type_and_overall():
    samples = (
        [("CI", True)] * 121
        + [("CI", False)] * 29
        + [("BoF", True)] * 89
        + [("BoF", False)] * 61
        + [("Others", True)] * 34
        + [("Others", False)] * 16
    )
    stats = precision_estimate(samples)
    assert abs(stats["per_type"]["CI"]["precision_pct"] - 80.6) <= 0.1
    assert abs(stats["per_type"]["BoF"]["precision_pct"] - 59.3) <= 0.1
    assert abs(stats["per_type"]["Others"]["precision_pct"] - 68.0) <= 0.1
    assert abs(stats["overall_pct"] - 69.7) <= 0.1


def test_precision_zero_and_empty():
    stats = precision_estimate([("CI", False)] * 10)
    assert stats["per_type"]["CI"]["precision_pct"] == 0.0
    assert precision_estimate([]) == {"per_type": {}}


def test_estimate_verified_weighted_totals():
    per_type = {"BoF": 100 * 89 / 150, "CI": 100 * 121 / 150, "Others": 68.0}
    estimate = estimate_verified(per_type, {"BoF": 329, "CI": 667, "Others": 278})
    assert round(estimate["per_type_estimate"]["BoF"]) == 195
    assert round(estimate["per_type_estimate"]["CI"]) == 538
    assert round(estimate["per_type_estimate"]["Others"]) == 189
    assert abs(estimate["estimated_verified"] - 922) <= 1
    assert abs(estimate["weighted_pct"] - 72.3) <= 0.1
