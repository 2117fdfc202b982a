"""taintforest: forest-of-agents execution engine for binary taint analysis.

Agents explore a binary through tools in bounded reasoning loops, delegate
subtasks along parent-child edges, and aggregate structured evidence upward
into replayable chains; a second, evidence-constrained phase validates each
chain. A scripted backend and a synthetic-program taint oracle make the whole
pipeline verifiable without any live LLM.
"""

from .backends import (
    AuthError,
    BackendConfig,
    FatalParse,
    HttpBackend,
    ParseError,
    Script,
    ScriptedBackend,
    memory_append,
    memory_render,
    parse_directive,
)
from .guided import OracleDiscoveryBackend, OracleValidationBackend
from .model import (
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
    deserialize,
    serialize,
)
from .oracle import oracle_taint_paths, verify_chain
from .pipeline import (
    assemble_report,
    discover,
    enumerate_sinks,
    enumerate_sources,
    precision_estimate,
    validate,
)
from .runtime import Budget, DelegationRequest, Engine, aggregate, run_forest
from .synthetic import SourceSpec, SynthView, SyntheticProgram, generate_program, synth_query

__version__ = "0.1.0"

__all__ = [
    "AgentDirective",
    "AgentNode",
    "AgentResult",
    "AgentState",
    "AuthError",
    "BackendConfig",
    "Budget",
    "DelegationRequest",
    "Engine",
    "EvidenceChain",
    "EvidenceFragment",
    "ExplorationTask",
    "FatalParse",
    "FinalReport",
    "Forest",
    "HttpBackend",
    "Message",
    "OracleDiscoveryBackend",
    "OracleValidationBackend",
    "ParseError",
    "RunMetrics",
    "SchemaError",
    "Script",
    "ScriptedBackend",
    "SourceSpec",
    "StatusTag",
    "SynthView",
    "SyntheticProgram",
    "ValidationVerdict",
    "aggregate",
    "assemble_report",
    "deserialize",
    "discover",
    "enumerate_sinks",
    "enumerate_sources",
    "generate_program",
    "memory_append",
    "memory_render",
    "oracle_taint_paths",
    "parse_directive",
    "precision_estimate",
    "run_forest",
    "serialize",
    "synth_query",
    "validate",
    "verify_chain",
]
