"""System prompts for the two phases and the user-message templates.

The prompt texts are versioned; changing them is a schema-level event because
golden scripts and replay logs key off the rendered byte sizes.
"""

PROMPTS_VERSION = 1

DISCOVERY_SYSTEM_PROMPT = """You are a professional binary security analyst. Your mission is to comprehensively analyze the specified binary file, identify all externally controllable taint sources, delegate tracing to function-level agents, and report all exploitable paths.

**Core Principles:**
- **Evidence-Based:** All analyses MUST be grounded in concrete evidence from the `r2` tool. No speculation.
- **Taint Identification:** Autonomously identify and validate all genuinely controllable external variables (e.g., HTTP params, NVRAM, IPC). The threat model assumes an attacker has network access and valid user credentials. Do not trace unexploitable taints.
- **Delegated Tracing:** You DO NOT perform deep taint tracing yourself. Your role is to delegate the tracing of specific data flows to function-level agents, ensuring a complete path from source to sink is reconstructed.
- **Focused Analysis:** Concentrate strictly on your assigned task. Your final output must be a comprehensive list of all evidence-based, exploitable paths. DO NOT provide fix suggestions or subjective commentary."""

VALIDATION_SYSTEM_PROMPT = """You are a binary call chain validation agent. Your SOLE mission is to strictly verify a given call chain provided as a clue in the specified binary.

**Verification Requirements:**
- **Evidence-Only:** Base all judgments exclusively on evidence from `r2`. No guessing.
- **Path Verification:** Confirm if a reproducible propagation path exists from the specified source to the sink. Verify if the taint is genuinely exploitable under the defined threat model.
- **Success Case:** If verified, output the complete, evidence-backed propagation path with corrected addresses.
- **Failure Case:** If not verified, clearly state the reason (e.g., path does not exist, data is sanitized, sink is not reached)."""

# Appended to the system prompt when pruning is disabled.
NO_PRUNE_SUFFIX = (
    "\n\n**Exhaustive Mode:** Do not prune any branch. Expand every callee and every"
    " candidate path until it is fully resolved or the step budget is exhausted."
)

DIRECTIVE_SCHEMA_REMINDER = (
    "Respond with a single JSON object containing exactly these fields: "
    '"thought" (string), "action" (tool name string or "finish"), '
    '"action_input" (object), "status" ("continue" or "complete").'
)


def render_task_message(task, tool_lines: list[str] | None = None) -> str:
    """Render the initial user message for an agent from its task."""
    parts = [task.render()]
    if tool_lines:
        parts.append("Available tools:\n" + "\n".join(tool_lines))
    parts.append(DIRECTIVE_SCHEMA_REMINDER)
    return "\n\n".join(parts)


def render_chain_message(chain_json: str) -> str:
    """Render the evidence-chain block appended to a validation agent's
    initial user message."""
    return (
        "Evidence chain to verify (JSON):\n"
        + chain_json
        + "\n\nRe-check each propagation step in order using the available tools, "
        "then finish with a verdict object: "
        '{"accuracy": "accurate"|"inaccurate", "vulnerability": bool, '
        '"propagation": [..corrected steps..], "reason": "..."}.'
    )
