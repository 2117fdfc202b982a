"""Operator CLI.

Exit codes: 0 completion (even with zero findings), 2 configuration or input
schema errors, 3 authentication errors, 4 infrastructure failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Any

from .backends import AuthError, BackendConfig, HttpBackend, ScriptedBackend
from .guided import OracleDiscoveryBackend, OracleValidationBackend
from .pipeline import EmptyBinary, load_sink_table, load_source_table
from .runs import (
    collect_stats,
    load_chain_files,
    load_scripts,
    replay_run,
    run_analysis,
    run_validation,
)
from .runtime import Budget

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_AUTH = 3
EXIT_INFRA = 4


class ConfigError(Exception):
    pass


DEFAULTS: dict[str, Any] = {
    "backend": "scripted",
    "model": "scripted",
    "temperature": 0.0,
    "max_steps": 30,
    "max_depth": 12,
    "max_children": 8,
    "max_agents_per_tree": 128,
    "parallelism": 1,
    "out": "taintforest-out",
    "script": None,
    "transcript": None,
    "no_prune": False,
    "strict_json": True,
    "sources_table": None,
    "sinks_table": None,
    "endpoint": "",
    "api_key_env": "TAINTFOREST_API_KEY",
}


def resolve_config(file_config: dict[str, Any], flags: dict[str, Any]) -> dict[str, Any]:
    """Precedence: flags > config file > defaults."""
    config = dict(DEFAULTS)
    for key, value in file_config.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        config[key] = value
    for key, value in flags.items():
        if value is not None:
            config[key] = value
    return config


def _load_config_file(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as handle:
            data = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _flags_from_args(args: argparse.Namespace) -> dict[str, Any]:
    mapping = {
        "backend": args.backend,
        "model": args.model,
        "temperature": args.temperature,
        "max_steps": args.max_steps,
        "parallelism": args.parallelism,
        "out": args.out,
        "script": args.script,
        "transcript": getattr(args, "transcript", None),
        "sources_table": args.sources_table,
        "sinks_table": args.sinks_table,
        "endpoint": getattr(args, "endpoint", None),
    }
    if getattr(args, "no_prune", False):
        mapping["no_prune"] = True
    if getattr(args, "strict_json", False):
        mapping["strict_json"] = True
    return mapping


def _budget(config: dict[str, Any]) -> Budget:
    return Budget(
        max_steps=int(config["max_steps"]),
        max_depth=int(config["max_depth"]),
        max_children=int(config["max_children"]),
        max_agents_per_tree=int(config["max_agents_per_tree"]),
    )


def _open_view(input_path: str, config: dict[str, Any]):
    from .r2 import R2View, TranscriptSession, r2_executable, r2_open
    from .synthetic import SynthView, SyntheticProgram

    if not os.path.exists(input_path) and not config.get("transcript"):
        raise ConfigError(f"input not readable: {input_path}")
    if input_path.endswith(".json"):
        try:
            program = SyntheticProgram.from_file(input_path)
        except Exception as exc:
            raise ConfigError(f"bad synthetic program {input_path}: {exc}") from None
        return SynthView(program, path_label=input_path)
    transcript = config.get("transcript")
    if transcript:
        return R2View(TranscriptSession.from_file(transcript), path_label=input_path)
    if r2_executable() is None:
        raise ConfigError(
            "radare2 is not installed; provide --transcript to analyze from a recording"
        )
    return R2View(r2_open(input_path), path_label=input_path)


def _make_backends(config: dict[str, Any], view):
    kind = config["backend"]
    if kind == "scripted":
        if not config.get("script"):
            raise ConfigError("scripted backend requires --script")
        try:
            discovery_script, validation_script = load_scripts(config["script"])
        except (OSError, ValueError, json.JSONDecodeError) as exc:
            raise ConfigError(f"bad script file: {exc}") from None
        return ScriptedBackend(discovery_script), ScriptedBackend(validation_script)
    if kind == "oracle":
        if view.kind != "synthetic":
            raise ConfigError("the oracle backend needs a synthetic program input")
        return OracleDiscoveryBackend(view), OracleValidationBackend(view)
    if kind == "http-llm":
        key_env = config.get("api_key_env", DEFAULTS["api_key_env"])
        if not os.environ.get(key_env):
            raise AuthError(f"API key environment variable {key_env} is not set")
        backend_config = BackendConfig(
            kind="http-llm",
            model=str(config["model"]),
            temperature=float(config["temperature"]),
            endpoint=str(config.get("endpoint", "")),
            api_key_env=key_env,
        )
        backend = HttpBackend(backend_config)
        return backend, backend
    raise ConfigError(f"unknown backend kind {kind!r}")


def _tables(config: dict[str, Any]):
    try:
        return (
            load_source_table(config.get("sources_table")),
            load_sink_table(config.get("sinks_table")),
        )
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad symbol table: {exc}") from None


def _print_summary(summary: dict[str, Any]) -> None:
    metrics = summary["metrics"]
    print(f"sources       {summary.get('sources', '-')}")
    print(f"chains        {summary.get('chains', '-')}")
    print(f"verdicts      {summary.get('accurate', 0)} accurate / {summary.get('inaccurate', 0)} inaccurate")
    print(f"reports       {summary.get('reports', 0)}")
    print(f"tree failures {summary.get('tree_failures', 0)}")
    print(
        f"agents {metrics.agents_created}  steps {metrics.reasoning_steps}  "
        f"tokens {metrics.tokens_discovery}/{metrics.tokens_validation} (discovery/validation)"
    )
    print(f"output        {summary['out_dir']}")


def cmd_analyze(args: argparse.Namespace) -> int:
    config = resolve_config(_load_config_file(args.config), _flags_from_args(args))
    view = _open_view(args.input, config)
    discovery_backend, validation_backend = _make_backends(config, view)
    source_table, sink_table = _tables(config)
    summary = run_analysis(
        view,
        discovery_backend,
        validation_backend,
        out_dir=config["out"],
        budget=_budget(config),
        parallelism=int(config["parallelism"]),
        source_table=source_table,
        sink_table=sink_table,
        strict_json=bool(config["strict_json"]),
        no_prune=bool(config["no_prune"]),
        run_meta={"backend": config["backend"], "transcript": config.get("transcript")},
    )
    _print_summary(summary)
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    config = resolve_config(_load_config_file(args.config), _flags_from_args(args))
    view = _open_view(args.input, config)
    _, validation_backend = _make_backends(config, view)
    try:
        chains = load_chain_files(args.chains)
    except ValueError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    summary = run_validation(
        view,
        chains,
        validation_backend,
        out_dir=config["out"],
        budget=_budget(config),
        strict_json=bool(config["strict_json"]),
    )
    print(f"chains   {summary['chains']}")
    print(f"verdicts {summary['accurate']} accurate / {summary['inaccurate']} inaccurate")
    print(f"output   {summary['out_dir']}")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    ok = replay_run(args.events, out_dir=args.out)
    print("replay: event logs match" if ok else "replay: DIVERGED")
    return EXIT_OK if ok else 1


def cmd_stats(args: argparse.Namespace) -> int:
    stats = collect_stats(args.runs)
    for row in stats["runs"]:
        print(
            f"{row['run']}: agents {row['agents']}  steps {row['steps']}  "
            f"tokens {row['tokens']}  wall {row['wall_time_s']:.2f}s"
        )
    means = stats["means"]
    if means:
        print(
            f"mean over {stats['count']} run(s): agents {means['agents']:.2f}  "
            f"steps {means['steps']:.2f}  tokens {means['tokens']:.2f}"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taintforest",
        description="Forest-of-agents taint analysis: discovery, validation, replay.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--backend", choices=["scripted", "oracle", "http-llm"])
        p.add_argument("--model")
        p.add_argument("--temperature", type=float)
        p.add_argument("--max-steps", type=int, dest="max_steps")
        p.add_argument("--parallelism", type=int)
        p.add_argument("--out")
        p.add_argument("--script", help="scripted backend response file")
        p.add_argument("--transcript", help="radare2 transcript to replay instead of a live session")
        p.add_argument("--no-prune", action="store_true", dest="no_prune")
        p.add_argument("--strict-json", action="store_true", dest="strict_json")
        p.add_argument("--sources-table", dest="sources_table")
        p.add_argument("--sinks-table", dest="sinks_table")
        p.add_argument("--endpoint", help="http-llm endpoint URL")

    analyze = sub.add_parser("analyze", help="discovery then validation over one input")
    analyze.add_argument("input", help="binary path or synthetic program JSON")
    common(analyze)
    analyze.set_defaults(handler=cmd_analyze)

    validate_p = sub.add_parser("validate", help="validate existing chains only")
    validate_p.add_argument("input", help="binary path or synthetic program JSON")
    validate_p.add_argument("chains", help="chain JSON file, chains/ dir, or run dir")
    common(validate_p)
    validate_p.set_defaults(handler=cmd_validate)

    replay_p = sub.add_parser("replay", help="re-execute an event log and diff it")
    replay_p.add_argument("events", help="events.jsonl from a previous run")
    replay_p.add_argument("--out", default=None)
    replay_p.set_defaults(handler=cmd_replay)

    stats_p = sub.add_parser("stats", help="aggregate metrics over run directories")
    stats_p.add_argument("runs", nargs="+")
    stats_p.set_defaults(handler=cmd_stats)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptyBinary as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AuthError as exc:
        print(f"auth error: {exc}", file=sys.stderr)
        return EXIT_AUTH
    except Exception as exc:  # infrastructure failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFRA


if __name__ == "__main__":
    sys.exit(main())
