"""Command-line front end: generate, validate, run, sweep, verify, report.

Failures print one JSON object on stderr, e.g.
``{"error": "schema", "exit": 3, "message": "..."}``, and exit with the code
from ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import jsonschema

from . import dse
from .engine import LivelockError, SimConfig, build, collect_metrics, drive
from .engine import HistoryLog, RunMetrics
from .verifier import verify, verify_history
from .workload import WorkloadSpec, generate, parse_trace, write_trace

EXIT_CODES = {
    "ok": 0,
    "not-serializable": 1,
    "usage": 2,
    "schema": 3,
    "io": 4,
    "invalid-trace": 5,
    "livelock": 6,
    "trend": 7,
}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# -- config files -------------------------------------------------------------

_JSON_TYPES = {bool: "boolean", int: "integer", float: "number", str: "string"}


def _object_schema(cls) -> dict:
    props = {}
    for f in fields(cls):
        props[f.name] = {"type": _JSON_TYPES.get(type(f.default), "string")}
    return {"type": "object", "properties": props, "additionalProperties": False}


RUN_SCHEMA = {
    "type": "object",
    "properties": {
        "sim": _object_schema(SimConfig),
        "workload": _object_schema(WorkloadSpec),
        "trace": {"type": "string"},
        "output": {"type": "string"},
    },
    "additionalProperties": False,
}


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError("io", f"no such file: {path}") from None
    except OSError as exc:
        raise CliError("io", f"{path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError("schema", f"{path}: not valid JSON ({exc})") from None


def load_run_config(path) -> dict:
    data = _read_json(path)
    try:
        jsonschema.validate(data, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError("schema", f"{path}: {where}: {exc.message}") from None
    if "trace" in data and "workload" in data:
        raise CliError("schema", f"{path}: give either 'trace' or 'workload', not both")
    return data


def _sim_config(values: dict) -> SimConfig:
    try:
        return SimConfig(**values)
    except (TypeError, ValueError) as exc:
        raise CliError("schema", f"sim config: {exc}") from None


def _workload_spec(values: dict) -> WorkloadSpec:
    try:
        return WorkloadSpec(**values)
    except (TypeError, ValueError) as exc:
        raise CliError("schema", f"workload: {exc}") from None


# -- flags --------------------------------------------------------------------

# flag -> SimConfig field
SIM_FLAGS = {
    "channels": "num_channels",
    "agents_per_channel": "agents_per_channel",
    "txn_agents": "num_txn_agents",
    "txncs": "txn_slots",
    "table_size": "table_size",
    "timeout_cycles": "timeout",
    "mem_latency_cycles": "mem_latency",
    "freq_mhz": "freq_mhz",
    "txns_per_agent": "txns_per_agent",
    "seed": "seed",
}


def _add_sim_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("simulator")
    g.add_argument("--channels", type=int, help="lock channels (M)")
    g.add_argument("--agents-per-channel", type=int, help="lock agents per channel (P)")
    g.add_argument("--txn-agents", type=int, help="transaction agents (N)")
    g.add_argument("--txncs", type=int, help="transaction slots per agent (context switch depth)")
    g.add_argument("--table-size", type=int, help="lock table entries per lock agent")
    g.add_argument("--timeout-cycles", type=int, help="transaction timeout in cycles")
    g.add_argument("--mem-latency-cycles", type=int, help="memory access latency in cycles")
    g.add_argument("--freq-mhz", type=float, help="clock used to convert cycles to seconds")
    g.add_argument("--txns-per-agent", type=int, help="transactions per transaction agent")
    g.add_argument("--seed", type=int, help="workload and simulator seed")


def _flag_overrides(args) -> dict:
    return {
        field_name: getattr(args, flag)
        for flag, field_name in SIM_FLAGS.items()
        if getattr(args, flag, None) is not None
    }


# -- subcommands --------------------------------------------------------------


def cmd_generate(args) -> int:
    values = dict(load_run_config(args.config).get("workload", {})) if args.config else {}
    for key in ("seed", "txns_per_agent", "warehouses"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    if args.txn_agents is not None:
        values["agents"] = args.txn_agents
    spec = _workload_spec(values)
    txns = generate(spec)
    try:
        write_trace(args.out, txns, spec)
    except OSError as exc:
        raise CliError("io", f"{args.out}: {exc}") from None
    print(json.dumps({"trace": str(args.out), "txns": len(txns)}))
    return 0


def cmd_validate(args) -> int:
    trace, violations = _parse_trace_file(args.trace)
    for v in violations:
        print(f"{args.trace}:{v.line}: {v.code}: {v.message}")
    if violations:
        raise CliError("invalid-trace", f"{len(violations)} violation(s) in {args.trace}")
    print(json.dumps({"trace": str(args.trace), "txns": len(trace.txns), "valid": True}))
    return 0


def _parse_trace_file(path):
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise CliError("io", f"no such file: {path}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise CliError("io", f"{path}: {exc}") from None
    return parse_trace(lines)


def _load_trace_txns(path):
    trace, violations = _parse_trace_file(path)
    if violations:
        first = violations[0]
        raise CliError("invalid-trace", f"{path}:{first.line}: {first.code}: {first.message}")
    return trace.txns


def cmd_run(args) -> int:
    data = load_run_config(args.config) if args.config else {}
    sim_values = dict(data.get("sim", {}))
    sim_values.update(_flag_overrides(args))
    config = _sim_config(sim_values)
    trace_path = args.trace or data.get("trace")
    if trace_path:
        txns = _load_trace_txns(trace_path)
    else:
        wl = dict(data.get("workload", {}))
        wl.update(seed=config.seed, agents=config.num_txn_agents, txns_per_agent=config.txns_per_agent)
        txns = generate(_workload_spec(wl))
    try:
        sim = build(config, txns)
        drive(sim)
    except LivelockError as exc:
        raise CliError("livelock", str(exc)) from None
    except ValueError as exc:
        raise CliError("schema", str(exc)) from None
    metrics = collect_metrics(sim)
    out = args.out or data.get("output")
    summary = {
        "label": metrics.label,
        "seed": metrics.seed,
        "cycles": metrics.total_cycles,
        "committed": metrics.committed,
        "aborted": metrics.aborted,
        "abort_rate": round(metrics.abort_rate, 6),
        "txn_per_s_per_agent": round(metrics.txn_per_s_per_agent, 2),
        "lock_per_s": round(metrics.lock_per_s, 2),
        "history_sha256": sim.history.digest(),
    }
    if out:
        d = Path(out)
        try:
            d.mkdir(parents=True, exist_ok=True)
            with open(d / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(RunMetrics.CSV_COLUMNS), lineterminator="\n")
                writer.writeheader()
                writer.writerow(metrics.row())
            (d / "metrics.json").write_text(
                json.dumps(metrics.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )
            sim.history.dump(d / "history.jsonl")
            (d / "config.json").write_text(
                json.dumps({"sim": asdict(config)}, indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )
        except OSError as exc:
            raise CliError("io", f"{out}: {exc}") from None
        summary["output"] = str(d)
    if args.verify:
        verdict = verify(sim)
        summary["verified"] = verdict.ok
        if not verdict.ok:
            print(json.dumps(summary, sort_keys=True))
            raise CliError("not-serializable", verdict.to_json())
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    data = _read_json(args.spec)
    try:
        spec = dse.SweepSpec.from_json(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError("schema", f"{args.spec}: {exc}") from None
    out = args.out or spec.output
    if not out:
        raise CliError("schema", "sweep needs an output directory (--out or 'output')")
    spec = dse.SweepSpec(spec.base, spec.workload, spec.axes, spec.seeds, out, args.workers or spec.workers)
    result = dse.sweep(spec)
    for row in dse.aggregate_rows(result):
        print(
            f"{row['label']:<14} {row['params']:<40} runs={row['runs']} failed={row['failed']} "
            f"abort={float(row['avg_abort_rate']):.4f} "
            f"txn/s/agent={float(row['avg_txn_per_s_per_agent']):.0f}"
        )
    for failure in result.failures:
        print(f"failed: point {failure.point} seed {failure.seed}: {failure.error}", file=sys.stderr)
    return 0


def cmd_verify(args) -> int:
    try:
        history = HistoryLog.load(args.history)
    except FileNotFoundError:
        raise CliError("io", f"no such file: {args.history}") from None
    except ValueError as exc:
        raise CliError("io", f"{args.history}: {exc}") from None
    verdict = verify_history(history)
    print(json.dumps(verdict, sort_keys=True))
    if not verdict["ok"]:
        return EXIT_CODES["not-serializable"]
    return 0


PRESETS = {
    "tables": dse.table_grid_expectations,
    "txncs": dse.txncs_expectations,
    "agents": dse.agent_scaling_expectations,
}


def cmd_report(args) -> int:
    results = []
    for path in args.runs:
        try:
            results.append(dse.load_runs(path))
        except FileNotFoundError:
            raise CliError("io", f"no such file: {path}") from None
        except (KeyError, ValueError) as exc:
            raise CliError("schema", f"{path}: {exc}") from None
    for result in results:
        for p in result.points:
            print(
                f"{p.label:<14} {dse.point_label(p.params):<40} seeds={len(p.ok_runs)} "
                f"abort avg={p.avg('abort_rate'):.4f} "
                f"txn/s/agent avg={p.avg('txn_per_s_per_agent'):.0f} "
                f"[{p.min('txn_per_s_per_agent'):.0f}, {p.max('txn_per_s_per_agent'):.0f}]"
            )
    if not args.expect:
        return 0
    checks = []
    for result in results:
        for preset in args.expect:
            checks += dse.trend_report(result, PRESETS[preset]())
    print(dse.render_table(checks))
    return 0 if all(c.passed for c in checks) else EXIT_CODES["trend"]


# -- entry point --------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lockaccel", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic TPC-C-like trace")
    p.add_argument("--config", help="JSON file with a 'workload' section")
    p.add_argument("--out", required=True, help="trace file to write")
    p.add_argument("--seed", type=int)
    p.add_argument("--txn-agents", type=int)
    p.add_argument("--txns-per-agent", type=int)
    p.add_argument("--warehouses", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("validate", help="check a trace file")
    p.add_argument("trace")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="simulate one configuration")
    p.add_argument("--config", help="JSON run config (sim, workload or trace, output)")
    p.add_argument("--trace", help="trace file instead of a generated workload")
    p.add_argument("--out", help="directory for metrics.csv, metrics.json and history.jsonl")
    p.add_argument("--verify", action="store_true", help="check serializability and audits after the run")
    _add_sim_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a parameter grid over several seeds")
    p.add_argument("spec", help="JSON sweep spec")
    p.add_argument("--out", help="output directory (overrides the sweep file)")
    p.add_argument("--workers", type=int, help="parallel processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="check a history file for conflict-serializability")
    p.add_argument("history")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="summarise sweep runs.csv files and check trends")
    p.add_argument("runs", nargs="+", help="runs.csv written by a sweep")
    p.add_argument("--expect", action="append", choices=sorted(PRESETS), help="trend preset to check")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        code = EXIT_CODES[exc.kind]
        print(json.dumps({"error": exc.kind, "exit": code, "message": str(exc)}), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
