import json
import subprocess
import sys

import pytest

from lockaccel.cli import EXIT_CODES, main
from lockaccel.engine import HistoryLog, HistoryOp

SMALL = ["--txn-agents", "2", "--txns-per-agent", "10", "--channels", "2", "--agents-per-channel", "2"]


def err_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def write(path, data):
    path.write_text(json.dumps(data))
    return str(path)


def test_exit_code_table():
    assert EXIT_CODES == {
        "ok": 0, "not-serializable": 1, "usage": 2, "schema": 3,
        "io": 4, "invalid-trace": 5, "livelock": 6, "trend": 7,
    }


def test_run_verify_and_outputs(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["run", *SMALL, "--verify", "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["verified"] and summary["committed"] + summary["aborted"] == 20
    assert summary["label"] == "2C2L-2A8T"
    for name in ("metrics.csv", "metrics.json", "history.jsonl", "config.json"):
        assert (out / name).exists()
    assert main(["verify", str(out / "history.jsonl")]) == 0
    assert json.loads(capsys.readouterr().out)["ok"]


def test_run_is_deterministic(capsys):
    main(["run", *SMALL, "--seed", "5"])
    a = json.loads(capsys.readouterr().out)["history_sha256"]
    main(["run", *SMALL, "--seed", "5"])
    assert json.loads(capsys.readouterr().out)["history_sha256"] == a


def test_config_table_size_three_is_schema_error(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {"sim": {"table_size": 3}})
    assert main(["run", "--config", cfg]) == 3
    err = err_json(capsys)
    assert err["error"] == "schema" and "power of two" in err["message"]


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {"sim": {"num_channels": 2, "lanes": 4}})
    assert main(["run", "--config", cfg]) == 3
    assert "lanes" in err_json(capsys)["message"]
    cfg = write(tmp_path / "d.json", {"simulator": {}})
    assert main(["run", "--config", cfg]) == 3


def test_wrong_type_rejected(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {"sim": {"num_channels": "four"}})
    assert main(["run", "--config", cfg]) == 3


def test_trace_and_workload_exclusive(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {"trace": "t.jsonl", "workload": {}})
    assert main(["run", "--config", cfg]) == 3


def test_missing_file_is_io_error(capsys):
    assert main(["run", "--config", "/nonexistent/c.json"]) == 4
    assert main(["verify", "/nonexistent/h.jsonl"]) == 4
    assert main(["validate", "/nonexistent/t.jsonl"]) == 4


def test_usage_error(capsys):
    assert main(["frobnicate"]) == 2
    assert main(["run", "--channels", "many"]) == 2
    assert err_json(capsys)["error"] == "usage"


def test_bad_topology_flag_is_schema_error(capsys):
    assert main(["run", "--agents-per-channel", "8"]) == 3


def test_generate_validate_run_trace(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    assert main(["generate", "--out", str(trace), "--txn-agents", "2", "--txns-per-agent", "5",
                 "--warehouses", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["txns"] == 10
    assert main(["validate", str(trace)]) == 0
    assert json.loads(capsys.readouterr().out)["valid"]
    assert main(["run", "--trace", str(trace), "--txn-agents", "2", "--verify"]) == 0
    assert json.loads(capsys.readouterr().out)["committed"] >= 1


def test_invalid_trace(tmp_path, capsys):
    bad = tmp_path / "b.jsonl"
    bad.write_text('{"version": 1}\n{"txn": 1, "locks": [["0x1", "NL"]]}\n')
    assert main(["validate", str(bad)]) == 5
    assert "nl-get" in capsys.readouterr().out
    assert main(["run", "--trace", str(bad)]) == 5


def test_verify_flags_bad_history(tmp_path, capsys):
    log = HistoryLog()
    for c, t, op in ((1, 1, "read"), (2, 2, "read"), (3, 1, "write"), (4, 2, "write")):
        log.ops.append(HistoryOp(c, 0, 0, t, 7, (0, 7), 448, op, t if op == "write" else 0))
    log.commits = [(3, 0, 1), (4, 0, 2)]
    path = tmp_path / "h.jsonl"
    log.dump(path)
    assert main(["verify", str(path)]) == 1
    verdict = json.loads(capsys.readouterr().out)
    assert not verdict["serializability"]["serializable"]


def test_sweep_and_report(tmp_path, capsys):
    spec = write(tmp_path / "s.json", {
        "base": {"num_txn_agents": 2, "txns_per_agent": 6},
        "workload": {"warehouses": 4, "scan_min": 5, "scan_max": 20},
        "axes": [{"names": ["txn_slots"], "values": [2, 4]}],
        "seeds": [0, 1, 2],
    })
    out = tmp_path / "sw"
    assert main(["sweep", spec, "--out", str(out)]) == 0
    capsys.readouterr()
    runs = str(out / "runs.csv")
    assert main(["report", runs]) == 0
    assert "txn/s/agent" in capsys.readouterr().out
    # the tables preset needs points this sweep does not have
    assert main(["report", runs, "--expect", "tables"]) == 7
    assert "FAIL" in capsys.readouterr().out


def test_sweep_spec_errors(tmp_path, capsys):
    assert main(["sweep", write(tmp_path / "a.json", {"seeds": [0, 1]}), "--out", str(tmp_path)]) == 3
    assert main(["sweep", write(tmp_path / "b.json", {"axes": [{"names": ["seed"], "values": [1]}]}),
                 "--out", str(tmp_path)]) == 3
    assert main(["sweep", write(tmp_path / "c.json", {})]) == 3


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "lockaccel", "frob"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr)["error"] == "usage"


@pytest.mark.parametrize("cfg", ["basic-4c4l-4a8t.json"])
def test_shipped_config_validates(cfg):
    from pathlib import Path

    from lockaccel.cli import load_run_config

    data = load_run_config(Path(__file__).parent.parent / "configs" / cfg)
    assert data["sim"]["num_channels"] == 4
