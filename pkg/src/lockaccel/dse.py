"""Grid sweeps over simulator parameters and trend checks on the results.

An axis is one or more coupled parameter names with a list of values, e.g.
``Axis(("num_channels", "agents_per_channel"), [(1, 1), (2, 1), (4, 4)])``.
Parameter names are SimConfig fields, or WorkloadSpec fields prefixed with
``workload.``.  Every (point, seed) pair is an independent run; the seed
drives both the workload generator and the simulator config.
"""

from __future__ import annotations

import csv
import itertools
import json
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

from .engine import LivelockError, RunMetrics, SimConfig, run
from .workload import WorkloadSpec, generate

MIN_SEEDS = 3
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
WORKLOAD_PREFIX = "workload."
METRICS = ("abort_rate", "txn_per_s", "committed_per_s", "txn_per_s_per_agent", "lock_per_s")

_SIM_FIELDS = {f.name for f in fields(SimConfig)}
_WORKLOAD_FIELDS = {f.name for f in fields(WorkloadSpec)} - {"seed", "agents", "txns_per_agent"}


def _check_name(name: str) -> None:
    if name.startswith(WORKLOAD_PREFIX):
        if name[len(WORKLOAD_PREFIX):] not in _WORKLOAD_FIELDS:
            raise ValueError(f"unknown workload parameter {name!r}")
    elif name not in _SIM_FIELDS or name == "seed":
        raise ValueError(f"unknown or non-sweepable config parameter {name!r}")


@dataclass(frozen=True)
class Axis:
    names: tuple[str, ...]
    values: tuple

    def __init__(self, names, values):
        names = (names,) if isinstance(names, str) else tuple(names)
        if not names:
            raise ValueError("an axis needs at least one parameter name")
        for name in names:
            _check_name(name)
        normalised = []
        for v in values:
            v = tuple(v) if isinstance(v, (list, tuple)) else (v,)
            if len(v) != len(names):
                raise ValueError(f"axis {names}: value {v} does not match the parameter count")
            normalised.append(v)
        if not normalised:
            raise ValueError(f"axis {names} has no values")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", tuple(normalised))

    def to_json(self) -> dict:
        return {"names": list(self.names), "values": [list(v) for v in self.values]}


@dataclass(frozen=True)
class SweepSpec:
    base: SimConfig = SimConfig()
    workload: WorkloadSpec = WorkloadSpec()
    axes: tuple[Axis, ...] = ()
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    output: str | None = None
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(self.axes))
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if len(set(self.seeds)) < MIN_SEEDS:
            raise ValueError(f"need at least {MIN_SEEDS} distinct seeds per point for min/avg/max")
        seen: set[str] = set()
        for axis in self.axes:
            for name in axis.names:
                if name in seen:
                    raise ValueError(f"parameter {name!r} appears on two axes")
                seen.add(name)
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    def points(self) -> list[dict[str, Any]]:
        """Cartesian product of the axes; one empty point when there are none."""
        out = []
        for combo in itertools.product(*(axis.values for axis in self.axes)):
            params: dict[str, Any] = {}
            for axis, value in zip(self.axes, combo):
                params.update(zip(axis.names, value))
            out.append(params)
        return out

    def to_json(self) -> dict:
        return {
            "base": asdict(self.base),
            "workload": asdict(self.workload),
            "axes": [a.to_json() for a in self.axes],
            "seeds": list(self.seeds),
            "output": self.output,
            "workers": self.workers,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SweepSpec":
        allowed = {"base", "workload", "axes", "seeds", "output", "workers"}
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unknown sweep keys: {sorted(unknown)}")
        return cls(
            base=SimConfig(**data.get("base", {})),
            workload=WorkloadSpec(**data.get("workload", {})),
            axes=tuple(Axis(a["names"], a["values"]) for a in data.get("axes", [])),
            seeds=tuple(data.get("seeds", DEFAULT_SEEDS)),
            output=data.get("output"),
            workers=data.get("workers", 1),
        )


def configure(spec: SweepSpec, params: dict[str, Any], seed: int) -> tuple[SimConfig, WorkloadSpec]:
    sim_changes = {k: v for k, v in params.items() if not k.startswith(WORKLOAD_PREFIX)}
    wl_changes = {k[len(WORKLOAD_PREFIX):]: v for k, v in params.items() if k.startswith(WORKLOAD_PREFIX)}
    config = spec.base.replace(seed=seed, **sim_changes)
    workload = spec.workload.replace(
        seed=seed,
        agents=config.num_txn_agents,
        txns_per_agent=config.txns_per_agent,
        **wl_changes,
    )
    return config, workload


def point_label(params: dict[str, Any]) -> str:
    return ",".join(f"{k}={v}" for k, v in params.items()) or "base"


@dataclass
class RunOutcome:
    point: int
    params: dict[str, Any]
    seed: int
    label: str = ""
    metrics: RunMetrics | None = None
    history_digest: str = ""
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.metrics is not None

    def value(self, metric: str) -> float:
        return float(getattr(self.metrics, metric))


def run_point(spec: SweepSpec, point: int, params: dict[str, Any], seed: int) -> RunOutcome:
    outcome = RunOutcome(point, params, seed)
    try:
        config, wl = configure(spec, params, seed)
        outcome.label = config.label
        metrics, history = run(config, generate(wl))
        outcome.metrics = metrics
        outcome.history_digest = history.digest()
    except (ValueError, LivelockError) as exc:
        outcome.error = f"{type(exc).__name__}: {exc}"
    return outcome


def _run_job(job):
    return run_point(*job)


@dataclass
class PointSummary:
    point: int
    params: dict[str, Any]
    label: str
    runs: list[RunOutcome] = field(default_factory=list)

    @property
    def ok_runs(self) -> list[RunOutcome]:
        return [r for r in self.runs if r.ok]

    def values(self, metric: str) -> list[float]:
        return [r.value(metric) for r in self.ok_runs]

    def avg(self, metric: str) -> float:
        vals = self.values(metric)
        return statistics.fmean(vals) if vals else float("nan")

    def min(self, metric: str) -> float:
        return min(self.values(metric), default=float("nan"))

    def max(self, metric: str) -> float:
        return max(self.values(metric), default=float("nan"))

    def spread(self, metric: str) -> float:
        return self.max(metric) - self.min(metric)


@dataclass
class SweepResult:
    spec: SweepSpec
    points: list[PointSummary]
    started: str = ""
    elapsed_s: float = 0.0

    @property
    def failures(self) -> list[RunOutcome]:
        return [r for p in self.points for r in p.runs if not r.ok]

    def find(self, params: dict[str, Any]) -> PointSummary:
        """The single point whose parameters include all of ``params``."""
        return _select(self, params)


def sweep(spec: SweepSpec) -> SweepResult:
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    t0 = time.perf_counter()
    grid = spec.points()
    jobs = [(spec, i, params, seed) for i, params in enumerate(grid) for seed in spec.seeds]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            outcomes = list(pool.map(_run_job, jobs))
    else:
        outcomes = [_run_job(job) for job in jobs]
    outcomes.sort(key=lambda o: (o.point, o.seed))
    summaries = []
    for i, params in enumerate(grid):
        runs = [o for o in outcomes if o.point == i]
        label = next((r.label for r in runs if r.label), point_label(params))
        summaries.append(PointSummary(i, params, label, runs))
    result = SweepResult(spec, summaries, started, time.perf_counter() - t0)
    if spec.output:
        write_results(result, spec.output)
    return result


# -- CSV output ---------------------------------------------------------------

RUN_COLUMNS = ("point", "params") + RunMetrics.CSV_COLUMNS + ("history_sha256", "error")
AGGREGATE_COLUMNS = (
    "point", "params", "label", "runs", "failed",
    *(f"{stat}_{m}" for m in METRICS for stat in ("avg", "min", "max")),
)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def run_rows(result: SweepResult) -> list[dict]:
    rows = []
    for point in result.points:
        for r in point.runs:
            row = {"point": point.point, "params": point_label(point.params), "seed": r.seed}
            if r.ok:
                row.update(r.metrics.row())
            else:
                row["label"] = r.label
            row["history_sha256"] = r.history_digest
            row["error"] = r.error
            rows.append(row)
    return rows


def aggregate_rows(result: SweepResult) -> list[dict]:
    rows = []
    for p in result.points:
        row = {
            "point": p.point,
            "params": point_label(p.params),
            "label": p.label,
            "runs": len(p.ok_runs),
            "failed": len(p.runs) - len(p.ok_runs),
        }
        for m in METRICS:
            row[f"avg_{m}"] = _fmt(p.avg(m))
            row[f"min_{m}"] = _fmt(p.min(m))
            row[f"max_{m}"] = _fmt(p.max(m))
        rows.append(row)
    return rows


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), restval="", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def write_results(result: SweepResult, directory) -> dict[str, Path]:
    """runs.csv and aggregate.csv are deterministic; timing lives in metadata.json."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "runs": out / "runs.csv",
        "aggregate": out / "aggregate.csv",
        "metadata": out / "metadata.json",
    }
    _write_csv(paths["runs"], RUN_COLUMNS, run_rows(result))
    _write_csv(paths["aggregate"], AGGREGATE_COLUMNS, aggregate_rows(result))
    meta = {"started": result.started, "elapsed_s": round(result.elapsed_s, 3), "spec": result.spec.to_json()}
    paths["metadata"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


class _CsvMetrics:
    """Metric values read back from runs.csv."""

    def __init__(self, row: dict):
        for m in METRICS:
            setattr(self, m, float(row[m]))


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _parse_params(text: str) -> dict[str, Any]:
    if text == "base":
        return {}
    params = {}
    for part in text.split(","):
        key, _, value = part.partition("=")
        params[key] = _parse_value(value)
    return params


def load_runs(path) -> SweepResult:
    """Rebuild per-point summaries from a runs.csv (for offline trend checks)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in RUN_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise ValueError(f"not a sweep runs.csv, missing columns {missing}")
        rows = list(reader)
    points: dict[int, PointSummary] = {}
    for row in rows:
        idx = int(row["point"])
        params = _parse_params(row["params"])
        summary = points.setdefault(idx, PointSummary(idx, params, row["label"]))
        outcome = RunOutcome(idx, params, int(row["seed"]), row["label"], error=row["error"])
        if not row["error"]:
            outcome.metrics = _CsvMetrics(row)
            outcome.history_digest = row["history_sha256"]
        summary.runs.append(outcome)
    seeds = sorted({int(r["seed"]) for r in rows}) or list(DEFAULT_SEEDS)
    spec = SweepSpec(seeds=seeds if len(seeds) >= MIN_SEEDS else DEFAULT_SEEDS)
    return SweepResult(spec, [points[i] for i in sorted(points)])


def read_aggregate(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# -- trend expectations -------------------------------------------------------


@dataclass
class Check:
    name: str
    observed: str
    target: str
    passed: bool


def _select(result: SweepResult, where: dict[str, Any]) -> PointSummary:
    hits = [p for p in result.points if all(p.params.get(k) == v for k, v in where.items())]
    if len(hits) != 1:
        raise KeyError(f"{len(hits)} points match {where}")
    return hits[0]


@dataclass(frozen=True)
class Monotone:
    """Metric along ``points`` never rises (or never falls when ``increasing``)."""

    name: str
    metric: str
    points: tuple[dict, ...]
    increasing: bool = False
    per_seed: bool = False

    def evaluate(self, result: SweepResult) -> Check:
        selected = [_select(result, w) for w in self.points]
        series = [[p.avg(self.metric) for p in selected]]
        if self.per_seed:
            seeds = sorted({r.seed for p in selected for r in p.ok_runs})
            series = []
            for s in seeds:
                series.append([next(r.value(self.metric) for r in p.ok_runs if r.seed == s) for p in selected])
        ok = all(
            all((b >= a) if self.increasing else (b <= a) for a, b in zip(row, row[1:]))
            for row in series
        )
        shown = " | ".join("→".join(f"{v:.4g}" for v in row) for row in series)
        return Check(self.name, shown, "non-decreasing" if self.increasing else "non-increasing", ok)


@dataclass(frozen=True)
class Ratio:
    """avg(metric at numerator) / avg(metric at denominator) within [low, high]."""

    name: str
    metric: str
    numerator: dict
    denominator: dict
    low: float | None = None
    high: float | None = None
    strict: bool = False

    def evaluate(self, result: SweepResult) -> Check:
        num = _select(result, self.numerator).avg(self.metric)
        den = _select(result, self.denominator).avg(self.metric)
        ratio = num / den if den else (float("inf") if num else float("nan"))
        ok = ratio == ratio  # not NaN
        if self.low is not None:
            ok &= ratio > self.low if self.strict else ratio >= self.low
        if self.high is not None:
            ok &= ratio < self.high if self.strict else ratio <= self.high
        op_low, op_high = (">", "<") if self.strict else ("≥", "≤")
        target = " and ".join(
            t for t in (
                f"{op_low} {self.low:g}" if self.low is not None else "",
                f"{op_high} {self.high:g}" if self.high is not None else "",
            ) if t
        )
        return Check(self.name, f"{ratio:.4f} ({num:.4g}/{den:.4g})", target, bool(ok))


@dataclass(frozen=True)
class Scaling:
    """Each consecutive step along ``points`` multiplies the metric by ≥ ``factor``."""

    name: str
    metric: str
    points: tuple[dict, ...]
    factor: float

    def evaluate(self, result: SweepResult) -> Check:
        vals = [_select(result, w).avg(self.metric) for w in self.points]
        steps = [b / a if a else float("inf") for a, b in zip(vals, vals[1:])]
        ok = all(s >= self.factor for s in steps)
        return Check(self.name, ", ".join(f"{s:.3f}×" for s in steps), f"≥ {self.factor:g}× per step", ok)


@dataclass(frozen=True)
class Spread:
    """Min-max spread across seeds at ``point`` ≤ ``factor`` × spread at ``reference``."""

    name: str
    metric: str
    point: dict
    reference: dict
    factor: float

    def evaluate(self, result: SweepResult) -> Check:
        a = _select(result, self.point).spread(self.metric)
        b = _select(result, self.reference).spread(self.metric)
        ok = a <= self.factor * b
        ratio = a / b if b else float("inf") if a else 0.0
        return Check(self.name, f"{a:.4g} vs {b:.4g} (ratio {ratio:.3f})", f"≤ {self.factor:g}×", ok)


def trend_report(result: SweepResult, expectations: Sequence) -> list[Check]:
    checks = []
    for exp in expectations:
        try:
            checks.append(exp.evaluate(result))
        except KeyError as exc:
            checks.append(Check(exp.name, f"missing point: {exc}", "", False))
    return checks


def render_table(checks: Sequence[Check]) -> str:
    if not checks:
        return ""
    headers = ("check", "observed", "target", "result")
    rows = [(c.name, c.observed, c.target, "PASS" if c.passed else "FAIL") for c in checks]
    widths = [max(len(str(r[i])) for r in rows + [headers]) for i in range(4)]
    line = "  ".join("{:<%d}" % w for w in widths)
    out = [line.format(*headers), line.format(*("-" * w for w in widths))]
    out += [line.format(*r) for r in rows]
    return "\n".join(out)


# -- the two grids of the exploration ------------------------------------------

TABLE_GRID = ((1, 1), (2, 1), (2, 2), (4, 2), (4, 4))
TXNCS_VALUES = (2, 4, 8, 16)
AGENT_VALUES = (1, 2, 4, 8)


def table_grid_spec(seeds=DEFAULT_SEEDS, **kw) -> SweepSpec:
    """Channels x agents-per-channel, 1 to 16 lock tables."""
    return SweepSpec(axes=(Axis(("num_channels", "agents_per_channel"), TABLE_GRID),), seeds=seeds, **kw)


def table_grid_expectations(per_seed: bool = True) -> list:
    pts = tuple({"num_channels": m, "agents_per_channel": p} for m, p in TABLE_GRID)
    return [
        Monotone("abort rate non-increasing, 1→16 tables", "abort_rate", pts, per_seed=per_seed),
        Ratio("abort(16 tables) / abort(1 table)", "abort_rate", pts[-1], pts[0], high=0.25, strict=True),
    ]


def txncs_spec(seeds=DEFAULT_SEEDS, agents=(4,), **kw) -> SweepSpec:
    return SweepSpec(
        axes=(Axis("num_txn_agents", agents), Axis("txn_slots", TXNCS_VALUES)), seeds=seeds, **kw
    )


def txncs_expectations(agents: int = 4) -> list:
    def at(t):
        return {"num_txn_agents": agents, "txn_slots": t}

    metric = "txn_per_s_per_agent"
    return [
        Ratio("throughput TxnCS 4 / 2", metric, at(4), at(2), low=1.10),
        Ratio("throughput TxnCS 8 / 4", metric, at(8), at(4), low=0.98),
        Spread("seed spread TxnCS 16 vs 4", metric, at(16), at(4), 0.5),
    ]


def agent_scaling_spec(seeds=DEFAULT_SEEDS, **kw) -> SweepSpec:
    return SweepSpec(axes=(Axis("num_txn_agents", AGENT_VALUES),), seeds=seeds, **kw)


def agent_scaling_expectations() -> list:
    pts = tuple({"num_txn_agents": n} for n in AGENT_VALUES)
    return [Scaling("total throughput per agent doubling", "txn_per_s", pts, 1.8)]
