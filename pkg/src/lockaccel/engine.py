"""Global cycle-stepped simulation of transaction agents, interconnect and lock agents.

Within one cycle the phases run in a fixed order:

    1. lock agents ship due responses and latch new requests
    2. the interconnect delivers responses into transaction-agent buffers
    3. transaction agents parse responses
    4. transaction agents load, send, and commit
    5. channel arbiters admit requests
    6. transaction timers fire

Cycles in which nothing can happen are skipped; every component reports
the next cycle at which it could act.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

from .interconnect import ChannelTopology, Interconnect, entry_key
from .lock_agent import LockAgent
from .memory import SimMemory
from .modes import ResponseKind
from .txn_agent import AgentCosts, TxnAgent, TxnDescriptor, TxnRecord


IDLE = 1 << 62


class LivelockError(RuntimeError):
    pass


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True)
class SimConfig:
    num_txn_agents: int = 4
    num_channels: int = 4
    agents_per_channel: int = 4
    table_size: int = 1 << 16
    pool_size: int = 1 << 12
    search_limit: int = 8
    max_chain: int = 8
    txn_slots: int = 8
    timeout: int = 1 << 13
    mem_latency: int = 36
    send_cost: int = 2
    parse_cost: int = 2
    commit_per_access: int = 4
    cleanup_cost: int = 1
    wire_latency: int = 1
    queue_capacity: int = 64
    response_buffer: int = 16
    freq_mhz: float = 200.0
    txns_per_agent: int = 400
    seed: int = 0
    retry_aborted: bool = False
    memory_span: int = 1 << 60

    def __post_init__(self):
        for name in (
            "num_txn_agents", "num_channels", "agents_per_channel", "txn_slots",
            "search_limit", "max_chain", "timeout", "send_cost", "parse_cost",
            "commit_per_access", "wire_latency", "queue_capacity", "response_buffer",
            "txns_per_agent",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ("table_size", "pool_size"):
            if not _is_pow2(getattr(self, name)):
                raise ValueError(f"{name} must be a power of two, got {getattr(self, name)}")
        if self.freq_mhz <= 0:
            raise ValueError("freq_mhz must be positive")
        if self.mem_latency < 0 or self.cleanup_cost < 0:
            raise ValueError("latencies must be non-negative")
        self.topology()  # channel/agent constraints

    @property
    def label(self) -> str:
        return (
            f"{self.num_channels}C{self.agents_per_channel}L-"
            f"{self.num_txn_agents}A{self.txn_slots}T"
        )

    @property
    def total_tables(self) -> int:
        return self.num_channels * self.agents_per_channel

    def topology(self) -> ChannelTopology:
        return ChannelTopology(
            num_txn_agents=self.num_txn_agents,
            num_channels=self.num_channels,
            agents_per_channel=self.agents_per_channel,
            table_size=self.table_size,
            queue_capacity=self.queue_capacity,
            response_buffer=self.response_buffer,
            wire_latency=self.wire_latency,
        )

    def costs(self) -> AgentCosts:
        return AgentCosts(
            mem_latency=self.mem_latency,
            send_cost=self.send_cost,
            parse_cost=self.parse_cost,
            commit_per_access=self.commit_per_access,
            cleanup_cost=self.cleanup_cost,
            timeout=self.timeout,
        )

    def replace(self, **changes) -> "SimConfig":
        data = asdict(self)
        data.update(changes)
        return SimConfig(**data)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class HistoryOp:
    cycle: int
    agent: int
    slot: int
    txn_id: int
    lock_id: int
    entry: tuple[int, int]
    address: int
    op: str
    value: int


@dataclass
class HistoryLog:
    ops: list[HistoryOp] = field(default_factory=list)
    commits: list[tuple[int, int, int]] = field(default_factory=list)  # (cycle, agent, txn_id)
    aborts: list[tuple[int, int, int]] = field(default_factory=list)

    def to_lines(self) -> Iterable[str]:
        for op in self.ops:
            yield json.dumps(
                {
                    "t": "op", "cycle": op.cycle, "agent": op.agent, "slot": op.slot,
                    "txn": op.txn_id, "lock": f"{op.lock_id:#x}",
                    "entry": list(op.entry), "addr": f"{op.address:#x}",
                    "op": op.op, "value": op.value,
                },
                sort_keys=True,
            )
        for kind, rows in (("commit", self.commits), ("abort", self.aborts)):
            for cycle, agent, txn in rows:
                yield json.dumps({"t": kind, "cycle": cycle, "agent": agent, "txn": txn}, sort_keys=True)

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.to_lines():
                fh.write(line + "\n")

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "HistoryLog":
        log = cls()
        for n, line in enumerate(lines, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                if rec["t"] == "op":
                    log.ops.append(
                        HistoryOp(
                            rec["cycle"], rec["agent"], rec["slot"], rec["txn"],
                            int(rec["lock"], 16), tuple(rec["entry"]),
                            int(rec["addr"], 16), rec["op"], rec["value"],
                        )
                    )
                elif rec["t"] in ("commit", "abort"):
                    row = (rec["cycle"], rec["agent"], rec["txn"])
                    (log.commits if rec["t"] == "commit" else log.aborts).append(row)
                else:
                    raise ValueError(f"unknown record type {rec['t']!r}")
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"history line {n}: {exc}") from exc
        return log

    @classmethod
    def load(cls, path) -> "HistoryLog":
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh)

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.to_lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()


def _bucket(value: int) -> int:
    """Power-of-two histogram bucket (upper bound)."""
    return 1 << max(value - 1, 0).bit_length()


@dataclass
class RunMetrics:
    label: str = ""
    seed: int = 0
    total_cycles: int = 0
    committed: int = 0
    aborted: int = 0
    aborted_timeout: int = 0
    aborted_denied: int = 0
    freq_mhz: float = 200.0
    num_txn_agents: int = 1
    locks_requested: int = 0
    gets_emitted: int = 0
    releases_emitted: int = 0
    responses: dict[str, int] = field(default_factory=dict)
    locks_served: list[int] = field(default_factory=list)
    spurious_releases: int = 0
    stale_responses: int = 0
    credit_stalls: int = 0
    txn_latency_hist: dict[int, int] = field(default_factory=dict)
    response_latency_hist: dict[str, dict[int, int]] = field(default_factory=dict)
    mean_txn_latency: float = 0.0

    CSV_COLUMNS = (
        "label", "seed", "total_cycles", "committed", "aborted", "aborted_timeout",
        "aborted_denied", "abort_rate", "txn_per_s", "committed_per_s",
        "txn_per_s_per_agent", "lock_per_s", "mean_txn_latency", "granted", "waiting",
        "aborted_responses", "released", "spurious_releases",
    )

    @property
    def total_txns(self) -> int:
        return self.committed + self.aborted

    @property
    def abort_rate(self) -> float:
        return self.aborted / self.total_txns if self.total_txns else 0.0

    @property
    def seconds(self) -> float:
        return self.total_cycles / (self.freq_mhz * 1e6)

    @property
    def txn_per_s(self) -> float:
        return self.total_txns / self.seconds if self.total_cycles else 0.0

    @property
    def committed_per_s(self) -> float:
        return self.committed / self.seconds if self.total_cycles else 0.0

    @property
    def txn_per_s_per_agent(self) -> float:
        return self.txn_per_s / self.num_txn_agents

    @property
    def lock_per_s(self) -> float:
        if not self.total_cycles:
            return 0.0
        served = self.responses.get("Granted", 0) + self.responses.get("Released", 0)
        return served / self.seconds

    def row(self) -> dict:
        return {
            "label": self.label,
            "seed": self.seed,
            "total_cycles": self.total_cycles,
            "committed": self.committed,
            "aborted": self.aborted,
            "aborted_timeout": self.aborted_timeout,
            "aborted_denied": self.aborted_denied,
            "abort_rate": f"{self.abort_rate:.6f}",
            "txn_per_s": f"{self.txn_per_s:.2f}",
            "committed_per_s": f"{self.committed_per_s:.2f}",
            "txn_per_s_per_agent": f"{self.txn_per_s_per_agent:.2f}",
            "lock_per_s": f"{self.lock_per_s:.2f}",
            "mean_txn_latency": f"{self.mean_txn_latency:.2f}",
            "granted": self.responses.get("Granted", 0),
            "waiting": self.responses.get("Waiting", 0),
            "aborted_responses": self.responses.get("Aborted", 0),
            "released": self.responses.get("Released", 0),
            "spurious_releases": self.spurious_releases,
        }

    def to_json(self) -> dict:
        data = asdict(self)
        data.update(
            abort_rate=self.abort_rate,
            txn_per_s=self.txn_per_s,
            committed_per_s=self.committed_per_s,
            txn_per_s_per_agent=self.txn_per_s_per_agent,
            lock_per_s=self.lock_per_s,
        )
        return data


def throughput(metrics: RunMetrics, config: SimConfig | None = None) -> dict[str, float]:
    if config is not None:
        metrics.freq_mhz = config.freq_mhz
    return {
        "txn_per_s": metrics.txn_per_s,
        "committed_per_s": metrics.committed_per_s,
        "txn_per_s_per_agent": metrics.txn_per_s_per_agent,
        "lock_per_s": metrics.lock_per_s,
    }


@dataclass
class Simulation:
    """A built system; ``run`` drives it to completion."""

    config: SimConfig
    interconnect: Interconnect
    txn_agents: list[TxnAgent]
    memory: SimMemory
    history: HistoryLog
    records: list[TxnRecord]
    now: int = 0
    wake: list[int] = field(default_factory=list)
    work: list[list[TxnDescriptor]] = field(default_factory=list)

    def __post_init__(self):
        if not self.wake:
            self.wake = [0] * len(self.txn_agents)

    @property
    def lock_agents(self) -> list[LockAgent]:
        return self.interconnect.agents


def split_work(workload: Sequence[TxnDescriptor], agents: int) -> list[list[TxnDescriptor]]:
    return [list(workload[i::agents]) for i in range(agents)]


def build(config: SimConfig, workload: Sequence[TxnDescriptor] | Sequence[Sequence[TxnDescriptor]]):
    topology = config.topology()
    agents = [
        LockAgent(
            table_size=config.table_size,
            pool_size=config.pool_size,
            search_limit=config.search_limit,
            max_chain=config.max_chain,
            index_shift=topology.index_shift,
            ident=g,
        )
        for g in range(topology.num_lock_agents)
    ]
    interconnect = Interconnect(topology, agents)
    memory = SimMemory(span=config.memory_span, latency=config.mem_latency)
    history = HistoryLog()
    records: list[TxnRecord] = []

    if workload and isinstance(workload[0], TxnDescriptor):
        per_agent = split_work(workload, config.num_txn_agents)
    else:
        per_agent = [list(w) for w in workload]
        if len(per_agent) != config.num_txn_agents:
            raise ValueError("per-agent workload count does not match num_txn_agents")
    for txns in per_agent:
        for txn in txns:
            for spec in txn.locks:
                if spec.data_addr is not None:
                    memory._check(spec.data_addr, spec.data_len)

    def on_commit(agent, slot, txn, ops, cycle):
        history.commits.append((cycle, agent, txn.txn_id))
        for spec, op, value in ops:
            history.ops.append(
                HistoryOp(
                    cycle, agent, slot, txn.txn_id, spec.lock_id,
                    entry_key(spec.lock_id, topology), spec.data_addr, op, value,
                )
            )

    def on_finish(record: TxnRecord):
        records.append(record)
        if not record.committed:
            history.aborts.append((record.end, record.agent, record.txn_id))

    txn_agents = [
        TxnAgent(
            i, config.txn_slots, per_agent[i], interconnect, config.costs(), memory,
            on_commit=on_commit, on_finish=on_finish, retry_aborted=config.retry_aborted,
        )
        for i in range(config.num_txn_agents)
    ]
    return Simulation(config, interconnect, txn_agents, memory, history, records, work=per_agent)


def step(sim: Simulation, now: int, visit_all: bool = False) -> None:
    """One global cycle; only transaction agents with something due are visited.

    ``visit_all`` ticks every agent every cycle; results must not change.
    """
    ic = sim.interconnect
    wake = sim.wake
    ic.service_agents(now)
    for dst, _ in ic.deliver(now):
        wake[dst] = now
    if visit_all:
        active = sim.txn_agents
    else:
        active = [ta for ta in sim.txn_agents if wake[ta.ident] <= now]
    for ta in active:
        ta.receive_phase(now)
    for ta in active:
        ta.emit_phase(now)
    admitted = ic.admit(now)
    for ta in active:
        ta.check_timeouts(now)
        nxt = ta.next_event(now)
        wake[ta.ident] = IDLE if nxt is None else nxt
    for routed in admitted:
        if wake[routed.source] > now + 1:
            wake[routed.source] = now + 1


def next_cycle(sim: Simulation, now: int) -> int | None:
    candidate = min(sim.wake)
    ic_next = sim.interconnect.next_event(now)
    if ic_next is not None:
        candidate = min(candidate, ic_next)
    return None if candidate >= IDLE else candidate


def drive(sim: Simulation, max_cycles: int | None = None) -> int:
    """Advance until every transaction is cleaned up; returns the final cycle."""
    config = sim.config
    guard = 4 * config.timeout
    now = sim.now
    last_progress = now
    seen = (0, 0)
    while True:
        step(sim, now)
        marker = (sim.interconnect.responses_produced, len(sim.records))
        if marker != seen:
            seen = marker
            last_progress = now
        if all(ta.finished for ta in sim.txn_agents) and sim.interconnect.quiescent:
            break
        nxt = next_cycle(sim, now)
        if nxt is None or nxt - last_progress > guard:
            raise LivelockError(
                f"{config.label}: no progress since cycle {last_progress} "
                f"(now {now}, {len(sim.records)} txns finished)"
            )
        if max_cycles is not None and nxt > max_cycles:
            sim.now = now
            return now
        now = nxt
    sim.now = now
    return now


def collect_metrics(sim: Simulation) -> RunMetrics:
    config = sim.config
    records = sim.records
    lat_hist: Counter = Counter()
    total_latency = 0
    for rec in records:
        latency = rec.end - rec.start
        total_latency += latency
        lat_hist[_bucket(latency)] += 1
    responses: Counter = Counter()
    occupancy: dict[str, Counter] = {}
    for agent in sim.lock_agents:
        for kind, count in agent.responses.items():
            responses[kind.value] += count
        for kind, hist in agent.occupancy.items():
            occupancy.setdefault(kind, Counter()).update(hist)
    return RunMetrics(
        label=config.label,
        seed=config.seed,
        total_cycles=max((r.end for r in records), default=0),
        committed=sum(r.committed for r in records),
        aborted=sum(not r.committed for r in records),
        aborted_timeout=sum(r.cause == "timeout" for r in records),
        aborted_denied=sum(r.cause == "denied" for r in records),
        freq_mhz=config.freq_mhz,
        num_txn_agents=config.num_txn_agents,
        locks_requested=sum(r.locks for r in records),
        gets_emitted=sum(ta.gets_emitted for ta in sim.txn_agents),
        releases_emitted=sum(ta.releases_emitted for ta in sim.txn_agents),
        responses=dict(sorted(responses.items())),
        locks_served=[a.responses[ResponseKind.GRANTED] + a.responses[ResponseKind.RELEASED] for a in sim.lock_agents],
        spurious_releases=sum(a.spurious_releases for a in sim.lock_agents),
        stale_responses=sum(ta.stale_responses for ta in sim.txn_agents),
        credit_stalls=sim.interconnect.credit_stalls,
        txn_latency_hist=dict(sorted(lat_hist.items())),
        response_latency_hist={k: dict(sorted(v.items())) for k, v in sorted(occupancy.items())},
        mean_txn_latency=total_latency / len(records) if records else 0.0,
    )


def run(config: SimConfig, workload) -> tuple[RunMetrics, HistoryLog]:
    sim = build(config, workload)
    if any(ta.pending for ta in sim.txn_agents):
        drive(sim)
    return collect_metrics(sim), sim.history


def run_simulation(config: SimConfig, workload) -> Simulation:
    """Like ``run`` but returns the whole simulation for auditing."""
    sim = build(config, workload)
    if any(ta.pending for ta in sim.txn_agents):
        drive(sim)
    return sim
