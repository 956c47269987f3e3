"""Correctness oracles for simulator runs.

* conflict-serializability of committed histories, at lock-table-entry
  granularity (colliding lock ids share an entry and therefore conflict);
* a read-from check: every read observes the last committed writer;
* a small reference lock manager for decision-by-decision comparison with
  the hardware-style lock agent on short traces;
* leak and balance audits over a finished simulation.
"""

from __future__ import annotations

import json
import random
from collections import Counter, deque
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .engine import HistoryLog, Simulation
from .lock_agent import LockAgent
from .modes import (
    LockMode,
    LockRequest,
    Requester,
    RequestKind,
    ResponseKind,
    compatible,
    get,
    release,
)

# -- serializability ----------------------------------------------------------


@dataclass
class ConflictGraph:
    nodes: set[int] = field(default_factory=set)
    edges: dict[int, set[int]] = field(default_factory=dict)

    def add_edge(self, a: int, b: int) -> None:
        if a != b:
            self.edges.setdefault(a, set()).add(b)

    def successors(self, node: int) -> set[int]:
        return self.edges.get(node, set())

    @property
    def edge_count(self) -> int:
        return sum(len(v) for v in self.edges.values())


def conflict_graph(history: HistoryLog) -> ConflictGraph:
    """Edges a -> b when an operation of a precedes a conflicting one of b."""
    graph = ConflictGraph(nodes={txn for _, _, txn in history.commits})
    per_entry: dict[tuple[int, int], list] = {}
    for seq, op in enumerate(history.ops):
        graph.nodes.add(op.txn_id)
        per_entry.setdefault(tuple(op.entry), []).append((op.cycle, seq, op))
    for ops in per_entry.values():
        ops.sort(key=lambda item: (item[0], item[1]))
        last_writer = None
        readers: list[int] = []
        for _, _, op in ops:
            if op.op == "write":
                if last_writer is not None:
                    graph.add_edge(last_writer, op.txn_id)
                for r in readers:
                    graph.add_edge(r, op.txn_id)
                last_writer = op.txn_id
                readers = []
            else:
                if last_writer is not None:
                    graph.add_edge(last_writer, op.txn_id)
                readers.append(op.txn_id)
    return graph


def _strongly_connected(graph: ConflictGraph) -> list[list[int]]:
    """Iterative Tarjan; histories can be long enough to break recursion."""
    index: dict[int, int] = {}
    low: dict[int, int] = {}
    on_stack: set[int] = set()
    stack: list[int] = []
    components = []
    counter = 0
    for root in sorted(graph.nodes):
        if root in index:
            continue
        work = [(root, iter(sorted(graph.successors(root))))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            node, children = work[-1]
            advanced = False
            for child in children:
                if child not in index:
                    index[child] = low[child] = counter
                    counter += 1
                    stack.append(child)
                    on_stack.add(child)
                    work.append((child, iter(sorted(graph.successors(child)))))
                    advanced = True
                    break
                if child in on_stack:
                    low[node] = min(low[node], index[child])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                comp = []
                while True:
                    member = stack.pop()
                    on_stack.discard(member)
                    comp.append(member)
                    if member == node:
                        break
                components.append(sorted(comp))
    return components


def _shortest_cycle(graph: ConflictGraph, members: Sequence[int]) -> list[int]:
    inside = set(members)
    best: list[int] | None = None
    for start in members:
        parent = {start: None}
        queue = deque([start])
        found = None
        while queue and found is None:
            node = queue.popleft()
            for nxt in sorted(graph.successors(node)):
                if nxt not in inside:
                    continue
                if nxt == start:
                    found = node
                    break
                if nxt not in parent:
                    parent[nxt] = node
                    queue.append(nxt)
        if found is None:
            continue
        path = [found]
        while path[-1] != start:
            path.append(parent[path[-1]])
        cycle = list(reversed(path))
        if best is None or len(cycle) < len(best):
            best = cycle
    return best or []


@dataclass
class SerializabilityVerdict:
    serializable: bool
    transactions: int
    edges: int
    cycle: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def check_serializable(history: HistoryLog) -> SerializabilityVerdict:
    graph = conflict_graph(history)
    cyclic = [c for c in _strongly_connected(graph) if len(c) > 1]
    cycle: list[int] = []
    for comp in cyclic:
        candidate = _shortest_cycle(graph, comp)
        if not cycle or len(candidate) < len(cycle):
            cycle = candidate
    return SerializabilityVerdict(not cyclic, len(graph.nodes), graph.edge_count, cycle)


@dataclass
class ReadFromViolation:
    txn_id: int
    address: int
    observed: int
    expected: int


def check_reads(history: HistoryLog) -> list[ReadFromViolation]:
    """Replay committed operations in log order against a shadow memory."""
    shadow: dict[int, int] = {}
    bad = []
    ordered = sorted(enumerate(history.ops), key=lambda item: (item[1].cycle, item[0]))
    for _, op in ordered:
        if op.op == "write":
            shadow[op.address] = op.value
        elif op.value != shadow.get(op.address, 0):
            bad.append(ReadFromViolation(op.txn_id, op.address, op.value, shadow.get(op.address, 0)))
    return bad


# -- reference lock manager ---------------------------------------------------


@dataclass
class _RefLock:
    holders: Counter = field(default_factory=Counter)  # requester -> grants held
    epoch_modes: list[LockMode] = field(default_factory=list)
    waiters: deque = field(default_factory=deque)  # (requester, mode)

    @property
    def owners(self) -> int:
        return sum(self.holders.values())


class ReferenceLockManager:
    """Textbook FIFO lock manager with an unbounded map and no collisions.

    A request is granted when the lock is free, or when nobody waits and its
    mode is compatible with every mode granted since the lock was last free.
    The hardware table keeps the joined group mode until the lock empties, so
    modes granted earlier in the same busy period still count.
    """

    def __init__(self, max_queue: int = 8):
        self.max_queue = max_queue
        self.locks: dict[int, _RefLock] = {}
        self.spurious = 0

    def get(self, requester: Requester, lock_id: int, mode: LockMode) -> ResponseKind:
        lock = self.locks.setdefault(lock_id, _RefLock())
        if lock.owners == 0:
            lock.holders[requester] += 1
            lock.epoch_modes = [mode]
            return ResponseKind.GRANTED
        if not lock.waiters and all(compatible(mode, m) for m in lock.epoch_modes):
            lock.holders[requester] += 1
            lock.epoch_modes.append(mode)
            return ResponseKind.GRANTED
        if len(lock.waiters) >= self.max_queue:
            return ResponseKind.ABORTED
        lock.waiters.append((requester, mode))
        return ResponseKind.WAITING

    def release(
        self, requester: Requester, lock_id: int, timeout: bool = False
    ) -> tuple[ResponseKind, list[Requester]]:
        """Returns Released and the requesters granted from the queue, in order."""
        lock = self.locks.get(lock_id)
        if lock is None:
            self.spurious += 1
            return ResponseKind.RELEASED, []
        if timeout:
            for i, (who, _) in enumerate(lock.waiters):
                if who == requester:
                    del lock.waiters[i]
                    self._forget_if_idle(lock_id, lock)
                    return ResponseKind.RELEASED, []
        if lock.holders[requester] == 0:
            self.spurious += 1
            return ResponseKind.RELEASED, []
        lock.holders[requester] -= 1
        if lock.holders[requester] == 0:
            del lock.holders[requester]
        popped = []
        if lock.owners == 0:
            lock.epoch_modes = []
            while lock.waiters:
                who, mode = lock.waiters[0]
                if lock.epoch_modes and not all(compatible(mode, m) for m in lock.epoch_modes):
                    break
                lock.waiters.popleft()
                lock.holders[who] += 1
                lock.epoch_modes.append(mode)
                popped.append(who)
        self._forget_if_idle(lock_id, lock)
        return ResponseKind.RELEASED, popped

    def _forget_if_idle(self, lock_id: int, lock: _RefLock) -> None:
        if lock.owners == 0 and not lock.waiters:
            del self.locks[lock_id]

    def holds(self, requester: Requester, lock_id: int) -> bool:
        lock = self.locks.get(lock_id)
        return lock is not None and lock.holders[requester] > 0

    def waits(self, requester: Requester, lock_id: int) -> bool:
        lock = self.locks.get(lock_id)
        return lock is not None and any(w == requester for w, _ in lock.waiters)


Decision = tuple  # (kind name, requester tuple, lock id)


def _decision(kind: ResponseKind, who: Requester, lock_id: int) -> Decision:
    return (kind.value, (who.agent, who.slot, who.generation), lock_id)


def _agent_decisions(agent: LockAgent, request: LockRequest) -> list[Decision]:
    if request.kind is RequestKind.GET:
        response, _ = agent.serve_get(request)
        return [_decision(response.kind, response.addressee, response.lock_id)]
    response, _, popped = agent.serve_release(request)
    out = [_decision(response.kind, response.addressee, response.lock_id)]
    out += [_decision(r.kind, r.addressee, r.lock_id) for _, r in popped]
    return out


def _reference_decisions(ref: ReferenceLockManager, request: LockRequest) -> list[Decision]:
    who = request.requester
    if request.kind is RequestKind.GET:
        return [_decision(ref.get(who, request.lock_id, request.mode), who, request.lock_id)]
    kind, popped = ref.release(who, request.lock_id, request.timeout_release)
    out = [_decision(kind, who, request.lock_id)]
    out += [_decision(ResponseKind.GRANTED, w, request.lock_id) for w in popped]
    return out


@dataclass
class EquivalenceVerdict:
    equivalent: bool
    events: int
    first_divergence: dict | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def decision_equivalence(
    micro_trace: Sequence[LockRequest], agent: LockAgent | None = None
) -> EquivalenceVerdict:
    """Feed the same arrival order to a lock agent and the reference manager."""
    agent = agent or LockAgent(table_size=1 << 16, pool_size=1 << 12)
    indices = {}
    for req in micro_trace:
        idx = agent.index_of(req.lock_id)
        if indices.setdefault(idx, req.lock_id) != req.lock_id:
            raise ValueError(
                f"lock ids {indices[idx]:#x} and {req.lock_id:#x} share table index {idx}"
            )
    ref = ReferenceLockManager(max_queue=agent.max_chain)
    events = 0
    for step, req in enumerate(micro_trace):
        mine = _agent_decisions(agent, req)
        theirs = _reference_decisions(ref, req)
        if mine != theirs:
            return EquivalenceVerdict(
                False,
                events,
                {
                    "step": step,
                    "request": {
                        "kind": req.kind.value, "mode": req.mode.value,
                        "lock": f"{req.lock_id:#x}",
                        "requester": [req.requester.agent, req.requester.slot],
                        "timeout": req.timeout_release,
                    },
                    "lock_agent": [list(map(str, d)) for d in mine],
                    "reference": [list(map(str, d)) for d in theirs],
                },
            )
        events += len(mine)
    return EquivalenceVerdict(True, events)


_GET_MODES = (LockMode.IS, LockMode.IX, LockMode.S, LockMode.SIX, LockMode.X)


def random_micro_trace(
    rng: random.Random, length: int = 50, locks: int = 3, requesters: int = 6,
    table_size: int = 1 << 16,
) -> list[LockRequest]:
    """A well-formed request sequence, shaped by a shadow reference manager.

    Each requester touches a lock at most once per Get; it only releases what
    it holds (normal release) or waits on (timeout release).  Lock ids are
    chosen so that no two share a table index.
    """
    probe = LockAgent(table_size=table_size, pool_size=16)
    ids: list[int] = []
    used: set[int] = set()
    candidate = rng.randrange(1 << 40)
    while len(ids) < locks:
        idx = probe.index_of(candidate)
        if idx not in used:
            used.add(idx)
            ids.append(candidate)
        candidate = rng.randrange(1 << 40)
    who = [Requester(a % 4, a // 4) for a in range(requesters)]
    shadow = ReferenceLockManager(max_queue=probe.max_chain)
    trace: list[LockRequest] = []
    while len(trace) < length:
        r = rng.choice(who)
        lid = rng.choice(ids)
        if shadow.holds(r, lid):
            req = release(r.agent, r.slot, lid, LockMode.NL)
            shadow.release(r, lid)
        elif shadow.waits(r, lid):
            req = release(r.agent, r.slot, lid, LockMode.NL, timeout=True)
            shadow.release(r, lid, timeout=True)
        else:
            req = get(r.agent, r.slot, lid, rng.choice(_GET_MODES))
            shadow.get(r, lid, req.mode)
        trace.append(req)
    return trace


# -- audits -------------------------------------------------------------------


@dataclass
class AuditReport:
    violations: list[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.violations

    def add(self, message: str) -> None:
        self.violations.append(message)

    def to_json(self) -> str:
        return json.dumps({"clean": self.clean, "violations": self.violations}, sort_keys=True)


def audit(sim: Simulation) -> AuditReport:
    """Drain, message conservation, owner balance and aborted-write checks."""
    report = AuditReport()
    ic = sim.interconnect
    agents = sim.lock_agents

    # drain
    for agent in agents:
        drained = agent.drain_check()
        for idx, entry in drained.entries:
            report.add(
                f"drain: agent {agent.ident} entry {idx} still {entry.mode.value} "
                f"x{entry.owner_count}"
            )
        for slot, req in drained.pool:
            report.add(f"drain: agent {agent.ident} waitQ slot {slot} holds {req.lock_id:#x}")
        for problem in agent.check_invariants():
            report.add(f"invariant: agent {agent.ident}: {problem}")
    if not ic.quiescent:
        report.add("drain: interconnect still carries requests or responses")
    for ta in sim.txn_agents:
        if not ta.finished:
            report.add(f"drain: transaction agent {ta.ident} has unfinished work")

    # message conservation
    kinds = Counter()
    for agent in agents:
        kinds.update(agent.responses)
    granted = kinds[ResponseKind.GRANTED]
    waiting = kinds[ResponseKind.WAITING]
    aborted = kinds[ResponseKind.ABORTED]
    released = kinds[ResponseKind.RELEASED]
    pops = sum(a.pop_grants for a in agents)
    deletions = sum(a.waitq_deletions for a in agents)
    gets = sum(ta.gets_emitted for ta in sim.txn_agents)
    releases = sum(ta.releases_emitted for ta in sim.txn_agents)
    if gets != granted + aborted + deletions:
        report.add(
            f"conservation: {gets} Gets emitted but {granted} Granted + {aborted} Aborted "
            f"+ {deletions} waitQ deletions"
        )
    if waiting != pops + deletions:
        report.add(f"conservation: {waiting} Waiting but {pops} pop grants + {deletions} deletions")
    if releases != released:
        report.add(f"conservation: {releases} Releases emitted but {released} Released")
    if ic.requests_admitted != gets + releases:
        report.add(f"conservation: {ic.requests_admitted} admitted vs {gets + releases} emitted")
    if ic.responses_produced != ic.responses_delivered:
        report.add(
            f"conservation: {ic.responses_produced} responses produced but "
            f"{ic.responses_delivered} delivered"
        )
    seen = sum(sum(ta.responses_seen.values()) + ta.stale_responses for ta in sim.txn_agents)
    if seen != ic.responses_delivered:
        report.add(f"conservation: {ic.responses_delivered} delivered but {seen} parsed")

    # owner balance: every grant is matched by exactly one owner decrement
    owner_releases = sum(a.owner_releases for a in agents)
    if granted != owner_releases:
        report.add(f"balance: {granted} grants vs {owner_releases} owner releases")

    # aborted transactions never write
    # with retries an id may abort and later commit; only final aborts count
    committed_ids = {txn for _, _, txn in sim.history.commits}
    aborted_ids = {txn for _, _, txn in sim.history.aborts} - committed_ids
    for op in sim.history.ops:
        if op.txn_id in aborted_ids:
            report.add(f"aborted write: txn {op.txn_id} logged {op.op} at {op.address:#x}")
    for txns in sim.work:
        for txn in txns:
            if txn.txn_id not in aborted_ids:
                continue
            for spec in txn.locks:
                if spec.mode.writes and spec.data_len >= 8:
                    tag = int.from_bytes(sim.memory.read(spec.data_addr, 8), "little")
                    if tag == txn.txn_id:
                        report.add(f"aborted write: txn {txn.txn_id} tag found at {spec.data_addr:#x}")
    for ta in sim.txn_agents:
        if ta.aborted_writes:
            report.add(f"aborted write: agent {ta.ident} counted {ta.aborted_writes}")
    return report


@dataclass
class Verdict:
    """Everything the verifier can say about one finished run."""

    serializability: SerializabilityVerdict
    read_violations: list[ReadFromViolation]
    audit: AuditReport

    @property
    def ok(self) -> bool:
        return self.serializability.serializable and not self.read_violations and self.audit.clean

    def to_json(self) -> str:
        return json.dumps(
            {
                "ok": self.ok,
                "serializability": asdict(self.serializability),
                "read_violations": [asdict(v) for v in self.read_violations],
                "audit": {"clean": self.audit.clean, "violations": self.audit.violations},
            },
            sort_keys=True,
        )


def verify(sim: Simulation) -> Verdict:
    return Verdict(check_serializable(sim.history), check_reads(sim.history), audit(sim))


def verify_history(history: HistoryLog) -> dict:
    """Offline checks that need only a history file."""
    verdict = check_serializable(history)
    reads = check_reads(history)
    return {
        "ok": verdict.serializable and not reads,
        "serializability": asdict(verdict),
        "read_violations": [asdict(v) for v in reads],
    }


def replay_micro_traces(seeds: Iterable[int], length: int = 50) -> list[EquivalenceVerdict]:
    return [decision_equivalence(random_micro_trace(random.Random(s), length)) for s in seeds]
