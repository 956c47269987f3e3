"""Pipelined transaction agent with context-switched transaction slots.

Five components work on different slots concurrently: the task loader, the
lock-get sender, the response receiver, the commit controller and the
lock-release sender. Each non-receiver component round-robins over the slots
and picks the first one that is ready for it; the receiver reacts to every
response in the buffer. A slot can only cross the four stage barriers
(loaded, all granted, committed, all released) in order.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .modes import LockMode, LockRequest, LockResponse, Requester, RequestKind, ResponseKind
from .memory import SimMemory

MAX_LOCKS_PER_TXN = 511
DESC_HEADER_BYTES = 16
DESC_ENTRY_BYTES = 12
CHUNK_BYTES = 64


class Stage(enum.Enum):
    EMPTY = 0
    LOADING = 1
    GET_SENDING = 2
    AWAIT_GRANTS = 3
    COMMITTING = 4
    RELEASE_SENDING = 5
    AWAIT_RELEASED = 6
    CLEANUP = 7


class LockStatus(enum.Enum):
    NOT_SENT = 0
    GET_SENT = 1
    WAITING = 2
    GRANTED = 3
    RELEASE_SENT = 4
    DONE = 5
    ABORTED_BY_AGENT = 6


@dataclass(frozen=True)
class LockSpec:
    lock_id: int
    mode: LockMode
    data_addr: int | None = None
    data_len: int = 0

    def __post_init__(self):
        if self.mode.accesses_data != (self.data_addr is not None):
            raise ValueError(
                f"lock {self.lock_id:#x} ({self.mode}): data access must be present "
                "exactly for S, SIX and X"
            )
        if self.data_addr is not None and self.data_len <= 0:
            raise ValueError(f"lock {self.lock_id:#x}: data length must be positive")


@dataclass(frozen=True)
class TxnDescriptor:
    txn_id: int
    locks: tuple[LockSpec, ...]

    def __post_init__(self):
        if not 1 <= len(self.locks) <= MAX_LOCKS_PER_TXN:
            raise ValueError(
                f"txn {self.txn_id}: {len(self.locks)} locks, "
                f"max size for one txn is {MAX_LOCKS_PER_TXN}"
            )
        if any(spec.mode is LockMode.NL for spec in self.locks):
            raise ValueError(f"txn {self.txn_id}: NL lock requested")

    @property
    def descriptor_bytes(self) -> int:
        return DESC_HEADER_BYTES + DESC_ENTRY_BYTES * len(self.locks)

    @property
    def data_locks(self) -> int:
        return sum(1 for spec in self.locks if spec.mode.accesses_data)


@dataclass(frozen=True)
class AgentCosts:
    mem_latency: int = 36
    send_cost: int = 2
    parse_cost: int = 2
    commit_per_access: int = 4
    cleanup_cost: int = 1
    timeout: int = 1 << 13

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if min(self.send_cost, self.parse_cost, self.commit_per_access) < 1:
            raise ValueError("component costs must be at least one cycle")
        if self.mem_latency < 0 or self.cleanup_cost < 0:
            raise ValueError("latencies must be non-negative")

    def load_cycles(self, txn: TxnDescriptor) -> int:
        return self.mem_latency + math.ceil(txn.descriptor_bytes / CHUNK_BYTES)

    def commit_cycles(self, data_locks: int) -> int:
        if data_locks == 0:
            return 0
        return self.mem_latency + self.commit_per_access * data_locks


@dataclass
class TxnRecord:
    txn_id: int
    agent: int
    slot: int
    committed: bool
    start: int
    end: int
    locks: int
    cause: str = ""


_TIMED = (Stage.GET_SENDING, Stage.AWAIT_GRANTS)


class TxnSlot:
    def __init__(self, index: int):
        self.index = index
        self.stage = Stage.EMPTY
        self.generation = 0
        self.txn: TxnDescriptor | None = None
        self.status: list[LockStatus] = []
        self.position: dict[int, int] = {}
        self.sent_gets = 0
        self.grants = 0
        self.waitings = 0
        self.aborts = 0
        self.sent_releases = 0
        self.releases_acked = 0
        self.abort_flag = False
        self.abort_cause = ""
        self.timer_start: int | None = None
        self.data_buffer: list[int] = []
        self.load_start = 0
        self.stage_ready = 0  # cycle at which a timed stage (load/commit/cleanup) ends
        self.next_get = 0
        self.next_release = 0
        self.deferred: list[int] = []  # locks whose Get response was still in flight

    def reset(self, txn: TxnDescriptor, now: int) -> None:
        self.generation += 1
        self.txn = txn
        self.status = [LockStatus.NOT_SENT] * len(txn.locks)
        self.position = {spec.lock_id: i for i, spec in enumerate(txn.locks)}
        self.sent_gets = self.grants = self.waitings = self.aborts = 0
        self.sent_releases = self.releases_acked = 0
        self.abort_flag = False
        self.abort_cause = ""
        self.timer_start = None
        self.data_buffer = []
        self.load_start = now
        self.next_get = 0
        self.next_release = 0
        self.deferred = []

    @property
    def all_granted(self) -> bool:
        return self.txn is not None and self.grants == len(self.txn.locks)

    def requester(self, agent: int) -> Requester:
        return Requester(agent, self.index, self.generation)


class TxnAgent:
    """One transaction agent with ``txn_slots`` context-switched slots.

    ``port`` must provide ``port_free(agent)``, ``emit(agent, request, now)
    -> bool``, ``has_response(agent)`` and ``take_response(agent)``; ``on_commit`` receives the memory operations of
    each committed transaction.
    """

    def __init__(
        self,
        ident: int,
        txn_slots: int,
        work: Sequence[TxnDescriptor],
        port,
        costs: AgentCosts = AgentCosts(),
        memory: SimMemory | None = None,
        on_commit: Callable | None = None,
        on_finish: Callable[[TxnRecord], None] | None = None,
        retry_aborted: bool = False,
    ):
        if txn_slots < 1:
            raise ValueError("need at least one transaction slot")
        self.ident = ident
        self.slots = [TxnSlot(i) for i in range(txn_slots)]
        self.pending: deque[TxnDescriptor] = deque(work)
        self.port = port
        self.costs = costs
        self.memory = memory if memory is not None else SimMemory(latency=costs.mem_latency)
        self.on_commit = on_commit
        self.on_finish = on_finish
        self.retry_aborted = retry_aborted

        self.loader_slot: TxnSlot | None = None
        self.loader_busy = 0
        self.sender_slot: TxnSlot | None = None
        self.get_busy = 0
        self.release_busy = 0
        self.committer_slot: TxnSlot | None = None
        self.commit_busy = 0
        self.receiving: tuple[LockResponse, int] | None = None

        self._deadline: int | None = None
        self._rr = {"load": 0, "get": 0, "commit": 0, "release": 0}
        self.records: list[TxnRecord] = []
        self.stale_responses = 0
        self.late_grants = 0
        self.responses_seen = {kind: 0 for kind in ResponseKind}
        self.gets_emitted = 0
        self.releases_emitted = 0
        self.aborted_writes = 0

    # -- helpers ------------------------------------------------------------

    def _pick(self, component: str, stage: Stage, ready=None) -> TxnSlot | None:
        n = len(self.slots)
        start = self._rr[component]
        for k in range(n):
            slot = self.slots[(start + k) % n]
            if slot.stage is stage and (ready is None or ready(slot)):
                self._rr[component] = (slot.index + 1) % n
                return slot
        return None

    def _request(self, slot: TxnSlot, pos: int, kind: RequestKind, timeout=False) -> LockRequest:
        spec = slot.txn.locks[pos]
        return LockRequest(slot.requester(self.ident), spec.lock_id, spec.mode, kind, timeout)

    def _begin_abort(self, slot: TxnSlot, cause: str) -> None:
        slot.abort_flag = True
        slot.abort_cause = slot.abort_cause or cause
        slot.stage = Stage.RELEASE_SENDING
        if self.sender_slot is slot:
            self.sender_slot = None

    @property
    def finished(self) -> bool:
        return not self.pending and all(s.stage is Stage.EMPTY for s in self.slots)

    # -- receiver (phase 3) -------------------------------------------------

    def receive_phase(self, now: int) -> bool:
        progressed = False
        if self.receiving is not None and self.receiving[1] <= now:
            self.receive(self.receiving[0], now)
            self.receiving = None
            progressed = True
        if self.receiving is None:
            response = self.port.take_response(self.ident)
            if response is not None:
                self.receiving = (response, now + self.costs.parse_cost)
                progressed = True
        for slot in self.slots:
            if slot.stage is Stage.CLEANUP and slot.stage_ready <= now:
                self._finish(slot, now)
                progressed = True
        return progressed

    def receive(self, response: LockResponse, now: int) -> None:
        """Apply one parsed response to its slot."""
        who = response.addressee
        if who.agent != self.ident or not 0 <= who.slot < len(self.slots):
            self.stale_responses += 1
            return
        slot = self.slots[who.slot]
        pos = slot.position.get(response.lock_id) if slot.txn is not None else None
        if who.generation != slot.generation or pos is None or slot.stage is Stage.EMPTY:
            self.stale_responses += 1
            return
        self.responses_seen[response.kind] += 1
        status = slot.status[pos]
        kind = response.kind

        if kind is ResponseKind.GRANTED:
            if status in (LockStatus.GET_SENT, LockStatus.WAITING):
                slot.status[pos] = LockStatus.GRANTED
                slot.grants += 1
                if slot.stage is Stage.AWAIT_GRANTS and slot.all_granted:
                    slot.stage = Stage.COMMITTING
            elif status is LockStatus.RELEASE_SENT:
                # popped from the queue while our timeout release was in flight
                self.late_grants += 1
            else:
                self.stale_responses += 1
        elif kind is ResponseKind.WAITING:
            if status is LockStatus.GET_SENT:
                slot.status[pos] = LockStatus.WAITING
                slot.waitings += 1
            else:
                self.stale_responses += 1
        elif kind is ResponseKind.ABORTED:
            if status is LockStatus.GET_SENT:
                slot.status[pos] = LockStatus.ABORTED_BY_AGENT
                slot.aborts += 1
                if slot.stage in (Stage.GET_SENDING, Stage.AWAIT_GRANTS):
                    self._begin_abort(slot, "denied")
                else:
                    slot.abort_flag = True
            else:
                self.stale_responses += 1
        else:
            if status is LockStatus.RELEASE_SENT:
                slot.status[pos] = LockStatus.DONE
                slot.releases_acked += 1
                self._maybe_cleanup(slot, now)
            else:
                self.stale_responses += 1

    def _maybe_cleanup(self, slot: TxnSlot, now: int) -> None:
        if slot.stage is Stage.AWAIT_RELEASED and slot.releases_acked == slot.sent_releases:
            slot.stage = Stage.CLEANUP
            slot.stage_ready = now + self.costs.cleanup_cost
            if self.costs.cleanup_cost == 0:
                self._finish(slot, now)

    def _finish(self, slot: TxnSlot, now: int) -> None:
        txn = slot.txn
        committed = not slot.abort_flag
        record = TxnRecord(
            txn.txn_id, self.ident, slot.index, committed, slot.load_start, now,
            len(txn.locks), "" if committed else slot.abort_cause,
        )
        self.records.append(record)
        if self.on_finish is not None:
            self.on_finish(record)
        if not committed and self.retry_aborted:
            self.pending.append(txn)
        slot.stage = Stage.EMPTY
        slot.txn = None

    # -- emitting components (phase 4) --------------------------------------

    def emit_phase(self, now: int) -> bool:
        progressed = self.load(now)
        # release traffic takes the shared output port first
        progressed |= self.send_releases(now)
        progressed |= self.send_gets(now)
        progressed |= self.commit(now)
        return progressed

    def context_switch_tick(self, now: int) -> bool:
        """Receiver then every pipeline component, as one cycle of this agent."""
        progressed = self.receive_phase(now)
        progressed |= self.emit_phase(now)
        progressed |= self.check_timeouts(now)
        return progressed

    def load(self, now: int) -> bool:
        progressed = False
        slot = self.loader_slot
        if slot is not None and now >= self.loader_busy:
            slot.stage = Stage.GET_SENDING
            self.loader_slot = None
            progressed = True
        if self.loader_slot is None and self.pending and now >= self.loader_busy:
            slot = self._pick("load", Stage.EMPTY)
            if slot is not None:
                txn = self.pending.popleft()
                slot.reset(txn, now)
                slot.stage = Stage.LOADING
                self.loader_slot = slot
                self.loader_busy = now + self.costs.load_cycles(txn)
                progressed = True
        return progressed

    def send_gets(self, now: int) -> bool:
        if now < self.get_busy:
            return False
        slot = self.sender_slot
        if slot is None:
            slot = self._pick("get", Stage.GET_SENDING)
            if slot is None:
                return False
            self.sender_slot = slot
        pos = slot.next_get
        if not self.port.port_free(self.ident):
            return False
        if not self.port.emit(self.ident, self._request(slot, pos, RequestKind.GET), now):
            return False
        spec = slot.txn.locks[pos]
        slot.status[pos] = LockStatus.GET_SENT
        slot.sent_gets += 1
        slot.next_get += 1
        if spec.mode.accesses_data:
            slot.data_buffer.append(pos)
        if slot.timer_start is None:
            slot.timer_start = now
            due = now + self.costs.timeout
            if self._deadline is None or due < self._deadline:
                self._deadline = due
        self.gets_emitted += 1
        self.get_busy = now + self.costs.send_cost
        if slot.next_get == len(slot.txn.locks):
            slot.stage = Stage.AWAIT_GRANTS
            self.sender_slot = None
            if slot.all_granted:
                slot.stage = Stage.COMMITTING
        return True

    def commit(self, now: int) -> bool:
        progressed = False
        slot = self.committer_slot
        if slot is not None and now >= self.commit_busy:
            self._apply_commit(slot, now)
            self.committer_slot = None
            progressed = True
        if self.committer_slot is None and now >= self.commit_busy:
            slot = self._pick("commit", Stage.COMMITTING)
            if slot is not None:
                assert slot.all_granted and not slot.abort_flag
                cycles = self.costs.commit_cycles(len(slot.data_buffer))
                if cycles == 0:
                    self._apply_commit(slot, now)
                else:
                    self.committer_slot = slot
                    self.commit_busy = now + cycles
                progressed = True
        return progressed

    def _apply_commit(self, slot: TxnSlot, now: int) -> None:
        ops = []
        txn = slot.txn
        for pos in slot.data_buffer:
            spec = txn.locks[pos]
            if spec.mode.writes:
                payload = txn.txn_id.to_bytes(8, "little")
                data = (payload * (spec.data_len // 8 + 1))[: spec.data_len]
                self.memory.write(spec.data_addr, data)
                ops.append((spec, "write", txn.txn_id))
            else:
                data = self.memory.read(spec.data_addr, spec.data_len)
                writer = int.from_bytes(data[:8].ljust(8, b"\0"), "little")
                ops.append((spec, "read", writer))
        if self.on_commit is not None:
            self.on_commit(self.ident, slot.index, txn, ops, now)
        slot.stage = Stage.RELEASE_SENDING

    def send_releases(self, now: int) -> bool:
        if now < self.release_busy:
            return False
        n = len(self.slots)
        start = self._rr["release"]
        for k in range(n):
            slot = self.slots[(start + k) % n]
            if slot.stage is not Stage.RELEASE_SENDING:
                continue
            pos = self._next_releasable(slot)
            if pos is None:
                if not slot.deferred:
                    slot.stage = Stage.AWAIT_RELEASED
                    self._maybe_cleanup(slot, now)
                continue
            if not self.port.port_free(self.ident):
                slot.deferred.insert(0, pos)
                return False
            status = slot.status[pos]
            request = self._request(slot, pos, RequestKind.RELEASE, status is LockStatus.WAITING)
            if not self.port.emit(self.ident, request, now):
                # keep the lock at the front so the retry picks it up first
                slot.deferred.insert(0, pos)
                return False
            slot.status[pos] = LockStatus.RELEASE_SENT
            slot.sent_releases += 1
            self.releases_emitted += 1
            self.release_busy = now + self.costs.send_cost
            self._rr["release"] = (slot.index + 1) % n
            return True
        return False

    def _next_releasable(self, slot: TxnSlot) -> int | None:
        # Get responses still in flight are deferred: releasing them blind
        # could decrement an owner count we never incremented (Aborted race).
        status = slot.status
        for i, pos in enumerate(slot.deferred):
            if status[pos] in (LockStatus.GRANTED, LockStatus.WAITING):
                del slot.deferred[i]
                return pos
            if status[pos] is LockStatus.ABORTED_BY_AGENT:
                del slot.deferred[i]
                return self._next_releasable(slot)
        while slot.next_release < len(status):
            pos = slot.next_release
            slot.next_release += 1
            if status[pos] in (LockStatus.GRANTED, LockStatus.WAITING):
                return pos
            if status[pos] is LockStatus.GET_SENT:
                slot.deferred.append(pos)
        return None

    # -- timers (phase 6) ---------------------------------------------------

    def check_timeout(self, slot: TxnSlot, now: int) -> bool:
        if slot.stage not in (Stage.GET_SENDING, Stage.AWAIT_GRANTS) or slot.timer_start is None:
            return False
        if now - slot.timer_start >= self.costs.timeout and not slot.all_granted:
            self._begin_abort(slot, "timeout")
            return True
        return False

    def check_timeouts(self, now: int) -> bool:
        if self._deadline is None or now < self._deadline:
            return False
        fired = False
        deadline = None
        for slot in self.slots:
            fired |= self.check_timeout(slot, now)
            if slot.stage in _TIMED and slot.timer_start is not None and not slot.all_granted:
                d = slot.timer_start + self.costs.timeout
                if deadline is None or d < deadline:
                    deadline = d
        self._deadline = deadline
        return fired

    # -- scheduling ---------------------------------------------------------

    def next_event(self, now: int) -> int | None:
        best = None
        if self.receiving is not None:
            best = self.receiving[1]
        elif self.port.has_response(self.ident):
            best = now
        if self.loader_slot is not None:
            best = self.loader_busy if best is None else min(best, self.loader_busy)
        if self.committer_slot is not None:
            best = self.commit_busy if best is None else min(best, self.commit_busy)
        timeout = self.costs.timeout
        port_busy = not self.port.port_free(self.ident)
        deadline = None
        for slot in self.slots:
            stage = slot.stage
            t = None
            if stage is Stage.EMPTY:
                if self.pending and self.loader_slot is None:
                    t = self.loader_busy
            elif stage is Stage.GET_SENDING:
                # a busy register frees during admission, which wakes us
                if not port_busy:
                    t = self.get_busy
            elif stage is Stage.COMMITTING:
                if self.committer_slot is None:
                    t = self.commit_busy
            elif stage is Stage.RELEASE_SENDING:
                if port_busy:
                    if not slot.deferred and not self._needs_port(slot):
                        t = self.release_busy
                elif self._has_release_work(slot):
                    t = self.release_busy
            elif stage is Stage.CLEANUP:
                t = slot.stage_ready
            if t is not None and (best is None or t < best):
                best = t
            if stage in _TIMED and slot.timer_start is not None and not slot.all_granted:
                d = slot.timer_start + timeout
                if deadline is None or d < deadline:
                    deadline = d
        self._deadline = deadline
        if deadline is not None and (best is None or deadline < best):
            best = deadline
        return None if best is None else max(best, now + 1)

    def _needs_port(self, slot: TxnSlot) -> bool:
        status = slot.status
        releasable = (LockStatus.GRANTED, LockStatus.WAITING)
        for pos in range(slot.next_release, len(status)):
            if status[pos] in releasable or status[pos] is LockStatus.GET_SENT:
                return True
        return False

    def _has_release_work(self, slot: TxnSlot) -> bool:
        status = slot.status
        if any(status[p] is not LockStatus.GET_SENT for p in slot.deferred):
            return True
        if slot.next_release < len(status):
            return True
        return not slot.deferred
