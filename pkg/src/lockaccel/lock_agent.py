"""Lock agent: a keyless direct-mapped lock table plus a shared waiting-queue pool.

The agent is modelled as a cycle-accurate FSM that serves one request at a
time. Decisions are taken when a request is latched; the responses are then
released at fixed cycle offsets which follow the state sequence of the
hardware controller:

    Get granted                      3
    Get queued                       3 + chain walk + probes + 1
    Get aborted, chain full          3 + chain walk
    Get aborted, no free pool slot   3 + chain walk + search_limit
    Release, normal                  3
    Release, timeout, entry found    3 + position + 1
    Release, timeout, not found      3 + chain walk + 1, then normal release
    each grant popped after release  +3 after the previous response
"""

from __future__ import annotations

import json
from collections import Counter, deque
from dataclasses import dataclass, field

from .hashing import mix64
from .modes import (
    LockMode,
    LockRequest,
    LockResponse,
    RequestKind,
    ResponseKind,
    compatible,
    group_join,
)

BASE_LATENCY = 3
POP_LATENCY = 3


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass
class LockTableEntry:
    mode: LockMode = LockMode.NL
    owner_count: int = 0
    waitq_head: int | None = None

    @property
    def entry_valid(self) -> bool:
        return self.owner_count > 0 or self.waitq_head is not None

    @property
    def waitq_valid(self) -> bool:
        return self.waitq_head is not None


@dataclass
class WaitQEntry:
    request: LockRequest
    next: int | None = None


@dataclass
class DrainReport:
    entries: list[tuple[int, LockTableEntry]] = field(default_factory=list)
    pool: list[tuple[int, LockRequest]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.entries and not self.pool


class LockAgent:
    """One lock table with its FSM controller.

    ``index_shift`` drops the low hash bits that the interconnect already
    consumed to pick the channel and the agent inside the channel.
    """

    def __init__(
        self,
        table_size: int = 1 << 16,
        pool_size: int = 1 << 12,
        search_limit: int = 8,
        max_chain: int = 8,
        index_shift: int = 0,
        ident: int = 0,
    ):
        if not _is_pow2(table_size) or not _is_pow2(pool_size):
            raise ValueError("table and pool capacities must be powers of two")
        if search_limit < 1 or max_chain < 1:
            raise ValueError("search_limit and max_chain must be positive")
        self.table_size = table_size
        self.pool_size = pool_size
        self.search_limit = search_limit
        self.max_chain = max_chain
        self.index_shift = index_shift
        self.ident = ident

        # sparse storage; a missing index is an invalid (NL) entry
        self.table: dict[int, LockTableEntry] = {}
        self.pool: list[WaitQEntry | None] = [None] * pool_size
        self.probe_cursor = 0
        self.busy_until = 0
        self.pending: deque[tuple[int, LockResponse]] = deque()

        self.responses = Counter()
        self.occupancy: dict[str, Counter] = {}
        self.spurious_releases = 0
        self.pop_grants = 0
        self.waitq_deletions = 0
        self.owner_releases = 0
        self.requests_served = 0
        self.stall_cycles = 0

    # -- addressing ---------------------------------------------------------

    def index_of(self, lock_id: int) -> int:
        return (mix64(lock_id) >> self.index_shift) & (self.table_size - 1)

    # -- request intake -----------------------------------------------------

    def accept(self, request: LockRequest, now: int) -> bool:
        """Latch ``request`` if the FSM is back in its wait-request state."""
        if now < self.busy_until:
            return False
        if request.kind is RequestKind.GET:
            primary, done = self.serve_get(request)
            schedule = [(done, primary)]
        else:
            primary, done, popped = self.serve_release(request)
            schedule = [(done, primary)] + popped
        for offset, response in schedule:
            self.pending.append((now + offset, response))
        self.busy_until = now + schedule[-1][0]
        self.requests_served += 1
        return True

    def pop_due(self, now: int) -> list[LockResponse]:
        out = []
        while self.pending and self.pending[0][0] <= now:
            out.append(self.pending.popleft()[1])
        return out

    def stall(self, cycles: int = 1) -> None:
        """Hold every scheduled response (output back-pressure)."""
        self.pending = deque((t + cycles, r) for t, r in self.pending)
        self.busy_until += cycles
        self.stall_cycles += cycles

    @property
    def idle(self) -> bool:
        return not self.pending

    # -- FSM paths ----------------------------------------------------------

    def _record(self, kind: ResponseKind, occupancy: int) -> None:
        self.responses[kind] += 1
        self.occupancy.setdefault(kind.value, Counter())[occupancy] += 1

    def _chain(self, entry: LockTableEntry) -> list[int]:
        chain = []
        cursor = entry.waitq_head
        while cursor is not None:
            chain.append(cursor)
            cursor = self.pool[cursor].next
        return chain

    def _respond(self, request: LockRequest, kind: ResponseKind) -> LockResponse:
        return LockResponse(request.requester, request.lock_id, kind)

    def serve_get(self, request: LockRequest) -> tuple[LockResponse, int]:
        """Decide a Get; returns the response and its cycle offset."""
        idx = self.index_of(request.lock_id)
        entry = self.table.get(idx)
        if entry is None or entry.owner_count == 0:
            entry = self.table.setdefault(idx, LockTableEntry())
            entry.mode = request.mode
            entry.owner_count = 1
            return self._grant_now(request)
        if entry.waitq_head is None and compatible(request.mode, entry.mode):
            entry.owner_count += 1
            entry.mode = group_join(entry.mode, request.mode)
            return self._grant_now(request)

        chain = self._chain(entry)
        walked = len(chain)
        if walked >= self.max_chain:
            occ = BASE_LATENCY + walked
            self._record(ResponseKind.ABORTED, occ)
            return self._respond(request, ResponseKind.ABORTED), occ

        for probe in range(1, self.search_limit + 1):
            slot = (self.probe_cursor + probe - 1) & (self.pool_size - 1)
            if self.pool[slot] is None:
                break
        else:
            self.probe_cursor = (self.probe_cursor + self.search_limit) & (self.pool_size - 1)
            occ = BASE_LATENCY + walked + self.search_limit
            self._record(ResponseKind.ABORTED, occ)
            return self._respond(request, ResponseKind.ABORTED), occ

        self.pool[slot] = WaitQEntry(request)
        self.probe_cursor = (slot + 1) & (self.pool_size - 1)
        if chain:
            self.pool[chain[-1]].next = slot
        else:
            entry.waitq_head = slot
        occ = BASE_LATENCY + walked + probe + 1
        self._record(ResponseKind.WAITING, occ)
        return self._respond(request, ResponseKind.WAITING), occ

    def _grant_now(self, request: LockRequest) -> tuple[LockResponse, int]:
        self._record(ResponseKind.GRANTED, BASE_LATENCY)
        return self._respond(request, ResponseKind.GRANTED), BASE_LATENCY

    def serve_release(
        self, request: LockRequest
    ) -> tuple[LockResponse, int, list[tuple[int, LockResponse]]]:
        """Decide a Release.

        Returns the Released response, its offset, and the follow-up grants
        popped from the waiting queue with their offsets.
        """
        idx = self.index_of(request.lock_id)
        entry = self.table.get(idx)
        extra = 0
        if request.timeout_release and entry is not None and entry.waitq_head is not None:
            prev = None
            cursor = entry.waitq_head
            position = 0
            while cursor is not None:
                position += 1
                waiting = self.pool[cursor]
                if (
                    waiting.request.requester == request.requester
                    and waiting.request.lock_id == request.lock_id
                ):
                    if prev is None:
                        entry.waitq_head = waiting.next
                    else:
                        self.pool[prev].next = waiting.next
                    self.pool[cursor] = None
                    self.waitq_deletions += 1
                    occ = BASE_LATENCY + position + 1
                    self._drop_if_empty(idx, entry)
                    self._record(ResponseKind.RELEASED, occ)
                    return self._respond(request, ResponseKind.RELEASED), occ, []
                prev, cursor = cursor, waiting.next
            # the grant raced the timeout; fall through to a normal release
            extra = position + 1

        occ = BASE_LATENCY + extra
        released = self._respond(request, ResponseKind.RELEASED)
        self._record(ResponseKind.RELEASED, occ)
        if entry is None or entry.owner_count == 0:
            self.spurious_releases += 1
            return released, occ, []
        self.owner_releases += 1
        if entry.owner_count > 1:
            # stored group mode is kept as is
            entry.owner_count -= 1
            return released, occ, []

        entry.owner_count = 0
        entry.mode = LockMode.NL
        popped = []
        offset = occ
        while entry.waitq_head is not None:
            slot = entry.waitq_head
            waiting = self.pool[slot]
            if entry.owner_count and not compatible(waiting.request.mode, entry.mode):
                break
            entry.waitq_head = waiting.next
            self.pool[slot] = None
            entry.mode = (
                group_join(entry.mode, waiting.request.mode)
                if entry.owner_count
                else waiting.request.mode
            )
            entry.owner_count += 1
            offset += POP_LATENCY
            self.pop_grants += 1
            self._record(ResponseKind.GRANTED, POP_LATENCY)
            popped.append((offset, self._respond(waiting.request, ResponseKind.GRANTED)))
        self._drop_if_empty(idx, entry)
        return released, occ, popped

    def _drop_if_empty(self, idx: int, entry: LockTableEntry) -> None:
        if not entry.entry_valid:
            entry.mode = LockMode.NL
            del self.table[idx]

    # -- inspection ---------------------------------------------------------

    def drain_check(self) -> DrainReport:
        report = DrainReport()
        for idx in sorted(self.table):
            entry = self.table[idx]
            if entry.entry_valid or entry.mode is not LockMode.NL:
                report.entries.append((idx, entry))
        for i, slot in enumerate(self.pool):
            if slot is not None:
                report.pool.append((i, slot.request))
        return report

    def check_invariants(self) -> list[str]:
        problems = []
        reachable: set[int] = set()
        for idx, entry in self.table.items():
            if entry.mode is not LockMode.NL and entry.owner_count < 1:
                problems.append(f"entry {idx}: mode {entry.mode} without owners")
            if entry.waitq_head is not None and entry.owner_count < 1:
                problems.append(f"entry {idx}: waiting queue without owners")
            seen = []
            cursor = entry.waitq_head
            while cursor is not None:
                if cursor in seen or cursor in reachable:
                    problems.append(f"entry {idx}: waiting chain revisits slot {cursor}")
                    break
                if self.pool[cursor] is None:
                    problems.append(f"entry {idx}: chain points at free slot {cursor}")
                    break
                seen.append(cursor)
                cursor = self.pool[cursor].next
            if len(seen) > self.max_chain:
                problems.append(f"entry {idx}: chain length {len(seen)} > {self.max_chain}")
            reachable.update(seen)
        orphans = {i for i, s in enumerate(self.pool) if s is not None} - reachable
        if orphans:
            problems.append(f"unreachable pool slots {sorted(orphans)}")
        return problems

    def dump(self) -> dict:
        def req(r: LockRequest) -> dict:
            return {
                "agent": r.requester.agent,
                "slot": r.requester.slot,
                "generation": r.requester.generation,
                "lock_id": f"{r.lock_id:#x}",
                "mode": r.mode.value,
                "kind": r.kind.value,
            }

        return {
            "table": {
                str(idx): {
                    "mode": e.mode.value,
                    "owner_count": e.owner_count,
                    "waitq_head": e.waitq_head,
                    "entry_valid": e.entry_valid,
                    "waitq_valid": e.waitq_valid,
                }
                for idx, e in sorted(self.table.items())
            },
            "pool": {
                str(i): {"request": req(s.request), "next": s.next}
                for i, s in enumerate(self.pool)
                if s is not None
            },
            "probe_cursor": self.probe_cursor,
            "busy_until": self.busy_until,
        }

    def dump_json(self) -> str:
        return json.dumps(self.dump(), sort_keys=True)
