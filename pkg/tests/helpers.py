"""Test-side oracles and small builders shared by several test files."""

from __future__ import annotations

from lockaccel.interconnect import ChannelTopology, Interconnect, RoutedRequest, route
from lockaccel.lock_agent import LockAgent
from lockaccel.modes import LockMode, get, release
from lockaccel.txn_agent import LockSpec, TxnDescriptor

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
M1 = 0xBF58476D1CE4E5B9
M2 = 0x94D049BB133111EB


def _unxorshift(z: int, s: int) -> int:
    x = z
    for _ in range(64 // s + 1):
        x = z ^ (x >> s)
    return x & MASK


def unmix(h: int) -> int:
    """Inverse of the splitmix64 finaliser, written independently of the package."""
    z = _unxorshift(h, 31)
    z = (z * pow(M2, -1, 1 << 64)) & MASK
    z = _unxorshift(z, 27)
    z = (z * pow(M1, -1, 1 << 64)) & MASK
    z = _unxorshift(z, 30)
    return (z - GOLDEN) & MASK


def colliding_ids(count: int, index: int = 5, shift: int = 0, table_bits: int = 16) -> list[int]:
    """Distinct lock ids that all hash to ``index`` under the given shift."""
    out = []
    for k in range(1, count + 1):
        h = (k << (shift + table_bits)) | (index << shift)
        out.append(unmix(h))
    return out


def spec(lock_id: int, mode: LockMode) -> LockSpec:
    if mode.accesses_data:
        return LockSpec(lock_id, mode, lock_id * 64 % (1 << 40), 64)
    return LockSpec(lock_id, mode)


def txn(txn_id: int, *locks: tuple[int, LockMode]) -> TxnDescriptor:
    return TxnDescriptor(txn_id, tuple(spec(lid, mode) for lid, mode in locks))


# -- lock-agent scenarios ---------------------------------------------------------


def timed(agent, request, now=0):
    """Latch one request on an idle agent; returns [(offset, kind, slot)]."""
    assert agent.accept(request, now)
    out = [(t - now, r.kind, r.addressee.slot) for t, r in agent.pending]
    agent.pending.clear()
    agent.busy_until = now
    return out


def saturate(requests, pool_size=1 << 12):
    """Queue every request up front on a lone agent; returns [(cycle, response)]."""
    topo = ChannelTopology(num_txn_agents=1, num_channels=1, agents_per_channel=1, response_buffer=1 << 20)
    agent = LockAgent(table_size=1 << 16, pool_size=pool_size)
    ic = Interconnect(topo, [agent])
    for r in requests:
        ch, ag, idx = route(r.lock_id, topo)
        ic.enqueue_direct(RoutedRequest(r, 0, ch, ag, idx), 0)
    times = []
    now = 0
    while not ic.quiescent:
        for resp in ic.service_agents(now):
            times.append((now, resp))
        for dst, _ in ic.deliver(now):
            ic.take_response(dst)
        now += 1
    return times


def worst_case_trace(rounds):
    """Hot X lock with seven waiters in an eight-slot pool: each later Get walks
    the full chain and probes all eight slots, then times out from the tail."""
    X, S = LockMode.X, LockMode.S
    reqs = [get(0, 0, 7, X)] + [get(0, k, 7, S) for k in range(1, 8)]
    for _ in range(rounds):
        reqs += [get(0, 8, 7, S), release(0, 8, 7, S, timeout=True)]
    return reqs
