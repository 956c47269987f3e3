"""Channel/table hierarchy between transaction agents and lock agents.

Requests leave a transaction agent through a single output register. Each
lock channel runs a round-robin arbiter that admits at most one register per
cycle into its bounded request queue; the lock agents of the channel pull
their own requests from that queue. Responses travel back over a fixed-latency
wire into the addressee's bounded response buffer. Credits for that buffer are
checked before a response leaves a lock agent; without a credit the agent
holds the response and stays busy.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .hashing import mix64
from .lock_agent import LockAgent
from .modes import LockRequest, LockResponse

MAX_AGENTS_PER_CHANNEL = 4


def _log2(n: int) -> int:
    return n.bit_length() - 1


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True)
class ChannelTopology:
    num_txn_agents: int = 4
    num_channels: int = 4
    agents_per_channel: int = 4
    table_size: int = 1 << 16
    queue_capacity: int = 64
    response_buffer: int = 16
    wire_latency: int = 1

    def __post_init__(self):
        if self.num_txn_agents < 1:
            raise ValueError("need at least one transaction agent")
        if not _is_pow2(self.num_channels):
            raise ValueError("channel count must be a power of two")
        if not _is_pow2(self.agents_per_channel):
            raise ValueError("agents per channel must be a power of two")
        if self.agents_per_channel > MAX_AGENTS_PER_CHANNEL:
            raise ValueError(
                f"at most {MAX_AGENTS_PER_CHANNEL} lock agents per channel keep the 3-cycle grant"
            )
        if not _is_pow2(self.table_size):
            raise ValueError("table size must be a power of two")
        if self.queue_capacity < 1 or self.response_buffer < 1 or self.wire_latency < 1:
            raise ValueError("queue, buffer and wire latency must be at least 1")

    @property
    def num_lock_agents(self) -> int:
        return self.num_channels * self.agents_per_channel

    @property
    def index_shift(self) -> int:
        return _log2(self.num_channels) + _log2(self.agents_per_channel)

    @property
    def label(self) -> str:
        return f"{self.num_channels}C{self.agents_per_channel}L"


def route(lock_id: int, topology: ChannelTopology) -> tuple[int, int, int]:
    """(channel, agent inside the channel, table index) for a lock id."""
    h = mix64(lock_id)
    m_bits = _log2(topology.num_channels)
    p_bits = _log2(topology.agents_per_channel)
    channel = h & (topology.num_channels - 1)
    agent = (h >> m_bits) & (topology.agents_per_channel - 1)
    index = (h >> (m_bits + p_bits)) & (topology.table_size - 1)
    return channel, agent, index


def entry_key(lock_id: int, topology: ChannelTopology) -> tuple[int, int]:
    """(global lock agent, table index): the real synchronisation unit."""
    channel, agent, index = route(lock_id, topology)
    return channel * topology.agents_per_channel + agent, index


def crossbar_size(n: int, m: int) -> int:
    """All-to-all crossbar: n 1xm plus m nx1 switches."""
    if n < 1 or m < 1:
        raise ValueError("crossbar dimensions must be positive")
    return 2 * n * m


def crossbar_size_hier(n: int, m: int, p: int) -> int:
    """One n x m crossbar to the channels plus a 1xp fan-out per channel."""
    if p < 1:
        raise ValueError("crossbar dimensions must be positive")
    return crossbar_size(n, m) + m * p


@dataclass(frozen=True)
class RoutedRequest:
    request: LockRequest
    source: int
    channel: int
    agent: int
    index: int
    enqueue_cycle: int = -1


class Interconnect:
    def __init__(self, topology: ChannelTopology, agents: list[LockAgent] | None = None, **agent_kw):
        self.topology = topology
        n, m, p = topology.num_txn_agents, topology.num_channels, topology.agents_per_channel
        if agents is None:
            agents = [
                LockAgent(
                    table_size=topology.table_size,
                    index_shift=topology.index_shift,
                    ident=g,
                    **agent_kw,
                )
                for g in range(m * p)
            ]
        if len(agents) != m * p:
            raise ValueError(f"{topology.label} needs {m * p} lock agents, got {len(agents)}")
        self.agents = agents

        self.ports: list[RoutedRequest | None] = [None] * n
        self.rr_pointer = [0] * m
        # per channel, one FIFO per agent: (ready cycle, routed request); capacity is shared
        self.queues = [[deque() for _ in range(p)] for _ in range(m)]
        self.queue_fill = [0] * m
        self.inflight: list[deque[tuple[int, LockResponse]]] = [deque() for _ in range(n)]
        self.buffers: list[deque[LockResponse]] = [deque() for _ in range(n)]
        self._active: set[int] = set()

        self.requests_emitted = 0
        self.requests_admitted = 0
        self.responses_produced = 0
        self.responses_delivered = 0
        self.port_stalls = 0
        self.queue_stalls = 0
        self.credit_stalls = 0
        self.drop_responses = 0  # fault injection for audits

    # -- request path -------------------------------------------------------

    def port_free(self, txn_agent: int) -> bool:
        return self.ports[txn_agent] is None

    def emit(self, txn_agent: int, request: LockRequest, now: int) -> bool:
        """Place a request in the agent's output register; False means stall."""
        if self.ports[txn_agent] is not None:
            self.port_stalls += 1
            return False
        channel, agent, index = route(request.lock_id, self.topology)
        self.ports[txn_agent] = RoutedRequest(request, txn_agent, channel, agent, index, now)
        self.requests_emitted += 1
        return True

    def admit(self, now: int) -> list[RoutedRequest]:
        """Round-robin arbitration, one admission per channel per cycle."""
        admitted = []
        contenders: dict[int, list[int]] = {}
        for src, routed in enumerate(self.ports):
            if routed is not None:
                contenders.setdefault(routed.channel, []).append(src)
        n = self.topology.num_txn_agents
        for channel in sorted(contenders):
            if self.queue_fill[channel] >= self.topology.queue_capacity:
                self.queue_stalls += 1
                continue
            srcs = contenders[channel]
            start = self.rr_pointer[channel]
            winner = min(srcs, key=lambda s: (s - start) % n)
            self.rr_pointer[channel] = (winner + 1) % n
            routed = self.ports[winner]
            self.ports[winner] = None
            ready = now + self.topology.wire_latency
            self.queues[channel][routed.agent].append((ready, routed))
            self.queue_fill[channel] += 1
            self._active.add(channel * self.topology.agents_per_channel + routed.agent)
            self.requests_admitted += 1
            admitted.append(routed)
        return admitted

    def enqueue_direct(self, routed: RoutedRequest, ready: int) -> None:
        """Test hook: preload a channel queue, bypassing the arbiter."""
        self.queues[routed.channel][routed.agent].append((ready, routed))
        self.queue_fill[routed.channel] += 1
        self._active.add(routed.channel * self.topology.agents_per_channel + routed.agent)

    # -- lock agent side ----------------------------------------------------

    def service_agents(self, now: int) -> list[LockResponse]:
        """Ship due responses (credit permitting), then feed idle agents."""
        produced = []
        p = self.topology.agents_per_channel
        cap = self.topology.response_buffer
        latency = self.topology.wire_latency
        for g in sorted(self._active):
            agent = self.agents[g]
            while agent.pending and agent.pending[0][0] <= now:
                response = agent.pending[0][1]
                dst = response.addressee.agent
                if len(self.inflight[dst]) + len(self.buffers[dst]) >= cap:
                    agent.stall(1)
                    self.credit_stalls += 1
                    break
                agent.pending.popleft()
                self.inflight[dst].append((now + latency, response))
                self.responses_produced += 1
                produced.append(response)

            queue = self.queues[g // p][g % p]
            if queue and queue[0][0] <= now and agent.accept(queue[0][1].request, now):
                queue.popleft()
                self.queue_fill[g // p] -= 1
            if not agent.pending and not queue:
                self._active.discard(g)
        return produced

    # -- response path ------------------------------------------------------

    def deliver(self, now: int) -> list[tuple[int, LockResponse]]:
        delivered = []
        for dst, wire in enumerate(self.inflight):
            while wire and wire[0][0] <= now:
                response = wire.popleft()[1]
                if self.drop_responses:
                    self.drop_responses -= 1
                    continue
                self.buffers[dst].append(response)
                self.responses_delivered += 1
                delivered.append((dst, response))
        return delivered

    def has_response(self, txn_agent: int) -> bool:
        return bool(self.buffers[txn_agent])

    def take_response(self, txn_agent: int) -> LockResponse | None:
        buffer = self.buffers[txn_agent]
        return buffer.popleft() if buffer else None

    # -- stepping -----------------------------------------------------------

    def tick(self, now: int) -> list[tuple[int, LockResponse]]:
        """Standalone step (no transaction agents attached)."""
        self.service_agents(now)
        delivered = self.deliver(now)
        self.admit(now)
        return delivered

    def next_event(self, now: int) -> int | None:
        candidates = []
        if any(port is not None for port in self.ports):
            candidates.append(now + 1)
        p = self.topology.agents_per_channel
        for g in self._active:
            agent = self.agents[g]
            if agent.pending:
                candidates.append(max(agent.pending[0][0], now + 1))
            queue = self.queues[g // p][g % p]
            if queue:
                candidates.append(max(agent.busy_until, queue[0][0], now + 1))
        for wire in self.inflight:
            if wire:
                candidates.append(max(wire[0][0], now + 1))
        return min(candidates) if candidates else None

    @property
    def quiescent(self) -> bool:
        return (
            not self._active
            and all(port is None for port in self.ports)
            and not any(self.inflight)
            and not any(self.buffers)
        )
