"""Hierarchical lock modes, their 3-bit encodings and the request/response messages."""

from __future__ import annotations

import enum
from dataclasses import dataclass


class LockMode(enum.Enum):
    NL = "NL"
    IS = "IS"
    IX = "IX"
    S = "S"
    SIX = "SIX"
    X = "X"

    def __str__(self) -> str:
        return self.value

    @property
    def accesses_data(self) -> bool:
        """S and SIX read the row at commit, X writes it."""
        return self in (LockMode.S, LockMode.SIX, LockMode.X)

    @property
    def writes(self) -> bool:
        return self is LockMode.X


MODES = tuple(LockMode)

# bit order (S, I, X), S is the most significant bit
_ENCODING = {
    LockMode.NL: 0b000,
    LockMode.IS: 0b110,
    LockMode.IX: 0b011,
    LockMode.S: 0b100,
    LockMode.SIX: 0b111,
    LockMode.X: 0b001,
}
_DECODING = {bits: mode for mode, bits in _ENCODING.items()}

# granted modes each requested mode can coexist with
_COMPATIBLE = {
    LockMode.NL: frozenset(MODES),
    LockMode.IS: frozenset({LockMode.NL, LockMode.IS, LockMode.IX, LockMode.S, LockMode.SIX}),
    LockMode.IX: frozenset({LockMode.NL, LockMode.IS, LockMode.IX}),
    LockMode.S: frozenset({LockMode.NL, LockMode.IS, LockMode.S}),
    LockMode.SIX: frozenset({LockMode.NL, LockMode.IS}),
    LockMode.X: frozenset({LockMode.NL}),
}


class InvalidEncoding(ValueError):
    pass


def compatible(requested: LockMode, granted: LockMode) -> bool:
    return granted in _COMPATIBLE[requested]


def conflict_set(mode: LockMode) -> frozenset[LockMode]:
    return frozenset(MODES) - _COMPATIBLE[mode]


def encode(mode: LockMode) -> int:
    return _ENCODING[mode]


def decode(bits: int) -> LockMode:
    try:
        return _DECODING[bits]
    except KeyError:
        raise InvalidEncoding(f"{bits:03b} is not a lock mode encoding") from None


def _build_join_table() -> dict[tuple[LockMode, LockMode], LockMode]:
    table = {}
    for a in MODES:
        for b in MODES:
            if not compatible(a, b):
                continue
            need = conflict_set(a) | conflict_set(b)
            candidates = [m for m in MODES if conflict_set(m) >= need]
            # minimal by inclusion; the lattice makes it unique
            best = min(candidates, key=lambda m: len(conflict_set(m)))
            table[a, b] = best
    return table


_JOIN = _build_join_table()


def group_join(a: LockMode, b: LockMode) -> LockMode:
    """Mode summarising two compatible co-holders of one lock entry.

    This is the least mode whose conflicts cover both holders' conflicts.
    It is deliberately not the bitwise OR of the encodings: OR-ing S (100)
    with IS (110) yields IS, which would then admit an IX request that
    the S holder must block.
    """
    try:
        return _JOIN[a, b]
    except KeyError:
        raise ValueError(f"{a} and {b} cannot be held together") from None


class RequestKind(enum.Enum):
    GET = "Get"
    RELEASE = "Release"


class ResponseKind(enum.Enum):
    GRANTED = "Granted"
    WAITING = "Waiting"
    ABORTED = "Aborted"
    RELEASED = "Released"


@dataclass(frozen=True)
class Requester:
    agent: int
    slot: int
    generation: int = 0


@dataclass(frozen=True)
class LockRequest:
    requester: Requester
    lock_id: int
    mode: LockMode
    kind: RequestKind = RequestKind.GET
    timeout_release: bool = False

    def __post_init__(self):
        if self.kind is RequestKind.GET and self.mode is LockMode.NL:
            raise ValueError("Get requests must not ask for NL")
        if self.timeout_release and self.kind is not RequestKind.RELEASE:
            raise ValueError("timeout_release only applies to Release requests")
        if not 0 <= self.lock_id < 1 << 64:
            raise ValueError(f"lock id {self.lock_id:#x} does not fit in 64 bits")


@dataclass(frozen=True)
class LockResponse:
    addressee: Requester
    lock_id: int
    kind: ResponseKind


def get(agent: int, slot: int, lock_id: int, mode: LockMode, generation: int = 0) -> LockRequest:
    return LockRequest(Requester(agent, slot, generation), lock_id, mode, RequestKind.GET)


def release(
    agent: int, slot: int, lock_id: int, mode: LockMode, timeout: bool = False, generation: int = 0
) -> LockRequest:
    return LockRequest(Requester(agent, slot, generation), lock_id, mode, RequestKind.RELEASE, timeout)
