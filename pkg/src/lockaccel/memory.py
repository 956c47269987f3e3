from __future__ import annotations

CHUNK = 64


class MemoryRangeError(ValueError):
    """Access outside the simulated address space (a configuration error)."""


class SimMemory:
    """Sparse byte-addressed memory, zero-initialised, with a fixed access latency.

    Completion of an access is ``now + latency + (chunks - 1)``: the first
    64-byte chunk pays the full latency, later chunks stream one per cycle.
    """

    def __init__(self, span: int = 1 << 60, latency: int = 36):
        if span <= 0 or latency < 0:
            raise ValueError("memory span must be positive and latency non-negative")
        self.span = span
        self.latency = latency
        self._chunks: dict[int, bytearray] = {}
        self.reads = 0
        self.writes = 0

    def _check(self, address: int, length: int) -> None:
        if length <= 0:
            raise MemoryRangeError("zero-length access")
        if address < 0 or address + length > self.span:
            raise MemoryRangeError(f"[{address:#x}, +{length}) outside memory span {self.span:#x}")

    def completion(self, address: int, length: int, now: int = 0) -> int:
        self._check(address, length)
        first = address // CHUNK
        last = (address + length - 1) // CHUNK
        return now + self.latency + (last - first)

    def read(self, address: int, length: int) -> bytes:
        self._check(address, length)
        out = bytearray()
        pos = address
        end = address + length
        while pos < end:
            base = pos - pos % CHUNK
            take = min(end, base + CHUNK) - pos
            chunk = self._chunks.get(base)
            out += chunk[pos - base : pos - base + take] if chunk else bytes(take)
            pos += take
        self.reads += 1
        return bytes(out)

    def write(self, address: int, data: bytes) -> None:
        self._check(address, len(data))
        pos = address
        view = memoryview(data)
        while view:
            base = pos - pos % CHUNK
            take = min(len(view), base + CHUNK - pos)
            chunk = self._chunks.setdefault(base, bytearray(CHUNK))
            chunk[pos - base : pos - base + take] = view[:take]
            view = view[take:]
            pos += take
        self.writes += 1

    def access(self, address: int, length: int, kind: str, now: int, data: bytes | None = None):
        """Perform one access; returns (completion cycle, bytes read or None)."""
        done = self.completion(address, length, now)
        if kind == "read":
            return done, self.read(address, length)
        if kind == "write":
            if data is None or len(data) != length:
                raise ValueError("write needs exactly `length` bytes")
            self.write(address, data)
            return done, None
        raise ValueError(f"unknown access kind {kind!r}")
