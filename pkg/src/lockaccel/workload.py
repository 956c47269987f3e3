"""TPC-C-like lock footprints and the line-delimited trace format.

Only the locking footprint of each transaction matters here. A lock id packs
the table, warehouse, district and row into 48 bits:

    bits 44..47  table tag
    bits 36..43  warehouse
    bits 32..35  district
    bits  0..31  row key

Intent locks (IS/IX) sit on the warehouse and district granules; row locks
(S/X) sit on rows, and each row owns one 64-byte record at ``lock_id * 64``.

Trace file grammar (UTF-8, one JSON document per line)::

    line 1   {"version": 1, "spec": {...generator parameters...}}
    line k   {"txn": <int>, "locks": [[<lock hex>, <mode>, <addr hex>?, <len>?], ...]}

Address and length are present exactly for S, SIX and X locks.
"""

from __future__ import annotations

import bisect
import itertools
import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .modes import LockMode
from .txn_agent import MAX_LOCKS_PER_TXN, LockSpec, TxnDescriptor

TRACE_VERSION = 1
ROW_BYTES = 64

WAREHOUSE, DISTRICT, WAREHOUSE_ROW, DISTRICT_ROW, CUSTOMER, ITEM, STOCK, ORDER, NEW_ORDER, HISTORY, ORDER_LINE = range(1, 12)

DISTRICTS = 10
CUSTOMERS = 3000
ITEMS = 100_000


def lock_id(table: int, warehouse: int = 0, district: int = 0, row: int = 0) -> int:
    return (table << 44) | (warehouse << 36) | (district << 32) | (row & 0xFFFF_FFFF)


def unpack(lid: int) -> tuple[int, int, int, int]:
    return lid >> 44, (lid >> 36) & 0xFF, (lid >> 32) & 0xF, lid & 0xFFFF_FFFF


def row_address(lid: int) -> int:
    return lid * ROW_BYTES


@dataclass(frozen=True)
class WorkloadSpec:
    warehouses: int = 64
    txns_per_agent: int = 400
    agents: int = 4
    new_order: float = 0.45
    payment: float = 0.43
    read_only: float = 0.12
    skew: float = 0.8
    items_min: int = 5
    items_max: int = 15
    scan_min: int = 100
    scan_max: int = 400
    remote_fraction: float = 0.01
    max_locks: int = MAX_LOCKS_PER_TXN
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.warehouses <= 255:
            raise ValueError("warehouses must be in [1, 255]")
        if self.txns_per_agent < 0 or self.agents < 1:
            raise ValueError("txns_per_agent must be >= 0 and agents >= 1")
        weights = (self.new_order, self.payment, self.read_only)
        if min(weights) < 0 or abs(sum(weights) - 1.0) > 1e-9:
            raise ValueError("mix weights must be non-negative and sum to 1")
        if self.skew < 0:
            raise ValueError("skew must be non-negative")
        if not 1 <= self.items_min <= self.items_max <= 16:
            raise ValueError("item count range must lie in [1, 16]")  # 4-bit order-line index
        if not 1 <= self.scan_min <= self.scan_max:
            raise ValueError("bad scan range")
        if not 1 <= self.max_locks <= MAX_LOCKS_PER_TXN:
            raise ValueError(f"max_locks must be in [1, {MAX_LOCKS_PER_TXN}]")

    def replace(self, **changes) -> "WorkloadSpec":
        data = asdict(self)
        data.update(changes)
        return WorkloadSpec(**data)


class _Zipf:
    """Rank sampler with P(rank k) proportional to k ** -s; s = 0 is uniform."""

    def __init__(self, n: int, s: float):
        self.n = n
        self.uniform = s == 0
        if not self.uniform:
            self.cum = list(itertools.accumulate((k ** -s for k in range(1, n + 1))))

    def sample(self, rng: random.Random) -> int:
        if self.uniform:
            return rng.randrange(self.n)
        x = rng.random() * self.cum[-1]
        return min(bisect.bisect_left(self.cum, x), self.n - 1)

    def distinct(self, rng: random.Random, k: int) -> list[int]:
        picked: list[int] = []
        seen: set[int] = set()
        while len(picked) < k:
            v = self.sample(rng)
            if v not in seen:
                seen.add(v)
                picked.append(v)
        return picked


class _Builder:
    def __init__(self):
        self.locks: list[LockSpec] = []
        self.ids: set[int] = set()

    def add(self, lid: int, mode: LockMode) -> None:
        if lid in self.ids:
            return
        self.ids.add(lid)
        if mode.accesses_data:
            self.locks.append(LockSpec(lid, mode, row_address(lid), ROW_BYTES))
        else:
            self.locks.append(LockSpec(lid, mode))


class Generator:
    def __init__(self, spec: WorkloadSpec):
        self.spec = spec
        self.rng = random.Random(spec.seed)
        self.items = _Zipf(ITEMS, spec.skew)
        self.customers = _Zipf(CUSTOMERS, spec.skew)
        self.recent_orders: dict[tuple[int, int], tuple[int, int]] = {}

    def _other_warehouse(self, w: int) -> int:
        if self.spec.warehouses == 1:
            return w
        o = self.rng.randrange(self.spec.warehouses - 1)
        return o if o < w else o + 1

    def new_order(self, txn_id: int) -> list[LockSpec]:
        rng = self.rng
        w, d = rng.randrange(self.spec.warehouses), rng.randrange(DISTRICTS)
        b = _Builder()
        b.add(lock_id(WAREHOUSE, w), LockMode.IX)
        b.add(lock_id(DISTRICT, w, d), LockMode.IX)
        b.add(lock_id(WAREHOUSE_ROW, w), LockMode.S)
        b.add(lock_id(DISTRICT_ROW, w, d), LockMode.X)
        b.add(lock_id(CUSTOMER, w, d, self.customers.sample(rng)), LockMode.S)
        k = rng.randint(self.spec.items_min, self.spec.items_max)
        rows = []
        for item in self.items.distinct(rng, k):
            supply = w if rng.random() >= self.spec.remote_fraction else self._other_warehouse(w)
            if supply != w:
                b.add(lock_id(WAREHOUSE, supply), LockMode.IX)
            rows.append((item, supply))
        # rows in key order, the usual deadlock-avoidance habit for this transaction
        rows.sort(key=lambda r: (r[1], r[0]))
        for item, supply in rows:
            b.add(lock_id(ITEM, 0, 0, item), LockMode.S)
            b.add(lock_id(STOCK, supply, 0, item), LockMode.X)
        b.add(lock_id(ORDER, w, d, txn_id), LockMode.X)
        b.add(lock_id(NEW_ORDER, w, d, txn_id), LockMode.X)
        for line in range(len(rows)):
            b.add(lock_id(ORDER_LINE, w, d, (txn_id << 4) | line), LockMode.X)
        self.recent_orders[w, d] = (txn_id, len(rows))
        return b.locks

    def payment(self, txn_id: int) -> list[LockSpec]:
        rng = self.rng
        w, d = rng.randrange(self.spec.warehouses), rng.randrange(DISTRICTS)
        cw, cd = w, d
        if rng.random() < 0.15:
            cw, cd = self._other_warehouse(w), rng.randrange(DISTRICTS)
        b = _Builder()
        b.add(lock_id(WAREHOUSE, w), LockMode.IX)
        b.add(lock_id(DISTRICT, w, d), LockMode.IX)
        if cw != w:
            b.add(lock_id(WAREHOUSE, cw), LockMode.IX)
        b.add(lock_id(DISTRICT, cw, cd), LockMode.IX)
        b.add(lock_id(WAREHOUSE_ROW, w), LockMode.X)
        b.add(lock_id(DISTRICT_ROW, w, d), LockMode.X)
        b.add(lock_id(CUSTOMER, cw, cd, self.customers.sample(rng)), LockMode.X)
        b.add(lock_id(HISTORY, w, d, txn_id), LockMode.X)
        return b.locks

    def read_only(self, txn_id: int) -> list[LockSpec]:
        rng = self.rng
        w, d = rng.randrange(self.spec.warehouses), rng.randrange(DISTRICTS)
        b = _Builder()
        b.add(lock_id(WAREHOUSE, w), LockMode.IS)
        b.add(lock_id(DISTRICT, w, d), LockMode.IS)
        if rng.random() < 0.5:
            # order-status
            b.add(lock_id(CUSTOMER, w, d, self.customers.sample(rng)), LockMode.S)
            recent = self.recent_orders.get((w, d))
            if recent is not None:
                order, lines = recent
                b.add(lock_id(ORDER, w, d, order), LockMode.S)
                for line in range(lines):
                    b.add(lock_id(ORDER_LINE, w, d, (order << 4) | line), LockMode.S)
        else:
            # stock-level
            b.add(lock_id(DISTRICT_ROW, w, d), LockMode.S)
            n = rng.randint(self.spec.scan_min, self.spec.scan_max)
            for item in sorted(self.items.distinct(rng, n)):
                b.add(lock_id(STOCK, w, 0, item), LockMode.S)
        return b.locks

    def txn(self, txn_id: int) -> TxnDescriptor:
        spec = self.spec
        kind = self.rng.choices(
            (self.new_order, self.payment, self.read_only),
            weights=(spec.new_order, spec.payment, spec.read_only),
        )[0]
        locks = kind(txn_id)[: spec.max_locks]
        return TxnDescriptor(txn_id, tuple(locks))


def generate(spec: WorkloadSpec) -> list[TxnDescriptor]:
    """Deterministic for a given spec (the seed is part of it)."""
    gen = Generator(spec)
    return [gen.txn(i + 1) for i in range(spec.txns_per_agent * spec.agents)]


# -- trace files ---------------------------------------------------------------


def _lock_record(spec: LockSpec) -> list:
    rec = [f"{spec.lock_id:#x}", spec.mode.value]
    if spec.data_addr is not None:
        rec += [f"{spec.data_addr:#x}", spec.data_len]
    return rec


def trace_lines(txns, spec: WorkloadSpec | None = None):
    header = {"version": TRACE_VERSION, "spec": asdict(spec) if spec else {}}
    yield json.dumps(header, sort_keys=True)
    for txn in txns:
        yield json.dumps({"txn": txn.txn_id, "locks": [_lock_record(s) for s in txn.locks]})


def write_trace(path, txns, spec: WorkloadSpec | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in trace_lines(txns, spec):
            fh.write(line + "\n")


@dataclass(frozen=True)
class Violation:
    line: int
    code: str
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.code}: {self.message}"


class TraceError(ValueError):
    def __init__(self, violations: list[Violation]):
        self.violations = violations
        head = "; ".join(str(v) for v in violations[:5])
        more = f" (+{len(violations) - 5} more)" if len(violations) > 5 else ""
        super().__init__(head + more)


@dataclass
class Trace:
    header: dict = field(default_factory=dict)
    txns: list[TxnDescriptor] = field(default_factory=list)


def _parse_txn(n: int, rec, problems: list[Violation]) -> TxnDescriptor | None:
    if not isinstance(rec, dict) or not isinstance(rec.get("txn"), int) or not isinstance(rec.get("locks"), list):
        problems.append(Violation(n, "malformed", "expected {\"txn\": int, \"locks\": [...]}"))
        return None
    locks = rec["locks"]
    before = len(problems)
    if len(locks) > MAX_LOCKS_PER_TXN:
        problems.append(
            Violation(n, "too-many-locks", f"{len(locks)} locks; max size for one txn is {MAX_LOCKS_PER_TXN}")
        )
    if not locks:
        problems.append(Violation(n, "empty-txn", "a transaction needs at least one lock"))
    specs = []
    seen = set()
    for k, item in enumerate(locks):
        where = f"lock {k}"
        if not isinstance(item, list) or len(item) not in (2, 4):
            problems.append(Violation(n, "malformed", f"{where}: expected [id, mode] or [id, mode, addr, len]"))
            continue
        try:
            lid = int(item[0], 16)
        except (TypeError, ValueError):
            problems.append(Violation(n, "malformed", f"{where}: lock id must be a hex string"))
            continue
        if not 0 <= lid < 1 << 64:
            problems.append(Violation(n, "malformed", f"{where}: lock id exceeds 64 bits"))
            continue
        try:
            mode = LockMode(item[1])
        except ValueError:
            problems.append(Violation(n, "illegal-mode", f"{where}: unknown mode {item[1]!r}"))
            continue
        if mode is LockMode.NL:
            problems.append(Violation(n, "nl-get", f"{where}: NL must not be requested"))
            continue
        if lid in seen:
            problems.append(Violation(n, "duplicate-lock", f"{where}: lock {item[0]} requested twice"))
            continue
        seen.add(lid)
        if mode.accesses_data and len(item) != 4:
            problems.append(Violation(n, "missing-data", f"{where}: {mode} lock needs data address and length"))
            continue
        if not mode.accesses_data and len(item) != 2:
            problems.append(Violation(n, "unexpected-data", f"{where}: {mode} lock carries no data access"))
            continue
        if len(item) == 4:
            try:
                addr, length = int(item[2], 16), int(item[3])
            except (TypeError, ValueError):
                problems.append(Violation(n, "malformed", f"{where}: bad data address/length"))
                continue
            if addr < 0 or length <= 0:
                problems.append(Violation(n, "malformed", f"{where}: bad data address/length"))
                continue
            specs.append(LockSpec(lid, mode, addr, length))
        else:
            specs.append(LockSpec(lid, mode))
    if len(problems) > before:
        return None
    return TxnDescriptor(rec["txn"], tuple(specs))


def parse_trace(lines) -> tuple[Trace, list[Violation]]:
    trace = Trace()
    problems: list[Violation] = []
    ids = set()
    header_seen = False
    for n, raw in enumerate(lines, 1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            problems.append(Violation(n, "malformed", f"not JSON: {exc.msg}"))
            continue
        if not header_seen:
            header_seen = True
            if not isinstance(rec, dict) or rec.get("version") != TRACE_VERSION:
                problems.append(Violation(n, "bad-header", f"first line must be a version {TRACE_VERSION} header"))
            else:
                trace.header = rec
            continue
        txn = _parse_txn(n, rec, problems)
        if txn is None:
            continue
        if txn.txn_id in ids:
            problems.append(Violation(n, "duplicate-txn", f"txn id {txn.txn_id} repeats"))
            continue
        ids.add(txn.txn_id)
        trace.txns.append(txn)
    if not header_seen:
        problems.append(Violation(1, "bad-header", "empty trace"))
    return trace, problems


def load_and_validate(path) -> list[TxnDescriptor]:
    """Descriptors of a trace file; raises ``TraceError`` listing every violation."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    trace, problems = parse_trace(text)
    if problems:
        raise TraceError(problems)
    return trace.txns
