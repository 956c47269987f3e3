import pytest

from helpers import txn
from lockaccel.engine import (
    HistoryLog,
    LivelockError,
    RunMetrics,
    SimConfig,
    build,
    collect_metrics,
    drive,
    run,
    split_work,
    step,
)
from lockaccel.modes import LockMode
from lockaccel.workload import WorkloadSpec, generate

X, S, IX = LockMode.X, LockMode.S, LockMode.IX
TINY = SimConfig(num_txn_agents=1, num_channels=1, agents_per_channel=1, txns_per_agent=1)

MEM, SEND, PARSE, PER_ACCESS, CLEANUP, WIRE, LA = 36, 2, 2, 4, 1, 1, 3


def test_single_lock_txn_closed_form():
    load_done = MEM + 1  # one 64-byte descriptor chunk
    granted = load_done + WIRE + LA  # admitted the cycle it is emitted
    parsed = granted + WIRE + PARSE
    committed = parsed + MEM + PER_ACCESS * 1
    release_sent = committed + 1  # release sender runs before the committer
    released = release_sent + WIRE + LA
    done = released + WIRE + PARSE + CLEANUP
    metrics, _ = run(TINY, [txn(1, (1001, X))])
    assert done == 93
    assert metrics.total_cycles == done and metrics.committed == 1


def test_three_locks_one_lock_agent_closed_form():
    # Gets leave every SEND cycles but the agent is busy LA cycles per request
    load_done = MEM + 1
    emits = [load_done + SEND * k for k in range(3)]
    latch = []
    for e in emits:
        latch.append(max(e + WIRE, latch[-1] + LA if latch else 0))
    delivered = [t + LA + WIRE for t in latch]
    parsed = []
    for d in delivered:
        parsed.append(max(d, parsed[-1] if parsed else 0) + PARSE)
    committed = parsed[-1] + MEM + PER_ACCESS * 3
    rel = [committed + 1 + SEND * k for k in range(3)]
    rlatch = []
    for e in rel:
        rlatch.append(max(e + WIRE, rlatch[-1] + LA if rlatch else 0))
    rparsed = []
    for d in (t + LA + WIRE for t in rlatch):
        rparsed.append(max(d, rparsed[-1] if rparsed else 0) + PARSE)
    done = rparsed[-1] + CLEANUP
    metrics, _ = run(TINY, [txn(1, (1001, X), (1002, S), (1003, X))])
    assert metrics.total_cycles == done == 113


def test_intent_only_txn_skips_memory():
    metrics, history = run(TINY, [txn(1, (1001, IX))])
    assert metrics.total_cycles == 53
    assert history.ops == [] and history.commits == [(44, 0, 1)]


def _small(seed, agents=2, per=6):
    spec = WorkloadSpec(warehouses=1, agents=agents, txns_per_agent=per, scan_min=5, scan_max=10, seed=seed)
    cfg = SimConfig(num_txn_agents=agents, num_channels=2, agents_per_channel=2, txn_slots=4,
                    timeout=600, txns_per_agent=per, seed=seed, table_size=1 << 8)
    return cfg, generate(spec)


def _naive(cfg, work):
    sim = build(cfg, work)
    now = 0
    while not (all(t.finished for t in sim.txn_agents) and sim.interconnect.quiescent):
        step(sim, now, visit_all=True)
        now += 1
        assert now < 10**6
    return collect_metrics(sim), sim.history


@pytest.mark.parametrize("seed", range(4))
def test_selective_visiting_matches_visit_all(seed):
    cfg, work = _small(seed)
    fast_metrics, fast_history = run(cfg, work)
    slow_metrics, slow_history = _naive(cfg, work)
    assert fast_history.digest() == slow_history.digest()
    assert fast_metrics.row() == slow_metrics.row()


def test_same_seed_same_digest():
    cfg, work = _small(7)
    assert run(cfg, work)[1].digest() == run(cfg, generate(WorkloadSpec(
        warehouses=1, agents=2, txns_per_agent=6, scan_min=5, scan_max=10, seed=7)))[1].digest()


def test_history_round_trip(tmp_path):
    cfg, work = _small(3)
    _, history = run(cfg, work)
    path = tmp_path / "h.jsonl"
    history.dump(path)
    again = HistoryLog.load(path)
    assert again.digest() == history.digest()
    assert again.ops == history.ops


def test_metrics_formulas():
    m = RunMetrics(total_cycles=2_000_000, committed=90, aborted=10, freq_mhz=200.0,
                   num_txn_agents=4, responses={"Granted": 500, "Released": 500, "Waiting": 7})
    assert m.seconds == pytest.approx(0.01)
    assert m.txn_per_s == pytest.approx(10_000)
    assert m.txn_per_s_per_agent == pytest.approx(2_500)
    assert m.committed_per_s == pytest.approx(9_000)
    assert m.lock_per_s == pytest.approx(100_000)
    assert m.abort_rate == pytest.approx(0.1)


def test_split_work_round_robin():
    work = [txn(i, (i, X)) for i in range(1, 8)]
    parts = split_work(work, 3)
    assert [[t.txn_id for t in p] for p in parts] == [[1, 4, 7], [2, 5], [3, 6]]


def test_dropped_response_trips_livelock_guard():
    cfg, work = _small(1)
    sim = build(cfg, work)
    sim.interconnect.drop_responses = 1
    with pytest.raises(LivelockError):
        drive(sim)


def test_max_cycles_pauses_run():
    cfg, work = _small(2)
    sim = build(cfg, work)
    stop = drive(sim, max_cycles=100)
    assert stop <= 100 and not all(t.finished for t in sim.txn_agents)
    drive(sim)
    assert all(t.finished for t in sim.txn_agents)


@pytest.mark.parametrize(
    "kw",
    [{"table_size": 3}, {"txn_slots": 0}, {"num_channels": 3}, {"agents_per_channel": 8},
     {"freq_mhz": 0}, {"timeout": 0}],
)
def test_bad_config_rejected(kw):
    with pytest.raises(ValueError):
        SimConfig(**kw)


def test_label_and_tables():
    cfg = SimConfig(num_channels=4, agents_per_channel=2, num_txn_agents=8, txn_slots=16)
    assert cfg.label == "4C2L-8A16T" and cfg.total_tables == 8


def test_workload_agent_count_must_match():
    with pytest.raises(ValueError):
        build(SimConfig(num_txn_agents=2), [[txn(1, (1, X))]])
