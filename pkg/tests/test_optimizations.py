"""Traffic statistics, adaptive lease durations, and manager placement."""

import math
import random

from locksim.checker import Collector, check_mutual_exclusion
from locksim.kernel import Kernel, Topology, uniform_regions
from locksim.optimizations import (
    AccessStats,
    Ewma,
    LeaseController,
    PlacementRebalancer,
    ResourceClass,
    adaptive_duration,
    classify,
)
from locksim.protocols.base import NodeMux
from locksim.protocols.ldl import LDLConfig, LDLEngine

H = 5_000_000  # estimator half-life


# --------------------------------------------------------------- estimators


def test_ewma_impulse_halves_every_half_life():
    e = Ewma(H)
    e.add(0, 1.0)
    assert math.isclose(e.read(H), 0.5)
    assert math.isclose(e.read(2 * H), 0.25)


def test_ewma_steady_stream_reads_its_true_rate_and_decays_when_idle():
    e = Ewma(H)
    for t in range(0, 50_000_001, 10_000):  # 100 events per second
        e.add(t)
    r_live = e.rate_per_s(50_000_000)
    assert abs(r_live - 100.0) < 1.0
    # One idle half-life halves the estimate exactly.
    assert math.isclose(e.rate_per_s(55_000_000), r_live / 2)


def test_ewma_blend_converges_halfway_per_half_life():
    e = Ewma(H)
    e.blend(H, 4.0)
    assert math.isclose(e.read(H), 2.0)
    e.blend(2 * H, 4.0)
    assert math.isclose(e.read(2 * H), 3.0)


def make_stats(n=4, regions=2):
    inter = ((1000, 10_000), (10_000, 1000))
    topo = Topology(uniform_regions(n, regions), 1000, inter)
    k = Kernel(topo, seed=3)
    return k, AccessStats(k)


def test_region_shares_follow_the_traffic_split():
    _, stats = make_stats()
    for i in range(9):
        stats.record_access(1_000 * (i + 1), 7, 0)  # region 0
    stats.record_access(500, 7, 1)  # region 1
    shares = stats.region_shares(10_000, 7)
    assert set(shares) == {0, 1}
    assert 0.88 < shares[0] < 0.92
    assert math.isclose(sum(shares.values()), 1.0)
    assert stats.resources() == [7]
    assert stats.node_rate(10_000, 7, 0) > stats.node_rate(10_000, 7, 1)


def test_queue_estimate_adopts_first_sample_then_blends():
    _, stats = make_stats()
    stats.record_queue_at_grant(1_000, 7, 3)
    assert math.isclose(stats.queue_estimate(1_000, 7), 3.0)
    stats.record_queue_at_grant(1_000 + H, 7, 1)
    assert math.isclose(stats.queue_estimate(1_000 + H, 7), 2.0)


def test_regular_cadence_has_zero_interarrival_variability():
    _, stats = make_stats()
    for t in range(0, 100_001, 10_000):
        stats.record_access(t, 7, 0)
    assert stats.interarrival_cv(100_000, 7) < 1e-9


def test_bursty_cadence_has_high_interarrival_variability():
    _, stats = make_stats()
    t = 0
    for i in range(1500):  # three half-lives of alternating 5ms/15ms gaps
        t += 5_000 if i % 2 == 0 else 15_000
        stats.record_access(t, 7, 0)
    assert stats.interarrival_cv(t, 7) > 0.3


def test_crash_listener_feeds_the_failure_rate():
    k, stats = make_stats()
    assert stats.crash_rate_per_min(50_000) == 0.0
    k.schedule_crash(1, at_us=100_000)
    k.run(200_000)
    assert 5.0 < stats.crash_rate_per_min(200_000) < 10.0


# ------------------------------------------------------------ lease control


def test_lease_duration_matches_hand_computed_values():
    # base 200ms, no signals -> unchanged
    assert adaptive_duration(200_000, 0.0, 0.0) == 200_000
    # four waiters divide the lease by five
    assert adaptive_duration(200_000, 4.0, 0.0) == 40_000
    # 20 crashes/min multiplies by eleven, clamped at the 2s ceiling
    assert adaptive_duration(200_000, 0.0, 20.0) == 2_000_000
    # heavy contention clamps at the 20ms floor
    assert adaptive_duration(200_000, 100.0, 0.0) == 20_000


def test_lease_duration_is_monotone_and_bounded():
    rng = random.Random(0)
    grid = [0.0, 0.5, 1.0, 4.0, 25.0] + [rng.uniform(0, 50) for _ in range(40)]
    for f in (0.0, 1.0, 10.0):
        prev = None
        for w in sorted(grid):
            t = adaptive_duration(200_000, w, f)
            assert 20_000 <= t <= 2_000_000
            if prev is not None:
                assert t <= prev  # contention never lengthens a lease
            prev = t
    for w in (0.0, 2.0, 10.0):
        prev = None
        for f in sorted(grid):
            t = adaptive_duration(200_000, w, f)
            assert 20_000 <= t <= 2_000_000
            if prev is not None:
                assert t >= prev  # failures never shorten one
            prev = t


def test_controller_reads_live_estimates_and_attaches_to_an_engine():
    k, stats = make_stats()
    stats.record_queue_at_grant(1_000, 7, 4)
    ctl = LeaseController(stats)
    assert ctl.duration_us(1_000, 7) == 40_000
    assert ctl.current[7] == 40_000

    mux = NodeMux(k)
    eng = LDLEngine(k, mux, Collector(), LDLConfig())
    ctl.attach(eng)
    assert eng.lease_policy(7) == ctl.duration_us(k.now, 7)
    assert eng.max_lease_us == ctl.max_us
    assert eng.access_stats is stats


# ------------------------------------------------------------ classification


def test_classification_picks_protocols_from_traffic():
    _, stats = make_stats()
    # res 7: 200 acquires/s with three waiters at every grant -> optimistic
    for t in range(0, 10_000_001, 5_000):
        stats.record_access(t, 7, 0)
    for t in range(0, 10_000_001, 50_000):
        stats.record_queue_at_grant(t, 7, 3)
    # res 8: 5 acquires/s, same queue depth -> too cold, stays on leases
    for t in range(0, 10_000_001, 200_000):
        stats.record_access(t, 8, 0)
        stats.record_queue_at_grant(t, 8, 3)
    now = 10_000_000
    crit = frozenset({5})
    assert classify(5, now, stats, crit) is ResourceClass.QUORUM  # pinned
    assert classify(7, now, stats, crit) is ResourceClass.OPTIMISTIC
    assert classify(8, now, stats, crit) is ResourceClass.LEASE
    # deterministic: same inputs, same answer
    assert classify(7, now, stats, crit) is ResourceClass.OPTIMISTIC


def test_hot_but_uncontended_stays_on_leases():
    _, stats = make_stats()
    for t in range(0, 10_000_001, 5_000):
        stats.record_access(t, 9, 0)
        stats.record_queue_at_grant(t, 9, 0)  # never anyone waiting
    assert classify(9, 10_000_000, stats, frozenset()) is ResourceClass.LEASE


# ---------------------------------------------------------------- placement


class Cycler:
    """Acquire/hold/release loop with dumb periodic retries."""

    def __init__(self, k, eng, coll, cid, node, res, hold=5_000, think=5_000,
                 retry_us=100_000):
        self.k, self.eng, self.coll = k, eng, coll
        self.cid, self.node, self.res = cid, node, res
        self.hold, self.think, self.retry_us = hold, think, retry_us
        self.rid = 0
        self.granted = False
        self.grants = []  # (t_grant, token, acquire_latency)
        self.t_ask = 0

    def start(self, at=0):
        self.k.at(at, lambda kk: self._next())

    def _next(self):
        self.rid += 1
        self.granted = False
        self.t_ask = self.k.now
        self._submit(self.rid)

    def _submit(self, rid):
        if rid != self.rid or self.granted:
            return
        self.eng.submit_acquire(self.node, self.cid, rid, self.res)
        self.k.after(self.retry_us, lambda kk: self._submit(rid))

    def on_grant(self, now, cid, rid, res, token, validity):
        if cid != self.cid or rid != self.rid or self.granted:
            return
        self.granted = True
        self.grants.append((now, token, now - self.t_ask))
        self.coll.cs_enter(res, token, cid, now, validity)
        self.k.after(self.hold, lambda kk: self.eng.submit_release(
            self.node, self.cid, rid, res, token))
        self.k.after(self.hold + self.think, lambda kk: self._next())


def make_placement(seed=9, lease_us=200_000, skew_guard_us=50_000,
                   epoch_us=1_000_000):
    inter = ((1000, 10_000), (10_000, 1000))
    topo = Topology(uniform_regions(4, 2), 1000, inter)
    k = Kernel(topo, seed=seed)
    mux = NodeMux(k)
    coll = Collector()
    eng = LDLEngine(k, mux, coll, LDLConfig(lease_us=lease_us,
                                            skew_guard_us=skew_guard_us))
    stats = AccessStats(k)
    eng.access_stats = stats
    eng.install()
    reb = PlacementRebalancer(k, mux, eng, stats, epoch_us=epoch_us, theta=0.6)
    reb.install()
    return k, mux, coll, eng, stats, reb


def res_managed_in_region(eng, topo, region, parity=None):
    for r in range(200):
        if topo.region_of(eng.manager_of(r)) != region:
            continue
        if parity is None or r % 2 == parity:
            return r
    raise AssertionError("no such resource")


def test_manager_migrates_into_the_dominant_region():
    k, mux, coll, eng, stats, reb = make_placement()
    res = res_managed_in_region(eng, k.topology, 0)
    cyc = Cycler(k, eng, coll, cid=30, node=1, res=res)  # region 1 client
    eng.grant_sink = cyc.on_grant
    eng.release_sink = lambda *a: None
    cyc.start()
    k.run(3_000_000)

    assert reb.moves == 1
    want = [n for n in eng.managers if k.topology.region_of(n) == 1][res % 2]
    assert eng.overrides[res] == want
    tokens = [t for _, t, _ in cyc.grants]
    assert tokens == sorted(set(tokens))  # floor carried over, never reissued
    # Local management cuts the acquire round trip.
    assert cyc.grants[-1][2] < cyc.grants[0][2]
    records = coll.finish(3_000_000)
    verdict = check_mutual_exclusion(records, coll.duplicate_entries())
    assert verdict.passed, verdict.violations


def test_balanced_traffic_stays_put():
    k, mux, coll, eng, stats, reb = make_placement()
    res = res_managed_in_region(eng, k.topology, 0)
    for t in range(0, 3_000_000, 10_000):
        stats.record_access(t, res, 2)  # region 0
        stats.record_access(t, res, 1)  # region 1
    k.run(2_500_000)
    assert reb.moves == 0
    assert not reb.pending
    assert res not in eng.overrides


def test_down_target_skips_the_epoch_and_recovers_later():
    k, mux, coll, eng, stats, reb = make_placement()
    res = res_managed_in_region(eng, k.topology, 0, parity=0)  # target: node 1
    for t in range(0, 3_000_000, 10_000):
        stats.record_access(t, res, 3)  # region 1 traffic
    k.schedule_crash(1, at_us=500_000)
    k.schedule_recover(1, at_us=1_500_000)
    k.run(1_400_000)
    assert reb.skipped_down >= 1
    assert reb.moves == 0 and res not in eng.overrides
    k.run(2_500_000)  # next epoch finds the target back up
    assert reb.moves == 1 and eng.overrides[res] == 1


def test_handoff_waits_out_a_live_holder_before_adopting():
    k, mux, coll, eng, stats, reb = make_placement(
        lease_us=60_000, skew_guard_us=3_000, epoch_us=200_000)
    res = res_managed_in_region(eng, k.topology, 0)
    # A grabs the lock and never lets go; renewals keep it alive until the
    # freeze starts denying them. B waits throughout.
    a = Cycler(k, eng, coll, cid=40, node=1, res=res, hold=10_000_000)
    b = Cycler(k, eng, coll, cid=41, node=3, res=res)
    def fan(now, cid, rid, resource, token, validity):
        a.on_grant(now, cid, rid, resource, token, validity)
        b.on_grant(now, cid, rid, resource, token, validity)
    eng.grant_sink = fan
    eng.release_sink = lambda *a_: None
    a.start(0)
    b.start(1_000)
    k.run(1_000_000)

    assert reb.moves == 1
    assert a.grants and b.grants
    records = coll.finish(1_000_000)
    a_exit = next(r.t_exit for r in records if r.holder == 40)
    assert b.grants[0][0] > a_exit  # adoption waited for the lease to lapse
    assert b.grants[0][1] > a.grants[0][1]
    verdict = check_mutual_exclusion(records, coll.duplicate_entries())
    assert verdict.passed, verdict.violations
