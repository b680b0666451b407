"""Runtime optimizations: traffic stats, adaptive leases, manager placement.

Three cooperating pieces, each usable on its own:

* ``AccessStats`` keeps half-life EWMAs of per-resource access rates (total,
  per region, per node), queue length observed at grant time, interarrival
  variability, and a global crash rate. All estimators decay with a
  time-correct exponent, so reads between events see aged values.
* ``LeaseController`` turns those estimates into a per-resource lease length:
  contention shortens leases (faster turnover), observed failures lengthen
  them (fewer renewals to lose), always clamped to [min, max].
* ``PlacementRebalancer`` periodically re-homes a resource's lease manager
  into the region generating most of its traffic: freeze new grants, let the
  active lease drain or lapse, carry the token counter over durably, then
  resume at the new manager. Waiters queued at the old manager simply retry.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .core import advance_token, peek_token
from .protocols.base import NodeMux


class Ewma:
    """Exponentially weighted estimate over simulated time.

    ``add`` accumulates impulses (event counting: the decayed sum of events,
    divided by half_life/ln2, estimates the event rate). ``blend`` folds in a
    sampled value, shrinking the old estimate toward the sample by the time
    elapsed. ``read`` applies the decay since the last touch, so an idle
    stream fades toward zero instead of holding its last value forever.
    """

    __slots__ = ("half_life_us", "value", "t_last")

    LN2 = 0.6931471805599453

    def __init__(self, half_life_us: int, t0: int = 0) -> None:
        self.half_life_us = half_life_us
        self.value = 0.0
        self.t_last = t0

    def _factor(self, dt: int) -> float:
        return 0.5 ** (dt / self.half_life_us)

    def add(self, now: int, amount: float = 1.0) -> None:
        if now > self.t_last:
            self.value *= self._factor(now - self.t_last)
            self.t_last = now
        self.value += amount

    def blend(self, now: int, sample: float) -> None:
        w = self._factor(max(0, now - self.t_last))
        self.value = sample + (self.value - sample) * w
        self.t_last = max(self.t_last, now)

    def read(self, now: int) -> float:
        return self.value * self._factor(max(0, now - self.t_last))

    def rate_per_s(self, now: int) -> float:
        return self.read(now) * self.LN2 * 1_000_000.0 / self.half_life_us


class AccessStats:
    """Per-resource traffic estimators plus a global crash-rate estimator."""

    def __init__(self, kernel, half_life_us: int = 5_000_000) -> None:
        self.kernel = kernel
        self.half_life_us = half_life_us
        self._total: dict[int, Ewma] = {}
        self._by_region: dict[int, dict[int, Ewma]] = {}
        self._by_node: dict[int, dict[int, Ewma]] = {}
        self._queue: dict[int, Ewma] = {}
        self._gap: dict[int, tuple[Ewma, Ewma]] = {}
        self._last_access: dict[int, int] = {}
        self._crashes = Ewma(half_life_us)
        kernel.add_crash_listener(self._on_crash)

    def _on_crash(self, node: int) -> None:
        self._crashes.add(self.kernel.now)

    # -- feeds ---------------------------------------------------------------

    def record_access(self, now: int, resource: int, node: int) -> None:
        h = self.half_life_us
        self._total.setdefault(resource, Ewma(h)).add(now)
        region = self.kernel.topology.region_of(node)
        self._by_region.setdefault(resource, {}).setdefault(region, Ewma(h)).add(now)
        self._by_node.setdefault(resource, {}).setdefault(node, Ewma(h)).add(now)
        prev = self._last_access.get(resource)
        if prev is not None and now > prev:
            gap = float(now - prev)
            pair = self._gap.get(resource)
            if pair is None:
                # Seed on the first gap: blending against the zero initial
                # value would fake huge variance for many half-lives.
                mean, sq = Ewma(h, now), Ewma(h, now)
                mean.value = gap
                sq.value = gap * gap
                self._gap[resource] = (mean, sq)
            else:
                mean, sq = pair
                mean.blend(now, gap)
                sq.blend(now, gap * gap)
        self._last_access[resource] = now

    def record_queue_at_grant(self, now: int, resource: int, queued: int) -> None:
        e = self._queue.get(resource)
        if e is None:
            e = Ewma(self.half_life_us, now)
            e.value = float(queued)
            self._queue[resource] = e
        else:
            e.blend(now, float(queued))

    # -- reads ---------------------------------------------------------------

    def resources(self):
        return list(self._total.keys())

    def access_rate(self, now: int, resource: int) -> float:
        e = self._total.get(resource)
        return e.rate_per_s(now) if e else 0.0

    def region_shares(self, now: int, resource: int) -> dict[int, float]:
        per = self._by_region.get(resource)
        if not per:
            return {}
        rates = {region: e.rate_per_s(now) for region, e in per.items()}
        total = sum(rates.values())
        if total <= 0.0:
            return {}
        return {region: r / total for region, r in rates.items()}

    def node_rate(self, now: int, resource: int, node: int) -> float:
        e = self._by_node.get(resource, {}).get(node)
        return e.rate_per_s(now) if e else 0.0

    def queue_estimate(self, now: int, resource: int) -> float:
        e = self._queue.get(resource)
        return e.read(now) if e else 0.0

    def crash_rate_per_min(self, now: int) -> float:
        return self._crashes.rate_per_s(now) * 60.0

    def interarrival_cv(self, now: int, resource: int) -> float:
        pair = self._gap.get(resource)
        if pair is None:
            return 0.0
        mean = pair[0].read(now)
        if mean <= 0.0:
            return 0.0
        var = max(0.0, pair[1].read(now) - mean * mean)
        return var ** 0.5 / mean


def adaptive_duration(base_us: int, queue_estimate: float, crash_rate_per_min: float,
                      k_contention: float = 1.0, k_failure: float = 0.5,
                      min_us: int = 20_000, max_us: int = 2_000_000) -> int:
    """Lease length from contention and failure estimates.

    Monotone non-increasing in the queue estimate, non-decreasing in the
    crash rate, and always inside [min_us, max_us].
    """
    raw = base_us * (1.0 + k_failure * crash_rate_per_min) / (1.0 + k_contention * queue_estimate)
    return int(min(float(max_us), max(float(min_us), raw)))


@dataclass
class LeaseController:
    stats: AccessStats
    base_us: int = 200_000
    min_us: int = 20_000
    max_us: int = 2_000_000
    k_contention: float = 1.0
    k_failure: float = 0.5
    current: dict[int, int] = field(default_factory=dict)

    def duration_us(self, now: int, resource: int) -> int:
        t = adaptive_duration(
            self.base_us,
            self.stats.queue_estimate(now, resource),
            self.stats.crash_rate_per_min(now),
            self.k_contention, self.k_failure, self.min_us, self.max_us,
        )
        self.current[resource] = t
        return t

    def attach(self, engine) -> None:
        """Drive an installed lease engine's grant durations from this
        controller; recovery grace widens to the controller maximum."""
        engine.lease_policy = lambda resource: self.duration_us(engine.kernel.now, resource)
        engine.max_lease_us = max(engine.max_lease_us, self.max_us)
        engine.access_stats = self.stats


class ResourceClass(enum.Enum):
    LEASE = "lease"
    QUORUM = "quorum"
    OPTIMISTIC = "optimistic"


def classify(resource: int, now: int, stats: AccessStats, critical: frozenset,
             hot_rate_per_s: float = 100.0, hot_queue: float = 1.0) -> ResourceClass:
    """Pick a per-resource protocol from traffic estimates.

    Resources named critical always go through the replicated protocol; hot
    *and* contended ones switch to versioned optimistic commits; everything
    else stays on adaptive leases.
    """
    if resource in critical:
        return ResourceClass.QUORUM
    if (stats.access_rate(now, resource) >= hot_rate_per_s
            and stats.queue_estimate(now, resource) >= hot_queue):
        return ResourceClass.OPTIMISTIC
    return ResourceClass.LEASE


class PlacementRebalancer:
    """Migrates lease management toward the traffic, one epoch at a time.

    Every epoch, any resource whose top region carries at least ``theta`` of
    its access rate and whose manager sits elsewhere is re-homed onto a node
    of that region: the old manager freezes the resource (no new grants, no
    renewals), the active lease drains or lapses, then a single handoff
    message carries the durable token floor to the new manager, which adopts
    the resource and resumes granting. A down endpoint skips the move for
    this epoch; a handoff that does not complete within the epoch is
    abandoned and retried later.
    """

    CHANNEL = "place"

    def __init__(self, kernel, mux: NodeMux, engine, stats: AccessStats,
                 epoch_us: int = 10_000_000, theta: float = 0.6,
                 home_node: int = 0) -> None:
        self.kernel = kernel
        self.mux = mux
        self.engine = engine
        self.stats = stats
        self.epoch_us = epoch_us
        self.theta = theta
        self.home_node = home_node
        self.pending: dict[int, dict] = {}
        self.moves = 0
        self.skipped_down = 0

    def install(self) -> None:
        for node in range(self.kernel.topology.num_nodes):
            self.mux.register(node, self.CHANNEL,
                              self._make_on_message(node),
                              self._make_on_timer(node))
        self.kernel.add_crash_listener(self._on_crash)
        self.kernel.add_recover_listener(self._on_recover)
        self.mux.set_timer(self.home_node, self.epoch_us, self.CHANNEL,
                           ("epoch", self.kernel.crash_count[self.home_node]))

    def target_in(self, region: int, resource: int) -> int | None:
        topo = self.kernel.topology
        candidates = [n for n in self.engine.managers if topo.region_of(n) == region]
        if not candidates:
            return None
        return candidates[resource % len(candidates)]

    # -- epoch decisions (at the placement home node) --------------------------

    def _epoch_tick(self, now: int) -> None:
        for resource, p in list(self.pending.items()):
            if self.engine.overrides.get(resource) == p["target"]:
                del self.pending[resource]
            elif now >= p["deadline"]:
                # Handoff never completed (lost message or crashed endpoint):
                # lift the freeze and let a later epoch try again.
                self.engine.frozen.discard(resource)
                del self.pending[resource]
        topo = self.kernel.topology
        for resource in self.stats.resources():
            if resource in self.pending:
                continue
            shares = self.stats.region_shares(now, resource)
            if not shares:
                continue
            top_region, share = max(shares.items(), key=lambda kv: (kv[1], -kv[0]))
            if share < self.theta:
                continue
            current = self.engine.manager_of(resource)
            if topo.region_of(current) == top_region:
                continue
            target = self.target_in(top_region, resource)
            if target is None:
                continue
            if not self.kernel.up[target] or not self.kernel.up[current]:
                self.skipped_down += 1
                continue
            self.pending[resource] = {
                "old": current, "target": target,
                "deadline": now + self.epoch_us,
            }
            self.mux.send(self.home_node, current, self.CHANNEL,
                          ("freeze", resource, target))

    # -- handoff (old manager, then new manager) ------------------------------

    def _handle_freeze(self, now: int, node: int, msg) -> None:
        _, resource, target = msg
        self.engine.frozen.add(resource)
        if not self._try_handoff(node, resource, target):
            self._arm_drain(node, resource, target)

    def _arm_drain(self, node: int, resource: int, target: int) -> None:
        delay = max(1, self.engine.max_lease_us // 4)
        self.mux.set_timer(node, delay, self.CHANNEL,
                           ("drain", resource, target, self.kernel.crash_count[node]))

    def _try_handoff(self, node: int, resource: int, target: int) -> bool:
        if resource not in self.engine.frozen:
            return True  # abandoned meanwhile
        e = self.engine.table.get(resource)
        if e is not None and e["holder"] is not None:
            if self.engine._lease_live(node, e):
                return False
            e["holder"] = None
        floor = peek_token(self.kernel.durable(node), resource)
        self.mux.send(node, target, self.CHANNEL, ("adopt", resource, floor))
        return True

    def _handle_adopt(self, now: int, node: int, msg) -> None:
        _, resource, floor = msg
        advance_token(self.kernel.durable(node), resource, floor)
        self.engine.overrides[resource] = node
        self.engine.frozen.discard(resource)
        # The old manager's record and queue die with the move; displaced
        # waiters re-acquire via their normal retries and reach this node.
        self.engine.table.pop(resource, None)
        self.engine.queues.pop(resource, None)
        self.moves += 1

    # -- wiring ----------------------------------------------------------------

    def _make_on_message(self, node: int):
        def on_message(now: int, src: int, msg) -> None:
            kind = msg[0]
            if kind == "freeze":
                self._handle_freeze(now, node, msg)
            elif kind == "adopt":
                self._handle_adopt(now, node, msg)
        return on_message

    def _make_on_timer(self, node: int):
        def on_timer(now: int, tag) -> None:
            kind = tag[0]
            if kind == "epoch":
                if tag[1] != self.kernel.crash_count[node]:
                    return
                self._epoch_tick(now)
                self.mux.set_timer(node, self.epoch_us, self.CHANNEL, tag)
            elif kind == "drain":
                _, resource, target, epoch = tag
                if epoch != self.kernel.crash_count[node]:
                    return
                if not self._try_handoff(node, resource, target):
                    self._arm_drain(node, resource, target)
        return on_timer

    def _on_crash(self, node: int) -> None:
        for resource, p in list(self.pending.items()):
            if p["old"] == node:
                self.engine.frozen.discard(resource)
                del self.pending[resource]

    def _on_recover(self, node: int) -> None:
        if node == self.home_node:
            self.mux.set_timer(node, self.epoch_us, self.CHANNEL,
                               ("epoch", self.kernel.crash_count[node]))
