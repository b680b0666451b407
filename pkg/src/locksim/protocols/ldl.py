"""Lease-based distributed locking.

Every resource has a manager chosen by consistent hashing (optionally one
ring per region, keyed by the resource's home region). Managers grant
time-limited leases; holders self-invalidate, so no manager crash can break
exclusion. Clock skew within +/-Delta is absorbed by a double guard:

  * the manager re-grants only once its local clock passes
    granted_at + T + Delta,
  * the holder trusts the lease only while its local clock is before
    receipt + T - Delta.

True-time safety additionally needs message delay bounded by 2*Delta on the
grant path; the configuration layer rejects setups that violate that bound.
Lease state is volatile; only the per-resource token counters are durable,
which keeps fencing tokens strictly increasing across manager crashes.

Releases are fire-and-forget: the client is free the moment the release is
sent, which is what makes the contended handoff two one-way hops instead of
a round trip plus log flushes.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from ..core import HashRing, home_region, issue_token
from .base import LockEngine, NodeMux


@dataclass
class LDLConfig:
    lease_us: int = 200_000       # T
    skew_guard_us: int = 50_000   # Delta
    pool_affinity: bool = False   # per-region rings instead of one global ring


class LDLEngine(LockEngine):
    name = "ldl"

    def __init__(self, kernel, mux: NodeMux, collector, cfg: LDLConfig, channel: str = "ldl",
                 managers: list[int] | None = None) -> None:
        super().__init__(kernel, mux, collector)
        self.cfg = cfg
        self.channel = channel
        topo = kernel.topology
        if managers is None:
            managers = list(range(topo.num_nodes))
        self.managers = managers
        if cfg.pool_affinity and topo.num_regions > 1:
            self._rings = {
                region: HashRing([n for n in managers if topo.region_of(n) == region])
                for region in range(topo.num_regions)
            }
        else:
            self._rings = {None: HashRing(managers)}
        # Manager-side lease table: resource -> lease record. Volatile.
        self.table: dict[int, dict] = {}
        self.queues: dict[int, deque] = {}
        # Recovered managers must not grant until every lease they could have
        # issued before crashing has lapsed (manager-local clock).
        self.grace_until: dict[int, int] = {}
        # Client-side stub: (client_id, request_id) -> held lease info.
        self.held: dict[tuple[int, int], dict] = {}
        self.stats = {"grants": 0, "stale_releases": 0, "expiries": 0, "renewals": 0, "renew_denied": 0}
        # Optimization hooks, all inert by default. ``overrides`` repins a
        # resource to a migrated manager; ``frozen`` resources take no new
        # grants or renewals while a migration drains; ``lease_policy`` lets a
        # controller pick per-grant lease lengths (bounded by max_lease_us,
        # which recovery grace must cover); ``access_stats`` observes traffic.
        self.overrides: dict[int, int] = {}
        self.frozen: set[int] = set()
        self.lease_policy = None
        self.max_lease_us = cfg.lease_us
        self.access_stats = None

    def manager_of(self, resource: int) -> int:
        mgr = self.overrides.get(resource)
        if mgr is not None:
            return mgr
        ring = self._rings.get(None)
        if ring is None:
            region = home_region(resource, self.kernel.topology.num_regions)
            ring = self._rings[region]
        return ring.route(resource)

    def _lease_for(self, resource: int) -> int:
        if self.lease_policy is not None:
            return self.lease_policy(resource)
        return self.cfg.lease_us

    def install(self) -> None:
        topo = self.kernel.topology
        for node in range(topo.num_nodes):
            self.mux.register(node, self.channel, self._make_on_message(node), self._make_on_timer(node))
        self.kernel.add_crash_listener(self._on_crash)
        self.kernel.add_recover_listener(self._on_recover)
        sweep = max(1, self.cfg.lease_us // 4)
        for node in self.managers:
            self.mux.set_timer(node, sweep, self.channel, ("sweep", 0))

    # -- client-side stub ---------------------------------------------------------

    def timeout_hint(self, node: int, resource: int) -> int:
        return self._timeout_from_rtt(self.kernel.topology.rtt_us(node, self.manager_of(resource)))

    def submit_acquire(self, node: int, client_id: int, request_id: int, resource: int) -> None:
        self.mux.send(node, self.manager_of(resource), self.channel,
                      ("acq", client_id, request_id, resource, node))

    def submit_release(self, node: int, client_id: int, request_id: int, resource: int, token: int) -> None:
        self.held.pop((client_id, request_id), None)
        # The holder stops at submit time; the manager-side receipt only
        # confirms it later, so record the earlier, truthful instant too.
        self.collector.release_received(resource, token, self.kernel.now)
        self.mux.send(node, self.manager_of(resource), self.channel,
                      ("rel", client_id, request_id, resource, token))
        # Fire-and-forget: the client moves on at send time.
        self.release_sink(self.kernel.now, client_id, request_id)

    def validity_of(self, client_id: int, request_id: int):
        entry = self.held.get((client_id, request_id))
        return entry["validity"] if entry else None

    def _make_on_message(self, node: int):
        def on_message(now: int, src: int, msg) -> None:
            kind = msg[0]
            if kind == "acq":
                self._handle_acquire(now, node, msg)
            elif kind == "rel":
                self._handle_release(now, node, msg)
            elif kind == "renew":
                self._handle_renew(now, node, msg)
            elif kind == "grant":
                self._client_grant(now, node, msg)
            elif kind == "renew_ack":
                self._client_renew_ack(now, node, msg)

        return on_message

    def _client_grant(self, now: int, node: int, msg) -> None:
        _, client_id, request_id, resource, token, lease_us = msg
        validity = now + lease_us - self.cfg.skew_guard_us
        self.held[(client_id, request_id)] = {
            "resource": resource,
            "token": token,
            "validity": validity,
            "node": node,
        }
        self.mux.set_timer(node, max(1, lease_us // 2), self.channel,
                           ("renew", client_id, request_id, self.kernel.crash_count[node]))
        self.grant_sink(now, client_id, request_id, resource, token, validity)

    def _client_renew_ack(self, now: int, node: int, msg) -> None:
        _, client_id, request_id, resource, token, granted, lease_us = msg
        entry = self.held.get((client_id, request_id))
        if entry is None or entry["token"] != token:
            return
        if granted:
            entry["validity"] = now + lease_us - self.cfg.skew_guard_us
            self.collector.extend_validity(resource, token, entry["validity"])
            self.mux.set_timer(node, max(1, lease_us // 2), self.channel,
                               ("renew", client_id, request_id, self.kernel.crash_count[node]))

    # -- manager ---------------------------------------------------------------------

    def _lease_live(self, node: int, e: dict) -> bool:
        if e["holder"] is None:
            return False
        now_local = self.kernel.node_clock(node)
        return now_local < e["granted_at"] + e["lease"] + self.cfg.skew_guard_us

    def _handle_acquire(self, now: int, node: int, msg) -> None:
        _, client_id, request_id, resource, client_node = msg
        owner = self.manager_of(resource)
        if owner != node:
            self.mux.send(node, owner, self.channel, msg)
            return
        if self.access_stats is not None:
            self.access_stats.record_access(now, resource, client_node)
        e = self.table.get(resource)
        if e is None:
            e = {"holder": None, "token": 0, "granted_at": 0, "holder_node": 0,
                 "lease": self.cfg.lease_us}
            self.table[resource] = e
        who = (client_id, request_id)
        if e["holder"] == who:
            if resource in self.frozen:
                return  # migrating away: let the current lease run out
            # Lost grant retry: re-anchor and resend the same token.
            lease = self._lease_for(resource)
            e["granted_at"] = self.kernel.node_clock(node)
            e["lease"] = lease
            self.mux.send(node, client_node, self.channel,
                          ("grant", client_id, request_id, resource, e["token"], lease))
            return
        if self._lease_live(node, e):
            q = self.queues.setdefault(resource, deque())
            if all(w[:2] != who for w in q):
                q.append((client_id, request_id, client_node))
            return
        if e["holder"] is not None:
            self.stats["expiries"] += 1
            e["holder"] = None
        q = self.queues.setdefault(resource, deque())
        if all(w[:2] != who for w in q):
            q.append((client_id, request_id, client_node))
        self._serve(node, resource)

    def _serve(self, node: int, resource: int) -> None:
        e = self.table[resource]
        q = self.queues.get(resource)
        if e["holder"] is not None or not q or resource in self.frozen:
            return
        grace = self.grace_until.get(node)
        if grace is not None:
            if self.kernel.node_clock(node) < grace:
                return  # the sweep retries once the grace window has passed
            del self.grace_until[node]
        client_id, request_id, client_node = q.popleft()
        if self.access_stats is not None:
            self.access_stats.record_queue_at_grant(self.kernel.now, resource, len(q))
        token = issue_token(self.kernel.durable(node), resource)
        lease = self._lease_for(resource)
        self.stats["grants"] += 1
        e["holder"] = (client_id, request_id)
        e["token"] = token
        e["granted_at"] = self.kernel.node_clock(node)
        e["lease"] = lease
        e["holder_node"] = client_node
        self.mux.send(node, client_node, self.channel,
                      ("grant", client_id, request_id, resource, token, lease))

    def _handle_release(self, now: int, node: int, msg) -> None:
        _, client_id, request_id, resource, token = msg
        owner = self.manager_of(resource)
        if owner != node:
            self.mux.send(node, owner, self.channel, msg)
            return
        e = self.table.get(resource)
        if e is None or e["holder"] is None or e["token"] != token:
            self.stats["stale_releases"] += 1
            return
        self.collector.release_received(resource, token, now)
        e["holder"] = None
        self._serve(node, resource)

    def _handle_renew(self, now: int, node: int, msg) -> None:
        _, client_id, request_id, resource, token, client_node = msg
        owner = self.manager_of(resource)
        if owner != node:
            self.mux.send(node, owner, self.channel, msg)
            return
        e = self.table.get(resource)
        ok = (
            e is not None
            and e["holder"] == (client_id, request_id)
            and e["token"] == token
            and self._lease_live(node, e)
            and resource not in self.frozen
        )
        lease = self._lease_for(resource) if ok else self.cfg.lease_us
        if ok:
            e["granted_at"] = self.kernel.node_clock(node)
            e["lease"] = lease
            self.stats["renewals"] += 1
        else:
            self.stats["renew_denied"] += 1
        self.mux.send(node, client_node, self.channel,
                      ("renew_ack", client_id, request_id, resource, token, ok, lease))

    # -- timers -----------------------------------------------------------------------

    def _make_on_timer(self, node: int):
        def on_timer(now: int, tag) -> None:
            kind = tag[0]
            if kind == "sweep":
                if tag[1] != self.kernel.crash_count[node]:
                    return
                self._sweep(node)
                self.mux.set_timer(node, max(1, self.cfg.lease_us // 4), self.channel, tag)
            elif kind == "renew":
                _, client_id, request_id, epoch = tag
                if epoch != self.kernel.crash_count[node]:
                    return
                entry = self.held.get((client_id, request_id))
                if entry is not None:
                    self.mux.send(node, self.manager_of(entry["resource"]), self.channel,
                                  ("renew", client_id, request_id, entry["resource"], entry["token"], node))

        return on_timer

    def _sweep(self, node: int) -> None:
        for resource, e in self.table.items():
            if self.manager_of(resource) != node:
                continue
            if e["holder"] is not None and not self._lease_live(node, e):
                self.stats["expiries"] += 1
                e["holder"] = None
            if e["holder"] is None and self.queues.get(resource):
                self._serve(node, resource)

    # -- faults ------------------------------------------------------------------------

    def _on_crash(self, node: int) -> None:
        # Manager state is volatile; client stubs on the node die with it.
        for resource in [r for r in self.table if self.manager_of(r) == node]:
            del self.table[resource]
            self.queues.pop(resource, None)
        for key in [k for k, v in self.held.items() if v["node"] == node]:
            del self.held[key]

    def _on_recover(self, node: int) -> None:
        if node in self.managers:
            self.grace_until[node] = (
                self.kernel.node_clock(node) + self.max_lease_us + self.cfg.skew_guard_us
            )
            self.mux.set_timer(node, max(1, self.cfg.lease_us // 4), self.channel,
                               ("sweep", self.kernel.crash_count[node]))
