"""Hierarchical locking: global delegation, region-local grants.

A single global coordinator owns a durable per-resource token counter and
delegates resources to regions for a coarse region lease. The delegation
hands over a block of the token space, so region-local managers can issue
node-level leases (LDL-style, same double skew guard) without touching the
counter; blocks from successive delegations only ever move forward, which
keeps fencing tokens strictly increasing across transfers even when a
revoke-ack is lost and the coordinator re-delegates after the region lease
plus guard lapses.

Intra-region traffic never leaves the region once the delegation is in
place. A request from another region makes the coordinator revoke the
current delegation: the holding manager stops granting, drains its active
holder (release or lease lapse), acks with the last token it used, and its
queued waiters simply retry, re-entering through whichever region asks next
- local FIFO order is not preserved across regions.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from ..core import HashRing, advance_token, peek_token
from .base import LockEngine, NodeMux


@dataclass
class HLConfig:
    lease_us: int = 200_000          # node-level lease T
    skew_guard_us: int = 50_000      # Delta
    region_lease_us: int = 2_000_000  # T_R, delegation duration
    coordinator: int = 0
    token_block: int = 1 << 20       # token space reserved per delegation


class HLEngine(LockEngine):
    name = "hl"

    def __init__(self, kernel, mux: NodeMux, collector, cfg: HLConfig,
                 channel: str = "hl") -> None:
        super().__init__(kernel, mux, collector)
        self.cfg = cfg
        self.channel = channel
        topo = kernel.topology
        self.rings = {
            region: HashRing(topo.nodes_in_region(region))
            for region in range(topo.num_regions)
        }
        # Region-manager state, keyed (manager_node, resource). Volatile.
        self.deleg: dict[tuple, dict] = {}   # {base,next,recv,lease,revoking}
        self.table: dict[tuple, dict] = {}   # {holder,token,granted_at,lease,holder_node}
        self.queues: dict[tuple, deque] = {}
        self.dreq_sent: dict[tuple, int] = {}  # local-clock send time
        self.grace_until: dict[int, int] = {}  # manager recovery grace
        # Coordinator state. Volatile except the token counters.
        self.dmap: dict[int, dict] = {}      # res -> {region,mgr,granted,seq,revoking}
        self.dqueue: dict[int, deque] = {}   # res -> regions waiting
        self.dseq: dict[int, int] = {}
        self.coord_grace: int | None = None
        # Client-side stubs.
        self.held: dict[tuple, dict] = {}
        self.stats = {
            "grants": 0, "local_grants": 0, "delegations": 0, "revokes": 0,
            "timeout_redelegations": 0, "expiries": 0, "renewals": 0,
            "renew_denied": 0, "xregion_msgs": 0, "stale_releases": 0,
        }

    # ------------------------------------------------------------- plumbing

    def manager_of(self, region: int, resource: int) -> int:
        return self.rings[region].route(resource)

    def _send(self, src: int, dst: int, msg) -> None:
        topo = self.kernel.topology
        if topo.region_of(src) != topo.region_of(dst):
            self.stats["xregion_msgs"] += 1
        self.mux.send(src, dst, self.channel, msg)

    def install(self) -> None:
        topo = self.kernel.topology
        for node in range(topo.num_nodes):
            self.mux.register(node, self.channel,
                              self._make_on_message(node),
                              self._make_on_timer(node))
        self.kernel.add_crash_listener(self._on_crash)
        self.kernel.add_recover_listener(self._on_recover)
        sweep = max(1, self.cfg.lease_us // 4)
        for node in range(topo.num_nodes):
            self.mux.set_timer(node, sweep, self.channel, ("sweep", 0))

    # ------------------------------------------------------------ client API

    def timeout_hint(self, node: int, resource: int) -> int:
        topo = self.kernel.topology
        mgr = self.manager_of(topo.region_of(node), resource)
        path = topo.rtt_us(node, mgr) + topo.rtt_us(mgr, self.cfg.coordinator)
        return self._timeout_from_rtt(path)

    def submit_acquire(self, node: int, client_id: int, request_id: int, resource: int) -> None:
        mgr = self.manager_of(self.kernel.topology.region_of(node), resource)
        self._send(node, mgr, ("acq", client_id, request_id, resource, node))

    def submit_release(self, node: int, client_id: int, request_id: int, resource: int, token: int) -> None:
        self.held.pop((client_id, request_id), None)
        self.collector.release_received(resource, token, self.kernel.now)
        mgr = self.manager_of(self.kernel.topology.region_of(node), resource)
        self._send(node, mgr, ("rel", client_id, request_id, resource, token))
        self.release_sink(self.kernel.now, client_id, request_id)

    def validity_of(self, client_id: int, request_id: int):
        entry = self.held.get((client_id, request_id))
        return entry["validity"] if entry else None

    def _client_grant(self, now: int, node: int, msg) -> None:
        _, client_id, request_id, resource, token, lease_us = msg
        validity = now + lease_us - self.cfg.skew_guard_us
        self.held[(client_id, request_id)] = {
            "resource": resource, "token": token,
            "validity": validity, "node": node,
        }
        self.mux.set_timer(node, max(1, lease_us // 2), self.channel,
                           ("renew", client_id, request_id, self.kernel.crash_count[node]))
        self.grant_sink(now, client_id, request_id, resource, token, validity)

    def _client_renew_ack(self, now: int, node: int, msg) -> None:
        _, client_id, request_id, resource, token, ok, lease_us = msg
        entry = self.held.get((client_id, request_id))
        if entry is None or entry["token"] != token:
            return
        if ok:
            entry["validity"] = now + lease_us - self.cfg.skew_guard_us
            self.collector.extend_validity(resource, token, entry["validity"])
            self.mux.set_timer(node, max(1, lease_us // 2), self.channel,
                               ("renew", client_id, request_id, self.kernel.crash_count[node]))

    # -------------------------------------------------------- region manager

    def _deleg_end(self, d: dict) -> int:
        return d["recv"] + d["lease"] - self.cfg.skew_guard_us

    def _deleg_usable(self, node: int, d: dict | None) -> bool:
        if d is None or d["revoking"]:
            return False
        # A delegation too close to its end cannot back a safe node lease.
        return self._deleg_end(d) - self.kernel.node_clock(node) > 2 * self.cfg.skew_guard_us

    def _lease_live(self, node: int, e: dict) -> bool:
        if e["holder"] is None:
            return False
        return self.kernel.node_clock(node) < e["granted_at"] + e["lease"] + self.cfg.skew_guard_us

    def _handle_acquire(self, now: int, node: int, msg) -> None:
        _, client_id, request_id, resource, client_node = msg
        key = (node, resource)
        e = self.table.get(key)
        if e is None:
            e = {"holder": None, "token": 0, "granted_at": 0, "lease": 0, "holder_node": 0}
            self.table[key] = e
        who = (client_id, request_id)
        d = self.deleg.get(key)
        if e["holder"] == who and self._deleg_usable(node, d):
            # Lost-grant retry: resend the same token on a fresh lease, which
            # must still fit inside the delegation window.
            local = self.kernel.node_clock(node)
            lease = min(self.cfg.lease_us, self._deleg_end(d) - local)
            e["granted_at"] = local
            e["lease"] = lease
            self._send(node, client_node,
                       ("grant", client_id, request_id, resource, e["token"], lease))
            return
        q = self.queues.setdefault(key, deque())
        if all(w[:2] != who for w in q):
            q.append((client_id, request_id, client_node))
        if self._deleg_usable(node, d):
            if e["holder"] is not None and not self._lease_live(node, e):
                self.stats["expiries"] += 1
                e["holder"] = None
            self._serve(node, resource)
        else:
            self._want_delegation(node, resource)

    def _want_delegation(self, node: int, resource: int) -> None:
        key = (node, resource)
        d = self.deleg.get(key)
        if d is not None and d["revoking"]:
            return  # re-request after the revoke ack goes out
        local = self.kernel.node_clock(node)
        sent = self.dreq_sent.get(key)
        wait = self._timeout_from_rtt(
            self.kernel.topology.rtt_us(node, self.cfg.coordinator))
        if sent is not None and local - sent < wait:
            return
        self.dreq_sent[key] = local
        region = self.kernel.topology.region_of(node)
        self._send(node, self.cfg.coordinator, ("dreq", region, resource, node))

    def _serve(self, node: int, resource: int) -> None:
        key = (node, resource)
        e = self.table[key]
        d = self.deleg.get(key)
        q = self.queues.get(key)
        if e["holder"] is not None or not q or not self._deleg_usable(node, d):
            return
        grace = self.grace_until.get(node)
        local = self.kernel.node_clock(node)
        if grace is not None:
            if local < grace:
                return  # the sweep retries once the grace window has passed
            del self.grace_until[node]
        lease = min(self.cfg.lease_us, self._deleg_end(d) - local)
        client_id, request_id, client_node = q.popleft()
        d["next"] += 1
        token = d["base"] + d["next"]
        self.stats["grants"] += 1
        if self.kernel.topology.region_of(client_node) == self.kernel.topology.region_of(node):
            self.stats["local_grants"] += 1
        e.update(holder=(client_id, request_id), token=token,
                 granted_at=local, lease=lease, holder_node=client_node)
        self._send(node, client_node,
                   ("grant", client_id, request_id, resource, token, lease))

    def _handle_release(self, now: int, node: int, msg) -> None:
        _, client_id, request_id, resource, token = msg
        key = (node, resource)
        e = self.table.get(key)
        if e is None or e["holder"] is None or e["token"] != token:
            self.stats["stale_releases"] += 1
            return
        self.collector.release_received(resource, token, now)
        e["holder"] = None
        d = self.deleg.get(key)
        if d is not None and d["revoking"]:
            self._finish_revoke(node, resource)
        else:
            self._serve(node, resource)

    def _handle_renew(self, now: int, node: int, msg) -> None:
        _, client_id, request_id, resource, token, client_node = msg
        key = (node, resource)
        e = self.table.get(key)
        d = self.deleg.get(key)
        ok = (
            e is not None
            and e["holder"] == (client_id, request_id)
            and e["token"] == token
            and self._lease_live(node, e)
            and self._deleg_usable(node, d)
        )
        lease = 0
        if ok:
            local = self.kernel.node_clock(node)
            lease = min(self.cfg.lease_us, self._deleg_end(d) - local)
            e["granted_at"] = local
            e["lease"] = lease
            self.stats["renewals"] += 1
        else:
            self.stats["renew_denied"] += 1
        self._send(node, client_node,
                   ("renew_ack", client_id, request_id, resource, token, ok, lease))

    def _handle_dgrant(self, now: int, node: int, msg) -> None:
        _, resource, base, lease_us, seq = msg
        key = (node, resource)
        cur = self.deleg.get(key)
        if cur is not None and cur["seq"] >= seq:
            return  # stale duplicate from a re-request race
        self.dreq_sent.pop(key, None)
        self.deleg[key] = {
            "base": base, "next": 0, "seq": seq,
            "recv": self.kernel.node_clock(node),
            "lease": lease_us, "revoking": False,
        }
        self.table.setdefault(key, {"holder": None, "token": 0, "granted_at": 0,
                                    "lease": 0, "holder_node": 0})
        self._serve(node, resource)

    def _handle_revoke(self, now: int, node: int, msg) -> None:
        _, resource, seq = msg
        key = (node, resource)
        d = self.deleg.get(key)
        if d is not None and seq < d["seq"]:
            return  # aimed at an older delegation than the one held
        if d is None:
            # Nothing delegated here. If this manager recently restarted, a
            # lease it granted before the crash may still be running, so the
            # ack must wait out the local grace window first.
            local = self.kernel.node_clock(node)
            grace = self.grace_until.get(node)
            if grace is not None and local < grace:
                self.mux.set_timer(node, grace - local, self.channel,
                                   ("rvgrace", resource, seq,
                                    self.kernel.crash_count[node]))
            else:
                self._send(node, self.cfg.coordinator, ("rvack", resource, 0, seq))
            return
        d["seq"] = seq
        d["revoking"] = True
        # Local waiters fail over: they re-acquire through their retries.
        self.queues.get(key, deque()).clear()
        e = self.table.get(key)
        if e is not None and e["holder"] is not None and not self._lease_live(node, e):
            self.stats["expiries"] += 1
            e["holder"] = None
        if e is None or e["holder"] is None:
            self._finish_revoke(node, resource)

    def _finish_revoke(self, node: int, resource: int) -> None:
        key = (node, resource)
        d = self.deleg.pop(key, None)
        if d is None:
            return
        last = d["base"] + d["next"]
        self._send(node, self.cfg.coordinator,
                   ("rvack", resource, last, d["seq"]))
        if self.queues.get(key):
            self._want_delegation(node, resource)

    # ------------------------------------------------------------ coordinator

    def _coord_store(self) -> dict:
        return self.kernel.durable(self.cfg.coordinator)

    def _handle_dreq(self, now: int, coord: int, msg) -> None:
        _, region, resource, mgr = msg
        local = self.kernel.node_clock(coord)
        if self.coord_grace is not None:
            if local < self.coord_grace:
                self._queue_region(resource, region, mgr)
                return
            self.coord_grace = None
        cur = self.dmap.get(resource)
        if cur is not None and local >= cur["granted"] + cur["lease"] + self.cfg.skew_guard_us:
            cur = None  # the region lease ran out on its own
            self.dmap.pop(resource, None)
        if cur is None:
            self._delegate(coord, resource, region, mgr)
        elif cur["region"] == region and not cur["revoking"]:
            # The region already owns it (manager restarted or the grant was
            # lost): hand over a fresh block.
            self._delegate(coord, resource, region, mgr)
        else:
            self._queue_region(resource, region, mgr)
            if not cur["revoking"]:
                cur["revoking"] = True
                self.stats["revokes"] += 1
                self._send(coord, cur["mgr"], ("revoke", resource, cur["seq"]))
                deadline = cur["granted"] + cur["lease"] + self.cfg.skew_guard_us
                self.mux.set_timer(coord, max(1, deadline - local), self.channel,
                                   ("rvdl", resource, cur["seq"], self.kernel.crash_count[coord]))
            elif cur["region"] == region:
                # A revoked manager asking again has lost its state; nudge it
                # so it acks instead of waiting for a revoke it never saw.
                self._send(coord, cur["mgr"], ("revoke", resource, cur["seq"]))

    def _queue_region(self, resource: int, region: int, mgr: int) -> None:
        q = self.dqueue.setdefault(resource, deque())
        if all(r != region for r, _ in q):
            q.append((region, mgr))

    def _delegate(self, coord: int, resource: int, region: int, mgr: int) -> None:
        store = self._coord_store()
        base = peek_token(store, resource)
        advance_token(store, resource, base + self.cfg.token_block)
        seq = self.dseq.get(resource, 0) + 1
        self.dseq[resource] = seq
        self.dmap[resource] = {
            "region": region, "mgr": mgr, "seq": seq,
            "granted": self.kernel.node_clock(coord),
            "lease": self.cfg.region_lease_us, "revoking": False,
        }
        self.stats["delegations"] += 1
        self._send(coord, mgr, ("dgrant", resource, base, self.cfg.region_lease_us, seq))

    def _handle_rvack(self, now: int, coord: int, msg) -> None:
        _, resource, last_token, seq = msg
        advance_token(self._coord_store(), resource, last_token)
        cur = self.dmap.get(resource)
        if cur is None or cur["seq"] != seq:
            return
        del self.dmap[resource]
        self._next_delegation(coord, resource)

    def _revoke_deadline(self, now: int, coord: int, tag) -> None:
        _, resource, seq, epoch = tag
        if epoch != self.kernel.crash_count[coord]:
            return
        cur = self.dmap.get(resource)
        if cur is None or cur["seq"] != seq:
            return
        # The region lease has fully lapsed; no node grant under it can
        # still be valid, so it is safe to move on without the ack.
        self.stats["timeout_redelegations"] += 1
        del self.dmap[resource]
        self._next_delegation(coord, resource)

    def _next_delegation(self, coord: int, resource: int) -> None:
        q = self.dqueue.get(resource)
        if q:
            region, mgr = q.popleft()
            self._delegate(coord, resource, region, mgr)

    # ----------------------------------------------------------------- wiring

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
            elif kind == "dreq":
                self._handle_dreq(now, node, msg)
            elif kind == "dgrant":
                self._handle_dgrant(now, node, msg)
            elif kind == "revoke":
                self._handle_revoke(now, node, msg)
            elif kind == "rvack":
                self._handle_rvack(now, node, msg)
        return on_message

    def _make_on_timer(self, node: int):
        def on_timer(now: int, tag) -> None:
            kind = tag[0]
            if kind == "sweep":
                if tag[1] != self.kernel.crash_count[node]:
                    return
                self._sweep(node)
                self.mux.set_timer(node, max(1, self.cfg.lease_us // 4),
                                   self.channel, tag)
            elif kind == "renew":
                _, client_id, request_id, epoch = tag
                if epoch != self.kernel.crash_count[node]:
                    return
                entry = self.held.get((client_id, request_id))
                if entry is not None:
                    mgr = self.manager_of(
                        self.kernel.topology.region_of(node), entry["resource"])
                    self._send(node, mgr,
                               ("renew", client_id, request_id, entry["resource"],
                                entry["token"], node))
            elif kind == "rvdl":
                self._revoke_deadline(now, node, tag)
            elif kind == "rvgrace":
                _, resource, seq, epoch = tag
                if epoch != self.kernel.crash_count[node]:
                    return
                if (node, resource) not in self.deleg:
                    self._send(node, self.cfg.coordinator,
                               ("rvack", resource, 0, seq))
            elif kind == "cgrace":
                if tag[1] != self.kernel.crash_count[node]:
                    return
                self.coord_grace = None
                for resource in list(self.dqueue):
                    if resource not in self.dmap:
                        self._next_delegation(node, resource)
        return on_timer

    def _sweep(self, node: int) -> None:
        local = self.kernel.node_clock(node)
        for (mgr, resource), e in list(self.table.items()):
            if mgr != node:
                continue
            key = (mgr, resource)
            d = self.deleg.get(key)
            if e["holder"] is not None and not self._lease_live(node, e):
                self.stats["expiries"] += 1
                e["holder"] = None
            if d is not None and d["revoking"] and e["holder"] is None:
                self._finish_revoke(node, resource)
                d = None
            if d is not None and not d["revoking"] and \
                    self._deleg_end(d) <= local and e["holder"] is None:
                # Lapsed quietly; drop it so the next acquire re-requests.
                del self.deleg[key]
                d = None
            if self.queues.get(key):
                if self._deleg_usable(node, d):
                    self._serve(node, resource)
                else:
                    self._want_delegation(node, resource)

    # ----------------------------------------------------------------- faults

    def _on_crash(self, node: int) -> None:
        for key in [k for k in self.deleg if k[0] == node]:
            del self.deleg[key]
        for key in [k for k in self.table if k[0] == node]:
            del self.table[key]
        for key in [k for k in self.queues if k[0] == node]:
            del self.queues[key]
        for key in [k for k in self.dreq_sent if k[0] == node]:
            del self.dreq_sent[key]
        for key in [k for k in self.held if self.held[k]["node"] == node]:
            del self.held[key]
        if node == self.cfg.coordinator:
            self.dmap.clear()
            self.dqueue.clear()

    def _on_recover(self, node: int) -> None:
        guard = self.cfg.lease_us + self.cfg.skew_guard_us
        self.grace_until[node] = self.kernel.node_clock(node) + guard
        self.mux.set_timer(node, max(1, self.cfg.lease_us // 4), self.channel,
                           ("sweep", self.kernel.crash_count[node]))
        if node == self.cfg.coordinator:
            hold = self.cfg.region_lease_us + self.cfg.skew_guard_us
            self.coord_grace = self.kernel.node_clock(node) + hold
            self.mux.set_timer(node, hold, self.channel,
                               ("cgrace", self.kernel.crash_count[node]))
