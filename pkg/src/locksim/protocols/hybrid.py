"""Per-resource protocol selection with an optimistic-commit mode.

One facade engine routes each resource to the protocol its traffic deserves:

* resources named critical in the config always go through the embedded
  quorum-replicated engine;
* resources that are both hot (access rate over a threshold) and contended
  (queue estimate at least one waiter) switch to versioned optimistic
  commits - clients read a version, do their work, then commit only if the
  version is unchanged, retrying with bounded exponential backoff;
* everything else stays on leases with adaptively chosen durations.

Classes change only at epoch boundaries. A resource leaving the lease or
quorum class first drains: no new submissions reach the old protocol, and
the new class activates once every outstanding grant has been released (or
a generous valve covering worst-case lease/force-release recovery lapses).
Tokens shown to callers live in one per-resource namespace: each class
switch bumps a base offset larger than any raw protocol counter, so fencing
tokens keep increasing across protocol changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..core import HashRing
from ..optimizations import AccessStats, LeaseController, ResourceClass, classify
from .base import LockEngine, NodeMux
from .ldl import LDLConfig, LDLEngine
from .pdl import PDLConfig, PDLEngine


@dataclass
class HybridConfig:
    critical: tuple = ()
    epoch_us: int = 10_000_000
    hot_rate_per_s: float = 100.0
    hot_queue: float = 1.0
    token_block: int = 1 << 20
    occ_max_attempts: int = 8
    occ_backoff_base_us: int = 1_000
    occ_backoff_cap_us: int = 64_000
    adaptive_lease: bool = True
    lease: LDLConfig = field(default_factory=LDLConfig)
    quorum: PDLConfig = field(default_factory=PDLConfig)
    drain_valve_us: int | None = None  # default derived from member protocols


class _CollectorShim:
    """Remaps a sub-protocol's raw fencing tokens into the hybrid namespace
    before they reach the safety collector, so critical-section records and
    release receipts agree on token identity."""

    def __init__(self, tag: str, hybrid: "HybridEngine", real) -> None:
        self._tag = tag
        self._hybrid = hybrid
        self._real = real

    def _map(self, resource: int, token: int) -> int:
        return self._hybrid.rawmap.get((self._tag, resource, token), token)

    def release_received(self, resource: int, token: int, now: int) -> None:
        self._real.release_received(resource, self._map(resource, token), now)

    def extend_validity(self, resource: int, token: int, validity: int) -> None:
        self._real.extend_validity(resource, self._map(resource, token), validity)


class HybridEngine(LockEngine):
    name = "hybrid"

    OCC_CHANNEL = "hyb-occ"

    def __init__(self, kernel, mux: NodeMux, collector, cfg: HybridConfig,
                 stats: AccessStats | None = None) -> None:
        super().__init__(kernel, mux, collector)
        self.cfg = cfg
        self.access_stats = stats or AccessStats(kernel)
        self.ldl = LDLEngine(kernel, mux, _CollectorShim("lease", self, collector),
                             cfg.lease, channel="hyb-lease")
        self.pdl = PDLEngine(kernel, mux, _CollectorShim("quorum", self, collector),
                             cfg.quorum, channel="hyb-quorum")
        if cfg.adaptive_lease:
            self.controller = LeaseController(self.access_stats)
            self.controller.attach(self.ldl)
        else:
            self.controller = None
            self.ldl.access_stats = self.access_stats
        self.ldl.grant_sink = self._make_sub_grant("lease", self.ldl)
        self.ldl.release_sink = self._sub_release
        self.ldl.fail_sink = self._sub_fail
        self.pdl.grant_sink = self._make_sub_grant("quorum", self.pdl)
        self.pdl.release_sink = self._sub_release
        self.pdl.fail_sink = self._sub_fail
        self.critical = frozenset(cfg.critical)
        self.occ_ring = HashRing(list(range(kernel.topology.num_nodes)))
        if cfg.drain_valve_us is not None:
            self.drain_valve_us = cfg.drain_valve_us
        else:
            self.drain_valve_us = (
                max(self.ldl.max_lease_us,
                    2 * cfg.quorum.client_liveness_timeout_us)
                + cfg.lease.skew_guard_us + 1_000_000
            )
        # Routing state.
        self.classes: dict[int, ResourceClass] = {}
        self.transition: dict[int, dict] = {}
        self.requests: dict[tuple, dict] = {}
        self.open_by_res: dict[int, set] = {}
        self.token_base: dict[int, int] = {}
        self.rawmap: dict[tuple, int] = {}
        self.revmap: dict[tuple, tuple] = {}
        # Optimistic-commit state.
        self.occ_decided: dict[tuple, dict] = {}
        self.occ_attempts: dict[tuple, int] = {}
        self.occ_open: dict[int, int] = {}
        # Shared with the safety collector so commit-order checks see OCC traffic.
        self.committed_versions = collector.occ_commits
        self.stats = {"occ_commits": 0, "occ_aborts": 0, "occ_failures": 0,
                      "reclassifications": 0, "drained_switches": 0}

    # ----------------------------------------------------------- class logic

    def effective_class(self, resource: int) -> ResourceClass:
        if resource in self.critical:
            return ResourceClass.QUORUM
        tr = self.transition.get(resource)
        if tr is not None:
            return tr["to"]
        return self.classes.get(resource, ResourceClass.LEASE)

    def install(self) -> None:
        self.ldl.install()
        self.pdl.install()
        for node in range(self.kernel.topology.num_nodes):
            self.mux.register(node, self.OCC_CHANNEL,
                              self._make_on_message(node),
                              self._make_on_timer(node))
        for resource in self.critical:
            self.classes[resource] = ResourceClass.QUORUM
        self.kernel.add_crash_listener(self._on_crash)
        self.kernel.add_recover_listener(self._on_recover)
        self.mux.set_timer(0, self.cfg.epoch_us, self.OCC_CHANNEL,
                           ("epoch", self.kernel.crash_count[0]))

    def _epoch_tick(self, now: int) -> None:
        for resource, tr in list(self.transition.items()):
            if now >= tr["deadline"]:
                # Valve: every stale grant is beyond lease expiry or forced
                # release by now, so the new class may start.
                self._activate(resource)
        for resource in self.access_stats.resources():
            if resource in self.critical or resource in self.transition:
                continue
            current = self.classes.get(resource, ResourceClass.LEASE)
            wanted = classify(resource, now, self.access_stats, self.critical,
                              self.cfg.hot_rate_per_s, self.cfg.hot_queue)
            if wanted == current:
                continue
            self.stats["reclassifications"] += 1
            self.token_base[resource] = self.token_base.get(resource, 0) + self.cfg.token_block
            tr = {
                "to": wanted, "from": current, "buffer": {},
                "deadline": now + self.drain_valve_us,
            }
            self.transition[resource] = tr
            if current is ResourceClass.LEASE:
                # Freeze stops new lease grants for good; only a later switch
                # back to the lease class lifts it. Waiters the freeze locks
                # out are parked and re-dispatched on the new protocol.
                self.ldl.frozen.add(resource)
                self.ldl.queues.pop(resource, None)
                for key in list(self.open_by_res.get(resource, ())):
                    req = self.requests[key]
                    if req["cls"] is ResourceClass.LEASE and not req["granted"]:
                        req["buffered"] = True
                        tr["buffer"][key] = req["node"]
            self._maybe_activate(resource)

    def _maybe_activate(self, resource: int) -> None:
        tr = self.transition.get(resource)
        if tr is None:
            return
        blocking = {
            key for key in self.open_by_res.get(resource, ())
            if self.requests[key]["cls"] is not ResourceClass.OPTIMISTIC
            and not self.requests[key]["buffered"]
        }
        if not blocking:
            self._activate(resource)

    def _activate(self, resource: int) -> None:
        tr = self.transition.pop(resource)
        self.classes[resource] = tr["to"]
        self.stats["drained_switches"] += 1
        if tr["from"] is ResourceClass.LEASE:
            self.ldl.table.pop(resource, None)
            self.ldl.queues.pop(resource, None)
        if tr["to"] is ResourceClass.LEASE:
            self.ldl.frozen.discard(resource)
        for (client_id, request_id), node in tr["buffer"].items():
            self._dispatch(node, client_id, request_id, resource, tr["to"])

    # ------------------------------------------------------------- client API

    def timeout_hint(self, node: int, resource: int) -> int:
        cls = self.effective_class(resource)
        if cls is ResourceClass.QUORUM:
            return self.pdl.timeout_hint(node, resource)
        if cls is ResourceClass.OPTIMISTIC:
            rtt = self.kernel.topology.rtt_us(node, self.occ_ring.route(resource))
            return self._timeout_from_rtt(rtt) + self.cfg.occ_backoff_cap_us
        return self.ldl.timeout_hint(node, resource)

    def validity_of(self, client_id: int, request_id: int):
        req = self.requests.get((client_id, request_id))
        if req is None:
            return None
        if req["cls"] is ResourceClass.LEASE:
            return self.ldl.validity_of(client_id, request_id)
        if req["cls"] is ResourceClass.QUORUM:
            return self.pdl.validity_of(client_id, request_id)
        return None

    def submit_acquire(self, node: int, client_id: int, request_id: int, resource: int) -> None:
        key = (client_id, request_id)
        req = self.requests.get(key)
        if req is not None:
            # Retry of a known request: stay on the protocol it started on.
            if req["buffered"]:
                return  # parked until the class switch finishes draining
            if req["cls"] is ResourceClass.OPTIMISTIC:
                self._occ_read(node, client_id, request_id, resource)
            else:
                sub = self.pdl if req["cls"] is ResourceClass.QUORUM else self.ldl
                sub.submit_acquire(node, client_id, request_id, resource)
            return
        cls = self.effective_class(resource)
        self.requests[key] = {
            "node": node, "resource": resource, "cls": cls,
            "granted": False, "buffered": False,
        }
        self.open_by_res.setdefault(resource, set()).add(key)
        if cls is not ResourceClass.LEASE:
            # The lease engine samples its own traffic; count the rest here.
            self.access_stats.record_access(self.kernel.now, resource, node)
        tr = self.transition.get(resource)
        if tr is not None:
            self.requests[key]["buffered"] = True
            tr["buffer"][key] = node
            return
        self._dispatch(node, client_id, request_id, resource, cls)

    def _dispatch(self, node: int, client_id: int, request_id: int, resource: int,
                  cls: ResourceClass) -> None:
        req = self.requests.get((client_id, request_id))
        if req is None:
            return  # failed or cleaned up while buffered
        req["buffered"] = False
        req["cls"] = cls
        if cls is ResourceClass.QUORUM:
            self.pdl.submit_acquire(node, client_id, request_id, resource)
        elif cls is ResourceClass.OPTIMISTIC:
            self._occ_read(node, client_id, request_id, resource)
        else:
            self.ldl.submit_acquire(node, client_id, request_id, resource)

    def submit_release(self, node: int, client_id: int, request_id: int, resource: int,
                       token: int) -> None:
        key = (client_id, request_id)
        req = self.requests.get(key)
        if req is not None and req["cls"] is not ResourceClass.OPTIMISTIC:
            raw = req.get("raw", token)
            if req["cls"] is ResourceClass.QUORUM:
                self.pdl.submit_release(node, client_id, request_id, resource, raw)
            else:
                self.ldl.submit_release(node, client_id, request_id, resource, raw)
            return
        if req is not None:
            self._occ_commit(node, client_id, request_id, resource, token)
            return
        # No live request record (late grant released politely after a
        # failure, or a retry racing completion): route by the token itself
        # so a stray lock still gets freed instead of waiting out a lease.
        route = self.revmap.get((resource, token))
        if route is not None:
            tag, raw = route
            sub = self.pdl if tag == "quorum" else self.ldl
            sub.submit_release(node, client_id, request_id, resource, raw)

    # -------------------------------------------------- sub-engine pass-through

    def _make_sub_grant(self, tag: str, sub) -> callable:
        def on_grant(now, client_id, request_id, resource, raw, validity, occ=False):
            key = (client_id, request_id)
            mapkey = (tag, resource, raw)
            mapped = self.rawmap.get(mapkey)
            if mapped is None:
                mapped = self.token_base.get(resource, 0) + raw
                self.rawmap[mapkey] = mapped
                self.revmap[(resource, mapped)] = (tag, raw)
            req = self.requests.get(key)
            if req is not None:
                req["granted"] = True
                req["raw"] = raw
                if req["buffered"]:
                    # The grant was already in flight when a class switch
                    # parked this request: it now really holds the lock, so
                    # it must drain like any holder, not be re-dispatched.
                    req["buffered"] = False
                    tr = self.transition.get(resource)
                    if tr is not None:
                        tr["buffer"].pop(key, None)
            self.grant_sink(now, client_id, request_id, resource, mapped, validity)
        return on_grant

    def _sub_release(self, now, client_id, request_id) -> None:
        self._close_request((client_id, request_id))
        self.release_sink(now, client_id, request_id)

    def _sub_fail(self, now, client_id, request_id) -> None:
        self._close_request((client_id, request_id))
        self.fail_sink(now, client_id, request_id)

    def _close_request(self, key: tuple) -> None:
        req = self.requests.pop(key, None)
        if req is None:
            return
        resource = req["resource"]
        open_set = self.open_by_res.get(resource)
        if open_set is not None:
            open_set.discard(key)
        self.occ_attempts.pop(key, None)
        if req.get("occ_live"):
            self.occ_open[resource] = max(0, self.occ_open.get(resource, 0) - 1)
        if resource in self.transition:
            self._maybe_activate(resource)

    # ------------------------------------------------------- optimistic commits

    def _occ_manager(self, resource: int) -> int:
        return self.occ_ring.route(resource)

    def _occ_read(self, node: int, client_id: int, request_id: int, resource: int) -> None:
        self.mux.send(node, self._occ_manager(resource), self.OCC_CHANNEL,
                      ("read", client_id, request_id, resource, node))

    def _occ_commit(self, node: int, client_id: int, request_id: int, resource: int,
                    expected: int) -> None:
        self.mux.send(node, self._occ_manager(resource), self.OCC_CHANNEL,
                      ("commit", client_id, request_id, resource, expected, node))

    def _handle_read(self, now: int, node: int, msg) -> None:
        _, client_id, request_id, resource, client_node = msg
        version = self.kernel.durable(node).get(("ver", resource), 0)
        self.mux.send(node, client_node, self.OCC_CHANNEL,
                      ("ver", client_id, request_id, resource, version))

    def _handle_commit(self, now: int, node: int, msg) -> None:
        _, client_id, request_id, resource, expected, client_node = msg
        key = (client_id, request_id)
        decided = self.occ_decided.get(key)
        if decided is not None and decided["expected"] == expected:
            ok, version = decided["ok"], decided["version"]
        else:
            store = self.kernel.durable(node)
            current = store.get(("ver", resource), 0)
            ok = current == expected
            if ok:
                version = current + 1
                store[("ver", resource)] = version
                self.committed_versions.setdefault(resource, []).append(version)
            else:
                version = current
            self.occ_decided[key] = {"expected": expected, "ok": ok, "version": version}
        self.mux.send(node, client_node, self.OCC_CHANNEL,
                      ("cack", client_id, request_id, resource, ok, version, expected))

    def _handle_version(self, now: int, node: int, msg) -> None:
        _, client_id, request_id, resource, version = msg
        req = self.requests.get((client_id, request_id))
        if req is None or req["cls"] is not ResourceClass.OPTIMISTIC:
            return
        req["granted"] = True
        if not req.get("occ_live"):
            req["occ_live"] = True
            # Few concurrent readers means little conflict pressure; sample
            # the crowd size so the classifier keeps seeing contention
            # evidence for resources in versioned mode.
            crowd = self.occ_open.get(resource, 0)
            self.occ_open[resource] = crowd + 1
            self.access_stats.record_queue_at_grant(now, resource, crowd)
        self.grant_sink(now, client_id, request_id, resource, version, None, occ=True)

    def _handle_commit_ack(self, now: int, node: int, msg) -> None:
        _, client_id, request_id, resource, ok, version, expected = msg
        key = (client_id, request_id)
        req = self.requests.get(key)
        if req is None:
            return
        if not ok and req.get("aborted_on") == expected:
            return  # duplicate abort reply from a release retry
        if req.get("occ_live"):
            req["occ_live"] = False
            self.occ_open[resource] = max(0, self.occ_open.get(resource, 0) - 1)
        if ok:
            self.stats["occ_commits"] += 1
            self._close_request(key)
            self.release_sink(now, client_id, request_id)
            return
        req["aborted_on"] = expected
        attempts = self.occ_attempts.get(key, 0) + 1
        self.stats["occ_aborts"] += 1
        self.occ_attempts[key] = attempts
        if attempts >= self.cfg.occ_max_attempts:
            self.stats["occ_failures"] += 1
            self._close_request(key)
            self.fail_sink(now, client_id, request_id)
            return
        backoff = min(self.cfg.occ_backoff_cap_us,
                      self.cfg.occ_backoff_base_us * (2 ** (attempts - 1)))
        self.mux.set_timer(node, backoff, self.OCC_CHANNEL,
                           ("occ_retry", client_id, request_id, attempts,
                            self.kernel.crash_count[node]))

    # ----------------------------------------------------------------- wiring

    def _make_on_message(self, node: int):
        def on_message(now: int, src: int, msg) -> None:
            kind = msg[0]
            if kind == "read":
                self._handle_read(now, node, msg)
            elif kind == "commit":
                self._handle_commit(now, node, msg)
            elif kind == "ver":
                self._handle_version(now, node, msg)
            elif kind == "cack":
                self._handle_commit_ack(now, node, msg)
        return on_message

    def _make_on_timer(self, node: int):
        def on_timer(now: int, tag) -> None:
            kind = tag[0]
            if kind == "epoch":
                if tag[1] != self.kernel.crash_count[node]:
                    return
                self._epoch_tick(now)
                self.mux.set_timer(node, self.cfg.epoch_us, self.OCC_CHANNEL, tag)
            elif kind == "occ_retry":
                _, client_id, request_id, attempt, epoch = tag
                if epoch != self.kernel.crash_count[node]:
                    return
                key = (client_id, request_id)
                req = self.requests.get(key)
                if req is not None and self.occ_attempts.get(key) == attempt:
                    self._occ_read(node, client_id, request_id, req["resource"])
        return on_timer

    def _on_crash(self, node: int) -> None:
        for key, req in list(self.requests.items()):
            if req["node"] == node:
                self._close_request(key)

    def _on_recover(self, node: int) -> None:
        if node == 0:
            self.mux.set_timer(node, self.cfg.epoch_us, self.OCC_CHANNEL,
                               ("epoch", self.kernel.crash_count[node]))
