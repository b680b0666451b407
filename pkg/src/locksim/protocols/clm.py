"""Centralized lock manager.

One fixed coordinator (node 0) owns the whole lock table: per-resource holder,
fencing token, and a FIFO wait queue. Grant and release records are durably
logged before the coordinator replies; the log is flushed in groups, so a
record arriving while a flush is in progress waits for the next one. Wait
queues are volatile: a coordinator crash loses them and waiting clients
recover by retrying. Every other node sends the coordinator a periodic
session heartbeat, so coordinator inbound load grows with cluster size even
when the offered lock traffic does not. A node silent past the session
timeout has its clients' locks revoked and its queued requests skipped,
which is what frees locks held by crashed holders.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from ..core import issue_token
from .base import LockEngine, NodeMux

COORDINATOR = 0


@dataclass
class CLMConfig:
    log_flush_us: int = 1500
    heartbeat_us: int = 50_000
    # A node silent for this long has its clients' locks revoked; None means
    # six heartbeat periods. Must comfortably exceed the longest hold time,
    # or the coordinator would re-grant a lock its holder is still using.
    session_timeout_us: int | None = None


class CLMEngine(LockEngine):
    name = "clm"

    def __init__(self, kernel, mux: NodeMux, collector, cfg: CLMConfig, channel: str = "clm") -> None:
        super().__init__(kernel, mux, collector)
        self.cfg = cfg
        self.channel = channel
        self.table: dict[int, dict] = {}
        self.queues: dict[int, deque] = {}
        self._pending: list[tuple] = []
        self._flushing = False
        self._last_hb: dict[int, int] = {}
        self.stats = {"stale_releases": 0, "heartbeats": 0, "grants": 0, "revocations": 0}

    def _session_timeout_us(self) -> int:
        if self.cfg.session_timeout_us is not None:
            return self.cfg.session_timeout_us
        return 6 * self.cfg.heartbeat_us

    # -- wiring ---------------------------------------------------------------

    def install(self) -> None:
        n = self.kernel.topology.num_nodes
        for node in range(n):
            if node == COORDINATOR:
                self.mux.register(node, self.channel, self._coord_message, self._coord_timer)
            else:
                self.mux.register(node, self.channel, self._client_message, self._make_client_timer(node))
        self.kernel.add_crash_listener(self._on_crash)
        self.kernel.add_recover_listener(self._on_recover)
        if self.cfg.heartbeat_us > 0:
            for node in range(1, n):
                self._last_hb[node] = 0
                self.mux.set_timer(node, self.cfg.heartbeat_us, self.channel, ("hb", 0))
            self.mux.set_timer(COORDINATOR, self.cfg.heartbeat_us, self.channel, ("sess", 0))

    def _log(self) -> list:
        return self.kernel.durable(COORDINATOR).setdefault("clm_log", [])

    def _counters(self) -> dict:
        return self.kernel.durable(COORDINATOR)

    # -- client-side stub -------------------------------------------------------

    def timeout_hint(self, node: int, resource: int) -> int:
        return self._timeout_from_rtt(self.kernel.topology.rtt_us(node, COORDINATOR))

    def submit_acquire(self, node: int, client_id: int, request_id: int, resource: int) -> None:
        self.mux.send(node, COORDINATOR, self.channel, ("acq", client_id, request_id, resource, node))

    def submit_release(self, node: int, client_id: int, request_id: int, resource: int, token: int) -> None:
        # The holder stops using the resource at submit time; record that as
        # the section's true end so session cleanup cannot misdate it.
        self.collector.release_received(resource, token, self.kernel.now)
        self.mux.send(node, COORDINATOR, self.channel, ("rel", client_id, request_id, resource, token, node))

    def _client_message(self, now: int, src: int, msg) -> None:
        kind = msg[0]
        if kind == "grant":
            _, client_id, request_id, resource, token = msg
            self.grant_sink(now, client_id, request_id, resource, token, None)
        elif kind == "rel_ack":
            _, client_id, request_id = msg
            self.release_sink(now, client_id, request_id)

    def _make_client_timer(self, node: int):
        def on_timer(now: int, tag) -> None:
            # Tag carries the crash epoch so a timer chain from before a crash
            # dies instead of doubling up with the chain started at recovery.
            if tag[0] == "hb" and tag[1] == self.kernel.crash_count[node]:
                self.mux.send(node, COORDINATOR, self.channel, ("hb", node))
                self.mux.set_timer(node, self.cfg.heartbeat_us, self.channel, tag)

        return on_timer

    # -- coordinator ---------------------------------------------------------------

    def _coord_message(self, now: int, src: int, msg) -> None:
        # Any traffic from a node proves its session alive, not just heartbeats.
        self._last_hb[src] = now
        kind = msg[0]
        if kind == "acq":
            self._handle_acquire(now, msg)
        elif kind == "rel":
            self._handle_release(now, msg)
        elif kind == "hb":
            self.stats["heartbeats"] += 1
        else:
            # The coordinator node hosts clients too; grant and ack replies
            # addressed to them land here.
            self._client_message(now, src, msg)

    def _entry(self, resource: int) -> dict:
        e = self.table.get(resource)
        if e is None:
            e = {"holder": None, "token": 0, "flushed": False, "node": None}
            self.table[resource] = e
        return e

    def _handle_acquire(self, now: int, msg) -> None:
        _, client_id, request_id, resource, client_node = msg
        e = self._entry(resource)
        who = (client_id, request_id)
        if e["holder"] == who:
            if e["flushed"]:
                self.mux.send(COORDINATOR, client_node, self.channel,
                              ("grant", client_id, request_id, resource, e["token"]))
            return
        q = self.queues.get(resource)
        if e["holder"] is not None or q:
            # Held, or a handoff to a queued waiter is mid-flush: wait in line.
            if q is None:
                q = deque()
                self.queues[resource] = q
            if all(w[:2] != who for w in q):
                q.append((client_id, request_id, client_node))
            return
        self._grant(resource, client_id, request_id, client_node)

    def _grant(self, resource: int, client_id: int, request_id: int, client_node: int) -> None:
        e = self._entry(resource)
        self.stats["grants"] += 1
        token = issue_token(self._counters(), resource)
        e["holder"] = (client_id, request_id)
        e["token"] = token
        e["flushed"] = False
        e["node"] = client_node
        record = ("grant", resource, client_id, request_id, token, client_node)
        reply = (client_node, ("grant", client_id, request_id, resource, token))
        self._append_durable(record, [reply], on_flush=lambda e=e: e.__setitem__("flushed", True))

    def _handle_release(self, now: int, msg) -> None:
        _, client_id, request_id, resource, token, client_node = msg
        e = self._entry(resource)
        ack = (client_node, ("rel_ack", client_id, request_id))
        if e["holder"] is None or e["token"] != token:
            # Stale: no state change, but the releaser still needs its ack.
            self.stats["stale_releases"] += 1
            self.mux.send(COORDINATOR, client_node, self.channel, ack[1])
            return
        self.collector.release_received(resource, token, now)
        e["holder"] = None
        e["node"] = None
        # The successor grant causally depends on this release record, so it
        # may only be logged in a later flush; independent records still batch.
        self._append_durable(("rel", resource, token), [ack],
                             on_flush=lambda resource=resource: self._serve(resource))

    def _sweep_sessions(self, now: int) -> None:
        cutoff = now - self._session_timeout_us()
        for resource, e in self.table.items():
            node = e["node"]
            if (e["holder"] is not None and node is not None and node != COORDINATOR
                    and self._last_hb.get(node, 0) < cutoff):
                self.stats["revocations"] += 1
                e["holder"] = None
                e["node"] = None
                self._append_durable(("rev", resource, e["token"]), [],
                                     on_flush=lambda resource=resource: self._serve(resource))

    def _serve(self, resource: int) -> None:
        e = self._entry(resource)
        if e["holder"] is not None:
            return
        q = self.queues.get(resource)
        cutoff = self.kernel.now - self._session_timeout_us()
        while q:
            nxt_client, nxt_request, nxt_node = q.popleft()
            if (self.cfg.heartbeat_us > 0 and nxt_node != COORDINATOR
                    and self._last_hb.get(nxt_node, 0) < cutoff):
                continue  # waiter's node went silent; granting would wedge the lock
            self._grant(resource, nxt_client, nxt_request, nxt_node)
            return

    # -- durable group commit ---------------------------------------------------------

    def _append_durable(self, record: tuple, replies: list, on_flush=None) -> None:
        self._pending.append((record, replies, on_flush))
        if not self._flushing:
            self._flushing = True
            self.mux.set_timer(COORDINATOR, self.cfg.log_flush_us, self.channel,
                               ("flush", self.kernel.crash_count[COORDINATOR]))

    def _coord_timer(self, now: int, tag) -> None:
        if tag[1] != self.kernel.crash_count[COORDINATOR]:
            return
        if tag[0] == "sess":
            self._sweep_sessions(now)
            self.mux.set_timer(COORDINATOR, self.cfg.heartbeat_us, self.channel, tag)
            return
        if tag[0] != "flush":
            return
        batch, self._pending = self._pending, []
        log = self._log()
        for record, replies, on_flush in batch:
            log.append(record)
            if on_flush is not None:
                on_flush()
            for dst, reply in replies:
                self.mux.send(COORDINATOR, dst, self.channel, reply)
        if self._pending:
            self.mux.set_timer(COORDINATOR, self.cfg.log_flush_us, self.channel, tag)
        else:
            self._flushing = False

    # -- faults -----------------------------------------------------------------------

    def _on_crash(self, node: int) -> None:
        if node == COORDINATOR:
            self.table = {}
            self.queues = {}
            self._pending = []
            self._flushing = False

    def _on_recover(self, node: int) -> None:
        if node == COORDINATOR:
            for record in self._log():
                if record[0] == "grant":
                    _, resource, client_id, request_id, token, client_node = record
                    e = self._entry(resource)
                    e["holder"] = (client_id, request_id)
                    e["token"] = token
                    e["flushed"] = True
                    e["node"] = client_node
                else:
                    _, resource, token = record
                    e = self._entry(resource)
                    if e["token"] == token:
                        e["holder"] = None
                        e["node"] = None
            if self.cfg.heartbeat_us > 0:
                # Every session gets a fresh grace period: heartbeats sent into
                # the dead coordinator were lost, which proves nothing.
                for peer in range(self.kernel.topology.num_nodes):
                    if peer != COORDINATOR:
                        self._last_hb[peer] = self.kernel.now
                self.mux.set_timer(COORDINATOR, self.cfg.heartbeat_us, self.channel,
                                   ("sess", self.kernel.crash_count[COORDINATOR]))
        elif self.cfg.heartbeat_us > 0:
            self.mux.set_timer(node, self.cfg.heartbeat_us, self.channel, ("hb", self.kernel.crash_count[node]))
