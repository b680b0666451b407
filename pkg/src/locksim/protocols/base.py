"""Engine contract and per-node message multiplexing.

A run hosts one or more engines (the hybrid mode runs three side by side)
plus the workload, all sharing the same nodes. The kernel allows a single
handler pair per node, so every component talks through a NodeMux channel
instead of binding nodes directly.
"""

from __future__ import annotations


class NodeMux:
    """Dispatches node messages and timers to named channels."""

    def __init__(self, kernel) -> None:
        self.kernel = kernel
        n = kernel.topology.num_nodes
        self._msg: list[dict] = [dict() for _ in range(n)]
        self._tmr: list[dict] = [dict() for _ in range(n)]
        for node in range(n):
            kernel.bind(node, self._make_on_message(node), self._make_on_timer(node))

    def _make_on_message(self, node: int):
        table = self._msg[node]

        def on_message(now: int, src: int, wrapped) -> None:
            channel, msg = wrapped
            handler = table.get(channel)
            if handler is not None:
                handler(now, src, msg)

        return on_message

    def _make_on_timer(self, node: int):
        table = self._tmr[node]

        def on_timer(now: int, wrapped) -> None:
            channel, tag = wrapped
            handler = table.get(channel)
            if handler is not None:
                handler(now, tag)

        return on_timer

    def register(self, node: int, channel: str, on_message=None, on_timer=None) -> None:
        if on_message is not None:
            self._msg[node][channel] = on_message
        if on_timer is not None:
            self._tmr[node][channel] = on_timer

    def send(self, src: int, dst: int, channel: str, msg) -> None:
        self.kernel.send(src, dst, (channel, msg))

    def set_timer(self, node: int, delay_us: int, channel: str, tag) -> None:
        self.kernel.set_timer(node, delay_us, (channel, tag))


class LockEngine:
    """What the workload sees of a protocol.

    The workload drives acquires and releases; the engine answers through
    sinks. ``grant_sink(now, client_id, request_id, resource, token,
    validity_until, occ=False)`` fires when the client-side stub receives a
    grant; ``validity_until`` is the true-time instant the holder must stop
    by, or None when the grant holds until release; ``occ=True`` marks an
    optimistic (non-exclusive) round that must not enter the safety trace.
    ``release_sink(now, client_id, request_id)`` fires when the client is
    free to move on: on release-ack for acknowledged protocols, at release
    send for fire-and-forget leases. ``fail_sink(now, client_id,
    request_id)`` reports an engine-side abort (e.g. optimistic commit giving
    up after its retry budget).

    Retries are the workload's job and reuse the same request_id; engines must
    make duplicate requests idempotent. ``validity_of`` lets a holder whose
    planned hold outlives the original lease observe renewals.
    """

    name = "base"

    def __init__(self, kernel, mux: NodeMux, collector) -> None:
        self.kernel = kernel
        self.mux = mux
        self.collector = collector
        self.grant_sink = None
        self.release_sink = None
        self.fail_sink = None

    def install(self) -> None:
        raise NotImplementedError

    def submit_acquire(self, node: int, client_id: int, request_id: int, resource: int) -> None:
        raise NotImplementedError

    def submit_release(self, node: int, client_id: int, request_id: int, resource: int, token: int) -> None:
        raise NotImplementedError

    def validity_of(self, client_id: int, request_id: int):
        """Current true-time validity end for a held grant, None if unlimited."""
        return None

    def timeout_hint(self, node: int, resource: int) -> int:
        """Client retry timeout for one attempt: four times the p99 round
        trip of the request path. Engines refine the path; the default uses
        the worst peer RTT from the requesting node."""
        topo = self.kernel.topology
        worst = max(topo.rtt_us(node, peer) for peer in range(topo.num_nodes))
        return self._timeout_from_rtt(worst)

    def _timeout_from_rtt(self, rtt_us: int) -> int:
        topo = self.kernel.topology
        rtt_us = max(rtt_us, topo.intra_rtt_us)
        return int(4 * rtt_us * (1 + 0.98 * topo.jitter_frac))
