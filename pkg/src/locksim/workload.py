"""Closed-loop clients.

Each client owns at most one outstanding operation: pick a resource, acquire
(retrying on timeout with exponential backoff and the same request_id up to
an attempt cap, then abandon), hold for the configured time, release, then
immediately start the next cycle.
A completed cycle reports its acquire latency at the instant the client is
free to move on; an abandoned one reports a failure.

Resource choice: with probability c the single designated hot resource
(id 0), otherwise uniform over the remaining R-1, where with probability
lambda the uniform draw is redirected to the client's home-region pool.

Lease grants carry a validity deadline. A holder whose hold outlives the
current validity re-checks the engine (renewals extend it) and, if the lease
really lapsed, exits its critical section early. Grants that arrive for an
already-abandoned request are released politely so the resource is not
wedged, but count nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

# Client phases.
IDLE = 0
WAITING = 1
IN_CS = 2
RELEASING = 3
DEAD = 4


def _backoff(attempt: int) -> int:
    """Exponential retry backoff multiplier, capped so a queued request still
    re-asserts itself every few base timeouts instead of going silent."""
    return min(1 << (attempt - 1), 16)


def choose_resource(rng, contention: float, resources: int, home_pool=None, locality: float = 0.0) -> int:
    if resources == 1:
        return 0
    if contention > 0 and rng.random() < contention:
        return 0
    if home_pool and locality > 0 and rng.random() < locality:
        return home_pool[rng.randrange(len(home_pool))]
    return 1 + rng.randrange(resources - 1)


@dataclass
class WorkloadConfig:
    clients: int
    resources: int
    contention: float
    locality: float = 0.0
    hold_us: int = 1000
    retry_cap: int = 60
    start_spread_us: int = 1000
    fluctuation: tuple = ()  # ((t_us, contention), ...) piecewise-constant


@dataclass
class _Client:
    client_id: int
    node: int
    rng: object
    phase: int = IDLE
    request_seq: int = 0
    request_id: int = 0
    resource: int = -1
    t_start: int = 0
    t_grant: int = 0
    attempts: int = 0
    token: int = 0
    validity: int | None = None
    in_checker: bool = False
    stats_ops: int = 0


class Workload:
    CHANNEL = "wl"

    def __init__(self, kernel, mux, engine, collector, metrics, cfg: WorkloadConfig) -> None:
        self.kernel = kernel
        self.mux = mux
        self.engine = engine
        self.collector = collector
        self.metrics = metrics
        self.cfg = cfg
        self.contention = cfg.contention
        topo = kernel.topology
        n = topo.num_nodes
        pools = {
            region: [r for r in range(1, cfg.resources) if r % topo.num_regions == region]
            for region in range(topo.num_regions)
        }
        self.clients = []
        for cid in range(cfg.clients):
            node = cid % n
            self.clients.append(
                _Client(
                    client_id=cid,
                    node=node,
                    rng=kernel.stream(f"wl/{cid}"),
                )
            )
        self._pools = pools
        engine.grant_sink = self._on_grant
        engine.release_sink = self._on_release_done
        engine.fail_sink = self._on_engine_fail

    # -- lifecycle -----------------------------------------------------------

    def install(self) -> None:
        by_node: dict[int, list[_Client]] = {}
        for c in self.clients:
            by_node.setdefault(c.node, []).append(c)
        self._by_node = by_node
        for node in range(self.kernel.topology.num_nodes):
            self.mux.register(node, self.CHANNEL, None, self._make_timer(node))
        self.kernel.add_crash_listener(self._on_node_crash)
        self.kernel.add_recover_listener(self._on_node_recover)
        for t_us, level in self.cfg.fluctuation:
            self.kernel.at(t_us, lambda k, level=level: setattr(self, "contention", level))
        for c in self.clients:
            delay = c.rng.randint(0, self.cfg.start_spread_us) if self.cfg.start_spread_us else 0
            self.mux.set_timer(c.node, delay, self.CHANNEL, ("start", c.client_id, 0, self._epoch(c)))

    def _epoch(self, c: _Client) -> int:
        return self.kernel.crash_count[c.node]

    # -- operation flow --------------------------------------------------------

    def _start_op(self, now: int, c: _Client) -> None:
        pool = self._pools.get(self.kernel.topology.region_of(c.node))
        c.resource = choose_resource(c.rng, self.contention, self.cfg.resources, pool, self.cfg.locality)
        c.request_seq += 1
        c.request_id = c.request_seq
        c.phase = WAITING
        c.attempts = 1
        c.t_start = now
        c.validity = None
        c.in_checker = False
        self.collector.request_started(c.client_id, c.request_id, c.resource, now)
        self.engine.submit_acquire(c.node, c.client_id, c.request_id, c.resource)
        self._arm_retry(c)

    def _arm_retry(self, c: _Client) -> None:
        timeout = self.engine.timeout_hint(c.node, c.resource) * _backoff(c.attempts)
        self.mux.set_timer(c.node, timeout, self.CHANNEL,
                           ("retry", c.client_id, (c.request_id, c.attempts), self._epoch(c)))

    def _on_grant(self, now, client_id, request_id, resource, token, validity, occ=False) -> None:
        c = self.clients[client_id]
        if c.phase == DEAD or c.request_id != request_id:
            # Abandoned or superseded request: release politely, record nothing.
            self.engine.submit_release(c.node, client_id, request_id, resource, token)
            return
        if c.phase == WAITING:
            c.t_grant = now
            self.collector.request_resolved(client_id, request_id, now)
        elif not (occ and c.phase == RELEASING):
            return  # duplicate grant while holding: ignore
        c.phase = IN_CS
        c.token = token
        c.validity = validity
        if not occ:
            c.in_checker = True
            self.collector.cs_enter(resource, token, client_id, now, validity)
        wake = self.cfg.hold_us
        if validity is not None and validity - now < wake:
            wake = max(0, validity - now)
        self.mux.set_timer(c.node, wake, self.CHANNEL,
                           ("hold", c.client_id, (c.request_id, now + self.cfg.hold_us), self._epoch(c)))

    def _hold_wake(self, now: int, c: _Client, planned_exit: int) -> None:
        if now < planned_exit:
            # Woke early because validity would lapse; renewals may have
            # extended it while we slept.
            validity = self.engine.validity_of(c.client_id, c.request_id)
            if validity is not None and validity > now:
                wake = min(planned_exit, validity) - now
                self.mux.set_timer(c.node, wake, self.CHANNEL,
                                   ("hold", c.client_id, (c.request_id, planned_exit), self._epoch(c)))
                return
        self._exit_cs(now, c)

    def _exit_cs(self, now: int, c: _Client) -> None:
        c.phase = RELEASING
        c.attempts = 1
        self.engine.submit_release(c.node, c.client_id, c.request_id, c.resource, c.token)
        self._arm_release_retry(c)

    def _arm_release_retry(self, c: _Client) -> None:
        timeout = self.engine.timeout_hint(c.node, c.resource) * _backoff(c.attempts)
        self.mux.set_timer(c.node, timeout, self.CHANNEL,
                           ("rel_retry", c.client_id, (c.request_id, c.attempts), self._epoch(c)))

    def _on_release_done(self, now, client_id, request_id) -> None:
        c = self.clients[client_id]
        if c.phase != RELEASING or c.request_id != request_id:
            return
        self._complete(now, c)

    def _complete(self, now: int, c: _Client) -> None:
        c.stats_ops += 1
        self.metrics.record(now, c.t_grant - c.t_start)
        c.phase = IDLE
        self._start_op(now, c)

    def _on_engine_fail(self, now, client_id, request_id) -> None:
        c = self.clients[client_id]
        if c.phase in (WAITING, IN_CS, RELEASING) and c.request_id == request_id:
            self.collector.request_resolved(client_id, request_id, now)
            self.metrics.record_failure(now)
            c.phase = IDLE
            self._start_op(now, c)

    # -- timers ------------------------------------------------------------------

    def _make_timer(self, node: int):
        def on_timer(now: int, tag) -> None:
            kind, client_id, detail, epoch = tag
            c = self.clients[client_id]
            if epoch != self.kernel.crash_count[node] or c.phase == DEAD:
                return
            if kind == "start":
                if c.phase == IDLE:
                    self._start_op(now, c)
            elif kind == "retry":
                request_id, attempt = detail
                if c.phase == WAITING and c.request_id == request_id and c.attempts == attempt:
                    if c.attempts >= self.cfg.retry_cap:
                        self._abandon(now, c)
                    else:
                        c.attempts += 1
                        self.metrics.record_retry()
                        self.engine.submit_acquire(c.node, c.client_id, c.request_id, c.resource)
                        self._arm_retry(c)
            elif kind == "rel_retry":
                request_id, attempt = detail
                if c.phase == RELEASING and c.request_id == request_id and c.attempts == attempt:
                    if c.attempts >= self.cfg.retry_cap:
                        # Give up waiting for the ack; the cycle still counts.
                        self._complete(now, c)
                    else:
                        c.attempts += 1
                        self.metrics.record_retry()
                        self.engine.submit_release(c.node, c.client_id, c.request_id, c.resource, c.token)
                        self._arm_release_retry(c)
            elif kind == "hold":
                request_id, planned_exit = detail
                if c.phase == IN_CS and c.request_id == request_id:
                    self._hold_wake(now, c, planned_exit)

        return on_timer

    def _abandon(self, now: int, c: _Client) -> None:
        self.collector.request_resolved(c.client_id, c.request_id, now)
        self.metrics.record_failure(now)
        c.phase = IDLE
        self._start_op(now, c)

    # -- faults ---------------------------------------------------------------------

    def _on_node_crash(self, node: int) -> None:
        now = self.kernel.now
        for c in self._by_node.get(node, []):
            if c.phase == IN_CS and c.in_checker:
                self.collector.holder_crash(c.resource, c.token, now)
            if c.phase in (WAITING, RELEASING):
                self.collector.request_resolved(c.client_id, c.request_id, now)
            c.phase = DEAD

    def _on_node_recover(self, node: int) -> None:
        for c in self._by_node.get(node, []):
            c.phase = IDLE
            self.mux.set_timer(node, 0, self.CHANNEL, ("start", c.client_id, 0, self._epoch(c)))
