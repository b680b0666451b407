"""Discrete-event simulation kernel.

Virtual time is an integer microsecond counter. Events are dispatched in
(fire_at, seq) order, where seq is the global insertion sequence, so runs with
the same configuration and seed replay the exact same schedule. All randomness
flows through named random streams derived from the run seed.

The kernel models:
  * point-to-point messages with per-pair RTT and symmetric uniform jitter,
  * fail-stop node crashes and recoveries (volatile state is the protocol's
    problem; the kernel only tracks liveness and durable key-value stores),
  * network partitions as node-group splits active over an interval,
  * per-node constant clock offsets within a configured skew bound,
  * an optional per-message service time: each received message occupies the
    destination node for ``node_proc_us`` microseconds (single FIFO server),
    which is what lets a busy coordinator actually queue.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field

MICROS_PER_SEC = 1_000_000

# Event kinds. Plain ints keep the hot loop cheap.
_DELIVER = 0  # message arrived at dst, may need service-time queueing
_HANDLE = 1   # message service complete, run the node's handler
_TIMER = 2    # node-local timer
_CONTROL = 3  # kernel-level callback (faults, schedule hooks); ignores node state


class SimTimeError(RuntimeError):
    """Scheduling into the past or querying a down node's clock."""


@dataclass(frozen=True)
class Topology:
    """Static cluster shape: node-to-region map and RTT structure.

    ``inter_rtt_us[a][b]`` is the RTT between regions a and b; the diagonal
    must equal ``intra_rtt_us``. The matrix must be symmetric and no
    cross-region RTT may undercut the intra-region one.
    """

    node_region: tuple[int, ...]
    intra_rtt_us: int
    inter_rtt_us: tuple[tuple[int, ...], ...]
    jitter_frac: float = 0.0
    skew_bound_us: int = 0

    def __post_init__(self) -> None:
        if not self.node_region:
            raise ValueError("topology needs at least one node")
        nr = self.num_regions
        if any(r < 0 or r >= nr for r in self.node_region):
            raise ValueError("node_region references a missing region")
        m = self.inter_rtt_us
        if len(m) != nr or any(len(row) != nr for row in m):
            raise ValueError("inter_rtt_us must be a regions x regions matrix")
        for a in range(nr):
            if m[a][a] != self.intra_rtt_us:
                raise ValueError("inter_rtt_us diagonal must equal intra_rtt_us")
            for b in range(nr):
                if m[a][b] != m[b][a]:
                    raise ValueError("inter_rtt_us must be symmetric")
                if a != b and m[a][b] < self.intra_rtt_us:
                    raise ValueError("inter-region RTT below intra-region RTT")
        if not 0.0 <= self.jitter_frac < 1.0:
            raise ValueError("jitter_frac must be in [0, 1)")
        if self.skew_bound_us < 0:
            raise ValueError("skew_bound_us must be >= 0")
        if self.intra_rtt_us <= 0:
            raise ValueError("intra_rtt_us must be positive")

    @property
    def num_nodes(self) -> int:
        return len(self.node_region)

    @property
    def num_regions(self) -> int:
        return max(self.node_region) + 1

    def region_of(self, node: int) -> int:
        return self.node_region[node]

    def nodes_in_region(self, region: int) -> list[int]:
        return [n for n, r in enumerate(self.node_region) if r == region]

    def rtt_us(self, a: int, b: int) -> int:
        if a == b:
            return 0
        return self.inter_rtt_us[self.node_region[a]][self.node_region[b]]

    def max_one_way_us(self) -> int:
        """Worst-case one-way delay including jitter, for validity guards."""
        worst = max(max(row) for row in self.inter_rtt_us)
        return int((worst / 2) * (1 + self.jitter_frac))


def uniform_regions(num_nodes: int, num_regions: int) -> tuple[int, ...]:
    """Round-robin node-to-region assignment used by every preset."""
    return tuple(i % num_regions for i in range(num_nodes))


@dataclass
class _Partition:
    group_of: dict[int, int]
    end_us: int

    def separates(self, a: int, b: int) -> bool:
        return self.group_of.get(a, -1) != self.group_of.get(b, -1)


class Kernel:
    """Event loop, network, clocks and fault machinery for one run."""

    def __init__(
        self,
        topology: Topology,
        seed: int,
        node_proc_us: int = 0,
        adversarial_clocks: bool = False,
        collect_digest: bool = False,
    ) -> None:
        self.topology = topology
        self.seed = seed
        self.node_proc_us = node_proc_us
        self.now = 0
        self._seq = 0
        self._heap: list[tuple] = []
        n = topology.num_nodes
        self.up = [True] * n
        self.crash_count = [0] * n
        self.msg_received = [0] * n
        self._busy_until = [0] * n
        self._durable: list[dict] = [dict() for _ in range(n)]
        self._msg_handler: list = [None] * n
        self._timer_handler: list = [None] * n
        self._crash_listeners: list = []
        self._recover_listeners: list = []
        self._partitions: list[_Partition] = []
        self._net = self.stream("net")
        self._clock_rng = self.stream("clocks")
        self._adversarial_clocks = adversarial_clocks
        self.clock_offset = [self._draw_offset(i) for i in range(n)]
        self._digest = hashlib.sha256() if collect_digest else None
        self.dispatched = 0

    # -- random streams ----------------------------------------------------

    def stream(self, name: str) -> random.Random:
        """Named child RNG; derivation is stable across platforms."""
        return random.Random(f"{self.seed}/{name}")

    def _draw_offset(self, node: int) -> int:
        bound = self.topology.skew_bound_us
        if bound == 0:
            return 0
        if self._adversarial_clocks:
            # Pin alternating nodes at the opposite extremes of the bound.
            return bound if node % 2 == 0 else -bound
        return self._clock_rng.randint(-bound, bound)

    # -- clocks ------------------------------------------------------------

    def node_clock(self, node: int) -> int:
        if not self.up[node]:
            raise SimTimeError(f"clock query on down node {node}")
        return self.now + self.clock_offset[node]

    # -- scheduling primitives ----------------------------------------------

    def _push(self, fire_at: int, kind: int, a, b) -> None:
        if fire_at < self.now:
            raise SimTimeError(f"scheduling at {fire_at} before now={self.now}")
        heapq.heappush(self._heap, (fire_at, self._seq, kind, a, b))
        self._seq += 1

    def at(self, fire_at: int, fn) -> None:
        """Run ``fn(kernel)`` at an absolute time, regardless of node state."""
        self._push(fire_at, _CONTROL, 0, fn)

    def after(self, delay_us: int, fn) -> None:
        self.at(self.now + delay_us, fn)

    def set_timer(self, node: int, delay_us: int, tag) -> None:
        """Node-local timer; silently dropped if the node is down when it fires."""
        self._push(self.now + delay_us, _TIMER, node, tag)

    # -- node wiring ---------------------------------------------------------

    def bind(self, node: int, on_message, on_timer) -> None:
        self._msg_handler[node] = on_message
        self._timer_handler[node] = on_timer

    def durable(self, node: int) -> dict:
        """Per-node store that survives crash/recovery (explicit opt-in)."""
        return self._durable[node]

    def add_crash_listener(self, fn) -> None:
        self._crash_listeners.append(fn)

    def add_recover_listener(self, fn) -> None:
        self._recover_listeners.append(fn)

    # -- network -------------------------------------------------------------

    def partitioned(self, a: int, b: int) -> bool:
        return any(p.separates(a, b) for p in self._partitions)

    def one_way_delay_us(self, src: int, dst: int) -> int:
        if src == dst:
            return 0
        rtt = self.topology.rtt_us(src, dst)
        j = self.topology.jitter_frac
        if j:
            rtt = rtt * (1.0 + self._net.uniform(-j, j))
        return int(rtt / 2)

    def send(self, src: int, dst: int, msg) -> None:
        """Fire-and-forget message.

        Partition membership is evaluated at the send instant; destination
        liveness at the delivery instant. A blocked or dead path drops the
        message silently -- those are the only loss modes.
        """
        if not self.up[src]:
            raise SimTimeError(f"send from down node {src}")
        if src != dst and self.partitioned(src, dst):
            return
        self._push(self.now + self.one_way_delay_us(src, dst), _DELIVER, dst, (src, msg))

    # -- faults ---------------------------------------------------------------

    def schedule_crash(self, node: int, at_us: int) -> None:
        self.at(at_us, lambda k, n=node: k._crash(n))

    def schedule_recover(self, node: int, at_us: int) -> None:
        self.at(at_us, lambda k, n=node: k._recover(n))

    def schedule_partition(self, groups: list[list[int]], start_us: int, end_us: int) -> None:
        if end_us <= start_us:
            raise ValueError("partition must end after it starts")
        group_of = {n: i for i, g in enumerate(groups) for n in g}

        def begin(k: "Kernel") -> None:
            part = _Partition(group_of, end_us)
            k._partitions.append(part)
            k.at(end_us, lambda k2, p=part: k2._partitions.remove(p))

        self.at(start_us, begin)

    def _crash(self, node: int) -> None:
        if not self.up[node]:
            raise SimTimeError(f"crash of already-down node {node}")
        self.up[node] = False
        self.crash_count[node] += 1
        for fn in self._crash_listeners:
            fn(node)

    def _recover(self, node: int) -> None:
        if self.up[node]:
            raise SimTimeError(f"recover of already-up node {node}")
        self.up[node] = True
        self.clock_offset[node] = self._draw_offset(node)
        self._busy_until[node] = self.now
        for fn in self._recover_listeners:
            fn(node)

    # -- main loop -------------------------------------------------------------

    def run(self, until_us: int) -> None:
        heap = self._heap
        up = self.up
        proc = self.node_proc_us
        busy = self._busy_until
        digest = self._digest
        while heap:
            fire_at, seq, kind, a, b = heap[0]
            if fire_at > until_us:
                break
            heapq.heappop(heap)
            self.now = fire_at
            self.dispatched += 1
            if digest is not None:
                digest.update(repr((fire_at, seq, kind, a, b.__class__.__name__ if kind == _CONTROL else b)).encode())
            if kind == _DELIVER:
                if not up[a]:
                    continue
                self.msg_received[a] += 1
                if proc == 0 and busy[a] <= fire_at:
                    src, msg = b
                    self._msg_handler[a](fire_at, src, msg)
                else:
                    start = busy[a] if busy[a] > fire_at else fire_at
                    done = start + proc
                    busy[a] = done
                    self._push(done, _HANDLE, a, b)
            elif kind == _HANDLE:
                if not up[a]:
                    continue
                src, msg = b
                self._msg_handler[a](fire_at, src, msg)
            elif kind == _TIMER:
                if not up[a]:
                    continue
                self._timer_handler[a](fire_at, b)
            else:
                b(self)
        if self.now < until_us:
            self.now = until_us

    def digest_hex(self) -> str:
        if self._digest is None:
            raise RuntimeError("kernel was created without collect_digest")
        return self._digest.hexdigest()
