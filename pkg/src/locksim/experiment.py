"""Single-run assembly: build a kernel, an engine, a workload, run, judge.

This is the layer everything above the protocols talks to: tests drive it
directly, the CLI wraps it with config parsing and CSV output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .checker import (
    Collector,
    Verdict,
    check_liveness,
    check_mutual_exclusion,
    check_version_monotonicity,
)
from .kernel import MICROS_PER_SEC, Kernel, Topology, uniform_regions
from .metrics import Metrics, Summary
from .protocols.base import NodeMux
from .protocols.clm import CLMConfig, CLMEngine
from .workload import Workload, WorkloadConfig


@dataclass
class OptConfig:
    """Optimization toggles and their tuning knobs for a run."""

    locality: bool = False          # migrate lease managers toward traffic
    adaptive_lease: bool = False    # contention/failure-driven lease durations
    hybrid: bool = False            # per-resource protocol selection
    critical_resources: tuple = ()  # always served by the replicated protocol
    half_life_us: int = 5_000_000   # traffic estimator half-life
    epoch_us: int = 10_000_000      # placement / reclassification cadence
    placement_share: float = 0.6    # region share that triggers a migration
    lease_base_us: int = 200_000
    lease_min_us: int = 20_000
    lease_max_us: int = 2_000_000
    hot_rate_per_s: float = 100.0   # optimistic-class access-rate threshold
    hot_queue: float = 1.0          # optimistic-class queue-depth threshold


@dataclass
class RunSpec:
    protocol: str
    num_nodes: int
    num_regions: int = 1
    intra_rtt_us: int = 1000
    inter_rtt_us: tuple = ()  # full matrix; empty means single region
    jitter_frac: float = 0.1
    skew_bound_us: int = 0
    adversarial_clocks: bool = False
    node_proc_us: int = 50
    resources: int = 64
    contention: float = 0.0
    locality: float = 0.0
    clients: int = 8
    hold_us: int = 1000
    retry_cap: int = 60
    duration_s: float = 60.0
    warmup_s: float = 10.0
    interval_s: float = 1.0
    fluctuation: tuple = ()
    faults: tuple = ()  # ("crash", node, t_us) | ("recover", node, t_us) | ("partition", groups, start_us, end_us)
    clm: CLMConfig = field(default_factory=CLMConfig)
    ldl: object = None
    pdl: object = None
    hl: object = None
    opt: object = None

    @property
    def duration_us(self) -> int:
        return int(self.duration_s * MICROS_PER_SEC)

    @property
    def warmup_us(self) -> int:
        return int(self.warmup_s * MICROS_PER_SEC)

    @property
    def interval_us(self) -> int:
        return int(self.interval_s * MICROS_PER_SEC)

    def topology(self) -> Topology:
        if self.num_regions == 1:
            matrix = ((self.intra_rtt_us,),)
        else:
            matrix = tuple(tuple(row) for row in self.inter_rtt_us)
        return Topology(
            node_region=uniform_regions(self.num_nodes, self.num_regions),
            intra_rtt_us=self.intra_rtt_us,
            inter_rtt_us=matrix,
            jitter_frac=self.jitter_frac,
            skew_bound_us=self.skew_bound_us,
        )


@dataclass
class RunResult:
    spec: RunSpec
    seed: int
    summary: Summary
    mutual_exclusion: Verdict
    liveness: Verdict
    versions: Verdict
    records: list
    requests: dict
    engine_stats: dict

    @property
    def safety_passed(self) -> bool:
        return self.mutual_exclusion.passed and self.versions.passed


def build_engine(spec: RunSpec, kernel: Kernel, mux: NodeMux, collector: Collector):
    if spec.protocol == "clm":
        return CLMEngine(kernel, mux, collector, spec.clm)
    if spec.protocol == "ldl":
        from .protocols.ldl import LDLConfig, LDLEngine

        return LDLEngine(kernel, mux, collector, spec.ldl or LDLConfig())
    if spec.protocol == "pdl":
        from .protocols.pdl import PDLEngine

        return PDLEngine(kernel, mux, collector, spec.pdl)
    if spec.protocol == "hl":
        from .protocols.hl import HLEngine

        return HLEngine(kernel, mux, collector, spec.hl)
    if spec.protocol == "hybrid":
        from .protocols.hybrid import HybridConfig, HybridEngine

        opt = spec.opt or OptConfig()
        cfg = HybridConfig(
            critical=tuple(opt.critical_resources),
            epoch_us=opt.epoch_us,
            hot_rate_per_s=opt.hot_rate_per_s,
            hot_queue=opt.hot_queue,
            adaptive_lease=opt.adaptive_lease,
            lease=spec.ldl,
            quorum=spec.pdl,
        )
        return HybridEngine(kernel, mux, collector, cfg)
    raise ValueError(f"unknown protocol {spec.protocol!r}")


def schedule_faults(kernel: Kernel, faults) -> list[tuple[int, int]]:
    """Install the fault schedule; returns outage windows (true time) used by
    the liveness excuse rule: node down-windows and partition spans."""
    outages = []
    down_since: dict[int, int] = {}
    end = None
    for entry in faults:
        kind = entry[0]
        if kind == "crash":
            _, node, t = entry
            kernel.schedule_crash(node, t)
            down_since[node] = t
        elif kind == "recover":
            _, node, t = entry
            kernel.schedule_recover(node, t)
            start = down_since.pop(node, None)
            if start is not None:
                outages.append((start, t))
        elif kind == "partition":
            _, groups, start, stop = entry
            kernel.schedule_partition([list(g) for g in groups], start, stop)
            outages.append((start, stop))
        else:
            raise ValueError(f"unknown fault kind {kind!r}")
    for node, start in down_since.items():
        outages.append((start, None))  # down to end of run; caller patches
    return outages


def liveness_grace_us(spec: RunSpec) -> int:
    lease_us = getattr(spec.ldl, "lease_us", 0) if spec.ldl else 0
    if spec.hl is not None:
        lease_us = max(
            lease_us,
            getattr(spec.hl, "lease_us", 0),
            getattr(spec.hl, "region_lease_us", 0),
        )
    if spec.opt is not None and (spec.opt.adaptive_lease or spec.protocol == "hybrid"):
        lease_us = max(lease_us, spec.opt.lease_max_us)
    election_us = 0
    ping_us = 0
    if spec.pdl is not None:
        election_us = getattr(spec.pdl, "election_timeout_base_us", None) or 0
        ping_us = getattr(spec.pdl, "client_liveness_timeout_us", 0)
    base = max(lease_us, election_us, ping_us, 200_000)
    return 10 * base


def normalize(spec: RunSpec) -> RunSpec:
    """Fill protocol parameter blocks the run will need with defaults."""
    updates = {}
    if spec.protocol in ("ldl", "hybrid") and spec.ldl is None:
        from .protocols.ldl import LDLConfig

        updates["ldl"] = LDLConfig()
    if spec.protocol in ("pdl", "hybrid") and spec.pdl is None:
        from .protocols.pdl import PDLConfig

        updates["pdl"] = PDLConfig()
    if spec.protocol == "hl" and spec.hl is None:
        from .protocols.hl import HLConfig

        updates["hl"] = HLConfig()
    if spec.protocol == "hybrid" and spec.opt is None:
        updates["opt"] = OptConfig(hybrid=True, adaptive_lease=True)
    return replace(spec, **updates) if updates else spec


def run_simulation(spec: RunSpec, seed: int) -> RunResult:
    spec = normalize(spec)
    kernel = Kernel(
        spec.topology(),
        seed=seed,
        node_proc_us=spec.node_proc_us,
        adversarial_clocks=spec.adversarial_clocks,
    )
    mux = NodeMux(kernel)
    collector = Collector()
    metrics = Metrics(spec.duration_us, spec.warmup_us, spec.interval_us)
    engine = build_engine(spec, kernel, mux, collector)
    workload = Workload(
        kernel,
        mux,
        engine,
        collector,
        metrics,
        WorkloadConfig(
            clients=spec.clients,
            resources=spec.resources,
            contention=spec.contention,
            locality=spec.locality,
            hold_us=spec.hold_us,
            retry_cap=spec.retry_cap,
            fluctuation=spec.fluctuation,
        ),
    )
    rebalancer = None
    opt = spec.opt
    if spec.protocol == "ldl" and opt is not None and (opt.locality or opt.adaptive_lease):
        from .optimizations import AccessStats, LeaseController, PlacementRebalancer

        stats = AccessStats(kernel, half_life_us=opt.half_life_us)
        if opt.adaptive_lease:
            LeaseController(
                stats,
                base_us=opt.lease_base_us,
                min_us=opt.lease_min_us,
                max_us=opt.lease_max_us,
            ).attach(engine)
        else:
            engine.access_stats = stats
        if opt.locality:
            rebalancer = PlacementRebalancer(
                kernel, mux, engine, stats,
                epoch_us=opt.epoch_us, theta=opt.placement_share,
            )
    engine.install()
    workload.install()
    if rebalancer is not None:
        rebalancer.install()
    outages = schedule_faults(kernel, spec.faults)
    kernel.run(spec.duration_us)
    end = spec.duration_us
    outages = [(s, e if e is not None else end) for s, e in outages]
    records = collector.finish(end)
    mutex = check_mutual_exclusion(records, collector.duplicate_entries())
    liveness = check_liveness(collector.requests, outages, liveness_grace_us(spec), end)
    versions = check_version_monotonicity(collector.occ_commits)
    engine_stats = dict(getattr(engine, "stats", {}) or {})
    if rebalancer is not None:
        engine_stats["placement_moves"] = rebalancer.moves
        engine_stats["placement_skipped_down"] = rebalancer.skipped_down
    return RunResult(
        spec=spec,
        seed=seed,
        summary=metrics.summary(),
        mutual_exclusion=mutex,
        liveness=liveness,
        versions=versions,
        records=records,
        requests=collector.requests,
        engine_stats=engine_stats,
    )
