"""Latency and throughput collection.

Samples are integer microseconds and fully retained; summaries sort exactly
rather than approximating. A sample belongs to the run iff its completion
time is at or after the warm-up boundary (half-open [warmup, end)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .kernel import MICROS_PER_SEC


def percentile(samples: list[int], p: float):
    """Nearest-rank percentile: the value at 1-based index ceil(p*N) of the
    ascending sort. Empty input has no percentile and returns None."""
    if not samples:
        return None
    ordered = sorted(samples)
    rank = max(1, math.ceil(p * len(ordered)))
    return ordered[rank - 1]


@dataclass
class Summary:
    ops_completed: int
    throughput_ops_s: float
    mean_latency_us: float
    p50_latency_us: int | None
    p99_latency_us: int | None
    retries: int
    failures: int
    intervals: list["IntervalRow"] = field(default_factory=list)


@dataclass
class IntervalRow:
    start_us: int
    ops: int
    throughput_ops_s: float
    avg_latency_us: float
    p99_latency_us: int | None


class Metrics:
    """One instance per simulation run."""

    def __init__(self, duration_us: int, warmup_us: int, interval_us: int) -> None:
        if not 0 <= warmup_us < duration_us:
            raise ValueError("warm-up must fit inside the run")
        if interval_us <= 0:
            raise ValueError("interval must be positive")
        self.duration_us = duration_us
        self.warmup_us = warmup_us
        self.interval_us = interval_us
        self.samples: list[tuple[int, int]] = []
        self.retries = 0
        self.failures = 0

    def record(self, t_complete_us: int, latency_us: int) -> None:
        if t_complete_us >= self.warmup_us and t_complete_us < self.duration_us:
            self.samples.append((t_complete_us, latency_us))

    def record_retry(self) -> None:
        self.retries += 1

    def record_failure(self, t_us: int) -> None:
        if t_us >= self.warmup_us:
            self.failures += 1

    def latencies(self) -> list[int]:
        return [lat for _, lat in self.samples]

    def summary(self) -> Summary:
        lats = self.latencies()
        n = len(lats)
        measured_s = (self.duration_us - self.warmup_us) / MICROS_PER_SEC
        return Summary(
            ops_completed=n,
            throughput_ops_s=n / measured_s,
            mean_latency_us=(sum(lats) / n) if n else 0.0,
            p50_latency_us=percentile(lats, 0.50),
            p99_latency_us=percentile(lats, 0.99),
            retries=self.retries,
            failures=self.failures,
            intervals=self.interval_rows(),
        )

    def interval_rows(self) -> list[IntervalRow]:
        rows = []
        span = self.interval_us
        buckets: dict[int, list[int]] = {}
        for t, lat in self.samples:
            buckets.setdefault((t - self.warmup_us) // span, []).append(lat)
        count = (self.duration_us - self.warmup_us) // span
        for i in range(count):
            lats = buckets.get(i, [])
            rows.append(
                IntervalRow(
                    start_us=self.warmup_us + i * span,
                    ops=len(lats),
                    throughput_ops_s=len(lats) / (span / MICROS_PER_SEC),
                    avg_latency_us=(sum(lats) / len(lats)) if lats else 0.0,
                    p99_latency_us=percentile(lats, 0.99),
                )
            )
        return rows
