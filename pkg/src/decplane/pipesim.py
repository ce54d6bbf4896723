"""Pipeline analytics: serial-fraction drift, cycle-time floor, bubbles, and a
deterministic discrete-event model of steady-state serving.

Placement of the sampling epilogue is the variable under study: "last-stage"
adds sampling time to the final stage; "offloaded" hides a fraction eta of it
under compute. The simulator models only steady-state cycles (no fill/drain or
communication effects), which is the regime where the closed-form expressions
hold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng

PLACEMENT_LAST_STAGE = "last-stage"
PLACEMENT_OFFLOADED = "offloaded"

# default hides enough of the sampling epilogue to keep the offloaded bubble
# below 5% for balanced stage mixes
DEFAULT_OVERLAP_EFFICIENCY = 0.95


@dataclass
class PipelineSpec:
    """Stage compute times plus the sampling epilogue and its placement."""

    stage_times: list[float]
    sampling_time: float
    placement: str = PLACEMENT_LAST_STAGE
    overlap_efficiency: float = DEFAULT_OVERLAP_EFFICIENCY

    def __post_init__(self):
        if not self.stage_times:
            raise ValueError("need at least one pipeline stage")
        if any(t < 0 for t in self.stage_times) or self.sampling_time < 0:
            raise ValueError("times must be nonnegative")
        if self.placement not in (PLACEMENT_LAST_STAGE, PLACEMENT_OFFLOADED):
            raise ValueError(f"unknown placement {self.placement!r}")
        if not 0.0 <= self.overlap_efficiency <= 1.0:
            raise ValueError("overlap efficiency must lie in [0, 1]")

    @property
    def depth(self) -> int:
        return len(self.stage_times)


def sampling_fraction_after_speedup(fraction: float, speedup: float) -> float:
    """Serial-fraction drift: new sampling share when the rest speeds up.

    f' = f / (f + (1 - f) / speedup); increases monotonically with the speedup
    and tends to 1 as it grows without bound.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    if speedup < 1.0:
        raise ValueError("speedup must be >= 1")
    if fraction == 0.0:
        return 0.0
    return fraction / (fraction + (1.0 - fraction) / speedup)


def cycle_time(spec: PipelineSpec) -> float:
    """Per-cycle time under the given placement.

    Last-stage: the epilogue extends the final stage. Offloaded: only the
    unhidden share (1 - eta) of it does.
    """
    stage_max = max(spec.stage_times)
    last = spec.stage_times[-1]
    if spec.placement == PLACEMENT_LAST_STAGE:
        return max(stage_max, last + spec.sampling_time)
    return max(stage_max, last + (1.0 - spec.overlap_efficiency) * spec.sampling_time)


def bubble_fraction(spec: PipelineSpec) -> float:
    """Idle share across stages: sum_i (T_cycle - T_stage_i) / (p * T_cycle)."""
    t_cycle = cycle_time(spec)
    if t_cycle == 0.0:
        return 0.0
    idle = sum(t_cycle - t for t in spec.stage_times)
    return idle / (spec.depth * t_cycle)


@dataclass
class ServingReport:
    throughput: float  # tokens per second
    p50: float
    p95: float
    p99: float
    bubble: float
    tokens_completed: int
    arrival_rate: float

    def csv_row(self) -> str:
        return (
            f"{self.arrival_rate},{self.throughput:.6f},"
            f"{self.p50:.6f},{self.p95:.6f},{self.p99:.6f},{self.bubble:.6f}"
        )


@dataclass
class _Request:
    arrival: float
    tokens_left: int
    next_ready: float = field(default=0.0)


def simulate_serving(
    spec: PipelineSpec,
    arrival_rate: float,
    horizon: float,
    tokens_per_request: int = 32,
    seed: int = 0,
) -> ServingReport:
    """Cycle-stepped conveyor model of decode serving.

    Requests arrive Poisson(arrival_rate); each produces tokens_per_request
    tokens sequentially. The pipeline admits one token per cycle; a token
    occupies the conveyor for depth cycles, so an unloaded request sees
    depth * T_cycle per token and a saturated system completes one token per
    cycle. Latency per token is commit time minus the time it became ready.
    """
    if arrival_rate < 0:
        raise ValueError("arrival rate must be nonnegative")
    t_cycle = cycle_time(spec)
    depth = spec.depth

    # deterministic Poisson arrivals via keyed exponential gaps
    arrivals = []
    t = 0.0
    idx = 0
    while arrival_rate > 0:
        u = rng.keyed_uniform(seed, rng.DOMAIN_ARRIVALS, 0, 0, idx)
        t += -math.log(1.0 - u) / arrival_rate
        if t > horizon:
            break
        arrivals.append(t)
        idx += 1
    if arrival_rate == 0 and horizon > 0:
        arrivals = [0.0]  # probe request for the unloaded-latency bound

    requests = [_Request(arrival=a, tokens_left=tokens_per_request, next_ready=a) for a in arrivals]
    latencies: list[float] = []

    n_cycles = int(math.ceil(horizon / t_cycle)) + tokens_per_request * depth + 1
    pending = sorted(requests, key=lambda r: r.arrival)
    for cycle in range(n_cycles):
        now = cycle * t_cycle
        if now >= horizon:
            break
        # admit the oldest ready token, one per cycle; a request's next token
        # becomes ready only when this one commits (sequential decode)
        ready_reqs = [r for r in pending if r.tokens_left > 0 and r.next_ready <= now + 1e-12]
        if ready_reqs:
            req = min(ready_reqs, key=lambda r: (r.next_ready, r.arrival))
            req.tokens_left -= 1
            commit = now + depth * t_cycle
            latencies.append(commit - req.next_ready)
            req.next_ready = commit

    if not latencies:
        return ServingReport(0.0, 0.0, 0.0, 0.0, bubble_fraction(spec), 0, arrival_rate)
    lat = np.sort(np.asarray(latencies))
    throughput = len(latencies) / max(horizon, t_cycle)
    return ServingReport(
        throughput=throughput,
        p50=float(np.percentile(lat, 50)),
        p95=float(np.percentile(lat, 95)),
        p99=float(np.percentile(lat, 99)),
        bubble=bubble_fraction(spec),
        tokens_completed=len(latencies),
        arrival_rate=arrival_rate,
    )
