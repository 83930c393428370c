# core/sim.py
"""
Discrete-event serving simulation on simpy.

One runtime serves a FIFO message queue fed by Poisson arrivals. When the
trigger policy fires, the scheduler plans over a snapshot of the queue and
the resulting batches execute back-to-back, each taking the cost provider's
latency for (padded length, batch size). Plans are made over the per-request
share of that latency (`AmortizedCost`).
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Deque, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import simpy

from config import Config
from utils.formats import csv_text

from .cost import AmortizedCost
from .scheduler import (Request, SchedulerAlgo, TriggerKind, TriggerPolicy, TriggerReason,
                        estimate_pending, schedule, trigger_reason)

logger = logging.getLogger(__name__)

CostFn = Callable[[int, int], float]


@dataclass(frozen=True)
class Workload:
    """Poisson arrivals at `rate` over `duration` seconds, lengths uniform in [len_lo, len_hi]"""
    rate: float
    len_lo: int
    len_hi: int
    duration: float
    seed: int = Config.DEFAULT_SEED

    def __post_init__(self):
        errors = []
        if not self.rate > 0:
            errors.append("rate must be positive")
        if self.len_lo < 1 or self.len_lo > self.len_hi:
            errors.append("length range must satisfy 1 <= lo <= hi")
        if not self.duration > 0:
            errors.append("duration must be positive")
        if errors:
            raise ValueError("Invalid workload: " + ", ".join(errors))

    def with_rate(self, rate: float) -> "Workload":
        return Workload(rate, self.len_lo, self.len_hi, self.duration, self.seed)


def _streams(seed: int):
    return np.random.SeedSequence(seed).spawn(2)


def generate_lengths(len_lo: int, len_hi: int, count: int, seed: int) -> np.ndarray:
    """The first `count` lengths of the request stream for `seed`"""
    return np.random.default_rng(_streams(seed)[1]).integers(len_lo, len_hi + 1, size=count)


def generate_requests(workload: Workload) -> List[Request]:
    """
    Arrival times and lengths come from two independent streams spawned from
    `SeedSequence(seed)`: stream 0 draws exponential inter-arrival gaps,
    stream 1 draws integer lengths in [len_lo, len_hi]. Ids are r000001, r000002, ...
    """
    gap_rng = np.random.default_rng(_streams(workload.seed)[0])

    block = max(16, int(workload.rate * workload.duration * 1.2) + 16)
    gaps = gap_rng.exponential(1.0 / workload.rate, size=block)
    while np.cumsum(gaps)[-1] <= workload.duration:
        gaps = np.concatenate([gaps, gap_rng.exponential(1.0 / workload.rate, size=block)])
    arrivals = np.cumsum(gaps)
    arrivals = arrivals[arrivals <= workload.duration]

    lengths = generate_lengths(workload.len_lo, workload.len_hi, len(arrivals), workload.seed)
    return [Request(f"r{i + 1:06d}", int(s), float(t)) for i, (t, s) in enumerate(zip(arrivals, lengths))]


class SimEventKind(Enum):
    ARRIVAL = "arrival"
    SCHEDULE = "schedule"
    BATCH_START = "batch_start"
    BATCH_END = "batch_end"


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: SimEventKind
    request_ids: Tuple[str, ...]
    padded_len: int = 0
    queue_len: int = 0  # requests waiting right after the event


@dataclass(frozen=True)
class TraceRow:
    request_id: str
    seq_len: int
    arrival: float
    start: float
    end: float

    @property
    def latency(self) -> float:
        return self.end - self.arrival


@dataclass
class SimReport:
    algo: str
    policy: str
    rate: float
    duration: float
    arrivals: int
    completed: int
    makespan: float
    request_throughput: float
    serving_throughput: float
    latency_avg: float
    latency_min: float
    latency_max: float
    latency_p50: float
    latency_p95: float
    latency_p99: float
    num_batches: int
    mean_batch_size: float
    queue_slope: float
    divergent: bool
    dropped: int = 0
    queue_series: List[Tuple[float, int]] = field(default_factory=list)
    trace: List[TraceRow] = field(default_factory=list)
    events: List[SimEvent] = field(default_factory=list)

    def as_dict(self) -> Dict[str, object]:
        """Scalar metrics in a stable key order"""
        keys = ("algo", "policy", "rate", "duration", "arrivals", "completed", "dropped", "makespan",
                "request_throughput", "serving_throughput", "latency_avg", "latency_min",
                "latency_max", "latency_p50", "latency_p95", "latency_p99", "num_batches",
                "mean_batch_size", "queue_slope", "divergent")
        return {key: getattr(self, key) for key in keys}


TRACE_COLUMNS = ("request_id", "seq_len", "arrival", "start", "end")


def trace_text(report: SimReport) -> str:
    rows = [(r.request_id, r.seq_len, repr(r.arrival), repr(r.start), repr(r.end)) for r in report.trace]
    return csv_text(TRACE_COLUMNS, rows)


class ServingSimulator:
    """Single-runtime serving loop; `run()` drains every request and returns the report"""

    def __init__(self, requests: Sequence[Request], policy: TriggerPolicy,
                 algo: Union[str, SchedulerAlgo], costs: CostFn, duration: float, rate: float,
                 record_events: bool = False):
        self.requests = sorted(requests, key=lambda r: (r.arrival_time, r.request_id))
        self.policy = policy
        self.algo = SchedulerAlgo(algo)
        self.costs = costs
        self.cached_cost = AmortizedCost(costs)
        self.duration = duration
        self.rate = rate
        self.record_events = record_events

        self.env = simpy.Environment()
        self.queue: Deque[Request] = deque()
        self.queue_series: List[Tuple[float, int]] = [(0.0, 0)]
        self.trace: List[TraceRow] = []
        self.events: List[SimEvent] = []
        self.batch_sizes: List[int] = []
        self._wakeup: Optional[simpy.Event] = None

    def _event(self, kind: SimEventKind, request_ids: Tuple[str, ...], padded_len: int = 0) -> None:
        if self.record_events:
            self.events.append(SimEvent(self.env.now, kind, request_ids, padded_len, len(self.queue)))

    def _sample_queue(self) -> None:
        self.queue_series.append((self.env.now, len(self.queue)))

    def _notify(self) -> None:
        if self._wakeup is not None and not self._wakeup.triggered:
            self._wakeup.succeed()

    def _arrivals(self):
        for request in self.requests:
            delay = request.arrival_time - self.env.now
            if delay > 0:
                yield self.env.timeout(delay)
            self.queue.append(request)
            self._event(SimEventKind.ARRIVAL, (request.request_id,), request.seq_len)
            self._sample_queue()
            self._notify()

    def _decide(self) -> Tuple[Optional[TriggerReason], float, TriggerReason]:
        """Trigger reason now, else how long until the next timed check and what fires there"""
        head = self.queue[0]
        now = self.env.now
        if self.policy.kind is TriggerKind.HUNGRY:
            # runtime is idle whenever this runs
            return TriggerReason.IDLE, 0.0, TriggerReason.IDLE

        snapshot = list(self.queue)[:self.policy.max_batch]
        estimate = estimate_pending(snapshot, self.cached_cost)
        reason = trigger_reason(self.policy, head.arrival_time, now, estimate, len(self.queue), True)
        if reason is not None:
            return reason, 0.0, reason
        timeout_at = head.arrival_time + self.policy.timeout
        latency_at = head.arrival_time + self.policy.latency_constraint / 2 - estimate
        if latency_at < timeout_at:
            return None, max(latency_at - now, 0.0), TriggerReason.LATENCY
        return None, max(timeout_at - now, 0.0), TriggerReason.TIMEOUT

    def _runtime(self):
        served = 0
        while served < len(self.requests):
            if not self.queue:
                self._wakeup = self.env.event()
                yield self._wakeup
                continue

            reason, wait, due = self._decide()
            if reason is None:
                self._wakeup = self.env.event()
                timer = self.env.timeout(wait)
                fired = yield self._wakeup | timer
                if self._wakeup not in fired:
                    # timer expired with nothing new: the deadline itself is the trigger
                    reason = due
                self._wakeup = None
                if reason is None:
                    continue

            cap = self.policy.max_batch
            snapshot = [self.queue.popleft() for _ in range(min(cap, len(self.queue)))]
            self._event(SimEventKind.SCHEDULE, tuple(r.request_id for r in snapshot))
            self._sample_queue()
            plan = schedule(snapshot, self.cached_cost, self.algo)
            logger.debug(f"t={self.env.now:.6f} {reason.value} trigger: {len(snapshot)} requests "
                         f"-> {len(plan.batches)} batches")

            for batch in plan.batches:
                start = self.env.now
                ids = tuple(batch.request_ids)
                self._event(SimEventKind.BATCH_START, ids, batch.padded_len)
                yield self.env.timeout(self.costs(batch.padded_len, batch.size))
                end = self.env.now
                self._event(SimEventKind.BATCH_END, ids, batch.padded_len)
                self.batch_sizes.append(batch.size)
                for request in batch.requests:
                    self.trace.append(TraceRow(request.request_id, request.seq_len,
                                               request.arrival_time, start, end))
                served += batch.size

    def _queue_slope(self) -> float:
        window = [(t, n) for t, n in self.queue_series if t <= self.duration]
        times = np.array([t for t, _ in window])
        if len(window) < 2 or np.ptp(times) == 0:
            return 0.0
        lengths = np.array([n for _, n in window], dtype=np.float64)
        return float(np.polyfit(times, lengths, 1)[0])

    def run(self) -> SimReport:
        self.env.process(self._arrivals())
        runtime = self.env.process(self._runtime())
        self.env.run(until=runtime)

        arrivals, completed = len(self.requests), len(self.trace)
        makespan = max((row.end for row in self.trace), default=0.0)
        latencies = np.array([row.latency for row in self.trace], dtype=np.float64)
        slope = self._queue_slope()

        if completed:
            p50, p95, p99 = (float(v) for v in np.percentile(latencies, [50, 95, 99]))
            lat_avg, lat_min, lat_max = float(latencies.mean()), float(latencies.min()), float(latencies.max())
        else:
            p50 = p95 = p99 = lat_avg = lat_min = lat_max = 0.0

        return SimReport(
            algo=self.algo.value,
            policy=self.policy.kind.value,
            rate=self.rate,
            duration=self.duration,
            arrivals=arrivals,
            completed=completed,
            makespan=makespan,
            request_throughput=arrivals / self.duration,
            serving_throughput=completed / max(self.duration, makespan),
            latency_avg=lat_avg,
            latency_min=lat_min,
            latency_max=lat_max,
            latency_p50=p50,
            latency_p95=p95,
            latency_p99=p99,
            num_batches=len(self.batch_sizes),
            mean_batch_size=float(np.mean(self.batch_sizes)) if self.batch_sizes else 0.0,
            queue_slope=slope,
            divergent=slope > Config.DIVERGENCE_SLOPE_RATIO * self.rate,
            queue_series=self.queue_series,
            trace=self.trace,
            events=self.events,
        )


def run_sim(workload: Workload, policy: TriggerPolicy, algo: Union[str, SchedulerAlgo],
            costs: CostFn, record_events: bool = False) -> SimReport:
    requests = generate_requests(workload)
    report = ServingSimulator(requests, policy, algo, costs, workload.duration, workload.rate,
                              record_events).run()
    logger.info(f"Simulated {report.arrivals} requests at {workload.rate:g} req/s with {report.algo}: "
                f"{report.serving_throughput:.1f} resp/s, avg latency {report.latency_avg * 1e3:.2f} ms")
    return report


def is_stable(report: SimReport, ratio: float = Config.CRITICAL_THROUGHPUT_RATIO) -> bool:
    """Serving keeps up with the offered load and the queue does not grow"""
    return report.serving_throughput >= ratio * report.request_throughput and not report.divergent


def find_critical_point(template: Workload, policy: TriggerPolicy, algo: Union[str, SchedulerAlgo],
                        costs: CostFn, rel_tol: float = 0.01, max_steps: int = 40) -> float:
    """
    Largest stable arrival rate. The bracket is found by doubling or halving
    from `template.rate`, then narrowed by bisection to `rel_tol`.
    """
    def stable(rate: float) -> bool:
        result = is_stable(run_sim(template.with_rate(rate), policy, algo, costs))
        logger.debug(f"critical point trial at {rate:.3f} req/s: {'stable' if result else 'unstable'}")
        return result

    rate = template.rate
    if stable(rate):
        lo, hi = rate, None
        for _ in range(max_steps):
            candidate = lo * 2
            if not stable(candidate):
                hi = candidate
                break
            lo = candidate
        if hi is None:
            logger.warning(f"Still stable at {lo:g} req/s; reporting it as the critical point")
            return lo
    else:
        lo, hi = None, rate
        for _ in range(max_steps):
            candidate = hi / 2
            if stable(candidate):
                lo = candidate
                break
            hi = candidate
        if lo is None:
            logger.warning(f"No stable rate found down to {hi:g} req/s")
            return 0.0

    for _ in range(max_steps):
        if (hi - lo) <= rel_tol * hi:
            break
        mid = (lo + hi) / 2
        if stable(mid):
            lo = mid
        else:
            hi = mid

    logger.info(f"Critical point for {SchedulerAlgo(algo).value}: {lo:.2f} req/s")
    return lo


def sweep_rates(template: Workload, rates: Sequence[float], policy: TriggerPolicy,
                algo: Union[str, SchedulerAlgo], costs: CostFn) -> List[SimReport]:
    """Serving throughput against request throughput, one run per rate"""
    return [run_sim(template.with_rate(rate), policy, algo, costs) for rate in rates]
