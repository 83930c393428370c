# core/scheduler.py
"""
Variable-length batch scheduling.

`dp_schedule` sorts the pending requests by length and splits the sorted list
into contiguous batches with minimum total cost. `costs(seq_len, count)` is the
per-request cost of a batch of `count` requests padded to `seq_len`, so a batch
is charged `costs(max_len, count) * count`. `naive_schedule` and
`nobatch_schedule` are the single-batch and one-request-per-batch baselines.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from config import Config
from utils.formats import parse_number, read_csv_rows

from .errors import FormatError, MissingCostError

logger = logging.getLogger(__name__)

CostFn = Callable[[int, int], float]


@dataclass(frozen=True)
class Request:
    request_id: str
    seq_len: int
    arrival_time: float = 0.0

    def __post_init__(self):
        if self.seq_len < 1:
            raise ValueError(f"request {self.request_id}: seq_len must be >= 1, got {self.seq_len}")

    @property
    def sort_key(self) -> Tuple[int, float, str]:
        # equal lengths keep FIFO order, then id
        return (self.seq_len, self.arrival_time, self.request_id)


@dataclass(frozen=True)
class Batch:
    requests: Tuple[Request, ...]
    padded_len: int
    cost: Optional[float] = None

    @property
    def size(self) -> int:
        return len(self.requests)

    @property
    def request_ids(self) -> List[str]:
        return [r.request_id for r in self.requests]


@dataclass
class BatchPlan:
    batches: List[Batch] = field(default_factory=list)
    predicted_cost: Optional[float] = None
    algo: str = "dp"

    @property
    def request_ids(self) -> List[List[str]]:
        return [b.request_ids for b in self.batches]

    @property
    def num_requests(self) -> int:
        return sum(b.size for b in self.batches)

    def rows(self) -> List[Tuple[int, str, int]]:
        """(batch_idx, request_id, padded_len) in execution order"""
        return [(i, r.request_id, b.padded_len) for i, b in enumerate(self.batches) for r in b.requests]


class SchedulerAlgo(Enum):
    DP = "dp"
    NAIVE = "naive"
    NOBATCH = "nobatch"


def _sorted(requests: Sequence[Request]) -> List[Request]:
    if not requests:
        raise ValueError("at least one request is required")
    ids = [r.request_id for r in requests]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate request ids")
    return sorted(requests, key=lambda r: r.sort_key)


def _batch_cost(costs: CostFn, seq_len: int, count: int) -> float:
    try:
        return costs(seq_len, count) * count
    except MissingCostError:
        raise
    except KeyError:
        raise MissingCostError(seq_len, count)


def dp_schedule(requests: Sequence[Request], costs: CostFn) -> BatchPlan:
    """
    states[i] = min over batch starts j of states[j-1] + cost(len_i, i-j+1) * (i-j+1),
    with states[0] = 0 and 1-based positions in the sorted list.
    """
    ordered = _sorted(requests)
    n = len(ordered)

    states = [0.0] + [float("inf")] * n
    start_idx = [0] * (n + 1)
    charged = [0.0] * (n + 1)
    for i in range(1, n + 1):
        max_len = ordered[i - 1].seq_len
        for j in range(1, i + 1):
            cost = _batch_cost(costs, max_len, i - j + 1)
            candidate = states[j - 1] + cost
            if candidate < states[i]:
                states[i] = candidate
                start_idx[i] = j
                charged[i] = cost

    batches: List[Batch] = []
    i = n
    while i > 0:
        j = start_idx[i]
        members = tuple(ordered[j - 1:i])
        batches.append(Batch(members, members[-1].seq_len, charged[i]))
        i = j - 1
    batches.reverse()

    logger.debug(f"DP split {n} requests into {len(batches)} batches, cost {states[n]:.6f}s")
    return BatchPlan(batches, states[n], SchedulerAlgo.DP.value)


def naive_schedule(requests: Sequence[Request], costs: Optional[CostFn] = None) -> BatchPlan:
    """Everything in one batch padded to the global max length"""
    ordered = _sorted(requests)
    max_len = ordered[-1].seq_len
    cost = _batch_cost(costs, max_len, len(ordered)) if costs is not None else None
    return BatchPlan([Batch(tuple(ordered), max_len, cost)], cost, SchedulerAlgo.NAIVE.value)


def nobatch_schedule(requests: Sequence[Request], costs: Optional[CostFn] = None) -> BatchPlan:
    ordered = _sorted(requests)
    batches = [Batch((r,), r.seq_len, _batch_cost(costs, r.seq_len, 1) if costs is not None else None)
               for r in ordered]
    total = sum(b.cost for b in batches) if costs is not None else None
    return BatchPlan(batches, total, SchedulerAlgo.NOBATCH.value)


SCHEDULERS: Dict[SchedulerAlgo, Callable[..., BatchPlan]] = {
    SchedulerAlgo.DP: dp_schedule,
    SchedulerAlgo.NAIVE: naive_schedule,
    SchedulerAlgo.NOBATCH: nobatch_schedule,
}


def schedule(requests: Sequence[Request], costs: CostFn,
             algo: Union[str, SchedulerAlgo] = SchedulerAlgo.DP) -> BatchPlan:
    try:
        algo = SchedulerAlgo(algo)
    except ValueError:
        raise ValueError(f"Unknown scheduler '{algo}' (known: dp, naive, nobatch)")
    return SCHEDULERS[algo](requests, costs)


def estimate_pending(requests: Sequence[Request], costs: CostFn,
                     cap: Optional[int] = None) -> float:
    """Predicted DP latency of the next snapshot (at most `cap` requests in FIFO order)"""
    if not requests:
        return 0.0
    snapshot = list(requests)[:cap] if cap else list(requests)
    return dp_schedule(snapshot, costs).predicted_cost


class TriggerKind(Enum):
    HUNGRY = "hungry"
    LAZY = "lazy"


@dataclass(frozen=True)
class TriggerPolicy:
    kind: TriggerKind = TriggerKind.HUNGRY
    timeout: float = Config.LAZY_TIMEOUT
    max_batch: int = Config.MAX_BATCH
    latency_constraint: float = Config.LATENCY_CONSTRAINT

    def __post_init__(self):
        if not isinstance(self.kind, TriggerKind):
            object.__setattr__(self, "kind", TriggerKind(self.kind))
        if self.timeout <= 0:
            raise ValueError(f"timeout must be positive, got {self.timeout}")
        if self.max_batch < 1:
            raise ValueError(f"max_batch must be >= 1, got {self.max_batch}")
        if self.latency_constraint <= 0:
            raise ValueError(f"latency_constraint must be positive, got {self.latency_constraint}")

    @classmethod
    def hungry(cls, **kwargs) -> "TriggerPolicy":
        return cls(TriggerKind.HUNGRY, **kwargs)

    @classmethod
    def lazy(cls, timeout: float = Config.LAZY_TIMEOUT, max_batch: int = Config.MAX_BATCH,
             **kwargs) -> "TriggerPolicy":
        return cls(TriggerKind.LAZY, timeout=timeout, max_batch=max_batch, **kwargs)


class TriggerReason(Enum):
    IDLE = "idle"
    FULL = "full"
    TIMEOUT = "timeout"
    LATENCY = "latency"


def trigger_reason(policy: TriggerPolicy, queue_head_arrival: float, now: float,
                   pending_estimated_exec: float, queue_len: int,
                   runtime_idle: bool) -> Optional[TriggerReason]:
    """Why the scheduler should run now, or None to keep waiting"""
    if queue_len <= 0:
        return None
    elapsed = now - queue_head_arrival
    if elapsed + pending_estimated_exec > policy.latency_constraint / 2:
        return TriggerReason.LATENCY
    if policy.kind is TriggerKind.HUNGRY:
        return TriggerReason.IDLE if runtime_idle else None
    if queue_len >= policy.max_batch:
        return TriggerReason.FULL
    if elapsed >= policy.timeout:
        return TriggerReason.TIMEOUT
    return None


def should_trigger(policy: TriggerPolicy, queue_head_arrival: float, now: float,
                   pending_estimated_exec: float, queue_len: int, runtime_idle: bool) -> bool:
    return trigger_reason(policy, queue_head_arrival, now, pending_estimated_exec,
                          queue_len, runtime_idle) is not None


REQUEST_COLUMNS = ("id", "seq_len", "arrival")
PLAN_COLUMNS = ("batch_idx", "request_id", "padded_len")


def load_requests(path: str) -> List[Request]:
    """Read `id,seq_len,arrival` CSV rows"""
    requests, seen = [], set()
    for line_no, row in read_csv_rows(path, REQUEST_COLUMNS):
        request_id = row["id"]
        if not request_id:
            raise FormatError(path, line_no, "empty request id")
        if request_id in seen:
            raise FormatError(path, line_no, f"duplicate request id {request_id!r}")
        seq_len = parse_number(path, line_no, "seq_len", row["seq_len"])
        arrival = parse_number(path, line_no, "arrival", row["arrival"], float)
        if seq_len < 1:
            raise FormatError(path, line_no, f"seq_len must be >= 1, got {seq_len}")
        seen.add(request_id)
        requests.append(Request(request_id, seq_len, arrival))
    return requests
