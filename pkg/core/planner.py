# core/planner.py
"""
Memory planning for variable-length inference.

* `mem_allocate` - the sequence-length-aware chunked planner: intermediate
  tensors are packed into a list of chunks at offsets computed from their
  lifetimes, and chunks are reused across inferences.
* `plan_gsoc` - greedy-by-size offset calculation in one unbounded arena.
* `CachingAllocator` - a bucketed caching allocator that keeps freed blocks.
"""

import bisect
import logging
import math
import sys
import time
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from config import Config

from .errors import PlannerError, TraceError
from .graph import ModelConfig, TensorUsageRecord, build_encoder_graph

logger = logging.getLogger(__name__)

INVALID = None  # find_gap_from_chunk result when the tensor does not fit


class ReleasePolicy(Enum):
    IMMEDIATE = "immediate"
    IDLE_LIMIT = "idle-limit"


@dataclass(frozen=True)
class PlannerConfig:
    default_chunk_size: int = Config.DEFAULT_CHUNK_SIZE
    k_scale: float = Config.K_SCALE
    release_policy: ReleasePolicy = ReleasePolicy.IMMEDIATE
    idle_limit: int = 1  # inferences a chunk may stay unused (idle-limit policy)
    alignment: int = Config.ALIGNMENT

    def __post_init__(self):
        errors = []
        if self.default_chunk_size <= 0:
            errors.append("default_chunk_size must be positive")
        if self.k_scale < 1:
            errors.append("k_scale must be >= 1")
        if self.alignment < 1:
            errors.append("alignment must be >= 1")
        if self.release_policy is ReleasePolicy.IDLE_LIMIT and self.idle_limit < 1:
            errors.append("idle_limit must be >= 1")
        if errors:
            raise PlannerError("Invalid planner config: " + ", ".join(errors))

    @classmethod
    def from_config(cls, **overrides) -> "PlannerConfig":
        """Defaults from Config; IDLE_RELEASE_LIMIT > 0 selects the idle-limit policy"""
        values = dict(default_chunk_size=Config.DEFAULT_CHUNK_SIZE, k_scale=Config.K_SCALE,
                      alignment=Config.ALIGNMENT)
        if Config.IDLE_RELEASE_LIMIT > 0:
            values.update(release_policy=ReleasePolicy.IDLE_LIMIT, idle_limit=Config.IDLE_RELEASE_LIMIT)
        values.update(overrides)
        return cls(**values)

    @property
    def release_after(self) -> int:
        return 1 if self.release_policy is ReleasePolicy.IMMEDIATE else self.idle_limit


def align(size: int, alignment: int) -> int:
    return (size + alignment - 1) // alignment * alignment


@dataclass(frozen=True)
class Assignment:
    record: TensorUsageRecord
    offset: int
    extent: int  # aligned size reserved in the chunk

    @property
    def tensor_id(self) -> int:
        return self.record.tensor_id


@dataclass
class Chunk:
    chunk_id: int
    size: int
    assignments: List[Assignment] = field(default_factory=list)
    idle_count: int = 0

    def place(self, record: TensorUsageRecord, offset: int, extent: int) -> None:
        """Insert keeping assignments sorted by (offset, tensor_id)"""
        keys = [(a.offset, a.tensor_id) for a in self.assignments]
        position = bisect.bisect(keys, (offset, record.tensor_id))
        self.assignments.insert(position, Assignment(record, offset, extent))

    def cleared(self) -> "Chunk":
        return Chunk(self.chunk_id, self.size, [], self.idle_count)

    @property
    def used(self) -> bool:
        return bool(self.assignments)

    @property
    def high_water(self) -> int:
        return max((a.offset + a.extent for a in self.assignments), default=0)


@dataclass
class MemoryPlan:
    chunks: List[Chunk]
    assigned_chunk: Dict[int, int]
    assigned_offset: Dict[int, int]

    def chunk(self, chunk_id: int) -> Chunk:
        for chunk in self.chunks:
            if chunk.chunk_id == chunk_id:
                return chunk
        raise KeyError(chunk_id)

    @property
    def footprint(self) -> int:
        """Bytes held by the plan's chunks"""
        return sum(chunk.size for chunk in self.chunks)

    def rows(self) -> List[Tuple[int, int, int]]:
        return [(tid, self.assigned_chunk[tid], self.assigned_offset[tid])
                for tid in sorted(self.assigned_chunk)]


@dataclass
class AllocStats:
    peak_footprint: int = 0
    bytes_allocated: int = 0
    bytes_freed: int = 0
    device_alloc_calls: int = 0
    device_free_calls: int = 0

    @property
    def current_footprint(self) -> int:
        return self.bytes_allocated - self.bytes_freed

    def record_alloc(self, size: int) -> None:
        self.bytes_allocated += size
        self.device_alloc_calls += 1
        self.peak_footprint = max(self.peak_footprint, self.current_footprint)

    def record_free(self, size: int) -> None:
        self.bytes_freed += size
        self.device_free_calls += 1

    def as_dict(self) -> Dict[str, int]:
        return {
            "peak_footprint": self.peak_footprint,
            "bytes_allocated": self.bytes_allocated,
            "bytes_freed": self.bytes_freed,
            "device_alloc_calls": self.device_alloc_calls,
            "device_free_calls": self.device_free_calls,
        }


def find_gap_from_chunk(t: TensorUsageRecord, chunk: Chunk, alignment: int = 1) -> Optional[int]:
    """
    Smallest gap between lifetime-overlapping residents that fits `t`,
    else the tail of the chunk, else INVALID.

    `prev_offset` only advances on overlapping residents; regions under
    non-overlapping residents are free for `t`.
    """
    size_t = align(t.size, alignment)
    smallest_gap = math.inf
    prev_offset = 0
    best_offset = INVALID
    for x in chunk.assignments:
        max_first_op = max(t.first_op, x.record.first_op)
        min_last_op = min(t.last_op, x.record.last_op)
        if max_first_op <= min_last_op:
            gap = x.offset - prev_offset
            if size_t <= gap < smallest_gap:
                smallest_gap = gap
                best_offset = prev_offset
            prev_offset = max(prev_offset, x.offset + x.extent)
    if best_offset is INVALID and chunk.size - prev_offset >= size_t:
        best_offset = prev_offset
    return best_offset


def _size_order(records: Iterable[TensorUsageRecord]) -> List[TensorUsageRecord]:
    """Non-increasing size; equal sizes by ascending tensor_id"""
    return sorted(records, key=lambda r: (-r.size, r.tensor_id))


def _check_unique(records: Sequence[TensorUsageRecord]) -> None:
    seen = set()
    for record in records:
        if record.tensor_id in seen:
            raise PlannerError(f"duplicate tensor_id {record.tensor_id}")
        seen.add(record.tensor_id)


def mem_allocate(records: Sequence[TensorUsageRecord], prior_chunks: Sequence[Chunk],
                 cfg: Optional[PlannerConfig] = None) -> Tuple[MemoryPlan, AllocStats]:
    """
    Assign every record a (chunk, offset), reusing the chunks of the previous
    inference and appending new chunks when no gap fits.
    """
    cfg = cfg or PlannerConfig()
    _check_unique(records)

    chunks = [chunk.cleared() for chunk in prior_chunks]
    stats = AllocStats()
    # prior chunks are already on the device
    held = sum(chunk.size for chunk in chunks)
    stats.peak_footprint = held
    next_id = max((chunk.chunk_id for chunk in chunks), default=-1) + 1

    assigned_chunk: Dict[int, int] = {}
    assigned_offset: Dict[int, int] = {}
    for t in _size_order(records):
        extent = align(t.size, cfg.alignment)
        for chunk in chunks:
            offset = find_gap_from_chunk(t, chunk, cfg.alignment)
            if offset is not INVALID:
                chunk.place(t, offset, extent)
                assigned_chunk[t.tensor_id] = chunk.chunk_id
                assigned_offset[t.tensor_id] = offset
                break
        else:
            new_chunk_size = align(max(cfg.default_chunk_size, math.ceil(extent * cfg.k_scale)),
                                   cfg.alignment)
            chunk = Chunk(next_id, new_chunk_size)
            next_id += 1
            chunk.place(t, 0, extent)
            chunks.append(chunk)
            assigned_chunk[t.tensor_id] = chunk.chunk_id
            assigned_offset[t.tensor_id] = 0
            stats.bytes_allocated += new_chunk_size
            stats.device_alloc_calls += 1
            held += new_chunk_size
            stats.peak_footprint = max(stats.peak_footprint, held)
            logger.debug(f"new chunk {chunk.chunk_id} of {new_chunk_size} bytes for tensor {t.tensor_id}")

    # release unused chunks
    kept: List[Chunk] = []
    for chunk in chunks:
        if chunk.used:
            chunk.idle_count = 0
            kept.append(chunk)
            continue
        chunk.idle_count += 1
        if chunk.idle_count >= cfg.release_after:
            stats.record_free(chunk.size)
        else:
            kept.append(chunk)

    return MemoryPlan(kept, assigned_chunk, assigned_offset), stats


def plan_gsoc(records: Sequence[TensorUsageRecord], alignment: int = 1) -> MemoryPlan:
    """Greedy-by-size offsets in one unbounded arena sized to its high-water mark"""
    _check_unique(records)
    arena = Chunk(0, sys.maxsize)
    offsets: Dict[int, int] = {}
    for t in _size_order(records):
        offset = find_gap_from_chunk(t, arena, alignment)
        arena.place(t, offset, align(t.size, alignment))
        offsets[t.tensor_id] = offset
    arena.size = arena.high_water
    return MemoryPlan([arena], {tid: 0 for tid in offsets}, offsets)


def plan_high_water(plan: MemoryPlan) -> int:
    """Bytes actually touched: sum over chunks of each chunk's high-water mark"""
    return sum(chunk.high_water for chunk in plan.chunks)


def verify_plan(records: Sequence[TensorUsageRecord], plan: MemoryPlan) -> List[str]:
    """Pairwise check of containment and lifetime/byte-range disjointness"""
    violations = []
    by_id = {r.tensor_id: r for r in records}
    chunk_sizes = {chunk.chunk_id: chunk.size for chunk in plan.chunks}

    for tid in by_id:
        if tid not in plan.assigned_chunk or tid not in plan.assigned_offset:
            violations.append(f"tensor {tid} is not assigned")
    for tid in plan.assigned_chunk:
        if tid not in by_id:
            violations.append(f"unknown tensor {tid} is assigned")

    placed = []
    for tid, record in by_id.items():
        if tid not in plan.assigned_chunk:
            continue
        chunk_id, offset = plan.assigned_chunk[tid], plan.assigned_offset[tid]
        if chunk_id not in chunk_sizes:
            violations.append(f"tensor {tid} references missing chunk {chunk_id}")
            continue
        if offset < 0 or offset + record.size > chunk_sizes[chunk_id]:
            violations.append(
                f"tensor {tid} [{offset}, {offset + record.size}) exceeds chunk {chunk_id} "
                f"of {chunk_sizes[chunk_id]} bytes"
            )
        placed.append((record, chunk_id, offset))

    for i, (a, chunk_a, off_a) in enumerate(placed):
        for b, chunk_b, off_b in placed[i + 1:]:
            if chunk_a != chunk_b or not a.overlaps(b):
                continue
            if off_a < off_b + b.size and off_b < off_a + a.size:
                violations.append(
                    f"tensors {a.tensor_id} and {b.tensor_id} overlap in chunk {chunk_a}"
                )
    return violations


class PlannerSession:
    """
    Chunk cache and cumulative statistics across inferences.

    Confined to one serving thread at a time; callers serialize access.
    """

    def __init__(self, cfg: Optional[PlannerConfig] = None):
        self.cfg = cfg or PlannerConfig.from_config()
        self.chunks: List[Chunk] = []
        self.stats = AllocStats()
        self.plan_seconds: List[float] = []

    @property
    def footprint(self) -> int:
        return sum(chunk.size for chunk in self.chunks)

    def plan(self, records: Sequence[TensorUsageRecord]) -> Tuple[MemoryPlan, AllocStats]:
        started = time.perf_counter()
        plan, stats = mem_allocate(records, self.chunks, self.cfg)
        self.plan_seconds.append(time.perf_counter() - started)

        self.chunks = plan.chunks
        self.stats.peak_footprint = max(self.stats.peak_footprint, stats.peak_footprint)
        self.stats.bytes_allocated += stats.bytes_allocated
        self.stats.bytes_freed += stats.bytes_freed
        self.stats.device_alloc_calls += stats.device_alloc_calls
        self.stats.device_free_calls += stats.device_free_calls
        return plan, stats


class TraceAction(Enum):
    ALLOC = "alloc"
    FREE = "free"


@dataclass(frozen=True)
class TraceEvent:
    action: TraceAction
    tensor_id: int
    size: int


def alloc_free_trace(records: Sequence[TensorUsageRecord], tag: int = 0) -> List[TraceEvent]:
    """
    Alloc/free sequence a per-tensor allocator sees while executing the graph:
    outputs are allocated when their producer runs and freed after their last use.
    `tag` offsets tensor ids so traces of consecutive inferences can be concatenated.
    """
    produced = defaultdict(list)
    released = defaultdict(list)
    for record in sorted(records, key=lambda r: r.tensor_id):
        produced[record.first_op].append(record)
        released[record.last_op].append(record)

    trace: List[TraceEvent] = []
    last_op = max((r.last_op for r in records), default=-1)
    for op in range(last_op + 1):
        for record in produced[op]:
            trace.append(TraceEvent(TraceAction.ALLOC, tag + record.tensor_id, record.size))
        for record in released[op]:
            trace.append(TraceEvent(TraceAction.FREE, tag + record.tensor_id, record.size))
    return trace


class CachingAllocator:
    """
    Bucketed caching allocator: freed blocks stay cached per power-of-two bin
    and are handed back to later requests of the same bin. Memory returns to
    the device only past `max_cached_bytes` or on `close()`.
    """

    def __init__(self, bin_min: int = Config.CACHING_BIN_MIN, max_cached_bytes: Optional[int] = None):
        self.bin_min = bin_min
        self.max_cached_bytes = max_cached_bytes
        self.stats = AllocStats()
        self._free_blocks: Dict[int, int] = defaultdict(int)
        self._live: Dict[int, int] = {}

    def bin_size(self, size: int) -> int:
        if size <= self.bin_min:
            return self.bin_min
        return 1 << (size - 1).bit_length()

    @property
    def cached_bytes(self) -> int:
        return sum(size * count for size, count in self._free_blocks.items())

    @property
    def footprint(self) -> int:
        return self.stats.current_footprint

    def alloc(self, tensor_id: int, size: int) -> None:
        if tensor_id in self._live:
            raise TraceError(f"tensor {tensor_id} allocated twice")
        if size <= 0:
            raise TraceError(f"tensor {tensor_id}: size must be positive, got {size}")
        block = self.bin_size(size)
        if self._free_blocks[block] > 0:
            self._free_blocks[block] -= 1
        else:
            self.stats.record_alloc(block)
        self._live[tensor_id] = block

    def free(self, tensor_id: int) -> None:
        if tensor_id not in self._live:
            raise TraceError(f"tensor {tensor_id} freed before allocation")
        block = self._live.pop(tensor_id)
        if self.max_cached_bytes is not None and self.cached_bytes + block > self.max_cached_bytes:
            self.stats.record_free(block)
        else:
            self._free_blocks[block] += 1

    def replay(self, trace: Iterable[TraceEvent]) -> AllocStats:
        for event in trace:
            if event.action is TraceAction.ALLOC:
                self.alloc(event.tensor_id, event.size)
            elif event.action is TraceAction.FREE:
                self.free(event.tensor_id)
            else:
                raise TraceError(f"unknown trace action {event.action!r}")
        return self.stats

    def close(self) -> AllocStats:
        """End of session: return every cached block to the device"""
        for block, count in sorted(self._free_blocks.items()):
            for _ in range(count):
                self.stats.record_free(block)
        self._free_blocks.clear()
        return self.stats


def caching_allocator_sim(trace: Iterable[TraceEvent], bin_min: int = Config.CACHING_BIN_MIN,
                          max_cached_bytes: Optional[int] = None,
                          close_session: bool = False) -> AllocStats:
    allocator = CachingAllocator(bin_min, max_cached_bytes)
    allocator.replay(trace)
    if close_session:
        allocator.close()
    return allocator.stats


@dataclass
class FootprintStudy:
    """Per-request footprint of each allocator over one request sequence"""
    lengths: List[int]
    planner_held: List[int] = field(default_factory=list)
    planner_peak: List[int] = field(default_factory=list)
    planner_chunks: List[int] = field(default_factory=list)
    gsoc: List[int] = field(default_factory=list)
    caching: List[int] = field(default_factory=list)
    planner_stats: AllocStats = field(default_factory=AllocStats)
    caching_stats: AllocStats = field(default_factory=AllocStats)
    plan_seconds: List[float] = field(default_factory=list)

    def rows(self) -> List[Tuple[int, int, int, int, int, int, int]]:
        return list(zip(range(len(self.lengths)), self.lengths, self.planner_chunks,
                        self.planner_held, self.planner_peak, self.gsoc, self.caching))


def footprint_study(config: ModelConfig, lengths: Sequence[int], cfg: Optional[PlannerConfig] = None,
                    batch: int = 1, caching_bin_min: int = Config.CACHING_BIN_MIN) -> FootprintStudy:
    """Run the chunk planner, GSOC and the caching allocator over the same request lengths"""
    session = PlannerSession(cfg or PlannerConfig.from_config())
    caching = CachingAllocator(caching_bin_min)
    study = FootprintStudy(lengths=list(lengths))

    tag = 0
    for seq_len in lengths:
        records = build_encoder_graph(config, batch, seq_len).tensors
        plan, stats = session.plan(records)
        study.planner_held.append(plan.footprint)
        study.planner_peak.append(stats.peak_footprint)
        study.planner_chunks.append(len(plan.chunks))
        study.gsoc.append(plan_gsoc(records, session.cfg.alignment).footprint)

        caching.replay(alloc_free_trace(records, tag=tag))
        study.caching.append(caching.footprint)
        tag += max((r.tensor_id for r in records), default=-1) + 1

    study.planner_stats = session.stats
    study.caching_stats = caching.stats
    study.plan_seconds = list(session.plan_seconds)
    logger.info(f"Footprint study over {len(lengths)} requests: "
                f"chunk planner peak {session.stats.peak_footprint} B, "
                f"caching peak {caching.stats.peak_footprint} B")
    return study


def scheduling_overhead(config: ModelConfig, lengths: Sequence[int],
                        inference_latency: Callable[[int], float],
                        cfg: Optional[PlannerConfig] = None) -> List[float]:
    """Offset-planning time of each inference as a fraction of its inference latency"""
    session = PlannerSession(cfg or PlannerConfig.from_config())
    ratios = []
    for seq_len in lengths:
        session.plan(build_encoder_graph(config, 1, seq_len).tensors)
        ratios.append(session.plan_seconds[-1] / inference_latency(seq_len))
    return ratios
