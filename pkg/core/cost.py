# core/cost.py
"""
Latency of one batch keyed by (sequence length, batch size). The batch
scheduler plans over `AmortizedCost`, the per-request share of that latency.

Providers:
* AnalyticCost      - linear-in-FLOPs model with a fixed per-inference overhead
* TableCost         - warm-up table, exact lookups only
* InterpolatedCost  - sampled grid with bilinear interpolation
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from utils.formats import csv_text, parse_number, read_csv_rows

from .errors import FormatError, MissingCostError, WarmupError
from .graph import ModelConfig

logger = logging.getLogger(__name__)

CostKey = Tuple[int, int]


@dataclass(frozen=True)
class CostCoeffs:
    """a: s per linear-term FLOP, b: s per attention-score FLOP, c: per-inference launch floor"""
    a: float
    b: float
    c: float

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise ValueError(f"cost coefficients must be non-negative, got a={self.a}, b={self.b}")
        if self.c <= 0:
            raise ValueError(f"launch overhead c must be positive, got {self.c}")


COST_PRESETS: Dict[str, CostCoeffs] = {
    # launch overhead dominates short requests
    "launch-bound": CostCoeffs(a=1e-13, b=1e-13, c=4e-3),
    # attention term dominates long requests, padding is expensive
    "padding-heavy": CostCoeffs(a=1e-13, b=4e-12, c=1e-3),
}


def cost_preset(name: str) -> CostCoeffs:
    try:
        return COST_PRESETS[name]
    except KeyError:
        raise ValueError(f"Unknown cost preset '{name}' (known: {', '.join(sorted(COST_PRESETS))})")


def analytic_cost(config: ModelConfig, coeffs: CostCoeffs, seq_len: int, batch: int) -> float:
    """
    a·(linear GEMM FLOPs) + b·(s² attention FLOPs) + c.

    The linear term is L·b·(8·s·h² + 4·s·h·inter), i.e. 24·s·h²·L·b for inter = 4·h.
    """
    if seq_len < 1 or batch < 1:
        raise ValueError(f"seq_len and batch must be >= 1, got ({seq_len}, {batch})")
    s, h, inter, layers = seq_len, config.hidden_size, config.intermediate_size, config.num_layers
    linear_flops = layers * batch * (8 * s * h * h + 4 * s * h * inter)
    quadratic_flops = layers * batch * 4 * s * s * h
    return coeffs.a * linear_flops + coeffs.b * quadratic_flops + coeffs.c


def check_latency(seq_len: int, batch: int, latency: float) -> float:
    """Validated cost entry value; keys must be >= 1 and latencies finite and positive"""
    if seq_len < 1 or batch < 1:
        raise ValueError(f"seq_len and batch must be >= 1, got ({seq_len}, {batch})")
    latency = float(latency)
    if not math.isfinite(latency) or latency <= 0:
        raise ValueError(f"latency for ({seq_len}, {batch}) must be finite and positive, got {latency!r}")
    return latency


@dataclass
class CostTable:
    """Latency per (seq_len, batch) key"""
    entries: Dict[CostKey, float] = field(default_factory=dict)

    def add(self, seq_len: int, batch: int, latency: float) -> None:
        """Insert a new entry; duplicate keys are rejected"""
        latency = check_latency(seq_len, batch, latency)
        if (seq_len, batch) in self.entries:
            raise ValueError(f"duplicate cost entry for (seq_len={seq_len}, batch={batch})")
        self.entries[(seq_len, batch)] = latency

    @property
    def seq_lens(self) -> List[int]:
        return sorted({s for s, _ in self.entries})

    @property
    def batches(self) -> List[int]:
        return sorted({b for _, b in self.entries})

    def is_full_grid(self) -> bool:
        return len(self.entries) == len(self.seq_lens) * len(self.batches)

    def in_hull(self, seq_len: int, batch: int) -> bool:
        if not self.entries:
            return False
        seq_lens, batches = self.seq_lens, self.batches
        return seq_lens[0] <= seq_len <= seq_lens[-1] and batches[0] <= batch <= batches[-1]

    def validate_monotone(self) -> List[Tuple[int, int, int]]:
        """(batch, shorter_len, longer_len) pairs where latency drops as length grows"""
        violations = []
        for batch in self.batches:
            row = sorted((s, lat) for (s, b), lat in self.entries.items() if b == batch)
            for (s0, lat0), (s1, lat1) in zip(row, row[1:]):
                if lat1 < lat0:
                    violations.append((batch, s0, s1))
        if violations:
            logger.warning(f"Cost table is not monotone in seq_len at {len(violations)} place(s), "
                           f"first: batch={violations[0][0]} between seq_len {violations[0][1]} "
                           f"and {violations[0][2]}")
        return violations


class ProviderKind(Enum):
    ANALYTIC = "analytic"
    TABLE = "table"
    INTERPOLATED = "interpolated"


class CostProvider:
    """Base class; `lookup` returns the latency of one batch in seconds"""
    kind: ProviderKind

    def lookup(self, seq_len: int, batch: int) -> float:
        raise NotImplementedError

    def __call__(self, seq_len: int, batch: int) -> float:
        return self.lookup(seq_len, batch)


class AnalyticCost(CostProvider):
    kind = ProviderKind.ANALYTIC

    def __init__(self, config: ModelConfig, coeffs: CostCoeffs):
        self.config = config
        self.coeffs = coeffs

    def lookup(self, seq_len: int, batch: int) -> float:
        return analytic_cost(self.config, self.coeffs, seq_len, batch)


class TableCost(CostProvider):
    """
    Exact lookups into a warm-up table.

    `observe` overwrites entries with measured latencies (lazy update); it
    must not run concurrently with readers.
    """
    kind = ProviderKind.TABLE

    def __init__(self, table: CostTable):
        self.table = table

    def lookup(self, seq_len: int, batch: int) -> float:
        try:
            return self.table.entries[(seq_len, batch)]
        except KeyError:
            reason = "no cost entry" if self.table.in_hull(seq_len, batch) else "outside cost table hull"
            raise MissingCostError(seq_len, batch, reason)

    def observe(self, seq_len: int, batch: int, latency: float) -> None:
        self.table.entries[(seq_len, batch)] = check_latency(seq_len, batch, latency)


@dataclass(frozen=True)
class LookupResult:
    latency: float
    clamped: bool = False


class InterpolatedCost(TableCost):
    """Bilinear interpolation over a rectangular (seq_len, batch) grid; clamps outside the hull"""
    kind = ProviderKind.INTERPOLATED

    def __init__(self, table: CostTable):
        if not table.entries:
            raise ValueError("interpolation needs a non-empty cost table")
        if not table.is_full_grid():
            raise ValueError("interpolation needs a table covering the full (seq_len, batch) grid")
        super().__init__(table)
        self.observed: Dict[CostKey, float] = {}
        self._rebuild()

    def _rebuild(self) -> None:
        self._seq_axis = np.array(self.table.seq_lens, dtype=np.float64)
        self._batch_axis = np.array(self.table.batches, dtype=np.float64)
        self._grid = np.array([[self.table.entries[(s, b)] for b in self.table.batches]
                               for s in self.table.seq_lens], dtype=np.float64)

    @staticmethod
    def _bracket(axis: np.ndarray, value: float) -> Tuple[int, int, float]:
        if len(axis) == 1:
            return 0, 0, 0.0
        i = int(np.searchsorted(axis, value, side="right")) - 1
        i = min(max(i, 0), len(axis) - 2)
        t = (value - axis[i]) / (axis[i + 1] - axis[i])
        return i, i + 1, float(t)

    def lookup_detail(self, seq_len: int, batch: int) -> LookupResult:
        key = (seq_len, batch)
        if key in self.observed:
            return LookupResult(self.observed[key])
        if key in self.table.entries:
            return LookupResult(self.table.entries[key])

        s = float(np.clip(seq_len, self._seq_axis[0], self._seq_axis[-1]))
        b = float(np.clip(batch, self._batch_axis[0], self._batch_axis[-1]))
        clamped = s != seq_len or b != batch
        if clamped:
            logger.warning(f"Cost lookup ({seq_len}, {batch}) outside sampled grid, clamped to ({s:g}, {b:g})")

        i0, i1, t = self._bracket(self._seq_axis, s)
        j0, j1, u = self._bracket(self._batch_axis, b)
        grid = self._grid
        latency = ((1 - t) * (1 - u) * grid[i0, j0] + t * (1 - u) * grid[i1, j0]
                   + (1 - t) * u * grid[i0, j1] + t * u * grid[i1, j1])
        return LookupResult(float(latency), clamped)

    def lookup(self, seq_len: int, batch: int) -> float:
        return self.lookup_detail(seq_len, batch).latency

    def observe(self, seq_len: int, batch: int, latency: float) -> None:
        key = (seq_len, batch)
        if key in self.table.entries:
            super().observe(seq_len, batch, latency)
            self._rebuild()
        else:
            self.observed[key] = check_latency(seq_len, batch, latency)


def lookup(provider: CostProvider, seq_len: int, batch: int) -> float:
    return provider.lookup(seq_len, batch)


class AmortizedCost:
    """
    Per-request share of a batch's latency: provider(seq_len, batch) / batch.

    This is the scheduler's cost oracle; a batch of `count` requests padded
    to `seq_len` is charged amortized(seq_len, count) * count.
    """

    def __init__(self, provider: Callable[[int, int], float]):
        self.provider = provider

    def __call__(self, seq_len: int, batch: int) -> float:
        return self.provider(seq_len, batch) / batch


Executor = Union[CostProvider, Callable[[int, int], float]]


def warmup(executor: Executor, seq_lens: Iterable[int], batches: Iterable[int],
           path: Optional[str] = None) -> CostTable:
    """
    Measure every (seq_len, batch) pair of the grid. The table is written to
    `path` when given. A failing measurement raises WarmupError carrying the
    partial table.
    """
    seq_grid, batch_grid = sorted(set(seq_lens)), sorted(set(batches))
    if not seq_grid or not batch_grid:
        raise ValueError("warm-up grids must be non-empty")

    table = CostTable()
    for seq_len in seq_grid:
        for batch in batch_grid:
            try:
                latency = check_latency(seq_len, batch, executor(seq_len, batch))
            except Exception as e:
                logger.error(f"❌ Warm-up failed at ({seq_len}, {batch}): {e}")
                raise WarmupError((seq_len, batch), table, e) from e
            table.add(seq_len, batch, latency)

    logger.info(f"✅ Warm-up measured {len(table.entries)} entries "
                f"({len(seq_grid)} lengths x {len(batch_grid)} batch sizes)")
    if path is not None:
        save_cost_table(table, path)
    return table


COST_TABLE_COLUMNS = ("seq_len", "batch", "latency_s")


def cost_table_text(table: CostTable) -> str:
    rows = [(s, b, repr(table.entries[(s, b)])) for s, b in sorted(table.entries)]
    return csv_text(COST_TABLE_COLUMNS, rows)


def save_cost_table(table: CostTable, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(cost_table_text(table))


def load_cost_table(path: str) -> CostTable:
    table = CostTable()
    for line_no, row in read_csv_rows(path, COST_TABLE_COLUMNS):
        seq_len = parse_number(path, line_no, "seq_len", row["seq_len"])
        batch = parse_number(path, line_no, "batch", row["batch"])
        latency = parse_number(path, line_no, "latency_s", row["latency_s"], float)
        try:
            table.add(seq_len, batch, latency)
        except ValueError as e:
            raise FormatError(path, line_no, str(e))
    table.validate_monotone()
    return table
