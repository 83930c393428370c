# conftest.py
"""
Shared fixtures and brute-force oracles for the test suite
"""

import itertools
import os
import sys
from typing import Callable, List, Sequence, Tuple

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from core.cost import AnalyticCost, CostCoeffs, CostTable, cost_preset  # noqa: E402
from core.graph import TensorUsageRecord, model_config  # noqa: E402
from core.scheduler import Request  # noqa: E402


@pytest.fixture
def bert_base():
    return model_config("bert-base")


@pytest.fixture
def launch_bound(bert_base):
    return AnalyticCost(bert_base, cost_preset("launch-bound"))


@pytest.fixture
def padding_heavy(bert_base):
    return AnalyticCost(bert_base, cost_preset("padding-heavy"))


@pytest.fixture
def overhead_only(bert_base):
    return AnalyticCost(bert_base, CostCoeffs(a=0.0, b=0.0, c=0.01))


@pytest.fixture
def small_table():
    return CostTable({(s, b): 0.001 * s + 0.0005 * b for s in (10, 20, 40) for b in (1, 2, 4)})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def records_from(specs: Sequence[Tuple[int, int, int]]) -> List[TensorUsageRecord]:
    """(first_op, last_op, size) tuples; tensor ids follow list order"""
    return [TensorUsageRecord(i, first, last, size) for i, (first, last, size) in enumerate(specs)]


def random_records(rng: np.random.Generator, n: int, max_size: int = 64, max_op: int = 8) -> List[TensorUsageRecord]:
    records = []
    for i in range(n):
        first = int(rng.integers(0, max_op))
        last = int(rng.integers(first, max_op))
        records.append(TensorUsageRecord(i, first, last, int(rng.integers(1, max_size + 1))))
    return records


def requests_from(lengths: Sequence[int]) -> List[Request]:
    return [Request(f"q{i:02d}", s, float(i)) for i, s in enumerate(lengths)]


def max_live_bytes(records: Sequence[TensorUsageRecord]) -> int:
    last = max((r.last_op for r in records), default=-1)
    return max((sum(r.size for r in records if r.first_op <= op <= r.last_op) for op in range(last + 1)),
               default=0)


class _Done(Exception):
    pass


def optimal_footprint(records: Sequence[TensorUsageRecord]) -> int:
    """
    Minimum arena size over all offset assignments (alignment 1).

    Tensors are placed in non-decreasing offset order; a left-compacted
    optimum only uses offsets in {0} ∪ {end of an already placed tensor}.
    """
    lower = max_live_bytes(records)
    best = [sum(r.size for r in records)]

    def dfs(placed: List[Tuple[TensorUsageRecord, int]], remaining: Tuple[TensorUsageRecord, ...],
            min_offset: int, high: int) -> None:
        if high >= best[0]:
            return
        if not remaining:
            best[0] = high
            if high == lower:
                raise _Done
            return
        candidates = sorted({0} | {off + r.size for r, off in placed})
        for index, record in enumerate(remaining):
            rest = remaining[:index] + remaining[index + 1:]
            for offset in candidates:
                if offset < min_offset:
                    continue
                clash = any(record.overlaps(other) and offset < off + other.size and off < offset + record.size
                            for other, off in placed)
                if not clash:
                    dfs(placed + [(record, offset)], rest, offset, max(high, offset + record.size))

    try:
        dfs([], tuple(records), 0, 0)
    except _Done:
        pass
    return best[0]


def brute_force_partition(lengths: Sequence[int], costs: Callable[[int, int], float]) -> float:
    """
    Minimum total cost over all contiguous partitions of the sorted lengths,
    where a batch ending at position i with k members costs costs(len_i, k) * k.
    """
    ordered = sorted(lengths)
    n = len(ordered)
    segment = {(start, end): costs(ordered[end], end - start + 1) * (end - start + 1)
               for end in range(n) for start in range(end + 1)}
    best = float("inf")
    for cuts in itertools.product((False, True), repeat=n - 1):
        total, start = 0.0, 0
        for i in range(n):
            if i == n - 1 or cuts[i]:
                total += segment[(start, i)]
                start = i + 1
        best = min(best, total)
    return best
