# core/reduce.py
"""
Batched row reductions: softmax, layernorm with the one-pass variance
identity Var(x) = E(x²) - E(x)², and a model of the lane-tree reduction
schedule a GPU warp uses to sum a row.
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

logger = logging.getLogger(__name__)

WARP_LANES = 32


@dataclass(frozen=True)
class Batch2D:
    """Row-major float32 matrix; every value finite"""
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim == 1:
            data = data.reshape(1, -1)
        if data.ndim != 2:
            raise ValueError(f"expected a 2-D batch, got {data.ndim} dimensions")
        if not np.all(np.isfinite(data)):
            raise ValueError("batch contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


ArrayLike = Union[Batch2D, np.ndarray, list]


def _as_batch(x: ArrayLike) -> Batch2D:
    return x if isinstance(x, Batch2D) else Batch2D(np.asarray(x))


def batched_softmax(x: ArrayLike) -> Batch2D:
    """Row-wise softmax; max subtraction, float64 accumulation"""
    data = _as_batch(x).data.astype(np.float64)
    shifted = np.exp(data - data.max(axis=1, keepdims=True))
    out = (shifted / shifted.sum(axis=1, keepdims=True)).astype(np.float32)
    # outputs stay in (0, 1] where float32 underflows
    return Batch2D(np.maximum(out, np.finfo(np.float32).smallest_subnormal))


def batched_softmax_reference(x: ArrayLike) -> np.ndarray:
    """Independent per-row oracle with exactly rounded sums (float64 result)"""
    data = _as_batch(x).data
    out = np.empty(data.shape, dtype=np.float64)
    for i, row in enumerate(data.tolist()):
        top = max(row)
        exps = [math.exp(v - top) for v in row]
        total = math.fsum(exps)
        out[i] = [e / total for e in exps]
    return out


def _check_affine(batch: Batch2D, gamma, beta, eps: float):
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape != (batch.cols,) or beta.shape != (batch.cols,):
        raise ValueError(f"gamma and beta must have length {batch.cols}")
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    return gamma, beta


def batched_layernorm_onepass(x: ArrayLike, gamma, beta, eps: float = 1e-5) -> Batch2D:
    """
    Reduces x and x² together, then var = max(E(x²) - E(x)², 0).
    Accumulators are float64; output is float32.
    """
    batch = _as_batch(x)
    gamma, beta = _check_affine(batch, gamma, beta, eps)
    data = batch.data.astype(np.float64)
    n = batch.cols

    sums = np.stack([data, data * data]).sum(axis=2)
    mean = sums[0] / n
    var = np.maximum(sums[1] / n - mean * mean, 0.0)

    normed = (data - mean[:, None]) / np.sqrt(var + eps)[:, None]
    return Batch2D((gamma * normed + beta).astype(np.float32))


def batched_layernorm_twopass(x: ArrayLike, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Oracle: mean first, then E((x - mean)²), all in float64"""
    batch = _as_batch(x)
    gamma, beta = _check_affine(batch, gamma, beta, eps)
    data = batch.data.astype(np.float64)
    mean = data.mean(axis=1, keepdims=True)
    centered = data - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    return gamma * centered / np.sqrt(var + eps) + beta


def simulated_block_reduce(x: ArrayLike, lanes_per_group: int = WARP_LANES,
                           rows_per_block: int = 1) -> np.ndarray:
    """
    Sum each row with a fixed lane-tree schedule in float32.

    Lane k first accumulates elements k, k + lanes, k + 2·lanes, ... in order;
    then a shuffle-down tree adds lane k + offset into lane k for
    offset = lanes/2, ..., 1. Rows are zero-padded to a multiple of the lane
    count. `rows_per_block` rows advance through the schedule together, which
    changes nothing about any row's association order.
    """
    if lanes_per_group < 1 or lanes_per_group & (lanes_per_group - 1):
        raise ValueError(f"lanes_per_group must be a power of two, got {lanes_per_group}")
    if rows_per_block < 1:
        raise ValueError(f"rows_per_block must be >= 1, got {rows_per_block}")

    data = _as_batch(x).data
    rows, cols = data.shape
    steps = max(1, -(-cols // lanes_per_group))
    padded = np.zeros((rows, steps * lanes_per_group), dtype=np.float32)
    padded[:, :cols] = data

    result = np.empty(rows, dtype=np.float32)
    for first in range(0, rows, rows_per_block):
        block = padded[first:first + rows_per_block]
        lanes = np.zeros((block.shape[0], lanes_per_group), dtype=np.float32)
        for step in range(steps):
            lanes += block[:, step * lanes_per_group:(step + 1) * lanes_per_group]
        offset = lanes_per_group // 2
        while offset >= 1:
            lanes[:, :offset] += lanes[:, offset:2 * offset]
            offset //= 2
        result[first:first + block.shape[0]] = lanes[:, 0]
    return result


@dataclass
class ReductionBench:
    rows: int
    cols: int
    seed: int
    softmax_max_abs_dev: float
    softmax_max_row_sum_dev: float
    layernorm_max_rel_dev: float
    block_reduce_max_rel_dev: float
    softmax_rows_per_sec: Optional[float] = None
    layernorm_rows_per_sec: Optional[float] = None

    def as_dict(self, timing: bool = False) -> dict:
        values = {
            "rows": self.rows,
            "cols": self.cols,
            "seed": self.seed,
            "softmax_max_abs_dev": self.softmax_max_abs_dev,
            "softmax_max_row_sum_dev": self.softmax_max_row_sum_dev,
            "layernorm_max_rel_dev": self.layernorm_max_rel_dev,
            "block_reduce_max_rel_dev": self.block_reduce_max_rel_dev,
        }
        if timing:
            values["softmax_rows_per_sec"] = self.softmax_rows_per_sec
            values["layernorm_rows_per_sec"] = self.layernorm_rows_per_sec
        return values


def _rows_per_sec(fn, rows: int) -> float:
    start = time.perf_counter()
    fn()
    elapsed = time.perf_counter() - start
    return rows / elapsed if elapsed > 0 else float("inf")


def bench_reductions(rows: int, cols: int, seed: int = 0) -> ReductionBench:
    """Deviation of each reduction from its float64 oracle on seeded normal data"""
    if rows < 1 or cols < 1:
        raise ValueError(f"rows and cols must be >= 1, got ({rows}, {cols})")
    rng = np.random.default_rng(seed)
    x = Batch2D(rng.standard_normal((rows, cols)).astype(np.float32))
    gamma = rng.uniform(0.5, 1.5, cols)
    beta = rng.uniform(-0.5, 0.5, cols)

    soft = batched_softmax(x).data
    soft_dev = float(np.max(np.abs(soft - batched_softmax_reference(x))))
    row_sum_dev = float(np.max(np.abs(soft.astype(np.float64).sum(axis=1) - 1.0)))

    ln = batched_layernorm_onepass(x, gamma, beta).data.astype(np.float64)
    ln_ref = batched_layernorm_twopass(x, gamma, beta)
    ln_dev = float(np.max(np.abs(ln - ln_ref) / np.maximum(np.abs(ln_ref), 1.0)))

    exact = np.array([math.fsum(row) for row in x.data.astype(np.float64).tolist()])
    tree = simulated_block_reduce(x).astype(np.float64)
    tree_dev = float(np.max(np.abs(tree - exact) / np.maximum(np.abs(exact), 1.0)))

    report = ReductionBench(rows, cols, seed, soft_dev, row_sum_dev, ln_dev, tree_dev,
                            _rows_per_sec(lambda: batched_softmax(x), rows),
                            _rows_per_sec(lambda: batched_layernorm_onepass(x, gamma, beta), rows))
    logger.info(f"Reduction bench {rows}x{cols}: softmax dev {soft_dev:.2e}, layernorm dev {ln_dev:.2e}")
    return report
