# core/graph.py
"""
Fused transformer-encoder graph: operators in topological order, the usage
records of every intermediate tensor, and GEMM FLOP counts.

Kernels between two GEMMs are fused into a single operator, so each layer is
six GEMMs interleaved with six fused non-GEMM operators. Every operator
produces exactly one tensor, whose id is the operator index.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

from utils.formats import iter_data_lines, parse_number

from .errors import FormatError, GraphError, PlannerError

ELEMENT_SIZE = 4  # FP32
MODEL_INPUT = -1  # embedding output; not an intermediate tensor
OPS_PER_LAYER = 12


@dataclass(frozen=True)
class ModelConfig:
    """Encoder hyperparameters"""
    num_layers: int
    num_heads: int
    hidden_size: int
    intermediate_size: int
    max_seq_len: int

    def __post_init__(self):
        errors = []
        for name in ("num_layers", "num_heads", "hidden_size", "intermediate_size", "max_seq_len"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        if self.num_heads >= 1 and self.hidden_size % self.num_heads != 0:
            errors.append("hidden_size must be divisible by num_heads")
        if errors:
            raise GraphError("Invalid model config: " + ", ".join(errors))

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads


MODEL_PRESETS: Dict[str, ModelConfig] = {
    "bert-base": ModelConfig(num_layers=12, num_heads=12, hidden_size=768,
                             intermediate_size=3072, max_seq_len=512),
    "bert-large": ModelConfig(num_layers=24, num_heads=16, hidden_size=1024,
                              intermediate_size=4096, max_seq_len=512),
}


def model_config(name: str) -> ModelConfig:
    """Look up a preset model configuration by name"""
    try:
        return MODEL_PRESETS[name]
    except KeyError:
        raise GraphError(f"Unknown model '{name}' (known: {', '.join(sorted(MODEL_PRESETS))})")


class OpKind(Enum):
    GEMM = "gemm"
    FUSED = "fused"


@dataclass(frozen=True)
class GemmShape:
    """`batch_count` independent (m x k) @ (k x n) products"""
    batch_count: int
    m: int
    n: int
    k: int

    @property
    def flops(self) -> int:
        return 2 * self.batch_count * self.m * self.n * self.k


@dataclass(frozen=True)
class OpDescriptor:
    index: int
    name: str
    kind: OpKind
    output: int
    inputs: Tuple[int, ...]
    gemm: Optional[GemmShape] = None


@dataclass(frozen=True)
class TensorUsageRecord:
    """Size and lifetime of one intermediate tensor over the operator order"""
    tensor_id: int
    first_op: int
    last_op: int
    size: int
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if self.first_op < 0 or self.first_op > self.last_op:
            raise PlannerError(
                f"tensor {self.tensor_id}: invalid lifetime [{self.first_op}, {self.last_op}]"
            )
        if self.size <= 0:
            raise PlannerError(f"tensor {self.tensor_id}: size must be positive, got {self.size}")

    def overlaps(self, other: "TensorUsageRecord") -> bool:
        return max(self.first_op, other.first_op) <= min(self.last_op, other.last_op)


@dataclass
class FusedGraph:
    config: ModelConfig
    batch: int
    seq_len: int
    ops: List[OpDescriptor]
    tensors: List[TensorUsageRecord]
    repeat: int = 1

    @property
    def gemm_ops(self) -> List[OpDescriptor]:
        return [op for op in self.ops if op.kind is OpKind.GEMM]

    def total_intermediate_bytes(self) -> int:
        return sum(t.size for t in self.tensors) * self.repeat


def _layer_ops(config: ModelConfig, batch: int, seq_len: int, layer: int) -> List[Tuple]:
    """(name, kind, local inputs, gemm shape, output elements) for one layer"""
    b, s = batch, seq_len
    h, heads, inter, d = config.hidden_size, config.num_heads, config.intermediate_size, config.head_size
    base = layer * OPS_PER_LAYER
    x = base - 1 if layer > 0 else MODEL_INPUT

    def local(i: int) -> int:
        return base + i

    return [
        ("qkv_gemm", OpKind.GEMM, (x,), GemmShape(1, b * s, 3 * h, h), 3 * b * s * h),
        ("bias_split_heads", OpKind.FUSED, (local(0),), None, 3 * b * s * h),
        ("qk_gemm", OpKind.GEMM, (local(1),), GemmShape(b * heads, s, s, d), b * heads * s * s),
        ("scale_mask_softmax", OpKind.FUSED, (local(2),), None, b * heads * s * s),
        ("attn_v_gemm", OpKind.GEMM, (local(3), local(1)), GemmShape(b * heads, s, d, s), b * s * h),
        ("merge_heads", OpKind.FUSED, (local(4),), None, b * s * h),
        ("out_proj_gemm", OpKind.GEMM, (local(5),), GemmShape(1, b * s, h, h), b * s * h),
        ("bias_residual_layernorm", OpKind.FUSED, (local(6), x), None, b * s * h),
        ("ffn_up_gemm", OpKind.GEMM, (local(7),), GemmShape(1, b * s, inter, h), b * s * inter),
        ("bias_gelu", OpKind.FUSED, (local(8),), None, b * s * inter),
        ("ffn_down_gemm", OpKind.GEMM, (local(9),), GemmShape(1, b * s, h, inter), b * s * h),
        ("bias_residual_layernorm", OpKind.FUSED, (local(10), local(7)), None, b * s * h),
    ]


def build_encoder_graph(config: ModelConfig, batch: int, seq_len: int,
                        repeat_layers: bool = False) -> FusedGraph:
    """
    Build the fused encoder graph and derive the usage record of every
    intermediate tensor.

    With `repeat_layers` the graph holds a single layer and `repeat` is the
    layer count; the layer output is released with the layer.
    """
    if batch < 1 or seq_len < 1:
        raise GraphError(f"batch and seq_len must be >= 1, got batch={batch}, seq_len={seq_len}")
    if seq_len > config.max_seq_len:
        raise GraphError(f"seq_len {seq_len} exceeds max_seq_len {config.max_seq_len}")

    layers = 1 if repeat_layers else config.num_layers
    ops: List[OpDescriptor] = []
    sizes: Dict[int, int] = {}
    for layer in range(layers):
        for name, kind, inputs, gemm, elements in _layer_ops(config, batch, seq_len, layer):
            index = len(ops)
            ops.append(OpDescriptor(index=index, name=f"L{layer}.{name}", kind=kind,
                                    output=index, inputs=inputs, gemm=gemm))
            sizes[index] = elements * ELEMENT_SIZE

    # a tensor lives from its producer to its last consumer
    last_use: Dict[int, int] = {op.output: op.index for op in ops}
    for op in ops:
        for tensor_id in op.inputs:
            if tensor_id != MODEL_INPUT:
                last_use[tensor_id] = max(last_use[tensor_id], op.index)

    tensors = [
        TensorUsageRecord(op.output, op.index, last_use[op.output], sizes[op.output], op.name)
        for op in ops
    ]
    return FusedGraph(config, batch, seq_len, ops, tensors,
                      repeat=config.num_layers if repeat_layers else 1)


def flops(config: ModelConfig, batch: int, seq_len: int) -> int:
    """
    GEMM FLOPs of one inference (2·m·n·k per GEMM; non-GEMM work ignored).

    Equals num_layers · batch · (24·s·h² + 4·s²·h) when intermediate_size = 4·h.
    """
    if batch < 1 or seq_len < 1:
        raise GraphError(f"batch and seq_len must be >= 1, got batch={batch}, seq_len={seq_len}")
    s, h, inter = seq_len, config.hidden_size, config.intermediate_size
    return config.num_layers * batch * (8 * s * h * h + 4 * s * h * inter + 4 * s * s * h)


def enumerate_gemm_flops(graph: FusedGraph) -> int:
    """FLOPs summed over the graph's GEMM shapes"""
    return sum(op.gemm.flops for op in graph.gemm_ops) * graph.repeat


def format_records(records: List[TensorUsageRecord]) -> str:
    """One record per line: `tensor_id first_op last_op size_bytes`"""
    return "".join(f"{r.tensor_id} {r.first_op} {r.last_op} {r.size}\n" for r in records)


def parse_records(path: str) -> List[TensorUsageRecord]:
    """Read the record format written by `format_records`; '#' starts a comment line"""
    records = []
    for line_no, line in iter_data_lines(path):
        fields = line.split()
        if len(fields) != 4:
            raise FormatError(path, line_no, f"expected 4 fields, got {len(fields)}")
        tensor_id, first_op, last_op, size = (
            parse_number(path, line_no, name, value)
            for name, value in zip(("tensor_id", "first_op", "last_op", "size_bytes"), fields)
        )
        try:
            records.append(TensorUsageRecord(tensor_id, first_op, last_op, size))
        except PlannerError as e:
            raise FormatError(path, line_no, str(e))
    return records
