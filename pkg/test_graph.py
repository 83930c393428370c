# test_graph.py
"""
Tests for the fused encoder graph, its usage records and FLOP counts
"""

import pytest

from core.errors import FormatError, GraphError
from core.graph import (ELEMENT_SIZE, MODEL_INPUT, OPS_PER_LAYER, ModelConfig, OpKind,
                        build_encoder_graph, enumerate_gemm_flops, flops, format_records,
                        model_config, parse_records)

SCORE_OPS = ("qk_gemm", "scale_mask_softmax")


def _score_records(graph):
    return [t for t in graph.tensors if t.name.split(".", 1)[1] in SCORE_OPS]


def test_model_config_rejects_indivisible_heads():
    with pytest.raises(GraphError):
        ModelConfig(num_layers=1, num_heads=5, hidden_size=768, intermediate_size=3072, max_seq_len=8)


def test_unknown_model_preset():
    with pytest.raises(GraphError, match="bert-huge"):
        model_config("bert-huge")


def test_graph_layout(bert_base):
    graph = build_encoder_graph(bert_base, 1, 16)
    assert len(graph.ops) == bert_base.num_layers * OPS_PER_LAYER
    assert len(graph.gemm_ops) == bert_base.num_layers * 6
    # GEMMs and fused ops alternate
    kinds = [op.kind for op in graph.ops[:OPS_PER_LAYER]]
    assert kinds == [OpKind.GEMM, OpKind.FUSED] * 6
    for op in graph.ops:
        assert op.output == op.index
        assert all(i == MODEL_INPUT or i < op.index for i in op.inputs)


def test_records_follow_topological_order(bert_base):
    graph = build_encoder_graph(bert_base, 2, 33)
    for op, record in zip(graph.ops, graph.tensors):
        assert record.tensor_id == op.index
        assert record.first_op == op.index
        assert record.first_op <= record.last_op


def test_layer_lifetimes(bert_base):
    graph = build_encoder_graph(bert_base, 1, 8)
    lifetimes = [(t.first_op, t.last_op) for t in graph.tensors[:OPS_PER_LAYER]]
    assert lifetimes == [(0, 1), (1, 4), (2, 3), (3, 4), (4, 5), (5, 6),
                         (6, 7), (7, 11), (8, 9), (9, 10), (10, 11), (11, 19)]
    last = graph.tensors[-1]
    assert last.first_op == last.last_op


def test_record_sizes(bert_base):
    b, s = 2, 10
    h, heads, inter = bert_base.hidden_size, bert_base.num_heads, bert_base.intermediate_size
    sizes = [t.size for t in build_encoder_graph(bert_base, b, s).tensors[:OPS_PER_LAYER]]
    elems = [3 * b * s * h, 3 * b * s * h, b * heads * s * s, b * heads * s * s, b * s * h, b * s * h,
             b * s * h, b * s * h, b * s * inter, b * s * inter, b * s * h, b * s * h]
    assert sizes == [e * ELEMENT_SIZE for e in elems]


def test_single_token_scores(bert_base):
    graph = build_encoder_graph(bert_base, 1, 1)
    scores = _score_records(graph)
    assert len(scores) == 2 * bert_base.num_layers
    assert all(t.size == bert_base.num_heads * 4 for t in scores)


def test_topology_is_length_independent(bert_base):
    short = build_encoder_graph(bert_base, 1, 200)
    long = build_encoder_graph(bert_base, 1, 240)
    assert len(short.tensors) == len(long.tensors)
    assert [(t.first_op, t.last_op) for t in short.tensors] == [(t.first_op, t.last_op) for t in long.tensors]

    for a, b in zip(_score_records(short), _score_records(long)):
        assert b.size / a.size == pytest.approx(240 ** 2 / 200 ** 2)
        assert b.size > a.size


def test_graph_is_deterministic(bert_base):
    assert build_encoder_graph(bert_base, 3, 77).tensors == build_encoder_graph(bert_base, 3, 77).tensors


def test_rejects_long_and_empty_inputs(bert_base):
    with pytest.raises(GraphError, match="exceeds"):
        build_encoder_graph(bert_base, 1, bert_base.max_seq_len + 1)
    with pytest.raises(GraphError):
        build_encoder_graph(bert_base, 0, 10)
    with pytest.raises(GraphError):
        build_encoder_graph(bert_base, 1, 0)


def test_repeat_layers(bert_base):
    graph = build_encoder_graph(bert_base, 1, 64, repeat_layers=True)
    assert len(graph.tensors) == OPS_PER_LAYER
    assert graph.repeat == bert_base.num_layers
    assert graph.tensors[-1].last_op == OPS_PER_LAYER - 1
    full = build_encoder_graph(bert_base, 1, 64)
    assert graph.total_intermediate_bytes() == full.total_intermediate_bytes()


def test_bert_base_flops_at_40_tokens(bert_base):
    assert flops(bert_base, 1, 40) == 6_853_754_880
    assert flops(bert_base, 1, 40) / 1e9 == pytest.approx(6.9, abs=0.06)


def test_flops_closed_form_matches_gemm_shapes(bert_base):
    for batch, seq_len in [(1, 1), (1, 40), (4, 128), (2, 500)]:
        graph = build_encoder_graph(bert_base, batch, seq_len)
        assert enumerate_gemm_flops(graph) == flops(bert_base, batch, seq_len)
    one_layer = build_encoder_graph(bert_base, 2, 50, repeat_layers=True)
    assert enumerate_gemm_flops(one_layer) == flops(bert_base, 2, 50)


def test_flops_linear_in_batch(bert_base):
    assert flops(bert_base, 6, 30) == 6 * flops(bert_base, 1, 30)


def test_record_file_round_trip(tmp_path, bert_base):
    records = build_encoder_graph(bert_base, 1, 12).tensors
    path = tmp_path / "records.txt"
    path.write_text("# tensor_id first_op last_op size\n\n" + format_records(records))
    assert parse_records(str(path)) == records


def test_record_file_errors_name_the_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0 0 1 16\n1 3 2 16\n")
    with pytest.raises(FormatError, match=r"bad.txt:2"):
        parse_records(str(path))

    path.write_text("0 0 1\n")
    with pytest.raises(FormatError, match="expected 4 fields"):
        parse_records(str(path))

    path.write_text("0 0 x 16\n")
    with pytest.raises(FormatError, match="last_op"):
        parse_records(str(path))
