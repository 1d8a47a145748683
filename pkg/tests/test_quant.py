import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopt.builder import GraphBuilder
from coopt.fixtures import attention_block, random_inputs, uniad_like
from coopt.interp import interpret
from coopt.ir import DType, ModuleTag as T, NodeKind as K, parse_graph, serialize
from coopt.passes import DEFAULT_PIPELINE, optimize_pipeline
from coopt.quant import (
    DEGENERATE_SCALE,
    CalibrationSet,
    ExclusionReason,
    QuantError,
    QuantParams,
    QuantizationPlan,
    Scheme,
    TensorRange,
    apply_plan,
    calibrate,
    compute_scale,
    dequantize_value,
    node_ids_by_reason,
    plan,
    plan_for_graph,
    quantize_value,
    random_calibration,
    select_nodes,
)

SYM = QuantParams(2 / 255)


# -- scalar quantization ---------------------------------------------------------------

@pytest.mark.parametrize("x, q", [(0.13, 17), (0.0, 0), (10.0, 127), (-10.0, -128), (-0.13, -17)])
def test_quantize_examples(x, q):
    assert quantize_value(x, SYM) == q


def test_dequantize_example():
    assert dequantize_value(64, SYM) == pytest.approx(0.50196078431, abs=1e-10)


def test_ties_round_away_from_zero():
    p = QuantParams(1.0)
    assert [quantize_value(v, p) for v in (0.5, 1.5, 2.5, -0.5, -2.5)] == [1, 2, 3, -1, -3]


def test_compute_scale_symmetric():
    p = compute_scale(TensorRange("t", -1.0, 1.0))
    assert p.scale == pytest.approx(2 / 255, rel=1e-15)
    assert (p.qmin, p.qmax) == (-128, 127) and not p.degenerate


def test_compute_scale_degenerate():
    p = compute_scale(TensorRange("t", 0.0, 0.0))
    assert p.degenerate and p.scale == DEGENERATE_SCALE
    assert dequantize_value(quantize_value(0.0, p), p) == 0.0


def test_compute_scale_affine_unit_step():
    p = compute_scale(TensorRange("t", 0.0, 255.0))
    assert p.scale == 1.0 and p.zero_point == -128
    assert quantize_value(0.0, p) == -128 and quantize_value(255.0, p) == 127


def test_zero_point_mode_zero():
    p = compute_scale(TensorRange("t", 0.0, 255.0), zero_point_mode="zero")
    assert p.zero_point == 0 and quantize_value(255.0, p) == 127


def test_invalid_inputs_rejected():
    with pytest.raises(QuantError):
        TensorRange("t", 1.0, 0.0)
    with pytest.raises(QuantError):
        TensorRange("t", 0.0, float("inf"))
    with pytest.raises(QuantError):
        compute_scale(TensorRange("t", 0.0, 1.0), bits=4)
    with pytest.raises(QuantError):
        compute_scale(TensorRange("t", 0.0, 1.0), zero_point_mode="odd")


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-1e3, 1e3, allow_nan=False),
    st.floats(1e-3, 1e3, allow_nan=False),
    st.floats(0.0, 1.0),
    st.sampled_from(["affine", "zero"]),
)
def test_round_trip_error_within_half_step(lo, width, frac, mode):
    hi = lo + width
    p = compute_scale(TensorRange("t", lo, hi), zero_point_mode=mode)
    x = lo + frac * width
    if mode == "zero" and not (p.qmin * p.scale <= x <= p.qmax * p.scale):
        return  # outside the representable grid the value saturates
    err = abs(x - dequantize_value(quantize_value(x, p), p))
    assert err <= p.scale / 2 * (1 + 1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e6, 1e6, allow_nan=False), st.floats(1e-4, 10.0))
def test_quantized_codes_saturate(x, s):
    q = quantize_value(x, QuantParams(s))
    assert -128 <= q <= 127


# -- calibration ----------------------------------------------------------------------

def _relu_graph():
    b = GraphBuilder()
    y = b.op(K.Relu, [b.input("x", (3,))], T.Other, node_id="r")
    return b.build([y]), y


def test_calibrate_min_max_over_frames():
    g, y = _relu_graph()
    calib = CalibrationSet([{"x": np.array([-2.0, 0.5, 1.0])}, {"x": np.array([3.0, -1.0, 0.0])}])
    r = calibrate(g, calib)
    assert (r["x"].x_min, r["x"].x_max) == (-2.0, 3.0)
    assert (r[y].x_min, r[y].x_max) == (0.0, 3.0)


def test_calibrate_parallel_matches_serial():
    g = attention_block(8, 4, proj=True)
    calib = random_calibration(g, 6, seed=1)
    assert calibrate(g, calib, jobs=3) == calibrate(g, calib, jobs=1)


def test_calibration_shape_mismatch():
    g, _ = _relu_graph()
    with pytest.raises(QuantError, match="x"):
        calibrate(g, CalibrationSet([{"x": np.zeros(4)}]))
    with pytest.raises(QuantError, match="x"):
        calibrate(g, CalibrationSet([{}]))


def test_calibration_round_trips_through_npz(tmp_path):
    g = attention_block(4, 2)
    calib = random_calibration(g, 3, seed=2)
    calib.save(tmp_path / "c.npz")
    back = CalibrationSet.load(tmp_path / "c.npz")
    assert back.count == 3
    for a, b in zip(calib.frames, back.frames):
        assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# -- node selection -------------------------------------------------------------------

@pytest.mark.parametrize("seq, excluded", [(256, False), (512, False), (513, True), (600, True)])
def test_long_sequence_attention_excluded(seq, excluded):
    g, _ = optimize_pipeline(attention_block(seq, 4), ["fuse_attention"])
    ex, cand = select_nodes(g)
    nid = g.nodes[0].id
    if excluded:
        assert ex == {nid: ExclusionReason.LongSeqMHA}
    else:
        assert cand == {nid} and not ex


def test_unfused_attention_products_excluded_by_sequence():
    ex, cand = select_nodes(attention_block(600, 4))
    assert ex["qk"] is ex["av"] is ExclusionReason.LongSeqMHA
    assert ex["softmax"] is ExclusionReason.UnsupportedKind


@pytest.mark.parametrize("shape, gemv", [((1, 1, 256), True), ((4, 1), True), ((1, 4, 256), False), ((3, 5), False)])
def test_gemv_degenerate(shape, gemv):
    b = GraphBuilder()
    x = b.input("x", shape[:-1] + (8,))
    y = b.op(K.MatMul, [x, b.weight("w", np.ones((8, shape[-1])))], T.Backbone, node_id="mm")
    ex, cand = select_nodes(b.build([y]))
    assert (ex.get("mm") is ExclusionReason.GEMVDegenerate) == gemv
    assert ("mm" in cand) != gemv


@pytest.fixture(scope="module")
def hw_graph():
    g, _ = optimize_pipeline(uniad_like(0), DEFAULT_PIPELINE)
    return g


@pytest.fixture(scope="module")
def hw_ranges(hw_graph):
    return calibrate(hw_graph, random_calibration(hw_graph, 4, seed=0))


def test_scheme_partition(hw_graph, hw_ranges):
    full = plan(hw_graph, Scheme.Full, hw_ranges).quantized_nodes
    feat = plan(hw_graph, Scheme.FeatureExt, hw_ranges).quantized_nodes
    pred = plan(hw_graph, Scheme.Prediction, hw_ranges).quantized_nodes
    assert feat and pred
    assert {hw_graph.node(n).tag for n in feat} <= {T.Backbone, T.BevEncoder}
    assert feat | pred == full and not feat & pred


def test_fixture_has_long_sequence_exclusion(hw_graph, hw_ranges):
    p = plan(hw_graph, Scheme.Full, hw_ranges)
    assert node_ids_by_reason(p, ExclusionReason.LongSeqMHA)
    assert node_ids_by_reason(p, ExclusionReason.GEMVDegenerate)


def test_plan_json_round_trip(hw_graph, hw_ranges):
    p = plan(hw_graph, Scheme.FeatureExt, hw_ranges)
    assert QuantizationPlan.from_dict(json.loads(p.to_json())) == p


def test_plan_missing_range_names_tensor(hw_graph):
    with pytest.raises(QuantError, match="no calibration range"):
        plan(hw_graph, Scheme.Full, {})


# -- applying a plan -------------------------------------------------------------------

def test_empty_plan_is_identity(hw_graph):
    p = QuantizationPlan(Scheme.Full, frozenset(), {})
    assert apply_plan(hw_graph, p) is hw_graph


def test_reapplication_rejected(hw_graph, hw_ranges):
    p = plan(hw_graph, Scheme.FeatureExt, hw_ranges)
    q = apply_plan(hw_graph, p)
    with pytest.raises(QuantError, match="already"):
        apply_plan(q, p)


def test_quantized_graph_round_trips(hw_graph, hw_ranges):
    q = apply_plan(hw_graph, plan(hw_graph, Scheme.FeatureExt, hw_ranges))
    back = parse_graph(serialize(q))
    assert back == q
    x = random_inputs(q, np.random.default_rng(0))
    a, b = interpret(q, x), interpret(back, x)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_quantized_weights_stored_as_int8(hw_graph, hw_ranges):
    q = apply_plan(hw_graph, plan(hw_graph, Scheme.FeatureExt, hw_ranges))
    codes = [t for t in q.constants if q.tensors[t].dtype is DType.I8]
    assert codes
    for t in codes:
        v = q.constants[t]
        assert np.array_equal(v, np.round(v)) and v.min() >= -128 and v.max() <= 127
    assert len(serialize(q)) < len(serialize(hw_graph))


def test_single_matmul_error_bound():
    rng = np.random.default_rng(4)
    b = GraphBuilder()
    x = b.input("x", (4, 6))
    w = rng.uniform(-1, 1, (6, 3))
    y = b.op(K.MatMul, [x, b.weight("w", w)], T.Backbone, node_id="mm")
    g = b.build([y])
    calib = random_calibration(g, 16, seed=0)
    p = plan_for_graph(g, Scheme.Full, calib)
    q = apply_plan(g, p)
    sa, sb = p.params["mm"].inputs[0].scale, p.params["mm"].inputs[1].scale
    for frame in calib.frames:  # in-range inputs: every code error is at most half a step
        a = frame["x"]
        exact = a @ w
        got = interpret(q, {"x": a}, as_float64=True)[y]
        # |AB - A'B'| <= |A| e_b + e_a |B| + e_a e_b, with e = s/2 per element
        bound = np.abs(a) @ np.full_like(w, sb / 2) + np.full_like(a, sa / 2) @ np.abs(w) + a.shape[1] * sa * sb / 4
        assert np.all(np.abs(got - exact) <= bound * (1 + 1e-9))


def test_quantized_fixture_stays_close(hw_graph, hw_ranges):
    q = apply_plan(hw_graph, plan(hw_graph, Scheme.FeatureExt, hw_ranges))
    x = random_inputs(hw_graph, np.random.default_rng(9))
    a, b = interpret(hw_graph, x, as_float64=True), interpret(q, x, as_float64=True)
    for k in a:
        scale = max(1.0, float(np.abs(a[k]).max()))
        assert float(np.abs(a[k] - b[k]).max()) < 0.25 * scale
