import math

import numpy as np
import pytest

from coopt.builder import GraphBuilder
from coopt.cost import (
    CostError,
    HardwareProfile,
    LatencyTrace,
    SpikeRule,
    Trigger,
    estimate_frame_energy,
    estimate_graph_latency,
    generate_latency_trace,
    module_latency_breakdown,
    node_bytes,
    node_flops,
    sliding_window_energy,
    spike_energy,
    warmup_frames,
)
from coopt.fixtures import attention_block, uniad_like
from coopt.ir import ModuleTag as T, NodeKind as K
from coopt.passes import DEFAULT_PIPELINE, PruneSpec, optimize_pipeline, prune_modules
from coopt.quant import Scheme, apply_plan, plan_for_graph, random_calibration

HW = HardwareProfile()


def _shapes(g):
    return {t: s.shape for t, s in g.tensors.items()}


def _single(kind, shapes, attrs=None):
    b = GraphBuilder()
    ins = [b.input(f"x{i}", s) for i, s in enumerate(shapes)]
    y = b.op(kind, ins, T.Other, attrs, node_id="n")
    g = b.build([y])
    return g, g.node("n")


# -- FLOPs and bytes ---------------------------------------------------------------------

def test_matmul_flops():
    g, n = _single(K.MatMul, [(2, 2), (2, 2)])
    assert node_flops(n, _shapes(g)) == 16


def test_elementwise_flops():
    g, n = _single(K.Add, [(10,), (10,)])
    assert node_flops(n, _shapes(g)) == 10


def test_conv_flops():
    g, n = _single(K.Conv2d, [(1, 2, 5, 5), (3, 2, 3, 3)], {"stride": [1, 1], "padding": [0, 0]})
    assert node_flops(n, _shapes(g)) == 2 * 3 * 3 * 2 * 3 * 3 * 3


def test_bytes_read_inputs_write_output():
    g, n = _single(K.Add, [(10,), (10,)])
    assert node_bytes(n, g) == 3 * 10 * 4


def test_unresolved_shape_names_tensor():
    _, n = _single(K.Relu, [(3,)])
    with pytest.raises(CostError, match="x0"):
        node_flops(n, {})


def test_fused_mha_flops_equal_constituents():
    g0 = attention_block(16, 8, proj=True)
    g, _ = optimize_pipeline(g0, ["fuse_attention"])
    s0, s = _shapes(g0), _shapes(g)
    assert sum(node_flops(n, s) for n in g.nodes) == sum(node_flops(n, s0) for n in g0.nodes)


# -- latency and energy -------------------------------------------------------------------

def _constants_only(n):
    b = GraphBuilder()
    outs = [b.const_node([float(i)], T.Other) for i in range(n)]
    return b.build(outs)


def test_constants_only_latency_is_launch_overhead():
    assert estimate_graph_latency(_constants_only(7), HW) == pytest.approx(7 * HW.launch_overhead_s, rel=1e-12)


def test_constants_only_energy_without_idle_is_zero():
    hw = HardwareProfile(idle_power_w=0.0)
    assert estimate_frame_energy(_constants_only(5), hw) == 0.0


def test_roofline_takes_max_of_compute_and_memory():
    g, _ = _single(K.MatMul, [(64, 64), (64, 64)])
    flops, nbytes = 2 * 64**3, 3 * 64 * 64 * 4
    want = max(flops / HW.flops_per_second_f32, nbytes / HW.bytes_per_second) + HW.launch_overhead_s
    assert estimate_graph_latency(g, HW) == pytest.approx(want, rel=1e-12)


def test_energy_formula():
    g, _ = _single(K.Add, [(100,), (100,)])
    lat = estimate_graph_latency(g, HW)
    want = 100 * HW.joules_per_flop + 1200 * HW.joules_per_byte + HW.idle_power_w * lat
    assert estimate_frame_energy(g, HW) == pytest.approx(want, rel=1e-12)


def test_doubling_joules_per_flop_raises_energy():
    g = uniad_like(0)
    hw2 = HardwareProfile(joules_per_flop=2 * HW.joules_per_flop)
    assert estimate_frame_energy(g, hw2) > estimate_frame_energy(g, HW)


def test_invalid_profile():
    with pytest.raises(CostError):
        HardwareProfile(flops_per_second_f32=0.0)
    with pytest.raises(CostError):
        HardwareProfile(idle_power_w=-1.0)


@pytest.fixture(scope="module")
def graphs():
    base = uniad_like(0)
    hw, _ = optimize_pipeline(base, DEFAULT_PIPELINE)
    p = plan_for_graph(hw, Scheme.FeatureExt, random_calibration(hw, 4, seed=0))
    return base, hw, apply_plan(hw, p)


def test_fusion_lowers_latency(graphs):
    base, hw, _ = graphs
    assert estimate_graph_latency(hw, HW) < estimate_graph_latency(base, HW)


def test_feature_quantization_lowers_latency_and_energy(graphs):
    _, hw, q = graphs
    assert estimate_graph_latency(q, HW) < estimate_graph_latency(hw, HW)
    assert estimate_frame_energy(q, HW) <= estimate_frame_energy(hw, HW)


def test_module_breakdown_sums_to_total(graphs):
    base = graphs[0]
    parts = module_latency_breakdown(base, HW)
    assert set(parts) == {t.value for t in T}
    assert math.isclose(sum(parts.values()), estimate_graph_latency(base, HW), rel_tol=1e-12)


# -- latency traces -------------------------------------------------------------------------

def test_trace_without_rules_is_constant(graphs):
    base = graphs[0]
    tr = generate_latency_trace(base, HW, 50)
    assert len(set(tr.frame_latencies_s)) == 1 and not tr.spike_frames
    assert tr.frame_latencies_s[0] == estimate_graph_latency(base, HW)


def test_obstacle_spikes_follow_signal():
    sig = [i in (10, 11) for i in range(20)]
    tr = generate_latency_trace(None, HW, 20, [SpikeRule(Trigger.ObstacleAhead, added_latency_s=0.15)], sig, base_latency_s=0.05)
    assert tr.spike_frames == frozenset({10, 11})
    assert tr.frame_latencies_s[10] == pytest.approx(0.2) and tr.frame_latencies_s[0] == 0.05


def test_obstacle_rule_needs_signal():
    with pytest.raises(CostError, match="signal"):
        generate_latency_trace(None, HW, 5, [SpikeRule(Trigger.ObstacleAhead)], base_latency_s=0.05)


def test_probability_spike_rate():
    tr = generate_latency_trace(None, HW, 10_000, [SpikeRule(Trigger.Probability, p=0.05)], seed=3, base_latency_s=0.05)
    assert abs(len(tr.spike_frames) / 10_000 - 0.05) <= 0.01


def test_trace_determinism():
    rules = [SpikeRule(Trigger.Probability, p=0.2)]
    a = generate_latency_trace(None, HW, 500, rules, seed=11, base_latency_s=0.05)
    b = generate_latency_trace(None, HW, 500, rules, seed=11, base_latency_s=0.05)
    c = generate_latency_trace(None, HW, 500, rules, seed=12, base_latency_s=0.05)
    assert a.to_csv() == b.to_csv() != c.to_csv()


def test_rule_dropped_when_module_pruned(graphs):
    base = graphs[0]
    pruned, _ = prune_modules(base, PruneSpec(frozenset({T.Occ})))
    rule = SpikeRule(Trigger.Probability, p=1.0, module=T.Occ)
    assert generate_latency_trace(base, HW, 3, [rule], base_latency_s=0.05).spike_frames == {0, 1, 2}
    assert not generate_latency_trace(pruned, HW, 3, [rule], base_latency_s=0.05).spike_frames


def test_trace_csv_header():
    text = LatencyTrace([0.05, 0.2], frozenset({1})).to_csv()
    assert text.splitlines() == ["frame,latency_s,spiked", "0,0.05,0", "1,0.2,1"]


def test_trace_rejects_nonpositive():
    with pytest.raises(CostError):
        LatencyTrace([0.05, 0.0])


def test_spike_energy_bills_extra_time():
    assert spike_energy(2.0, 0.05, 0.15) == pytest.approx(8.0)


# -- sliding-window energy ------------------------------------------------------------------

def test_window_energy_constant():
    assert sliding_window_energy([2.0] * 1000, 100, 0.0) == 2.0


def test_window_energy_alternating():
    assert sliding_window_energy([1.0, 3.0] * 100, 100, 0.0) == 2.0


def test_warmup_frames_round_up():
    assert warmup_frames(30.0, 0.05) == 600
    assert warmup_frames(1.0, 0.3) == 4
    assert warmup_frames(0.0, 0.05) == 0


def test_window_energy_skips_warmup():
    e = [100.0] * 600 + [1.0] * 200
    assert sliding_window_energy(e, 100, 30.0, 0.05) == 1.0


def test_window_energy_ignores_partial_window():
    assert sliding_window_energy([1.0] * 100 + [50.0] * 99, 100, 0.0) == 1.0


def test_window_energy_insufficient_frames():
    with pytest.raises(CostError, match="insufficient"):
        sliding_window_energy([1.0] * 650, 100, 30.0, 0.05)


def test_window_energy_matches_plain_mean():
    e = np.random.default_rng(0).uniform(0, 5, 1000)
    assert sliding_window_energy(e, 100, 0.0) == pytest.approx(float(e.mean()), rel=1e-12)
