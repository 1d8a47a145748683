"""Analytic latency/energy model (roofline per node) and latency-trace generation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .ir import Graph, ModuleTag, Node, NodeKind
from .shapes import conv_out_hw, mha_parts


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class HardwareProfile:
    """Desk-scale accelerator description. Defaults live in the run config too."""

    flops_per_second_f32: float = 7.0e8
    int8_speedup: float = 2.0
    launch_overhead_s: float = 5e-6
    bytes_per_second: float = 7.0e8
    joules_per_flop: float = 2.0e-8
    joules_per_byte: float = 1.0e-8
    idle_power_w: float = 2.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k == "idle_power_w":
                if v < 0:
                    raise CostError("idle_power_w must be >= 0")
            elif not v > 0:
                raise CostError(f"{k} must be > 0")

    @classmethod
    def from_dict(cls, d: Mapping) -> "HardwareProfile":
        return cls(**{k: float(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return asdict(self)


# -- FLOP counting ------------------------------------------------------------

def _numel(shape: Sequence[int]) -> int:
    return int(np.prod(shape)) if len(shape) else 1


def _matmul_flops(a: Sequence[int], b: Sequence[int], out: Sequence[int]) -> int:
    # 2*M*K*N per batch element
    return 2 * _numel(out) * int(a[-1])


def _conv_flops(x: Sequence[int], w: Sequence[int], out: Sequence[int]) -> int:
    n, c_out, ho, wo = out
    return 2 * int(w[2]) * int(w[3]) * int(x[1]) * int(c_out) * int(ho) * int(wo) * int(n)


ZERO_FLOP = frozenset({NodeKind.Constant, NodeKind.Transpose, NodeKind.Reshape})
ELEMENTWISE = frozenset(
    {
        NodeKind.Add,
        NodeKind.Mul,
        NodeKind.Relu,
        NodeKind.Scale,
        NodeKind.Softmax,
        NodeKind.LayerNorm,
        NodeKind.GridSample,
        NodeKind.Rotate,
        NodeKind.Quantize,
        NodeKind.Dequantize,
    }
)


def node_flops(n: Node, shapes: Mapping[str, Sequence[int]]) -> int:
    try:
        ins = [tuple(shapes[t]) for t in n.inputs]
        out = tuple(shapes[n.outputs[0]])
    except KeyError as e:
        raise CostError(f"node {n.id!r}: unresolved shape for tensor {e.args[0]!r}") from e
    k = n.kind
    if k in ZERO_FLOP:
        return 0
    if k in ELEMENTWISE:
        return _numel(out)
    if k is NodeKind.MatMul:
        return _matmul_flops(ins[0], ins[1], out)
    if k is NodeKind.Conv2d:
        return _conv_flops(ins[0], ins[1], out)
    if k is NodeKind.Inverse:
        m = ins[0][-1]
        return _numel(ins[0][:-2]) * m**3
    if k is NodeKind.ModulatedDeformConv2d:
        x, _, _, w = ins
        sampled = out[0] * x[1] * w[2] * w[3] * out[2] * out[3]
        return _conv_flops(x, w, out) + 2 * sampled  # bilinear gather + modulation
    if k is NodeKind.FusedConvAdd:
        conv = (ins[0][0], ins[1][0]) + conv_out_hw(n, ins[0][2], ins[0][3], ins[1][2], ins[1][3])
        return _conv_flops(ins[0], ins[1], conv) + _numel(out)
    if k is NodeKind.FusedMatMulAdd:
        mm = tuple(np.broadcast_shapes(ins[0][:-2], ins[1][:-2])) + (ins[0][-2], ins[1][-1])
        return _matmul_flops(ins[0], ins[1], mm) + _numel(out)
    if k is NodeKind.FusedMHA:
        p = mha_parts(n, ins)
        total = 0
        if n.attr("proj", 0):
            for i, key in ((0, "q"), (2, "k"), (4, "v")):
                total += _matmul_flops(ins[i], ins[i + 1], p[key])
        total += _matmul_flops(p["q"], p["kt"], p["scores"])
        total += 2 * _numel(p["scores"])  # scale + softmax
        total += _matmul_flops(p["scores"], p["v"], p["out"])
        return total
    if k is NodeKind.FusedMSDA:
        total = 0
        acc = None
        for i in range(0, len(ins), 3):
            v, grid, wt = ins[i : i + 3]
            sampled = (v[0], v[1], grid[1], grid[2])
            term = tuple(np.broadcast_shapes(sampled, wt))
            total += _numel(sampled) + _numel(term)
            if acc is not None:
                acc = tuple(np.broadcast_shapes(acc, term))
                total += _numel(acc)
            else:
                acc = term
        return total
    raise CostError(f"node {n.id!r}: no cost rule for {k.value}")


def node_bytes(n: Node, g: Graph) -> int:
    """Off-chip traffic: read every input once, write the output once."""
    if n.kind in (NodeKind.Constant, NodeKind.Reshape):
        return 0
    return sum(g.tensors[t].nbytes for t in n.inputs) + g.tensors[n.outputs[0]].nbytes


def _is_int8(n: Node) -> bool:
    return bool(n.attr("quantized", 0))


@dataclass(frozen=True)
class NodeCost:
    node: str
    flops: int
    bytes: int
    compute_s: float
    memory_s: float
    int8: bool

    @property
    def time_s(self) -> float:
        return max(self.compute_s, self.memory_s)


def node_costs(g: Graph, hw: HardwareProfile) -> list[NodeCost]:
    shapes = {t: s.shape for t, s in g.tensors.items()}
    out = []
    for n in g.nodes:
        f = node_flops(n, shapes)
        b = node_bytes(n, g)
        int8 = _is_int8(n)
        compute = f / hw.flops_per_second_f32 / (hw.int8_speedup if int8 else 1.0)
        out.append(NodeCost(n.id, f, b, compute, b / hw.bytes_per_second, int8))
    return out


def estimate_graph_latency(g: Graph, hw: HardwareProfile) -> float:
    costs = node_costs(g, hw)
    return sum(c.time_s for c in costs) + hw.launch_overhead_s * len(g.nodes)


def estimate_frame_energy(g: Graph, hw: HardwareProfile) -> float:
    """Dynamic compute + traffic energy plus idle power over the frame's latency."""
    costs = node_costs(g, hw)
    compute = sum(c.flops for c in costs) * hw.joules_per_flop
    traffic = sum(c.bytes for c in costs) * hw.joules_per_byte
    latency = sum(c.time_s for c in costs) + hw.launch_overhead_s * len(g.nodes)
    return compute + traffic + hw.idle_power_w * latency


def module_latency_breakdown(g: Graph, hw: HardwareProfile) -> dict[str, float]:
    by_tag: dict[str, float] = {}
    for n, c in zip(g.nodes, node_costs(g, hw)):
        by_tag[n.tag.value] = by_tag.get(n.tag.value, 0.0) + c.time_s + hw.launch_overhead_s
    return dict(sorted(by_tag.items()))


# -- latency traces ---------------------------------------------------------------

class Trigger(str, Enum):
    ObstacleAhead = "ObstacleAhead"
    Probability = "Probability"


@dataclass(frozen=True)
class SpikeRule:
    trigger: Trigger
    p: float = 0.0
    added_latency_s: float = 0.150
    module: ModuleTag | None = None  # rule only exists while this module is in the graph

    def __post_init__(self):
        object.__setattr__(self, "trigger", Trigger(self.trigger))
        if self.module is not None:
            object.__setattr__(self, "module", ModuleTag(self.module))
        if not 0.0 <= self.p <= 1.0 or self.added_latency_s < 0:
            raise CostError(f"invalid spike rule {self}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SpikeRule":
        return cls(
            Trigger(d["trigger"]),
            float(d.get("p", 0.0)),
            float(d.get("added_latency_s", 0.150)),
            d.get("module"),
        )

    def to_dict(self) -> dict:
        return {
            "trigger": self.trigger.value,
            "p": self.p,
            "added_latency_s": self.added_latency_s,
            "module": None if self.module is None else self.module.value,
        }


def active_rules(g: Graph | None, rules: Sequence[SpikeRule]) -> list[SpikeRule]:
    if g is None:
        return list(rules)
    tags = g.tags()
    return [r for r in rules if r.module is None or r.module in tags]


class SpikeSampler:
    """Per-frame spike decisions from an explicit seeded generator."""

    def __init__(self, rules: Sequence[SpikeRule], seed: int):
        self.rules = list(rules)
        self.rng = np.random.default_rng(seed)

    def added(self, obstacle_ahead: bool) -> tuple[float, bool]:
        extra = 0.0
        fired = False
        for r in self.rules:
            if r.trigger is Trigger.ObstacleAhead:
                hit = bool(obstacle_ahead)
            else:
                hit = bool(self.rng.random() < r.p)
            if hit:
                extra += r.added_latency_s
                fired = True
        return extra, fired


@dataclass
class LatencyTrace:
    frame_latencies_s: list[float]
    spike_frames: frozenset[int] = field(default_factory=frozenset)
    seed: int = 0

    def __post_init__(self):
        if any(not t > 0 for t in self.frame_latencies_s):
            raise CostError("all frame latencies must be > 0")
        bad = [i for i in self.spike_frames if not 0 <= i < len(self.frame_latencies_s)]
        if bad:
            raise CostError(f"spike frames out of range: {sorted(bad)[:5]}")

    def __len__(self) -> int:
        return len(self.frame_latencies_s)

    @property
    def mean_s(self) -> float:
        return float(np.mean(self.frame_latencies_s))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "latency_s", "spiked"])
        for i, t in enumerate(self.frame_latencies_s):
            w.writerow([i, repr(float(t)), int(i in self.spike_frames)])
        return buf.getvalue()

    @classmethod
    def constant(cls, latency_s: float, n_frames: int) -> "LatencyTrace":
        return cls([float(latency_s)] * n_frames)


def generate_latency_trace(
    g: Graph,
    hw: HardwareProfile,
    n_frames: int,
    rules: Sequence[SpikeRule] = (),
    trigger_signal: Sequence[bool] | None = None,
    seed: int = 0,
    base_latency_s: float | None = None,
) -> LatencyTrace:
    rules = active_rules(g, rules)
    if any(r.trigger is Trigger.ObstacleAhead for r in rules):
        if trigger_signal is None or len(trigger_signal) != n_frames:
            raise CostError("ObstacleAhead rules need a trigger signal with one entry per frame")
    base = estimate_graph_latency(g, hw) if base_latency_s is None else base_latency_s
    sampler = SpikeSampler(rules, seed)
    lat = []
    spikes = set()
    for i in range(n_frames):
        extra, fired = sampler.added(bool(trigger_signal[i]) if trigger_signal is not None else False)
        lat.append(base + extra)
        if fired:
            spikes.add(i)
    return LatencyTrace(lat, frozenset(spikes), seed)


def spike_energy(base_energy_j: float, base_latency_s: float, added_latency_s: float) -> float:
    """Energy of a spiked frame: the extra time is billed at the frame's average power."""
    return base_energy_j * (1.0 + added_latency_s / base_latency_s)


# -- energy protocol ------------------------------------------------------------------

def warmup_frames(warmup_s: float, frame_period_s: float) -> int:
    return int(math.ceil(warmup_s / frame_period_s - 1e-12)) if warmup_s > 0 else 0


def sliding_window_energy(
    per_frame_energies: Sequence[float],
    window: int = 100,
    warmup_s: float = 30.0,
    frame_period_s: float = 0.05,
) -> float:
    """Average per-frame energy over complete windows after the warm-up."""
    if window < 1 or frame_period_s <= 0:
        raise CostError("window must be >= 1 and frame_period_s > 0")
    skip = warmup_frames(warmup_s, frame_period_s)
    e = np.asarray(per_frame_energies, dtype=np.float64)[skip:]
    n_win = len(e) // window
    if n_win == 0:
        raise CostError(
            f"insufficient frames: {len(per_frame_energies)} frames, {skip} warm-up, window {window}"
        )
    cum = np.concatenate([[0.0], np.cumsum(e[: n_win * window])])
    # E_win is the difference of the cumulative counter across each window
    win = [(cum[(i + 1) * window] - cum[i * window]) / window for i in range(n_win)]
    return float(np.mean(win))
