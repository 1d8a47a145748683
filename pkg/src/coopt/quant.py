"""Post-training int8 quantization: Max-Min calibration, node selection, planning.

A planned node consumes integer codes (weights are stored pre-quantized as
int8 constants, activations pass through Quantize nodes), computes
on the dequantized values and emits integer codes again (an int32
accumulator for the linear kinds, int8 for fused attention); a Dequantize
node restores the float tensor for downstream consumers.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np

from .builder import rebuild
from .interp import interpret
from .ir import DType, Graph, GraphError, ModuleTag, Node, NodeKind, TensorSpec, topo_sort
from .kernels import dequantize, fake_quantize, round_half_away
from .shapes import mha_parts

DEGENERATE_SCALE = 2.0**-24
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1
SEQ_LIMIT = 512


class QuantError(GraphError):
    pass


class Scheme(str, Enum):
    Full = "Full"
    FeatureExt = "FeatureExt"
    Prediction = "Prediction"


class ExclusionReason(str, Enum):
    LongSeqMHA = "LongSeqMHA"
    GEMVDegenerate = "GEMVDegenerate"
    UnsupportedKind = "UnsupportedKind"


FEATURE_TAGS = frozenset({ModuleTag.Backbone, ModuleTag.BevEncoder})
QUANTIZABLE = frozenset(
    {NodeKind.MatMul, NodeKind.Conv2d, NodeKind.FusedConvAdd, NodeKind.FusedMatMulAdd, NodeKind.FusedMHA}
)
LINEAR = frozenset({NodeKind.MatMul, NodeKind.Conv2d, NodeKind.FusedConvAdd, NodeKind.FusedMatMulAdd})


@dataclass(frozen=True)
class TensorRange:
    tensor: str
    x_min: float
    x_max: float

    def __post_init__(self):
        if not (np.isfinite(self.x_min) and np.isfinite(self.x_max)) or self.x_min > self.x_max:
            raise QuantError(f"invalid range for {self.tensor!r}: [{self.x_min}, {self.x_max}]")


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0
    qmin: int = -128
    qmax: int = 127
    degenerate: bool = False

    def __post_init__(self):
        if not self.scale > 0 or self.qmin >= self.qmax:
            raise QuantError(f"invalid quantization parameters {self}")

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "zero_point": self.zero_point,
            "qmin": self.qmin,
            "qmax": self.qmax,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "QuantParams":
        return cls(float(d["scale"]), int(d["zero_point"]), int(d["qmin"]), int(d["qmax"]), bool(d.get("degenerate", False)))


def quantize_value(x, p: QuantParams):
    """q = clip(round(x / s) + z_p, q_min, q_max), ties rounded away from zero."""
    q = fake_quantize(x, p.scale, p.zero_point, p.qmin, p.qmax)
    return int(q) if np.ndim(q) == 0 else q.astype(np.int64)


def dequantize_value(q, p: QuantParams):
    x = dequantize(q, p.scale, p.zero_point)
    return float(x) if np.ndim(x) == 0 else x


def int_bounds(bits: int) -> tuple[int, int]:
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def compute_scale(r: TensorRange, bits: int = 8, zero_point_mode: str = "affine") -> QuantParams:
    """Max-Min scale s = (x_max - x_min) / (q_max - q_min).

    ``affine`` picks z_p so that x_min lands on q_min (z_p is 0 for ranges
    symmetric about zero); ``zero`` forces z_p = 0.
    """
    if bits != 8:
        raise QuantError(f"only 8-bit quantization is supported, got {bits}")
    qmin, qmax = int_bounds(bits)
    degenerate = r.x_max == r.x_min
    s = DEGENERATE_SCALE if degenerate else (r.x_max - r.x_min) / (qmax - qmin)
    if zero_point_mode == "zero":
        zp = 0
    elif zero_point_mode == "affine":
        zp = int(qmin - round_half_away(r.x_min / s))
    else:
        raise QuantError(f"unknown zero_point_mode {zero_point_mode!r}")
    return QuantParams(s, zp, qmin, qmax, degenerate)


# -- calibration ------------------------------------------------------------

@dataclass
class CalibrationSet:
    frames: list[dict[str, np.ndarray]]
    count: int = -1

    def __post_init__(self):
        if self.count < 0:
            self.count = len(self.frames)
        if self.count != len(self.frames):
            raise QuantError(f"calibration count {self.count} != {len(self.frames)} frames")

    def check(self, g: Graph) -> None:
        for i, frame in enumerate(self.frames):
            for t in g.inputs:
                if t not in frame:
                    raise QuantError(f"calibration frame {i} does not bind input {t!r}")
                if tuple(np.shape(frame[t])) != g.tensors[t].shape:
                    raise QuantError(
                        f"calibration frame {i}: input {t!r} has shape {np.shape(frame[t])}, "
                        f"graph expects {g.tensors[t].shape}"
                    )

    def save(self, path) -> None:
        arrays = {f"{i}::{k}": v for i, f in enumerate(self.frames) for k, v in f.items()}
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path) -> "CalibrationSet":
        frames: dict[int, dict[str, np.ndarray]] = {}
        with np.load(path) as data:
            for key in data.files:
                i, name = key.split("::", 1)
                frames.setdefault(int(i), {})[name] = data[key]
        return cls([frames[i] for i in sorted(frames)])


def random_calibration(g: Graph, count: int = 256, seed: int = 0) -> CalibrationSet:
    rng = np.random.default_rng(seed)
    frames = [{t: rng.normal(size=g.tensors[t].shape) for t in g.inputs} for _ in range(count)]
    return CalibrationSet(frames)


def calibrate(g: Graph, calib: CalibrationSet, jobs: int = 1) -> dict[str, TensorRange]:
    """Per-tensor min/max over every frame's interpreted values."""
    calib.check(g)

    def frame_extrema(frame):
        env = interpret(g, frame, return_all=True)
        return {t: (float(v.min()), float(v.max())) for t, v in env.items()}

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_frame = list(pool.map(frame_extrema, calib.frames))
    else:
        per_frame = [frame_extrema(f) for f in calib.frames]
    lo: dict[str, float] = {}
    hi: dict[str, float] = {}
    for ext in per_frame:
        for t, (a, b) in ext.items():
            lo[t] = min(lo.get(t, a), a)
            hi[t] = max(hi.get(t, b), b)
    return {t: TensorRange(t, lo[t], hi[t]) for t in sorted(lo)}


# -- node selection -----------------------------------------------------------

def _attention_matmuls(g: Graph) -> set[str]:
    """MatMuls forming the Q.K^T or weights.V product of an attention block."""
    hits: set[str] = set()
    uses = g.consumer_map()
    for n in g.nodes:
        if n.kind is not NodeKind.Softmax:
            continue
        for c in uses.get(n.outputs[0], []):
            cn = g.node(c)
            if cn.kind is NodeKind.MatMul and cn.inputs[0] == n.outputs[0]:
                hits.add(c)
        p = g.producer(n.inputs[0])
        if p is not None and p.kind in (NodeKind.Scale, NodeKind.Mul):
            p = next((g.producer(t) for t in p.inputs if g.producer(t) is not None and g.producer(t).kind is NodeKind.MatMul), None)
        if p is not None and p.kind is NodeKind.MatMul:
            hits.add(p.id)
    return hits


def _seq_len(g: Graph, n: Node) -> int:
    if n.kind is NodeKind.FusedMHA:
        parts = mha_parts(n, [g.shape(t) for t in n.inputs])
        return parts["q"][-2]
    return g.shape(n.inputs[0])[-2]


def _gemv(g: Graph, n: Node) -> bool:
    out = g.shape(n.outputs[0])
    return 1 in out[-2:]


def select_nodes(g: Graph, seq_limit: int = SEQ_LIMIT) -> tuple[dict[str, ExclusionReason], set[str]]:
    """Two-stage filter: long-sequence attention products, then GEMV-shaped MatMuls."""
    attention = _attention_matmuls(g)
    excluded: dict[str, ExclusionReason] = {}
    candidates: set[str] = set()
    for nid in topo_sort(g):
        n = g.node(nid)
        if n.kind not in QUANTIZABLE:
            excluded[nid] = ExclusionReason.UnsupportedKind
        elif (n.kind is NodeKind.FusedMHA or nid in attention) and _seq_len(g, n) > seq_limit:
            excluded[nid] = ExclusionReason.LongSeqMHA
        elif n.kind in (NodeKind.MatMul, NodeKind.FusedMatMulAdd, NodeKind.FusedMHA) and _gemv(g, n):
            excluded[nid] = ExclusionReason.GEMVDegenerate
        else:
            candidates.add(nid)
    return excluded, candidates


# -- planning ---------------------------------------------------------------------

@dataclass(frozen=True)
class NodeQuantParams:
    inputs: tuple[QuantParams | None, ...]
    output: QuantParams

    def to_dict(self) -> dict:
        return {
            "inputs": [None if p is None else p.to_dict() for p in self.inputs],
            "output": self.output.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NodeQuantParams":
        return cls(
            tuple(None if p is None else QuantParams.from_dict(p) for p in d["inputs"]),
            QuantParams.from_dict(d["output"]),
        )


@dataclass
class QuantizationPlan:
    scheme: Scheme
    quantized_nodes: frozenset[str]
    excluded_nodes: dict[str, ExclusionReason]
    params: dict[str, NodeQuantParams] = field(default_factory=dict)

    def __post_init__(self):
        overlap = self.quantized_nodes & set(self.excluded_nodes)
        if overlap:
            raise QuantError(f"nodes both quantized and excluded: {sorted(overlap)}")
        missing = self.quantized_nodes - set(self.params)
        if missing:
            raise QuantError(f"quantized nodes without parameters: {sorted(missing)}")

    @property
    def degenerate_nodes(self) -> list[str]:
        return sorted(
            nid for nid, p in self.params.items() if any(q is not None and q.degenerate for q in p.inputs)
        )

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.value,
            "quantized_nodes": sorted(self.quantized_nodes),
            "excluded_nodes": {k: v.value for k, v in sorted(self.excluded_nodes.items())},
            "params": {k: self.params[k].to_dict() for k in sorted(self.params)},
            "degenerate_nodes": self.degenerate_nodes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: Mapping) -> "QuantizationPlan":
        return cls(
            Scheme(d["scheme"]),
            frozenset(d["quantized_nodes"]),
            {k: ExclusionReason(v) for k, v in d["excluded_nodes"].items()},
            {k: NodeQuantParams.from_dict(v) for k, v in d["params"].items()},
        )


def scheme_admits(scheme: Scheme, tag: ModuleTag) -> bool:
    if scheme is Scheme.Full:
        return True
    if scheme is Scheme.FeatureExt:
        return tag in FEATURE_TAGS
    return tag not in FEATURE_TAGS


def quantized_input_mask(n: Node) -> list[bool]:
    if n.kind in (NodeKind.FusedConvAdd, NodeKind.FusedMatMulAdd):
        return [True, True, False]
    return [True] * len(n.inputs)


def plan(
    g: Graph,
    scheme: Scheme | str,
    ranges: Mapping[str, TensorRange],
    zero_point_mode: str = "affine",
    seq_limit: int = SEQ_LIMIT,
) -> QuantizationPlan:
    scheme = Scheme(scheme)
    excluded, candidates = select_nodes(g, seq_limit)
    chosen = sorted(nid for nid in candidates if scheme_admits(scheme, g.node(nid).tag))
    params: dict[str, NodeQuantParams] = {}

    def rng_of(t: str, nid: str) -> TensorRange:
        if t not in ranges:
            raise QuantError(f"node {nid!r}: no calibration range for tensor {t!r}")
        return ranges[t]

    for nid in chosen:
        n = g.node(nid)
        mask = quantized_input_mask(n)
        ins = tuple(
            compute_scale(rng_of(t, nid), 8, zero_point_mode) if m else None for t, m in zip(n.inputs, mask)
        )
        if n.kind in LINEAR:
            acc = QuantParams(ins[0].scale * ins[1].scale, 0, INT32_MIN, INT32_MAX)
        else:
            acc = compute_scale(rng_of(n.outputs[0], nid), 8, zero_point_mode)
        params[nid] = NodeQuantParams(ins, acc)
    return QuantizationPlan(scheme, frozenset(chosen), excluded, params)


def is_quantized(g: Graph) -> bool:
    return any(n.kind in (NodeKind.Quantize, NodeKind.Dequantize) or n.attr("quantized", 0) for n in g.nodes)


def apply_plan(g: Graph, p: QuantizationPlan) -> Graph:
    """Wrap every planned node in Quantize (inputs) / Dequantize (output) nodes."""
    if not p.quantized_nodes:
        return g
    if is_quantized(g):
        raise QuantError("graph already carries quantization nodes; a plan cannot be applied twice")
    unknown = [nid for nid in p.quantized_nodes if not g.has_node(nid)]
    if unknown:
        raise QuantError(f"plan names nodes absent from the graph: {sorted(unknown)}")
    nodes: list[Node] = []
    specs: dict[str, TensorSpec] = {}
    consts = dict(g.constants)
    for n in g.nodes:
        if n.id not in p.quantized_nodes:
            nodes.append(n)
            continue
        qp = p.params[n.id]
        new_inputs = []
        for i, (t, ip) in enumerate(zip(n.inputs, qp.inputs)):
            if ip is None:
                new_inputs.append(t)
                continue
            qt = f"{t}@q:{n.id}.{i}"
            specs[qt] = TensorSpec(qt, DType.I8, g.shape(t))
            new_inputs.append(qt)
            if g.is_constant(t) and g.producer(t) is None:
                # weights are stored as int8 codes; no runtime Quantize node
                consts[qt] = fake_quantize(g.constants[t], ip.scale, ip.zero_point, ip.qmin, ip.qmax)
                continue
            nodes.append(
                Node(
                    f"{n.id}/q{i}",
                    NodeKind.Quantize,
                    (t,),
                    (qt,),
                    n.tag,
                    {"scale": ip.scale, "zero_point": ip.zero_point, "qmin": ip.qmin, "qmax": ip.qmax},
                )
            )
        out = n.outputs[0]
        acc = f"{out}@acc"
        specs[acc] = TensorSpec(acc, DType.I32 if qp.output.qmax > 127 else DType.I8, g.shape(out))
        attrs = dict(n.attrs)
        attrs.update(
            {
                "quantized": 1,
                "in_scales": [1.0 if ip is None else ip.scale for ip in qp.inputs],
                "in_zero_points": [0 if ip is None else ip.zero_point for ip in qp.inputs],
                "in_mask": [0 if ip is None else 1 for ip in qp.inputs],
                "out_scale": qp.output.scale,
                "out_zero_point": qp.output.zero_point,
                "out_qmin": qp.output.qmin,
                "out_qmax": qp.output.qmax,
            }
        )
        nodes.append(Node(n.id, n.kind, tuple(new_inputs), (acc,), n.tag, attrs))
        nodes.append(
            Node(
                f"{n.id}/dq",
                NodeKind.Dequantize,
                (acc,),
                (out,),
                n.tag,
                {"scale": qp.output.scale, "zero_point": qp.output.zero_point},
            )
        )
    return rebuild(nodes, g, tensors=specs, constants=consts)


def plan_for_graph(
    g: Graph,
    scheme: Scheme | str,
    calib: CalibrationSet,
    zero_point_mode: str = "affine",
    jobs: int = 1,
    seq_limit: int = SEQ_LIMIT,
) -> QuantizationPlan:
    return plan(g, scheme, calibrate(g, calib, jobs=jobs), zero_point_mode, seq_limit)


def node_ids_by_reason(p: QuantizationPlan, reason: ExclusionReason) -> list[str]:
    return sorted(k for k, v in p.excluded_nodes.items() if v is reason)
