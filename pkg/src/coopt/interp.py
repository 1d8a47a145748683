"""Reference interpreter: evaluates a Graph node by node in float64."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import kernels as K
from .ir import Graph, GraphError, Node, NodeKind, topo_sort


class InterpretError(GraphError):
    pass


def _scale_of(node: Node) -> float:
    return float(node.attr("factor", 1.0))


def _eval_mha(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    if node.attr("proj", 0):
        q = np.matmul(vals[0], vals[1])
        k = np.matmul(vals[2], vals[3])
        v = np.matmul(vals[4], vals[5])
    else:
        q, k, v = vals
    kt = np.swapaxes(k, -1, -2) if node.attr("k_transpose", 0) else k
    return K.attention(q, kt, v, float(node.attr("scale", 1.0)))


def _eval_msda(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    acc = None
    for i in range(0, len(vals), 3):
        term = K.grid_sample(vals[i], vals[i + 1]) * vals[i + 2]
        acc = term if acc is None else acc + term
    return acc


def _softmax(node: Node, v: list[np.ndarray]) -> np.ndarray:
    axis = node.attr("axis", -1)
    if not isinstance(axis, int) or not -v[0].ndim <= axis < v[0].ndim:
        raise InterpretError(f"node {node.id!r}: unsupported softmax axis {axis!r}")
    return K.softmax(v[0], axis=axis)


def _conv_args(node: Node) -> dict:
    return {"stride": tuple(node.attr("stride", [1, 1])), "padding": tuple(node.attr("padding", [0, 0]))}


def _quantize(node: Node, v: list[np.ndarray]) -> np.ndarray:
    return K.fake_quantize(
        v[0], node.attr("scale"), node.attr("zero_point", 0), node.attr("qmin"), node.attr("qmax")
    )


_EVAL = {
    NodeKind.MatMul: lambda n, v: np.matmul(v[0], v[1]),
    NodeKind.Conv2d: lambda n, v: K.conv2d(v[0], v[1], **_conv_args(n)),
    NodeKind.Add: lambda n, v: v[0] + v[1],
    NodeKind.Mul: lambda n, v: v[0] * v[1],
    NodeKind.Relu: lambda n, v: np.maximum(v[0], 0.0),
    NodeKind.Softmax: _softmax,
    NodeKind.Scale: lambda n, v: v[0] * _scale_of(n),
    NodeKind.LayerNorm: lambda n, v: K.layer_norm(v[0], float(n.attr("eps", 1e-5))),
    NodeKind.Transpose: lambda n, v: np.transpose(v[0], n.attr("perm")),
    NodeKind.Reshape: lambda n, v: v[0].reshape(n.attr("shape")),
    NodeKind.GridSample: lambda n, v: K.grid_sample(v[0], v[1]),
    NodeKind.Rotate: lambda n, v: K.rotate(v[0], float(n.attr("angle", 0.0))),
    NodeKind.Inverse: lambda n, v: K.inverse(v[0]),
    NodeKind.ModulatedDeformConv2d: lambda n, v: K.modulated_deform_conv2d(*v, **_conv_args(n)),
    NodeKind.FusedMHA: _eval_mha,
    NodeKind.FusedMSDA: _eval_msda,
    NodeKind.FusedConvAdd: lambda n, v: K.conv2d(v[0], v[1], **_conv_args(n)) + v[2],
    NodeKind.FusedMatMulAdd: lambda n, v: np.matmul(v[0], v[1]) + v[2],
    NodeKind.Quantize: _quantize,
    NodeKind.Dequantize: lambda n, v: K.dequantize(v[0], n.attr("scale"), n.attr("zero_point", 0)),
}


def eval_node(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    """Evaluate one node; quantized nodes take integer codes and emit integer codes."""
    if node.attr("quantized", 0):
        scales = node.attr("in_scales")
        zps = node.attr("in_zero_points")
        mask = node.attr("in_mask")
        vals = [K.dequantize(v, scales[i], zps[i]) if mask[i] else v for i, v in enumerate(vals)]
        y = _EVAL[node.kind](node, vals)
        return K.fake_quantize(
            y,
            node.attr("out_scale"),
            node.attr("out_zero_point", 0),
            node.attr("out_qmin"),
            node.attr("out_qmax"),
        )
    return _EVAL[node.kind](node, vals)


def interpret(
    g: Graph,
    inputs: Mapping[str, np.ndarray],
    *,
    return_all: bool = False,
    as_float64: bool = False,
) -> dict[str, np.ndarray]:
    """Run the graph on concrete inputs.

    Arithmetic is float64 throughout; graph outputs are cast to float32 unless
    ``as_float64`` is set. With ``return_all`` every tensor value is returned
    (float64), which is what calibration needs.
    """
    env: dict[str, np.ndarray] = {}
    for name in g.inputs:
        if name not in inputs:
            raise InterpretError(f"missing value for graph input {name!r}")
        arr = np.asarray(inputs[name], dtype=np.float64)
        want = g.tensors[name].shape
        if arr.shape != want:
            raise InterpretError(f"graph input {name!r}: expected shape {want}, got {arr.shape}")
        env[name] = arr
    env.update(g.constants)
    for nid in topo_sort(g):
        node = g.node(nid)
        if node.kind is NodeKind.Constant:
            continue
        try:
            out = eval_node(node, [env[t] for t in node.inputs])
        except (K.KernelError, ValueError) as e:
            raise InterpretError(f"node {nid!r} ({node.kind.value}): {e}") from e
        out = np.asarray(out, dtype=np.float64)
        want = g.tensors[node.outputs[0]].shape
        if out.shape != want:
            raise InterpretError(
                f"node {nid!r} ({node.kind.value}): expected output shape {want}, got {out.shape}"
            )
        env[node.outputs[0]] = out
    if return_all:
        return env
    dtype = np.float64 if as_float64 else np.float32
    return {t: env[t].astype(dtype) for t in g.outputs}
