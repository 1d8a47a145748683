"""Static shape inference for every node kind."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .ir import Graph, GraphValidationError, Node, NodeKind, topo_sort

Shape = tuple[int, ...]


class ShapeError(GraphValidationError):
    pass


def _fail(node: Node, msg: str) -> ShapeError:
    return ShapeError(f"node {node.id!r} ({node.kind.value}): {msg}")


def matmul_shape(node: Node, a: Shape, b: Shape) -> Shape:
    if len(a) < 2 or len(b) < 2:
        raise _fail(node, f"operands need rank >= 2, got {a} and {b}")
    if a[-1] != b[-2]:
        raise _fail(node, f"inner dims differ: {a} @ {b}")
    try:
        batch = np.broadcast_shapes(a[:-2], b[:-2])
    except ValueError as e:
        raise _fail(node, f"batch dims {a[:-2]} and {b[:-2]} do not broadcast") from e
    return tuple(batch) + (a[-2], b[-1])


def broadcast(node: Node, a: Shape, b: Shape) -> Shape:
    try:
        return tuple(np.broadcast_shapes(a, b))
    except ValueError as e:
        raise _fail(node, f"shapes {a} and {b} do not broadcast") from e


def conv_out_hw(node: Node, h: int, w: int, kh: int, kw: int) -> tuple[int, int]:
    sh, sw = node.attr("stride", [1, 1])
    ph, pw = node.attr("padding", [0, 0])
    if sh < 1 or sw < 1:
        raise _fail(node, f"unsupported stride {[sh, sw]}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise _fail(node, "kernel larger than padded input")
    return ho, wo


def conv_shape(node: Node, x: Shape, w: Shape) -> Shape:
    if len(x) != 4 or len(w) != 4:
        raise _fail(node, f"expected NCHW input and OIHW weight, got {x} and {w}")
    if x[1] != w[1]:
        raise _fail(node, f"input channels {x[1]} != weight channels {w[1]}")
    ho, wo = conv_out_hw(node, x[2], x[3], w[2], w[3])
    return (x[0], w[0], ho, wo)


def grid_sample_shape(node: Node, x: Shape, grid: Shape) -> Shape:
    if len(x) != 4 or len(grid) != 4 or grid[-1] != 2 or grid[0] != x[0]:
        raise _fail(node, f"expected x [N,C,H,W] and grid [N,Ho,Wo,2], got {x} and {grid}")
    return (x[0], x[1], grid[1], grid[2])


def reshape_shape(node: Node, x: Shape) -> Shape:
    target = list(node.attr("shape", []))
    if not target:
        raise _fail(node, "missing 'shape' attribute")
    total = int(np.prod(x))
    if target.count(-1) > 1:
        raise _fail(node, "at most one -1 allowed in target shape")
    if -1 in target:
        known = int(np.prod([d for d in target if d != -1]))
        if known == 0 or total % known:
            raise _fail(node, f"cannot reshape {x} to {target}")
        target[target.index(-1)] = total // known
    if int(np.prod(target)) != total or any(d < 1 for d in target):
        raise _fail(node, f"cannot reshape {x} to {target}")
    return tuple(target)


def transpose_shape(node: Node, x: Shape) -> Shape:
    perm = list(node.attr("perm", []))
    if sorted(perm) != list(range(len(x))):
        raise _fail(node, f"perm {perm} invalid for rank {len(x)}")
    return tuple(x[p] for p in perm)


def swap_last(s: Shape) -> Shape:
    return s[:-2] + (s[-1], s[-2])


def mha_parts(node: Node, shapes: Sequence[Shape]) -> dict[str, Shape]:
    """Shapes of the internal Q, K^T, V, score and output tensors of a FusedMHA node."""
    proj = bool(node.attr("proj", 0))
    if proj:
        if len(shapes) != 6:
            raise _fail(node, "projected attention takes 6 inputs")
        q = matmul_shape(node, shapes[0], shapes[1])
        k = matmul_shape(node, shapes[2], shapes[3])
        v = matmul_shape(node, shapes[4], shapes[5])
    else:
        if len(shapes) != 3:
            raise _fail(node, "attention takes 3 inputs")
        q, k, v = shapes
    kt = swap_last(k) if node.attr("k_transpose", 0) else k
    scores = matmul_shape(node, q, kt)
    out = matmul_shape(node, scores, v)
    return {"q": q, "k": k, "kt": kt, "v": v, "scores": scores, "out": out}


def _msda_shape(node: Node, shapes: Sequence[Shape]) -> Shape:
    if len(shapes) % 3:
        raise _fail(node, "inputs must be (value, grid, weight) triples")
    acc = None
    for i in range(0, len(shapes), 3):
        sampled = grid_sample_shape(node, shapes[i], shapes[i + 1])
        term = broadcast(node, sampled, shapes[i + 2])
        acc = term if acc is None else broadcast(node, acc, term)
    return acc


def _mdconv_shape(node: Node, s: Sequence[Shape]) -> Shape:
    x, offset, mask, w = s
    out = conv_shape(node, x, w)
    taps = w[2] * w[3]
    if offset != (x[0], 2 * taps, out[2], out[3]) or mask != (x[0], taps, out[2], out[3]):
        raise _fail(node, f"offset {offset} / mask {mask} do not match output {out} with {taps} taps")
    return out


def _same(node: Node, s: Sequence[Shape]) -> Shape:
    return s[0]


def _inverse(node: Node, s: Sequence[Shape]) -> Shape:
    if len(s[0]) < 2 or s[0][-1] != s[0][-2]:
        raise _fail(node, f"Inverse needs square trailing matrices, got {s[0]}")
    return s[0]


def _rotate(node: Node, s: Sequence[Shape]) -> Shape:
    if len(s[0]) < 2:
        raise _fail(node, "Rotate needs rank >= 2")
    return s[0]


_RULES: dict[NodeKind, Callable[[Node, Sequence[Shape]], Shape]] = {
    NodeKind.MatMul: lambda n, s: matmul_shape(n, s[0], s[1]),
    NodeKind.Conv2d: lambda n, s: conv_shape(n, s[0], s[1]),
    NodeKind.Add: lambda n, s: broadcast(n, s[0], s[1]),
    NodeKind.Mul: lambda n, s: broadcast(n, s[0], s[1]),
    NodeKind.Relu: _same,
    NodeKind.Softmax: _same,
    NodeKind.Scale: _same,
    NodeKind.LayerNorm: _same,
    NodeKind.Transpose: lambda n, s: transpose_shape(n, s[0]),
    NodeKind.Reshape: lambda n, s: reshape_shape(n, s[0]),
    NodeKind.GridSample: lambda n, s: grid_sample_shape(n, s[0], s[1]),
    NodeKind.Rotate: _rotate,
    NodeKind.Inverse: _inverse,
    NodeKind.ModulatedDeformConv2d: _mdconv_shape,
    NodeKind.FusedMHA: lambda n, s: mha_parts(n, s)["out"],
    NodeKind.FusedMSDA: _msda_shape,
    NodeKind.FusedConvAdd: lambda n, s: broadcast(n, conv_shape(n, s[0], s[1]), s[2]),
    NodeKind.FusedMatMulAdd: lambda n, s: broadcast(n, matmul_shape(n, s[0], s[1]), s[2]),
    NodeKind.Quantize: _same,
    NodeKind.Dequantize: _same,
}


def node_output_shape(node: Node, in_shapes: Sequence[Shape]) -> Shape:
    rule = _RULES[node.kind]
    return tuple(int(d) for d in rule(node, list(in_shapes)))


def infer_shapes(g: Graph) -> dict[str, Shape]:
    """Propagate shapes from graph inputs and constants through every node."""
    shapes: dict[str, Shape] = {t: g.tensors[t].shape for t in g.inputs}
    for name, value in g.constants.items():
        shapes[name] = tuple(value.shape)
    for nid in topo_sort(g):
        n = g.node(nid)
        if n.kind is NodeKind.Constant:
            continue
        shapes[n.outputs[0]] = node_output_shape(n, [shapes[t] for t in n.inputs])
    return shapes
