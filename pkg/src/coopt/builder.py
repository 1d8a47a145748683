"""Incremental graph construction with automatic shape inference."""

from __future__ import annotations

from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .ir import DType, Graph, ModuleTag, Node, NodeKind, TensorSpec, make_graph, topo_sort
from .shapes import node_output_shape


class GraphBuilder:
    def __init__(self, prefix: str = ""):
        self.prefix = prefix
        self.nodes: list[Node] = []
        self.tensors: dict[str, TensorSpec] = {}
        self.inputs: list[str] = []
        self.constants: dict[str, np.ndarray] = {}
        self._counter = 0

    def _fresh(self, stem: str) -> str:
        self._counter += 1
        return f"{self.prefix}{stem}{self._counter}"

    def shape(self, name: str) -> tuple[int, ...]:
        return self.tensors[name].shape

    def input(self, name: str, shape: Sequence[int], dtype: DType = DType.F32) -> str:
        self.tensors[name] = TensorSpec(name, dtype, tuple(shape))
        self.inputs.append(name)
        return name

    def weight(self, name: str, value, dtype: DType = DType.F32) -> str:
        """A raw initializer tensor (no producing node)."""
        value = np.asarray(value, dtype=np.float64)
        self.tensors[name] = TensorSpec(name, dtype, tuple(value.shape))
        self.constants[name] = value
        return name

    def const_node(self, value, tag: ModuleTag, name: str | None = None, node_id: str | None = None) -> str:
        name = name or self._fresh("c")
        self.weight(name, value)
        self.nodes.append(Node(node_id or f"{name}_node", NodeKind.Constant, (), (name,), tag, {}))
        return name

    def op(
        self,
        kind: NodeKind,
        inputs: Sequence[str],
        tag: ModuleTag,
        attrs: Mapping[str, Any] | None = None,
        *,
        node_id: str | None = None,
        out: str | None = None,
        dtype: DType = DType.F32,
    ) -> str:
        node_id = node_id or self._fresh(kind.value.lower())
        out = out or f"{node_id}:out"
        node = Node(node_id, kind, tuple(inputs), (out,), tag, dict(attrs or {}))
        shape = node_output_shape(node, [self.tensors[t].shape for t in inputs])
        self.tensors[out] = TensorSpec(out, dtype, shape)
        self.nodes.append(node)
        return out

    def build(self, outputs: Iterable[str]) -> Graph:
        return make_graph(self.nodes, self.tensors, self.inputs, outputs, self.constants)


def rebuild(
    nodes: Iterable[Node],
    template: Graph,
    *,
    outputs: Iterable[str] | None = None,
    constants: Mapping[str, np.ndarray] | None = None,
    tensors: Mapping[str, TensorSpec] | None = None,
    drop_unused_constants: bool = True,
) -> Graph:
    """Assemble a new validated graph from a node list, re-deriving tensor specs.

    Tensor specs come from ``tensors`` (new ones) or the template; shapes of
    node outputs are re-inferred so rewiring can change downstream shapes.
    Tensors no longer referenced anywhere are dropped.
    """
    nodes = list(nodes)
    outputs = tuple(template.outputs if outputs is None else outputs)
    consts = dict(template.constants if constants is None else constants)
    specs = dict(template.tensors)
    if tensors:
        specs.update(tensors)
    used: set[str] = set(template.inputs) | set(outputs)
    for n in nodes:
        used.update(n.inputs)
        used.update(n.outputs)
    if drop_unused_constants:
        consts = {k: v for k, v in consts.items() if k in used}
    used |= set(consts)
    # provisional graph (unvalidated) to get a topological order
    provisional = Graph(tuple(nodes), {k: specs[k] for k in used if k in specs}, template.inputs, outputs, consts)
    shapes = {t: specs[t].shape for t in template.inputs}
    shapes.update({k: tuple(v.shape) for k, v in consts.items()})
    final_specs = {t: specs[t] for t in used if t in specs and (t in template.inputs or t in consts)}
    for nid in topo_sort(provisional):
        n = provisional.node(nid)
        out = n.outputs[0]
        if n.kind is not NodeKind.Constant:
            shapes[out] = node_output_shape(n, [shapes[t] for t in n.inputs])
        dtype = specs[out].dtype if out in specs else DType.F32
        final_specs[out] = TensorSpec(out, dtype, shapes[out])
    ordered = {k: final_specs[k] for k in sorted(final_specs)}
    return make_graph(nodes, ordered, template.inputs, outputs, consts)
