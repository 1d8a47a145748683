"""Computation-graph IR: typed tensors, tagged operator nodes, validation and JSON I/O."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping

import numpy as np


class GraphError(Exception):
    """Base class for graph-related failures."""


class GraphSyntaxError(GraphError):
    """The document is not a well-formed graph file."""


class GraphValidationError(GraphError):
    """The graph violates a structural invariant."""


class CycleError(GraphValidationError):
    def __init__(self, cycle: list[str]):
        self.cycle = cycle
        super().__init__(f"cycle detected through nodes: {' -> '.join(cycle)}")


class DType(str, Enum):
    F32 = "F32"
    I8 = "I8"
    I32 = "I32"

    @property
    def itemsize(self) -> int:
        return 1 if self is DType.I8 else 4


class NodeKind(str, Enum):
    Constant = "Constant"
    MatMul = "MatMul"
    Conv2d = "Conv2d"
    Add = "Add"
    Mul = "Mul"
    Relu = "Relu"
    Softmax = "Softmax"
    Scale = "Scale"
    LayerNorm = "LayerNorm"
    Transpose = "Transpose"
    Reshape = "Reshape"
    GridSample = "GridSample"
    Rotate = "Rotate"
    Inverse = "Inverse"
    ModulatedDeformConv2d = "ModulatedDeformConv2d"
    FusedMHA = "FusedMHA"
    FusedMSDA = "FusedMSDA"
    FusedConvAdd = "FusedConvAdd"
    FusedMatMulAdd = "FusedMatMulAdd"
    Quantize = "Quantize"
    Dequantize = "Dequantize"


PASS_ONLY_KINDS = frozenset(
    {
        NodeKind.FusedMHA,
        NodeKind.FusedMSDA,
        NodeKind.FusedConvAdd,
        NodeKind.FusedMatMulAdd,
        NodeKind.Quantize,
        NodeKind.Dequantize,
    }
)


class ModuleTag(str, Enum):
    Backbone = "Backbone"
    BevEncoder = "BevEncoder"
    Track = "Track"
    Map = "Map"
    Motion = "Motion"
    Occ = "Occ"
    Seg = "Seg"
    Planner = "Planner"
    Other = "Other"


# (min inputs, max inputs); every kind has exactly one output.
_ARITY: dict[NodeKind, tuple[int, int]] = {
    NodeKind.Constant: (0, 0),
    NodeKind.MatMul: (2, 2),
    NodeKind.Conv2d: (2, 2),
    NodeKind.Add: (2, 2),
    NodeKind.Mul: (2, 2),
    NodeKind.Relu: (1, 1),
    NodeKind.Softmax: (1, 1),
    NodeKind.Scale: (1, 1),
    NodeKind.LayerNorm: (1, 1),
    NodeKind.Transpose: (1, 1),
    NodeKind.Reshape: (1, 1),
    NodeKind.GridSample: (2, 2),
    NodeKind.Rotate: (1, 1),
    NodeKind.Inverse: (1, 1),
    NodeKind.ModulatedDeformConv2d: (4, 4),
    NodeKind.FusedMHA: (3, 6),
    NodeKind.FusedMSDA: (3, 3 * 64),
    NodeKind.FusedConvAdd: (3, 3),
    NodeKind.FusedMatMulAdd: (3, 3),
    NodeKind.Quantize: (1, 1),
    NodeKind.Dequantize: (1, 1),
}


def arity(kind: NodeKind) -> tuple[int, int]:
    return _ARITY[kind]


@dataclass(frozen=True)
class TensorSpec:
    name: str
    dtype: DType
    shape: tuple[int, ...]

    def __post_init__(self):
        if not self.shape:
            raise GraphValidationError(f"tensor {self.name!r}: shape must be non-empty")
        if any(int(d) < 1 for d in self.shape):
            raise GraphValidationError(f"tensor {self.name!r}: dims must be >= 1, got {self.shape}")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def nbytes(self) -> int:
        return self.size * self.dtype.itemsize


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    tag: ModuleTag
    attrs: Mapping[str, Any] = field(default_factory=dict)

    def attr(self, key: str, default: Any = None) -> Any:
        return self.attrs.get(key, default)

    def with_inputs(self, inputs: Iterable[str]) -> "Node":
        return replace(self, inputs=tuple(inputs))


def _attrs_key(attrs: Mapping[str, Any]) -> str:
    return json.dumps(attrs, sort_keys=True)


def node_signature(node: Node) -> tuple:
    """Hashable structural identity of a node, ignoring its id and outputs."""
    return (node.kind.value, node.inputs, _attrs_key(node.attrs), node.tag.value)


@dataclass(eq=False)
class Graph:
    """A validated DAG. Treat instances as immutable; passes build new graphs."""

    nodes: tuple[Node, ...]
    tensors: dict[str, TensorSpec]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    constants: dict[str, np.ndarray]

    def __post_init__(self):
        self.nodes = tuple(self.nodes)
        self.inputs = tuple(self.inputs)
        self.outputs = tuple(self.outputs)
        self.constants = {k: np.asarray(v, dtype=np.float64) for k, v in self.constants.items()}
        for arr in self.constants.values():
            arr.setflags(write=False)
        self._by_id = {n.id: n for n in self.nodes}
        self._producer: dict[str, str] = {}
        for n in self.nodes:
            for t in n.outputs:
                self._producer[t] = n.id

    # -- lookup helpers -------------------------------------------------
    def node(self, node_id: str) -> Node:
        return self._by_id[node_id]

    def has_node(self, node_id: str) -> bool:
        return node_id in self._by_id

    def producer(self, tensor: str) -> Node | None:
        nid = self._producer.get(tensor)
        return None if nid is None else self._by_id[nid]

    def consumers(self, tensor: str) -> list[Node]:
        return [n for n in self.nodes if tensor in n.inputs]

    def consumer_map(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for n in self.nodes:
            for t in n.inputs:
                out.setdefault(t, [])
                if n.id not in out[t]:
                    out[t].append(n.id)
        return out

    def is_constant(self, tensor: str) -> bool:
        return tensor in self.constants

    def shape(self, tensor: str) -> tuple[int, ...]:
        return self.tensors[tensor].shape

    def tags(self) -> set[ModuleTag]:
        return {n.tag for n in self.nodes}

    def __len__(self) -> int:
        return len(self.nodes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        if (
            self.nodes != other.nodes
            or self.tensors != other.tensors
            or self.inputs != other.inputs
            or self.outputs != other.outputs
            or self.constants.keys() != other.constants.keys()
        ):
            return False
        return all(
            a.shape == other.constants[k].shape
            and np.array_equal(a, other.constants[k])
            for k, a in self.constants.items()
        )

    __hash__ = None  # type: ignore[assignment]


def topo_sort(g: Graph) -> list[str]:
    """Kahn's algorithm with lexicographic tie-breaking on node id."""
    indeg = {n.id: 0 for n in g.nodes}
    succ: dict[str, list[str]] = {n.id: [] for n in g.nodes}
    for n in g.nodes:
        deps = set()
        for t in n.inputs:
            p = g._producer.get(t)
            if p is not None and p != n.id:
                deps.add(p)
            elif p == n.id:
                raise CycleError([n.id, n.id])
        for p in deps:
            succ[p].append(n.id)
            indeg[n.id] += 1
    ready = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for s in succ[nid]:
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(ready, s)
    if len(order) != len(g.nodes):
        raise CycleError(_find_cycle(g, {nid for nid, d in indeg.items() if d > 0}))
    return order


def _find_cycle(g: Graph, remaining: set[str]) -> list[str]:
    # walk producer links inside the unsorted remainder until a node repeats
    start = min(remaining)
    path: list[str] = []
    seen: dict[str, int] = {}
    cur = start
    while cur not in seen:
        seen[cur] = len(path)
        path.append(cur)
        preds = sorted(
            g._producer[t] for t in g.node(cur).inputs if g._producer.get(t) in remaining
        )
        cur = preds[0]
    cyc = path[seen[cur]:]
    cyc.reverse()
    return cyc + [cyc[0]]


def validate(g: Graph) -> None:
    """Raise GraphValidationError naming the first offending node or tensor."""
    seen_ids: set[str] = set()
    producers: dict[str, str] = {}
    for name, spec in g.tensors.items():
        if name != spec.name:
            raise GraphValidationError(f"tensor key {name!r} does not match spec name {spec.name!r}")
    for t in g.inputs:
        if t not in g.tensors:
            raise GraphValidationError(f"graph input {t!r} has no tensor declaration")
        if t in g.constants:
            raise GraphValidationError(f"graph input {t!r} is also a constant")
    for name, value in g.constants.items():
        if name not in g.tensors:
            raise GraphValidationError(f"constant {name!r} has no tensor declaration")
        if tuple(value.shape) != g.tensors[name].shape:
            raise GraphValidationError(
                f"constant {name!r}: value shape {tuple(value.shape)} != declared {g.tensors[name].shape}"
            )
    for n in g.nodes:
        if n.id in seen_ids:
            raise GraphValidationError(f"duplicate node id {n.id!r}")
        seen_ids.add(n.id)
        lo, hi = arity(n.kind)
        if not (lo <= len(n.inputs) <= hi) or len(n.outputs) != 1:
            raise GraphValidationError(
                f"node {n.id!r}: {n.kind.value} takes {lo}..{hi} inputs and 1 output, "
                f"got {len(n.inputs)} inputs and {len(n.outputs)} outputs"
            )
        for t in n.outputs:
            if t in producers:
                raise GraphValidationError(
                    f"tensor {t!r} produced by both {producers[t]!r} and {n.id!r}"
                )
            if t in g.inputs:
                raise GraphValidationError(f"node {n.id!r} writes graph input {t!r}")
            if t not in g.tensors:
                raise GraphValidationError(f"node {n.id!r}: output tensor {t!r} is undeclared")
            if t in g.constants and n.kind is not NodeKind.Constant:
                raise GraphValidationError(f"node {n.id!r} writes constant tensor {t!r}")
            producers[t] = n.id
        if n.kind is NodeKind.Constant and n.outputs[0] not in g.constants:
            raise GraphValidationError(f"Constant node {n.id!r} has no value for {n.outputs[0]!r}")
    for n in g.nodes:
        for t in n.inputs:
            if t not in g.tensors:
                raise GraphValidationError(f"node {n.id!r} consumes undeclared tensor {t!r}")
            if t not in producers and t not in g.constants and t not in g.inputs:
                raise GraphValidationError(f"node {n.id!r} consumes dangling tensor {t!r}")
    for t in g.outputs:
        if t not in producers:
            raise GraphValidationError(f"graph output {t!r} is not produced by any node")
    topo_sort(g)
    from .shapes import infer_shapes  # local import: shapes depends on this module

    inferred = infer_shapes(g)
    for n in g.nodes:
        for t in n.outputs:
            if inferred[t] != g.tensors[t].shape:
                raise GraphValidationError(
                    f"node {n.id!r}: declared shape {g.tensors[t].shape} for {t!r} "
                    f"but inferred {inferred[t]}"
                )


def make_graph(
    nodes: Iterable[Node],
    tensors: Mapping[str, TensorSpec] | Iterable[TensorSpec],
    inputs: Iterable[str],
    outputs: Iterable[str],
    constants: Mapping[str, Any] | None = None,
) -> Graph:
    if not isinstance(tensors, Mapping):
        tensors = {t.name: t for t in tensors}
    g = Graph(
        nodes=tuple(nodes),
        tensors=dict(tensors),
        inputs=tuple(inputs),
        outputs=tuple(outputs),
        constants=dict(constants or {}),
    )
    validate(g)
    return g


# -- serialization ------------------------------------------------------

def _num(x: float) -> float | int:
    return int(x) if float(x).is_integer() and abs(x) < 2**53 else float(x)


def to_dict(g: Graph) -> dict:
    return {
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind.value,
                "inputs": list(n.inputs),
                "outputs": list(n.outputs),
                "tag": n.tag.value,
                "attrs": dict(n.attrs),
            }
            for n in g.nodes
        ],
        "tensors": {
            name: {"dtype": spec.dtype.value, "shape": list(spec.shape)}
            for name, spec in g.tensors.items()
        },
        "inputs": list(g.inputs),
        "outputs": list(g.outputs),
        "constants": {
            name: {"shape": list(v.shape), "data": [_num(x) for x in v.ravel().tolist()]}
            for name, v in g.constants.items()
        },
    }


def serialize(g: Graph, indent: int | None = None) -> str:
    return json.dumps(to_dict(g), indent=indent, separators=(",", ":") if indent is None else None)


def _require(doc: Mapping, key: str, typ: type, where: str):
    if key not in doc:
        raise GraphSyntaxError(f"{where}: missing key {key!r}")
    val = doc[key]
    if not isinstance(val, typ):
        raise GraphSyntaxError(f"{where}: key {key!r} must be {typ.__name__}")
    return val


def _norm_attr(value: Any, where: str) -> Any:
    if isinstance(value, bool) or isinstance(value, (int, float, str)):
        return value
    if isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        return list(value)
    raise GraphSyntaxError(f"{where}: attribute values must be scalars or numeric lists")


def from_dict(doc: Mapping) -> Graph:
    if not isinstance(doc, Mapping):
        raise GraphSyntaxError("graph document must be a JSON object")
    raw_nodes = _require(doc, "nodes", list, "graph")
    raw_tensors = _require(doc, "tensors", dict, "graph")
    raw_inputs = _require(doc, "inputs", list, "graph")
    raw_outputs = _require(doc, "outputs", list, "graph")
    raw_consts = _require(doc, "constants", dict, "graph")
    tensors: dict[str, TensorSpec] = {}
    for name, spec in raw_tensors.items():
        where = f"tensor {name!r}"
        try:
            dtype = DType(_require(spec, "dtype", str, where))
        except ValueError as e:
            raise GraphSyntaxError(f"{where}: unknown dtype") from e
        shape = _require(spec, "shape", list, where)
        if not all(isinstance(d, int) and not isinstance(d, bool) for d in shape):
            raise GraphSyntaxError(f"{where}: shape must be a list of integers")
        tensors[name] = TensorSpec(name, dtype, tuple(shape))
    nodes = []
    for i, raw in enumerate(raw_nodes):
        if not isinstance(raw, Mapping):
            raise GraphSyntaxError(f"node #{i}: must be an object")
        nid = _require(raw, "id", str, f"node #{i}")
        where = f"node {nid!r}"
        try:
            kind = NodeKind(_require(raw, "kind", str, where))
            tag = ModuleTag(_require(raw, "tag", str, where))
        except ValueError as e:
            raise GraphSyntaxError(f"{where}: {e}") from e
        attrs = raw.get("attrs", {})
        if not isinstance(attrs, Mapping):
            raise GraphSyntaxError(f"{where}: attrs must be an object")
        nodes.append(
            Node(
                id=nid,
                kind=kind,
                inputs=tuple(_require(raw, "inputs", list, where)),
                outputs=tuple(_require(raw, "outputs", list, where)),
                tag=tag,
                attrs={k: _norm_attr(v, f"{where} attr {k!r}") for k, v in attrs.items()},
            )
        )
    constants = {}
    for name, c in raw_consts.items():
        where = f"constant {name!r}"
        shape = tuple(_require(c, "shape", list, where))
        data = _require(c, "data", list, where)
        if len(data) != int(np.prod(shape)):
            raise GraphSyntaxError(f"{where}: {len(data)} values for shape {shape}")
        constants[name] = np.asarray(data, dtype=np.float64).reshape(shape)
    return make_graph(nodes, tensors, raw_inputs, raw_outputs, constants)


def parse_graph(text: str) -> Graph:
    """Parse and validate a JSON graph document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise GraphSyntaxError(f"malformed JSON: {e}") from e
    try:
        return from_dict(doc)
    except TypeError as e:
        raise GraphSyntaxError(str(e)) from e


def load_graph(path) -> Graph:
    with open(path, encoding="utf-8") as fh:
        return parse_graph(fh.read())


def save_graph(g: Graph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(g))
