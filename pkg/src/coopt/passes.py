"""Graph-to-graph optimization passes.

Every pass returns a new graph plus a PassReport. Folding, elimination and
fusion preserve interpreter semantics; pruning deliberately does not.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .builder import rebuild
from .interp import eval_node
from .ir import Graph, GraphError, ModuleTag, Node, NodeKind, node_signature, topo_sort

FUSION_ATTRS = ("stride", "padding")


class PassError(GraphError):
    pass


class InfeasiblePruneError(PassError):
    """No surviving tensor can stand in for a pruned module's output."""


@dataclass(frozen=True)
class Rewrite:
    pattern: str
    matched: tuple[str, ...]
    created: tuple[str, ...] = ()

    @property
    def delta(self) -> int:
        return len(self.matched) - len(self.created)


@dataclass
class PassReport:
    pass_name: str
    nodes_before: int
    nodes_after: int
    rewrites: list[Rewrite] = field(default_factory=list)

    def accounted_delta(self) -> int:
        return sum(r.delta for r in self.rewrites)

    def to_dict(self) -> dict:
        return {
            "pass_name": self.pass_name,
            "nodes_before": self.nodes_before,
            "nodes_after": self.nodes_after,
            "rewrites": [
                {"pattern": r.pattern, "matched": list(r.matched), "created": list(r.created)}
                for r in self.rewrites
            ],
        }


def reports_to_json(reports: Sequence[PassReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2)


def _single_use(g: Graph, tensor: str, uses: dict[str, list[str]]) -> bool:
    """True if exactly one node reads ``tensor`` (once) and it is not a graph output."""
    if tensor in g.outputs or tensor in g.inputs or g.is_constant(tensor):
        return False
    readers = uses.get(tensor, [])
    if len(readers) != 1:
        return False
    return g.node(readers[0]).inputs.count(tensor) == 1


def _producer_kind(g: Graph, tensor: str, *kinds: NodeKind) -> Node | None:
    p = g.producer(tensor)
    if p is None or p.kind not in kinds or p.attr("quantized", 0):
        return None
    return p


# -- constant folding -------------------------------------------------------

def fold_constants(g: Graph) -> tuple[Graph, PassReport]:
    consts = dict(g.constants)
    folded: dict[str, Node] = {}
    rewrites: list[Rewrite] = []
    for nid in topo_sort(g):
        n = g.node(nid)
        if n.kind is NodeKind.Constant or not n.inputs:
            continue
        if all(t in consts for t in n.inputs):
            consts[n.outputs[0]] = np.asarray(eval_node(n, [consts[t] for t in n.inputs]), dtype=np.float64)
            folded[nid] = Node(nid, NodeKind.Constant, (), n.outputs, n.tag, {})
            rewrites.append(Rewrite("fold", (nid,), (nid,)))
    if not folded:
        return g, PassReport("fold", len(g), len(g))
    nodes = [folded.get(n.id, n) for n in g.nodes]
    # Constant nodes whose every reader was folded away are dropped with them.
    dropped: set[str] = set()
    changed = True
    while changed:
        changed = False
        live_reads: set[str] = set()
        for n in nodes:
            if n.id not in dropped:
                live_reads.update(n.inputs)
        for n in nodes:
            if n.id in dropped or n.kind is not NodeKind.Constant:
                continue
            out = n.outputs[0]
            read_by_folded = any(out in g.node(f).inputs for f in folded)
            if read_by_folded and out not in live_reads and out not in g.outputs:
                dropped.add(n.id)
                rewrites.append(Rewrite("drop_folded_input", (n.id,)))
                changed = True
    nodes = [n for n in nodes if n.id not in dropped]
    out = rebuild(nodes, g, constants=consts)
    return out, PassReport("fold", len(g), len(out), rewrites)


# -- dead / duplicate elimination ---------------------------------------------

def _const_key(g: Graph, n: Node, consts) -> tuple:
    v = consts[n.outputs[0]]
    return (v.shape, v.tobytes(), g.tensors[n.outputs[0]].dtype.value, n.tag.value)


def eliminate_dead_nodes(g: Graph) -> tuple[Graph, PassReport]:
    rename: dict[str, str] = {}
    seen: dict[tuple, str] = {}
    kept: list[Node] = []
    rewrites: list[Rewrite] = []
    for nid in topo_sort(g):
        n = g.node(nid)
        n = n.with_inputs(rename.get(t, t) for t in n.inputs)
        if n.kind is NodeKind.Constant:
            key = ("const",) + _const_key(g, n, g.constants)
        else:
            key = node_signature(n)
        first = seen.get(key)
        if first is not None and n.outputs[0] not in g.outputs:
            rename[n.outputs[0]] = first
            rewrites.append(Rewrite("merge_duplicate", (n.id,)))
            continue
        seen.setdefault(key, n.outputs[0])
        kept.append(n)
    # reachability from graph outputs
    by_out = {n.outputs[0]: n for n in kept}
    live: set[str] = set()
    stack = list(g.outputs)
    while stack:
        t = stack.pop()
        p = by_out.get(t)
        if p is None or p.id in live:
            continue
        live.add(p.id)
        stack.extend(p.inputs)
    for n in kept:
        if n.id not in live:
            rewrites.append(Rewrite("dead", (n.id,)))
    if not rewrites:
        return g, PassReport("dce", len(g), len(g))
    order = {n.id: i for i, n in enumerate(g.nodes)}
    nodes = sorted((n for n in kept if n.id in live), key=lambda n: order[n.id])
    out = rebuild(nodes, g)
    return out, PassReport("dce", len(g), len(out), rewrites)


# -- basic fusion ---------------------------------------------------------------

def _feeds_from_softmax(g: Graph, mm: Node) -> bool:
    p = g.producer(mm.inputs[0])
    return p is not None and p.kind is NodeKind.Softmax


def fuse_basic(g: Graph) -> tuple[Graph, PassReport]:
    """Conv2d -> Add  =>  FusedConvAdd,  MatMul -> Add  =>  FusedMatMulAdd.

    A MatMul that consumes a Softmax output is left alone: it closes an
    attention block, which fuse_attention handles as a whole.
    """
    uses = g.consumer_map()
    replaced: dict[str, Node] = {}
    absorbed: set[str] = set()
    rewrites: list[Rewrite] = []
    for nid in topo_sort(g):
        add = g.node(nid)
        if add.kind is not NodeKind.Add or add.attr("quantized", 0) or add.inputs[0] == add.inputs[1]:
            continue
        for i in (0, 1):
            src = add.inputs[i]
            p = _producer_kind(g, src, NodeKind.Conv2d, NodeKind.MatMul)
            if p is None or p.id in absorbed or not _single_use(g, src, uses):
                continue
            if p.kind is NodeKind.MatMul and _feeds_from_softmax(g, p):
                continue
            bias = add.inputs[1 - i]
            kind = NodeKind.FusedConvAdd if p.kind is NodeKind.Conv2d else NodeKind.FusedMatMulAdd
            attrs = {k: p.attrs[k] for k in FUSION_ATTRS if k in p.attrs}
            fused_id = f"{p.id}+{add.id}"
            replaced[add.id] = Node(fused_id, kind, (p.inputs[0], p.inputs[1], bias), add.outputs, p.tag, attrs)
            absorbed.add(p.id)
            rewrites.append(Rewrite(kind.value, (p.id, add.id), (fused_id,)))
            break
    if not rewrites:
        return g, PassReport("fuse_basic", len(g), len(g))
    nodes = [replaced.get(n.id, n) for n in g.nodes if n.id not in absorbed]
    out = rebuild(nodes, g)
    return out, PassReport("fuse_basic", len(g), len(out), rewrites)


# -- attention fusion -------------------------------------------------------------

def _scale_factor(g: Graph, n: Node) -> float | None:
    if n.kind is NodeKind.Scale:
        return float(n.attr("factor", 1.0))
    if n.kind is NodeKind.Mul:
        for i in (0, 1):
            c = n.inputs[i]
            if g.is_constant(c) and g.constants[c].size == 1 and not g.is_constant(n.inputs[1 - i]):
                return float(g.constants[c].ravel()[0])
    return None


def _is_last_two_swap(n: Node, rank: int) -> bool:
    perm = list(n.attr("perm", []))
    return rank >= 2 and perm == list(range(rank - 2)) + [rank - 1, rank - 2]


def _match_mha(g: Graph, av: Node, uses, claimed: set[str]) -> tuple[Node, list[str]] | None:
    if av.kind is not NodeKind.MatMul or av.attr("quantized", 0):
        return None
    sm = _producer_kind(g, av.inputs[0], NodeKind.Softmax)
    if sm is None or not _single_use(g, av.inputs[0], uses):
        return None
    rank = len(g.shape(sm.inputs[0]))
    if sm.attr("axis", -1) not in (-1, rank - 1):
        return None
    sc = _producer_kind(g, sm.inputs[0], NodeKind.Scale, NodeKind.Mul)
    if sc is None or not _single_use(g, sm.inputs[0], uses):
        return None
    factor = _scale_factor(g, sc)
    if factor is None:
        return None
    scores_in = sc.inputs[0] if sc.kind is NodeKind.Scale or not g.is_constant(sc.inputs[0]) else sc.inputs[1]
    qk = _producer_kind(g, scores_in, NodeKind.MatMul)
    if qk is None or not _single_use(g, scores_in, uses):
        return None
    matched = [qk.id, sc.id, sm.id, av.id]
    q, kt, v = qk.inputs[0], qk.inputs[1], av.inputs[1]
    k, k_transpose = kt, 0
    tr = _producer_kind(g, kt, NodeKind.Transpose)
    if tr is not None and _single_use(g, kt, uses) and _is_last_two_swap(tr, len(g.shape(kt))):
        k, k_transpose = tr.inputs[0], 1
        matched.insert(1, tr.id)
    inputs = [q, k, v]
    proj = 0
    projs = []
    for t in (q, k, v):
        p = _producer_kind(g, t, NodeKind.MatMul)
        if p is None or not _single_use(g, t, uses) or p.id in claimed:
            break
        projs.append(p)
    if len(projs) == 3 and len({p.id for p in projs}) == 3:
        proj = 1
        inputs = [x for p in projs for x in p.inputs]
        matched = [p.id for p in projs] + matched
    if any(m in claimed for m in matched):
        return None
    attrs = {"scale": factor, "k_transpose": k_transpose, "proj": proj}
    node = Node(f"mha[{av.id}]", NodeKind.FusedMHA, tuple(inputs), av.outputs, av.tag, attrs)
    return node, matched


def _msda_term(g: Graph, t: str, uses) -> tuple[list[str], list[str]] | None:
    """A Mul(GridSample(v, grid), w) term; returns (fused inputs, matched ids)."""
    mul = _producer_kind(g, t, NodeKind.Mul)
    if mul is None or not _single_use(g, t, uses):
        return None
    for i in (0, 1):
        gs = _producer_kind(g, mul.inputs[i], NodeKind.GridSample)
        if gs is not None and _single_use(g, mul.inputs[i], uses):
            return [gs.inputs[0], gs.inputs[1], mul.inputs[1 - i]], [gs.id, mul.id]
    return None


def _msda_tree(g: Graph, add: Node, uses) -> tuple[list[str], list[str], int] | None:
    inputs: list[str] = []
    matched: list[str] = [add.id]
    terms = 0
    for t in add.inputs:
        term = _msda_term(g, t, uses)
        if term is not None:
            inputs += term[0]
            matched += term[1]
            terms += 1
            continue
        sub = _producer_kind(g, t, NodeKind.Add)
        if sub is None or not _single_use(g, t, uses):
            return None
        rec = _msda_tree(g, sub, uses)
        if rec is None:
            return None
        inputs += rec[0]
        matched += rec[1]
        terms += rec[2]
    return inputs, matched, terms


def fuse_attention(g: Graph) -> tuple[Graph, PassReport]:
    """Collapse multi-head attention and multi-scale deformable attention blocks."""
    uses = g.consumer_map()
    claimed: set[str] = set()
    replaced: dict[str, Node] = {}
    rewrites: list[Rewrite] = []
    order = topo_sort(g)
    for nid in order:
        m = _match_mha(g, g.node(nid), uses, claimed)
        if m is None:
            continue
        node, matched = m
        claimed.update(matched)
        replaced[nid] = node
        rewrites.append(Rewrite("FusedMHA", tuple(matched), (node.id,)))
    # MSDA roots: outermost Adds first so a chain is taken whole
    for nid in reversed(order):
        add = g.node(nid)
        if add.kind is not NodeKind.Add or add.attr("quantized", 0) or nid in claimed:
            continue
        tree = _msda_tree(g, add, uses)
        if tree is None:
            continue
        inputs, matched, terms = tree
        if terms < 2 or any(x in claimed for x in matched):
            continue
        node = Node(f"msda[{nid}]", NodeKind.FusedMSDA, tuple(inputs), add.outputs, add.tag, {"levels": terms})
        claimed.update(matched)
        replaced[nid] = node
        rewrites.append(Rewrite("FusedMSDA", tuple(matched), (node.id,)))
    if not rewrites:
        return g, PassReport("fuse_attention", len(g), len(g))
    nodes = [replaced.get(n.id, n) for n in g.nodes if n.id in replaced or n.id not in claimed]
    out = rebuild(nodes, g)
    return out, PassReport("fuse_attention", len(g), len(out), rewrites)


# -- module-wise pruning ------------------------------------------------------------

PROTECTED_TAGS = frozenset({ModuleTag.Backbone, ModuleTag.BevEncoder, ModuleTag.Planner})


@dataclass(frozen=True)
class PruneSpec:
    remove: frozenset[ModuleTag] = frozenset()
    rewire_to_planner: bool = True

    def __post_init__(self):
        object.__setattr__(self, "remove", frozenset(ModuleTag(t) for t in self.remove))
        bad = self.remove & PROTECTED_TAGS
        if bad:
            raise PassError(f"cannot prune protected modules: {sorted(t.value for t in bad)}")


def _compatible(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    # query sets may differ in token count; rank and feature width must agree
    return len(a) == len(b) and a[-1] == b[-1] and a[:-2] == b[:-2]


def prune_modules(g: Graph, spec: PruneSpec) -> tuple[Graph, PassReport]:
    """Delete all nodes of the removed modules and rewire survivors upstream."""
    removed = {n.id for n in g.nodes if n.tag in spec.remove}
    if not removed:
        return g, PassReport("prune", len(g), len(g))
    order = {nid: i for i, nid in enumerate(topo_sort(g))}

    def stand_in(tensor: str) -> str:
        seen: set[str] = set()
        stack = [g.producer(tensor).id]
        candidates: set[str] = set()
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            for t in g.node(nid).inputs:
                p = g.producer(t)
                if p is not None and p.id in removed:
                    stack.append(p.id)
                elif not g.is_constant(t):
                    candidates.add(t)
        fits = [t for t in candidates if _compatible(g.shape(t), g.shape(tensor))]
        if not fits:
            raise InfeasiblePruneError(
                f"no surviving upstream tensor compatible with {tensor!r} {g.shape(tensor)}"
            )

        def rank(t: str):
            p = g.producer(t)
            return (order[p.id] if p is not None else -1, p.id if p is not None else t)

        return max(fits, key=rank)

    nodes: list[Node] = []
    rewrites: list[Rewrite] = []
    for n in g.nodes:
        if n.id in removed:
            continue
        new_inputs = []
        for t in n.inputs:
            p = g.producer(t)
            if p is not None and p.id in removed:
                if not spec.rewire_to_planner:
                    raise InfeasiblePruneError(
                        f"node {n.id!r} reads {t!r} from a pruned module and rewiring is disabled"
                    )
                t = stand_in(t)
            new_inputs.append(t)
        nodes.append(n.with_inputs(new_inputs))
    rewrites.extend(Rewrite(f"prune:{g.node(r).tag.value}", (r,)) for r in sorted(removed, key=order.get))
    outputs = [t for t in g.outputs if g.producer(t).id not in removed]
    out = rebuild(nodes, g, outputs=outputs)
    _check_planner_reachable(out)
    return out, PassReport("prune", len(g), len(out), rewrites)


def _check_planner_reachable(g: Graph) -> None:
    planner = [n for n in g.nodes if n.tag is ModuleTag.Planner]
    if not planner:
        return
    backbone = {n.id for n in g.nodes if n.tag is ModuleTag.Backbone}
    if not backbone:
        return
    reach: set[str] = set()
    for nid in topo_sort(g):
        n = g.node(nid)
        if nid in backbone or any((p := g.producer(t)) is not None and p.id in reach for t in n.inputs):
            reach.add(nid)
    if not any(n.id in reach for n in planner):
        raise InfeasiblePruneError("planner is no longer reachable from the backbone")


# -- pipeline ------------------------------------------------------------------------

PASSES: dict[str, Callable[[Graph], tuple[Graph, PassReport]]] = {
    "fold": fold_constants,
    "dce": eliminate_dead_nodes,
    "fuse_basic": fuse_basic,
    "fuse_attention": fuse_attention,
}
DEFAULT_PIPELINE = ("fold", "dce", "fuse_basic", "fuse_attention")


def optimize_pipeline(
    g: Graph, passes: Iterable[str], prune: PruneSpec | None = None
) -> tuple[Graph, list[PassReport]]:
    passes = list(passes)
    unknown = [p for p in passes if p not in PASSES and p != "prune"]
    if unknown:
        raise PassError(f"unknown pass(es): {unknown}; choose from {sorted(PASSES) + ['prune']}")
    reports = []
    for name in passes:
        if name == "prune":
            g, rep = prune_modules(g, prune or PruneSpec())
        else:
            g, rep = PASSES[name](g)
        reports.append(rep)
    return g, reports
