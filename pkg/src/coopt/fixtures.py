"""Synthetic graphs: the desk-scale "uniad-like" driving stack and small test graphs.

Shapes are invented to be representative at desk scale (BEV grid 24x24,
<= 32 queries per head); they are not claimed to match any real model.
"""

from __future__ import annotations

import math

import numpy as np

from .builder import GraphBuilder
from .ir import Graph, ModuleTag as T, NodeKind as K

D = 32  # embedding width
BEV = 24  # BEV grid side; BEV tokens = 576 (> 512, so BEV self-attention is long-sequence)


def _w(rng: np.random.Generator, *shape: int, scale: float | None = None) -> np.ndarray:
    fan_in = shape[-2] if len(shape) >= 2 else shape[0]
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
    s = scale if scale is not None else 1.0 / math.sqrt(fan_in)
    return rng.normal(0.0, s, size=shape)


def _grid(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    g = np.stack([xs, ys], axis=-1)[None]
    return np.clip(g + rng.normal(0, 0.05, size=g.shape), -1.0, 1.0)


def _attention(b: GraphBuilder, q_in: str, kv_in: str, tag: T, name: str, rng, *, proj_q=True) -> str:
    """Scaled dot-product attention written out op by op."""
    d = b.shape(kv_in)[-1]
    q = b.op(K.MatMul, [q_in, b.weight(f"{name}.wq", _w(rng, d, d))], tag, node_id=f"{name}.q") if proj_q else q_in
    k = b.op(K.MatMul, [kv_in, b.weight(f"{name}.wk", _w(rng, d, d))], tag, node_id=f"{name}.k")
    v = b.op(K.MatMul, [kv_in, b.weight(f"{name}.wv", _w(rng, d, d))], tag, node_id=f"{name}.v")
    kt = b.op(K.Transpose, [k], tag, {"perm": [0, 2, 1]}, node_id=f"{name}.kt")
    s = b.op(K.MatMul, [q, kt], tag, node_id=f"{name}.qk")
    s = b.op(K.Scale, [s], tag, {"factor": 1.0 / math.sqrt(d)}, node_id=f"{name}.scale")
    p = b.op(K.Softmax, [s], tag, {"axis": -1}, node_id=f"{name}.softmax")
    return b.op(K.MatMul, [p, v], tag, node_id=f"{name}.av")


def _linear(b: GraphBuilder, x: str, d_out: int, tag: T, name: str, rng, relu=True) -> str:
    d_in = b.shape(x)[-1]
    y = b.op(K.MatMul, [x, b.weight(f"{name}.w", _w(rng, d_in, d_out))], tag, node_id=f"{name}.mm")
    y = b.op(K.Add, [y, b.weight(f"{name}.b", _w(rng, d_out, scale=0.1))], tag, node_id=f"{name}.bias")
    if relu:
        y = b.op(K.Relu, [y], tag, node_id=f"{name}.relu")
    return y


def _conv(b: GraphBuilder, x: str, c_out: int, k: int, stride: int, tag: T, name: str, rng, relu=True) -> str:
    c_in = b.shape(x)[1]
    y = b.op(
        K.Conv2d,
        [x, b.weight(f"{name}.w", _w(rng, c_out, c_in, k, k))],
        tag,
        {"stride": [stride, stride], "padding": [k // 2, k // 2]},
        node_id=f"{name}.conv",
    )
    y = b.op(K.Add, [y, b.weight(f"{name}.b", _w(rng, 1, c_out, 1, 1, scale=0.1))], tag, node_id=f"{name}.bias")
    if relu:
        y = b.op(K.Relu, [y], tag, node_id=f"{name}.relu")
    return y


def _planner_read(b: GraphBuilder, ego: str, src: str, name: str) -> str:
    """Ego query attends over a module's query set (planner's direct read)."""
    st = b.op(K.Transpose, [src], T.Planner, {"perm": [0, 2, 1]}, node_id=f"{name}.t")
    s = b.op(K.MatMul, [ego, st], T.Planner, node_id=f"{name}.qk")
    s = b.op(K.Scale, [s], T.Planner, {"factor": 1.0 / math.sqrt(D)}, node_id=f"{name}.scale")
    p = b.op(K.Softmax, [s], T.Planner, {"axis": -1}, node_id=f"{name}.softmax")
    return b.op(K.MatMul, [p, src], T.Planner, node_id=f"{name}.av")


def uniad_like(seed: int = 0) -> Graph:
    """Backbone -> BEV encoder -> track/map -> motion -> occ, all feeding the planner."""
    rng = np.random.default_rng(seed)
    b = GraphBuilder()
    img = b.input("image", (1, 3, 32, 32))
    ego = b.input("ego_query", (1, 1, D))

    # Backbone: two conv stages
    f1 = _conv(b, img, 16, 3, 2, T.Backbone, "backbone.stage1", rng)
    feat = _conv(b, f1, D, 3, 1, T.Backbone, "backbone.stage2", rng)  # [1,32,16,16]
    feat_lo = _conv(b, feat, D, 3, 2, T.Backbone, "backbone.stage3", rng)  # [1,32,8,8]

    # BEV encoder: sample image features onto the BEV grid, deformable multi-level read,
    # rotate into the ego frame, then long-sequence self-attention.
    bev = b.op(K.GridSample, [feat, b.weight("bev.grid0", _grid(rng, BEV, BEV))], T.BevEncoder, node_id="bev.lift")
    terms = []
    for lvl, src in enumerate((feat, feat_lo)):
        smp = b.op(
            K.GridSample, [src, b.weight(f"bev.msda.grid{lvl}", _grid(rng, BEV, BEV))], T.BevEncoder,
            node_id=f"bev.msda.sample{lvl}",
        )
        aw = b.weight(f"bev.msda.attn{lvl}", rng.uniform(0.2, 0.8, size=(1, 1, BEV, BEV)))
        terms.append(b.op(K.Mul, [smp, aw], T.BevEncoder, node_id=f"bev.msda.weight{lvl}"))
    msda = b.op(K.Add, terms, T.BevEncoder, node_id="bev.msda.sum")
    bev = b.op(K.Add, [bev, msda], T.BevEncoder, node_id="bev.fuse")
    bev = b.op(K.Rotate, [bev], T.BevEncoder, {"angle": 0.1}, node_id="bev.rotate")
    tok = b.op(K.Reshape, [bev], T.BevEncoder, {"shape": [1, D, BEV * BEV]}, node_id="bev.flatten")
    tok = b.op(K.Transpose, [tok], T.BevEncoder, {"perm": [0, 2, 1]}, node_id="bev.tokens")
    att = _attention(b, tok, tok, T.BevEncoder, "bev.self", rng)
    tok = b.op(K.Add, [tok, att], T.BevEncoder, node_id="bev.residual")
    tok = b.op(K.LayerNorm, [tok], T.BevEncoder, {"eps": 1e-5}, node_id="bev.norm")  # [1,576,32]

    # Track and map heads: learned queries cross-attend to BEV tokens
    tq = b.weight("track.queries", _w(rng, 1, 32, D, scale=1.0))
    tq = _attention(b, tq, tok, T.Track, "track.xattn", rng)
    track_q = _linear(b, tq, D, T.Track, "track.ffn", rng)
    track_boxes = b.op(K.MatMul, [track_q, b.weight("track.box.w", _w(rng, D, 1))], T.Track, node_id="track.box")

    mq = b.weight("map.queries", _w(rng, 1, 16, D, scale=1.0))
    mq = _attention(b, mq, tok, T.Map, "map.xattn", rng)
    map_q = _linear(b, mq, D, T.Map, "map.ffn", rng)
    map_lanes = b.op(K.MatMul, [map_q, b.weight("map.lane.w", _w(rng, D, 4))], T.Map, node_id="map.lane")

    # Motion: agent queries attend to map, trajectories pushed through the ego pose inverse
    mo = _attention(b, track_q, map_q, T.Motion, "motion.xattn", rng, proj_q=False)
    motion_q = _linear(b, mo, D, T.Motion, "motion.ffn", rng)
    traj = b.op(K.MatMul, [motion_q, b.weight("motion.traj.w", _w(rng, D, 4))], T.Motion, node_id="motion.traj")
    theta = 0.3
    pose = np.array(
        [[math.cos(theta), -math.sin(theta), 0, 1.5], [math.sin(theta), math.cos(theta), 0, -0.5], [0, 0, 1, 0], [0, 0, 0, 1]]
    )
    pose = b.const_node(pose, T.Motion, name="motion.ego_pose", node_id="motion.ego_pose")
    pose_inv = b.op(K.Inverse, [pose], T.Motion, node_id="motion.pose_inv")
    motion_traj = b.op(K.MatMul, [traj, pose_inv], T.Motion, node_id="motion.to_ego")

    # Occupancy: BEV tokens attend to motion queries (576-long query side), then a
    # modulated deformable conv decodes the occupancy grid.
    oq = b.op(K.MatMul, [tok, b.weight("occ.wq", _w(rng, D, D))], T.Occ, node_id="occ.q")
    ok = b.op(K.MatMul, [motion_q, b.weight("occ.wk", _w(rng, D, D))], T.Occ, node_id="occ.k")
    ov = b.op(K.MatMul, [motion_q, b.weight("occ.wv", _w(rng, D, D))], T.Occ, node_id="occ.v")
    okt = b.op(K.Transpose, [ok], T.Occ, {"perm": [0, 2, 1]}, node_id="occ.kt")
    os_ = b.op(K.MatMul, [oq, okt], T.Occ, node_id="occ.qk")
    os_ = b.op(K.Mul, [os_, b.weight("occ.scale", np.full((1,), 1.0 / math.sqrt(D)))], T.Occ, node_id="occ.scale")
    op_ = b.op(K.Softmax, [os_], T.Occ, {"axis": -1}, node_id="occ.softmax")
    occ_feat = b.op(K.MatMul, [op_, ov], T.Occ, node_id="occ.av")  # [1,576,32]
    occ_map = b.op(K.Transpose, [occ_feat], T.Occ, {"perm": [0, 2, 1]}, node_id="occ.to_map")
    occ_map = b.op(K.Reshape, [occ_map], T.Occ, {"shape": [1, D, BEV, BEV]}, node_id="occ.reshape")
    taps = 9
    occ_logits = b.op(
        K.ModulatedDeformConv2d,
        [
            occ_map,
            b.weight("occ.dcn.offset", rng.normal(0, 0.5, size=(1, 2 * taps, BEV, BEV))),
            b.weight("occ.dcn.mask", rng.uniform(0, 1, size=(1, taps, BEV, BEV))),
            b.weight("occ.dcn.w", _w(rng, 8, D, 3, 3)),
        ],
        T.Occ,
        {"stride": [1, 1], "padding": [1, 1]},
        node_id="occ.decode",
    )
    pool = b.weight("occ.pool", np.full((1, 1, BEV * BEV), 1.0 / (BEV * BEV)))
    occ_q = b.op(K.MatMul, [pool, occ_feat], T.Occ, node_id="occ.pool")  # [1,1,32]

    # Segmentation head on the BEV map
    seg_in = b.op(K.Transpose, [tok], T.Seg, {"perm": [0, 2, 1]}, node_id="seg.to_map")
    seg_in = b.op(K.Reshape, [seg_in], T.Seg, {"shape": [1, D, BEV, BEV]}, node_id="seg.reshape")
    seg_logits = _conv(b, seg_in, 4, 1, 1, T.Seg, "seg.head", rng, relu=False)

    # Planner: ego query reads each module's queries directly
    reads = [
        _planner_read(b, ego, track_q, "plan.read_track"),
        _planner_read(b, ego, map_q, "plan.read_map"),
        _planner_read(b, ego, motion_q, "plan.read_motion"),
        _planner_read(b, ego, occ_q, "plan.read_occ"),
    ]
    h = ego
    for i, r in enumerate(reads):
        h = b.op(K.Add, [h, r], T.Planner, node_id=f"plan.sum{i}")
    h = _linear(b, h, D, T.Planner, "plan.mlp1", rng)
    plan = _linear(b, h, 12, T.Planner, "plan.mlp2", rng, relu=False)
    plan_traj = b.op(K.Reshape, [plan], T.Other, {"shape": [1, 6, 2]}, node_id="post.plan_traj")
    return b.build([plan_traj, track_boxes, map_lanes, motion_traj, occ_logits, seg_logits])


def random_inputs(g: Graph, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {t: rng.normal(size=g.tensors[t].shape) for t in g.inputs}


# -- small graphs used by tests and the acceptance campaign ----------------

def attention_block(seq: int = 16, d: int = 8, *, proj: bool = False, seed: int = 0, tag: T = T.BevEncoder) -> Graph:
    """Canonical MatMul(Q,K^T) -> Scale -> Softmax -> MatMul(., V) block."""
    rng = np.random.default_rng(seed)
    b = GraphBuilder()
    if proj:
        x = b.input("x", (1, seq, d))
        q = b.op(K.MatMul, [x, b.weight("wq", _w(rng, d, d))], tag, node_id="q")
        k = b.op(K.MatMul, [x, b.weight("wk", _w(rng, d, d))], tag, node_id="k")
        v = b.op(K.MatMul, [x, b.weight("wv", _w(rng, d, d))], tag, node_id="v")
        kt = b.op(K.Transpose, [k], tag, {"perm": [0, 2, 1]}, node_id="kt")
    else:
        q = b.input("q", (1, seq, d))
        kt = b.input("kt", (1, d, seq))
        v = b.input("v", (1, seq, d))
    s = b.op(K.MatMul, [q, kt], tag, node_id="qk")
    s = b.op(K.Scale, [s], tag, {"factor": 1.0 / math.sqrt(d)}, node_id="scale")
    p = b.op(K.Softmax, [s], tag, {"axis": -1}, node_id="softmax")
    out = b.op(K.MatMul, [p, v], tag, node_id="av")
    return b.build([out])
