"""Seeded generator for the bundled 20-scenario desk suite."""

from __future__ import annotations

import math

import numpy as np

from .scenario import Agent, AgentKind, Polyline, Scenario, Trigger
from .sim import Fixed, RtsConfig, run_route

LANE_WIDTH = 3.5
CATEGORIES = ("straight", "cut_in", "stopped_obstacle", "merge", "fog")
PED_SLACK_S = (-0.05, -0.03, -0.04)


def make_route(rng: np.random.Generator, length: float, curved: bool, spacing: float = 5.0) -> list[tuple[float, float]]:
    """Straight route, or straight lead-in then a constant-radius bend then a straight tail."""
    if not curved:
        n = int(round(length / spacing))
        return [(i * length / n, 0.0) for i in range(n + 1)]
    lead = float(rng.uniform(30.0, 50.0))
    radius = float(rng.uniform(70.0, 110.0))
    turn = float(rng.uniform(0.4, 0.7)) * (1 if rng.random() < 0.5 else -1)
    arc = radius * abs(turn)
    tail = max(length - lead - arc, 10.0)
    pts = [(x, 0.0) for x in np.arange(0.0, lead, spacing)]
    sign = math.copysign(1.0, turn)
    cx, cy = lead, sign * radius
    n_arc = max(int(arc / spacing), 2)
    for i in range(n_arc + 1):
        th = abs(turn) * i / n_arc
        pts.append((cx + radius * math.sin(th), cy - sign * radius * math.cos(th)))
    hx, hy = math.cos(turn), math.sin(turn)
    ex, ey = pts[-1]
    n_tail = max(int(tail / spacing), 1)
    for i in range(1, n_tail + 1):
        d = tail * i / n_tail
        pts.append((ex + d * hx, ey + d * hy))
    return [(round(x, 6), round(y, 6)) for x, y in pts]


def split_segments(n_points: int, n_segments: int) -> list[tuple[int, int]]:
    cuts = np.linspace(0, n_points - 1, n_segments + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]


def pose(pl: Polyline, s: float, d: float) -> tuple[float, float]:
    """Point at arc length s offset d to the left; extrapolates past either end."""
    if s > pl.length:
        h = pl.heading_at(pl.length)
        x, y = pl.point_at(pl.length)
        x, y = x + (s - pl.length) * math.cos(h), y + (s - pl.length) * math.sin(h)
    elif s < 0:
        h = pl.heading_at(0.0)
        x, y = pl.point_at(0.0)
        x, y = x + s * math.cos(h), y + s * math.sin(h)
    else:
        h = pl.heading_at(s)
        x, y = pl.point_at(s)
    return round(x - d * math.sin(h), 6), round(y + d * math.cos(h), 6)


def lane_follower(pl: Polyline, aid: str, s0: float, speed: float, d: float, t_end: float, step: float = 1.0) -> Agent:
    ts = np.arange(0.0, t_end + step, step)
    return Agent(aid, AgentKind.Vehicle, tuple((float(t), *pose(pl, s0 + speed * t, d)) for t in ts))


def nominal_arrival(route, segments, target_speed, initial_speed, s_query: float) -> float:
    """Time at which the builtin policy reaches arc length s on an empty copy of the route."""
    probe = Scenario("probe", route, segments, target_speed=target_speed, initial_speed=initial_speed)
    log = run_route(probe, rts=RtsConfig(latency_source=Fixed(0.05)))
    for f, best in zip(log.frames, log.max_progress_s):
        if best >= s_query:
            return f.t
    return log.frames[-1].t


CUT_IN_LEAD_M = (4.5, 5.5)
CUT_IN_CROSS_S = 0.8
CUT_IN_DECEL = 5.0


def cut_in_agent(pl: Polyline, aid: str, s_land: float, t_land: float, speed: float, t_end: float) -> Agent:
    """Vehicle pacing the ego in the next lane, crossing in, then braking to a crawl."""
    cross = CUT_IN_CROSS_S
    pts = [(0.0, *pose(pl, s_land - speed * t_land, LANE_WIDTH))]
    pts.append((t_land - cross, *pose(pl, s_land - speed * cross, LANE_WIDTH)))
    pts.append((t_land, *pose(pl, s_land, 0.0)))
    slow = 0.3 * speed
    t_brake = (speed - slow) / CUT_IN_DECEL
    for i in range(1, 9):
        tau = t_brake * i / 8
        pts.append((t_land + tau, *pose(pl, s_land + speed * tau - 0.5 * CUT_IN_DECEL * tau * tau, 0.0)))
    s_end = s_land + (speed + slow) / 2 * t_brake
    pts.append((t_end, *pose(pl, s_end + slow * (t_end - t_land - t_brake), 0.0)))
    return Agent(aid, AgentKind.Vehicle, tuple(pts))


def _traffic(rng, pl: Polyline, t_end: float, count: int, speed: float) -> list[Agent]:
    out = []
    for i in range(count):
        s0 = float(rng.uniform(-20.0, 60.0))
        v = float(speed * rng.uniform(0.8, 1.1))
        out.append(lane_follower(pl, f"traffic{i}", s0, v, LANE_WIDTH, t_end))
    return out


def _stopped(pl: Polyline, aid: str, kind: AgentKind, s: float, t_clear: float) -> Agent:
    """Obstacle parked in the lane that is cleared to the shoulder at t_clear."""
    a = pose(pl, s, 0.0)
    b = pose(pl, s + 2.0, -LANE_WIDTH - 1.0)
    return Agent(aid, kind, ((0.0, *a), (t_clear, *a), (t_clear + 3.0, *b), (t_clear + 4.0, *b)))


def build_scenario(rng: np.random.Generator, idx: int, category: str, variant: int) -> Scenario:
    length = float(rng.uniform(140.0, 160.0))
    curved = bool(variant % 2)
    route = make_route(rng, length, curved)
    segments = split_segments(len(route), 3)
    pl = Polyline(route)
    target = float(rng.uniform(8.0, 11.0))
    visibility = 60.0
    timeout = 90.0
    agents: list[Agent] = []
    triggers: list[Trigger] = []
    tags: list[str] = []
    sid = f"r{idx:02d}_{category}"

    if category == "straight":
        agents += _traffic(rng, pl, timeout, 3, target)
    elif category == "cut_in":
        agents += _traffic(rng, pl, timeout, 2, target)
        s_c = float(rng.uniform(60.0, 90.0))
        lead = float(rng.uniform(*CUT_IN_LEAD_M))  # bumper gap when the cutter lands in the lane
        t_c = nominal_arrival(route, segments, target, 0.0, s_c)
        agents.append(cut_in_agent(pl, "cutter", s_c + lead + 4.6, t_c, target, timeout))
        triggers.append(Trigger(round(t_c - CUT_IN_CROSS_S, 6), "cut_in", "cutter"))
    elif category == "stopped_obstacle":
        agents += _traffic(rng, pl, timeout, 2, target)
        if variant < 2:
            kind = AgentKind.Vehicle if variant == 0 else AgentKind.Static
            s_o = float(rng.uniform(70.0, 110.0))
            t_clear = float(rng.uniform(20.0, 30.0))
            agents.append(_stopped(pl, "obstacle", kind, s_o, t_clear))
            triggers.append(Trigger(round(t_clear, 6), "obstacle_cleared", "obstacle"))
        else:
            # pedestrian steps into the lane shortly before the ego arrives, pauses, then leaves
            s_p = float(rng.uniform(70.0, 100.0))
            # reveal distance = braking distance + clearance + a reaction allowance of slack_s seconds
            slack = PED_SLACK_S[(variant - 2) % len(PED_SLACK_S)]
            reveal = target * target / 16.0 + 1.0 + 0.16 * target + slack * target
            t_p = nominal_arrival(route, segments, target, 0.0, s_p - reveal)
            side = -LANE_WIDTH - 0.5
            pts = (
                (0.0, *pose(pl, s_p, side)),
                (t_p - 0.4, *pose(pl, s_p, side)),
                (t_p, *pose(pl, s_p, 0.0)),
                (t_p + 6.0, *pose(pl, s_p, 0.0)),
                (t_p + 9.0, *pose(pl, s_p, LANE_WIDTH + 1.5)),
            )
            agents.append(Agent("pedestrian", AgentKind.Pedestrian, pts))
            triggers.append(Trigger(round(t_p - 0.4, 6), "pedestrian_crossing", "pedestrian"))
            tags.append("sudden")
    elif category == "merge":
        agents += _traffic(rng, pl, timeout, 1, target)
        s_m = float(rng.uniform(60.0, 90.0))
        t_m = nominal_arrival(route, segments, target, 0.0, s_m)
        v_m = 0.5 * target
        ahead = float(rng.uniform(6.0, 9.0))
        s_join = s_m + ahead
        pts = [(0.0, *pose(pl, s_join - v_m * t_m - 12.0, -LANE_WIDTH - 4.0))]
        pts.append((t_m - 2.0, *pose(pl, s_join - 2.0 * v_m - 2.0, -LANE_WIDTH - 2.0)))
        pts.append((t_m, *pose(pl, s_join, 0.0)))
        pts.append((timeout, *pose(pl, s_join + v_m * (timeout - t_m), 0.0)))
        agents.append(Agent("merger", AgentKind.Vehicle, tuple(pts)))
        triggers.append(Trigger(round(t_m - 2.0, 6), "merge", "merger"))
    elif category == "fog":
        visibility = float(rng.uniform(12.0, 16.0))
        target = float(rng.uniform(9.0, 10.5))
        agents += _traffic(rng, pl, timeout, 2, target)
        s_o = float(rng.uniform(70.0, 110.0))
        agents.append(_stopped(pl, "obstacle", AgentKind.Static, s_o, float(rng.uniform(20.0, 30.0))))
        tags.append("low_visibility")
    else:
        raise ValueError(f"unknown category {category!r}")

    return Scenario(
        id=sid,
        route=tuple(route),
        segments=tuple(segments),
        agents=tuple(agents),
        triggers=tuple(triggers),
        category=category,
        target_speed=round(target, 6),
        initial_speed=0.0,
        visibility_m=round(visibility, 6),
        timeout_s=timeout,
        tags=tuple(tags),
    )


SUITE_LAYOUT = (
    ("straight", 4),
    ("cut_in", 4),
    ("stopped_obstacle", 5),
    ("merge", 3),
    ("fog", 4),
)


def generate_suite(seed: int = 0) -> list[Scenario]:
    rng = np.random.default_rng(seed)
    out = []
    idx = 0
    for cat, count in SUITE_LAYOUT:
        for v in range(count):
            out.append(build_scenario(rng, idx, cat, v))
            idx += 1
    return out
