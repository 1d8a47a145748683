"""Scenario description: route geometry, scripted agents, timed triggers, JSON I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class ScenarioError(ValueError):
    pass


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


class Polyline:
    """Arc-length parameterized 2D polyline."""

    def __init__(self, points: Sequence[Sequence[float]]):
        p = np.asarray(points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 2 or len(p) < 2:
            raise ScenarioError("a route needs at least two 2D waypoints")
        d = np.diff(p, axis=0)
        seg_len = np.hypot(d[:, 0], d[:, 1])
        if np.any(seg_len <= 0):
            raise ScenarioError("consecutive route waypoints must differ")
        self.points = p
        self.seg_vec = d
        self.seg_len = seg_len
        self.cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.length = float(self.cum[-1])

    def project(self, x: float, y: float) -> tuple[float, float]:
        """Closest-point arc length and signed lateral offset (left positive)."""
        a = self.points[:-1]
        rel = np.array([x, y]) - a
        u = np.clip(np.einsum("ij,ij->i", rel, self.seg_vec) / self.seg_len**2, 0.0, 1.0)
        closest = a + u[:, None] * self.seg_vec
        dist2 = np.sum((np.array([x, y]) - closest) ** 2, axis=1)
        i = int(np.argmin(dist2))
        s = float(self.cum[i] + u[i] * self.seg_len[i])
        dx, dy = self.seg_vec[i] / self.seg_len[i]
        rx, ry = x - closest[i, 0], y - closest[i, 1]
        return s, float(dx * ry - dy * rx)

    def point_at(self, s: float) -> tuple[float, float]:
        s = min(max(s, 0.0), self.length)
        i = min(int(np.searchsorted(self.cum, s, side="right")) - 1, len(self.seg_len) - 1)
        u = (s - self.cum[i]) / self.seg_len[i]
        px, py = self.points[i] + u * self.seg_vec[i]
        return float(px), float(py)

    def heading_at(self, s: float) -> float:
        s = min(max(s, 0.0), self.length)
        i = min(int(np.searchsorted(self.cum, s, side="right")) - 1, len(self.seg_len) - 1)
        return float(math.atan2(self.seg_vec[i, 1], self.seg_vec[i, 0]))


def _segments_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return d1 * d2 < 0 and d3 * d4 < 0


class AgentKind(str, Enum):
    Vehicle = "vehicle"
    Pedestrian = "pedestrian"
    Static = "static"


DEFAULT_SIZE = {
    AgentKind.Vehicle: (4.6, 2.0),
    AgentKind.Pedestrian: (0.6, 0.6),
    AgentKind.Static: (1.5, 1.5),
}


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    heading: float
    speed: float


@dataclass(frozen=True)
class Agent:
    """Non-reactive traffic participant following timed piecewise-linear waypoints."""

    id: str
    kind: AgentKind
    trajectory: tuple[tuple[float, float, float], ...]  # (t, x, y)
    length: float = 0.0
    width: float = 0.0
    heading: float | None = None  # used while the agent never moves

    def __post_init__(self):
        object.__setattr__(self, "kind", AgentKind(self.kind))
        traj = tuple(tuple(float(v) for v in p) for p in self.trajectory)
        if not traj or any(len(p) != 3 for p in traj):
            raise ScenarioError(f"agent {self.id!r}: trajectory must be a non-empty list of [t, x, y]")
        if any(b[0] <= a[0] for a, b in zip(traj, traj[1:])):
            raise ScenarioError(f"agent {self.id!r}: trajectory timestamps must increase strictly")
        object.__setattr__(self, "trajectory", traj)
        dl, dw = DEFAULT_SIZE[self.kind]
        if not self.length:
            object.__setattr__(self, "length", dl)
        if not self.width:
            object.__setattr__(self, "width", dw)
        if self.length <= 0 or self.width <= 0:
            raise ScenarioError(f"agent {self.id!r}: size must be positive")
        # heading per leg: direction of travel, carried over stationary legs
        legs = []
        for a, b in zip(traj, traj[1:]):
            dx, dy = b[1] - a[1], b[2] - a[2]
            legs.append(math.atan2(dy, dx) if dx or dy else None)
        fallback = self.heading if self.heading is not None else next((h for h in legs if h is not None), 0.0)
        filled, prev = [], fallback
        for h in legs:
            prev = h if h is not None else prev
            filled.append(prev)
        object.__setattr__(self, "_leg_heading", tuple(filled))
        object.__setattr__(self, "_rest_heading", fallback if not filled else filled[-1])
        object.__setattr__(self, "_start_heading", filled[0] if filled else fallback)

    def state_at(self, t: float) -> AgentState:
        traj = self.trajectory
        if len(traj) == 1 or t < traj[0][0]:
            return AgentState(traj[0][1], traj[0][2], self._start_heading, 0.0)
        if t >= traj[-1][0]:
            return AgentState(traj[-1][1], traj[-1][2], self._rest_heading, 0.0)
        times = [p[0] for p in traj]
        i = int(np.searchsorted(times, t, side="right")) - 1
        (t0, x0, y0), (t1, x1, y1) = traj[i], traj[i + 1]
        u = (t - t0) / (t1 - t0)
        speed = math.hypot(x1 - x0, y1 - y0) / (t1 - t0)
        return AgentState(x0 + u * (x1 - x0), y0 + u * (y1 - y0), self._leg_heading[i], speed)

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "kind": self.kind.value,
            "length": self.length,
            "width": self.width,
            "trajectory": [list(p) for p in self.trajectory],
        }
        if self.heading is not None:
            d["heading"] = self.heading
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Agent":
        return cls(
            str(d["id"]),
            AgentKind(d["kind"]),
            tuple(tuple(p) for p in d["trajectory"]),
            float(d.get("length", 0.0)),
            float(d.get("width", 0.0)),
            None if d.get("heading") is None else float(d["heading"]),
        )


@dataclass(frozen=True)
class Trigger:
    """Timed scripted event. The agent trajectory already encodes the motion; this is its label."""

    t: float
    kind: str
    agent: str | None = None

    def to_dict(self) -> dict:
        return {"t": self.t, "kind": self.kind, "agent": self.agent}


@dataclass(frozen=True)
class Scenario:
    id: str
    route: tuple[tuple[float, float], ...]
    segments: tuple[tuple[int, int], ...]
    agents: tuple[Agent, ...] = ()
    triggers: tuple[Trigger, ...] = ()
    category: str = "straight"
    target_speed: float = 10.0
    initial_speed: float = 0.0
    visibility_m: float = 60.0
    timeout_s: float = 90.0
    tags: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "route", tuple((float(x), float(y)) for x, y in self.route))
        object.__setattr__(self, "segments", tuple((int(a), int(b)) for a, b in self.segments))
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "triggers", tuple(self.triggers))
        object.__setattr__(self, "tags", tuple(self.tags))
        validate_scenario(self)

    @property
    def polyline(self) -> Polyline:
        pl = self.__dict__.get("_polyline")
        if pl is None:
            pl = Polyline(self.route)
            object.__setattr__(self, "_polyline", pl)
        return pl

    @property
    def length_m(self) -> float:
        return self.polyline.length

    def segment_bounds(self) -> list[tuple[float, float]]:
        cum = self.polyline.cum
        return [(float(cum[a]), float(cum[b])) for a, b in self.segments]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "category": self.category,
            "route": [list(p) for p in self.route],
            "segments": [list(s) for s in self.segments],
            "agents": [a.to_dict() for a in self.agents],
            "triggers": [t.to_dict() for t in self.triggers],
            "target_speed": self.target_speed,
            "initial_speed": self.initial_speed,
            "visibility_m": self.visibility_m,
            "timeout_s": self.timeout_s,
            "tags": list(self.tags),
            "length_m": round(self.length_m, 6),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scenario":
        try:
            return cls(
                id=str(d["id"]),
                route=tuple(tuple(p) for p in d["route"]),
                segments=tuple(tuple(s) for s in d["segments"]),
                agents=tuple(Agent.from_dict(a) for a in d.get("agents", ())),
                triggers=tuple(
                    Trigger(float(t["t"]), str(t["kind"]), t.get("agent")) for t in d.get("triggers", ())
                ),
                category=str(d.get("category", "straight")),
                target_speed=float(d.get("target_speed", 10.0)),
                initial_speed=float(d.get("initial_speed", 0.0)),
                visibility_m=float(d.get("visibility_m", 60.0)),
                timeout_s=float(d.get("timeout_s", 90.0)),
                tags=tuple(d.get("tags", ())),
            )
        except (KeyError, TypeError) as e:
            raise ScenarioError(f"malformed scenario document: {e}") from e


def validate_scenario(sc: Scenario) -> None:
    pl = Polyline(sc.route)
    n = len(sc.route)
    if not sc.segments:
        raise ScenarioError(f"{sc.id}: at least one segment required")
    if sc.segments[0][0] != 0 or sc.segments[-1][1] != n - 1:
        raise ScenarioError(f"{sc.id}: segments must cover the route from waypoint 0 to {n - 1}")
    for (a, b), (c, _) in zip(sc.segments, sc.segments[1:] + ((sc.segments[-1][1], None),)):
        if not 0 <= a < b < n or b != c:
            raise ScenarioError(f"{sc.id}: segments must be contiguous and non-empty")
    for a, b in sc.segments:
        pts = pl.points[a : b + 1]
        for i in range(len(pts) - 1):
            for j in range(i + 2, len(pts) - 1):
                if _segments_intersect(pts[i], pts[i + 1], pts[j], pts[j + 1]):
                    raise ScenarioError(f"{sc.id}: route self-intersects within segment ({a}, {b})")
    ids = [a.id for a in sc.agents]
    if len(set(ids)) != len(ids):
        raise ScenarioError(f"{sc.id}: duplicate agent ids")
    for t in sc.triggers:
        if t.agent is not None and t.agent not in ids:
            raise ScenarioError(f"{sc.id}: trigger references unknown agent {t.agent!r}")
    if sc.target_speed <= 0 or sc.initial_speed < 0 or sc.visibility_m <= 0 or sc.timeout_s <= 0:
        raise ScenarioError(f"{sc.id}: speeds, visibility and timeout must be positive")


def save_suite(scenarios: Iterable[Scenario], path: str | Path) -> None:
    doc = {"scenarios": [s.to_dict() for s in scenarios]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_suite(path: str | Path) -> list[Scenario]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{path}: invalid JSON ({e})") from e
    items = doc["scenarios"] if isinstance(doc, dict) and "scenarios" in doc else doc
    if isinstance(items, dict):
        items = [items]
    return [Scenario.from_dict(d) for d in items]
