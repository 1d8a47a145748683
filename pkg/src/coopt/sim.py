"""Deterministic 2D closed-loop simulator with a latency-aware synchronous scheduler."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np

from .cost import LatencyTrace, SpikeRule, SpikeSampler
from .scenario import AgentKind, Scenario, wrap_angle


class SimError(RuntimeError):
    pass


class TraceExhaustedError(SimError):
    pass


# -- vehicle --------------------------------------------------------------------

@dataclass(frozen=True)
class VehicleParams:
    a_max: float = 3.0
    b_max: float = 8.0
    wheelbase: float = 2.8
    v_max: float = 20.0
    drag: float = 0.05
    length: float = 4.6
    width: float = 2.0

    @classmethod
    def from_dict(cls, d: Mapping) -> "VehicleParams":
        return cls(**{k: float(v) for k, v in d.items()})


MAX_STEER = 0.5


@dataclass(frozen=True)
class Action:
    steer: float = 0.0
    throttle: float = 0.0
    brake: float = 0.0

    def __post_init__(self):
        if not (-MAX_STEER <= self.steer <= MAX_STEER and 0 <= self.throttle <= 1 and 0 <= self.brake <= 1):
            raise SimError(f"action out of range: {self}")

    def resolved(self) -> "Action":
        # brake wins over throttle
        if self.brake > 0 and self.throttle > 0:
            return Action(self.steer, 0.0, self.brake)
        return self


FULL_BRAKE = Action(0.0, 0.0, 1.0)


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    heading: float
    v: float
    steer: float = 0.0
    throttle: float = 0.0
    brake: float = 0.0


def step_ego(s: EgoState, a: Action, dt: float, p: VehicleParams = VehicleParams()) -> EgoState:
    """Kinematic bicycle, explicit Euler on the pre-step speed and heading."""
    a = a.resolved()
    dv = p.a_max * a.throttle - p.b_max * a.brake - p.drag * s.v
    v = min(max(s.v + dv * dt, 0.0), p.v_max)
    heading = s.heading + (s.v / p.wheelbase) * math.tan(a.steer) * dt
    x = s.x + s.v * math.cos(s.heading) * dt
    y = s.y + s.v * math.sin(s.heading) * dt
    return EgoState(x, y, heading, v, a.steer, a.throttle, a.brake)


# -- scheduling ------------------------------------------------------------------

def frames_to_skip(t_i: float, dt: float) -> int:
    if not (t_i > 0 and dt > 0):
        raise SimError("latency and dt must be positive")
    return max(0, int(t_i / dt) - 1)


class _FixedCursor:
    def __init__(self, t: float):
        self.t = t

    def next(self, obstacle_ahead: bool) -> tuple[float, bool]:
        return self.t, False


class _TraceCursor:
    def __init__(self, trace: LatencyTrace):
        self.trace = trace
        self.i = 0

    def next(self, obstacle_ahead: bool) -> tuple[float, bool]:
        if self.i >= len(self.trace):
            raise TraceExhaustedError(f"latency trace exhausted after {self.i} decisions")
        i = self.i
        self.i += 1
        return self.trace.frame_latencies_s[i], i in self.trace.spike_frames


class _TriggeredCursor:
    def __init__(self, base: float, rules: Sequence[SpikeRule], seed: int):
        self.base = base
        self.sampler = SpikeSampler(rules, seed)

    def next(self, obstacle_ahead: bool) -> tuple[float, bool]:
        extra, fired = self.sampler.added(obstacle_ahead)
        return self.base + extra, fired


@dataclass(frozen=True)
class Fixed:
    t: float

    def __post_init__(self):
        if not self.t > 0:
            raise SimError("fixed latency must be > 0")

    def cursor(self):
        return _FixedCursor(self.t)


@dataclass(frozen=True)
class Trace:
    trace: LatencyTrace

    def cursor(self):
        return _TraceCursor(self.trace)


@dataclass(frozen=True)
class Triggered:
    """Base latency plus spike rules evaluated online from the decision's observation."""

    base_s: float
    rules: tuple[SpikeRule, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if not self.base_s > 0:
            raise SimError("base latency must be > 0")
        object.__setattr__(self, "rules", tuple(self.rules))

    def cursor(self):
        return _TriggeredCursor(self.base_s, self.rules, self.seed)


LatencySource = Fixed | Trace | Triggered


@dataclass(frozen=True)
class RtsConfig:
    dt: float = 0.05
    latency_source: LatencySource = Fixed(0.05)
    min_latency_s: float = 0.0  # frame-rate cap: latencies are inflated to at least this

    def __post_init__(self):
        if not self.dt > 0:
            raise SimError("dt must be > 0")
        if self.min_latency_s < 0:
            raise SimError("min_latency_s must be >= 0")


# -- observation and policy ---------------------------------------------------------

@dataclass(frozen=True)
class SimParams:
    vehicle: VehicleParams = VehicleParams()
    path_margin_m: float = 0.3
    off_route_m: float = 2.5
    terminal_deviation_m: float = 8.0
    completion_tol_m: float = 1.0
    obstacle_ahead_range_m: float = 30.0
    obstacle_ahead_lateral_m: float = 6.0
    neighbor_record_radius_m: float = 100.0
    blocked_speed: float = 0.1
    blocked_duration_s: float = 60.0

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimParams":
        d = dict(d)
        veh = VehicleParams.from_dict(d.pop("vehicle", {}))
        return cls(vehicle=veh, **{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class Observation:
    t: float
    ego: EgoState
    progress_s: float
    lateral_m: float
    lookahead: tuple[float, float]
    target_speed: float
    obstacle_gap: float  # bumper-to-bumper distance to the nearest visible in-path agent
    obstacle_speed: float
    obstacle_ahead: bool  # any visible agent in the forward collision region


@dataclass(frozen=True)
class PolicyParams:
    lookahead_min: float = 5.0
    lookahead_gain: float = 0.8
    speed_gain: float = 0.4
    max_throttle: float = 0.6
    min_gap: float = 2.5
    comfort_decel: float = 3.0
    ttc_threshold: float = 4.0
    ttc_gain: float = 0.5
    brake_gain: float = 1.25
    overspeed_brake_gain: float = 0.15
    wheelbase: float = 2.8
    a_max: float = 3.0
    b_max: float = 8.0
    drag: float = 0.05

    @classmethod
    def from_dict(cls, d: Mapping) -> "PolicyParams":
        return cls(**{k: float(v) for k, v in d.items()})


def lookahead_distance(v: float, p: PolicyParams = PolicyParams()) -> float:
    return p.lookahead_min + p.lookahead_gain * v


def builtin_policy(obs: Observation, p: PolicyParams = PolicyParams()) -> Action:
    """Pure pursuit steering, speed tracking, and time-to-collision braking."""
    ego = obs.ego
    lx, ly = obs.lookahead
    alpha = wrap_angle(math.atan2(ly - ego.y, lx - ego.x) - ego.heading)
    ld = max(math.hypot(lx - ego.x, ly - ego.y), 1e-6)
    steer = math.atan(2.0 * p.wheelbase * math.sin(alpha) / ld)
    steer = min(max(steer, -MAX_STEER), MAX_STEER)

    gap, v = obs.obstacle_gap, ego.v
    if gap <= p.min_gap:
        return Action(steer, 0.0, 1.0)
    v_cmd = obs.target_speed
    brake = 0.0
    if math.isfinite(gap):
        room = gap - p.min_gap
        v_cmd = min(v_cmd, obs.obstacle_speed + math.sqrt(2.0 * p.comfort_decel * room))
        closing = v - obs.obstacle_speed
        if closing > 0:
            ttc = gap / closing
            a_req = closing * closing / (2.0 * room)
            if ttc < p.ttc_threshold:
                brake = max(brake, p.ttc_gain * (p.ttc_threshold - ttc) / p.ttc_threshold)
            if a_req > 0.5 * p.comfort_decel:
                brake = max(brake, p.brake_gain * a_req / p.b_max)
    if v > v_cmd + 0.5:
        brake = max(brake, p.overspeed_brake_gain * (v - v_cmd))
    if brake > 0:
        return Action(steer, 0.0, min(brake, 1.0))
    throttle = p.drag * v_cmd / p.a_max + p.speed_gain * (v_cmd - v)
    return Action(steer, min(max(throttle, 0.0), p.max_throttle), 0.0)


# -- collision --------------------------------------------------------------------------

def _corners(x, y, h, length, width) -> np.ndarray:
    c, s = math.cos(h), math.sin(h)
    hl, hw = length / 2.0, width / 2.0
    loc = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    rot = np.array([[c, -s], [s, c]])
    return loc @ rot.T + np.array([x, y])


def obb_overlap(a: tuple, b: tuple) -> bool:
    """Separating-axis test for two oriented boxes given as (x, y, heading, length, width)."""
    ca, cb = _corners(*a), _corners(*b)
    for h in (a[2], b[2]):
        for axis in ((math.cos(h), math.sin(h)), (-math.sin(h), math.cos(h))):
            pa, pb = ca @ axis, cb @ axis
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True


# -- logs -------------------------------------------------------------------------------

class InfractionKind(str, Enum):
    CollisionVehicle = "CollisionVehicle"
    CollisionStatic = "CollisionStatic"
    CollisionPedestrian = "CollisionPedestrian"
    OffRoute = "OffRoute"
    Blocked = "Blocked"
    RedLight = "RedLight"


COLLISION_KIND = {
    AgentKind.Vehicle: InfractionKind.CollisionVehicle,
    AgentKind.Pedestrian: InfractionKind.CollisionPedestrian,
    AgentKind.Static: InfractionKind.CollisionStatic,
}
COLLISIONS = frozenset(COLLISION_KIND.values())


@dataclass(frozen=True)
class Infraction:
    frame: int
    kind: InfractionKind
    segment: int
    detail: str = ""


@dataclass(frozen=True)
class FrameRecord:
    t: float
    state: EgoState
    action: Action
    n_skipped: int  # n of the decision whose action this frame applies
    decision: bool  # a new action was computed on this frame
    latency_s: float  # effective latency of that decision
    progress_s: float
    lateral_m: float
    neighbors: tuple[tuple[float, float], ...]  # (distance, speed) of vehicles in record radius


DYNAMICS_FIELDS = ("lon_acc", "lat_acc", "yaw_rate", "yaw_acc", "lon_jerk", "jerk_mag")


def derive_dynamics(states: Sequence[EgoState], dt: float) -> dict[str, np.ndarray]:
    """Six comfort variables by backward finite differences; zero where history is short."""
    n = len(states)
    v = np.array([s.v for s in states], dtype=np.float64)
    h = np.array([s.heading for s in states], dtype=np.float64)
    lon_acc = np.zeros(n)
    yaw_rate = np.zeros(n)
    yaw_acc = np.zeros(n)
    lon_jerk = np.zeros(n)
    lat_jerk = np.zeros(n)
    if n > 1:
        lon_acc[1:] = (v[1:] - v[:-1]) / dt
        dh = (h[1:] - h[:-1] + math.pi) % (2.0 * math.pi) - math.pi
        yaw_rate[1:] = dh / dt
    lat_acc = v * yaw_rate
    if n > 2:
        yaw_acc[2:] = (yaw_rate[2:] - yaw_rate[1:-1]) / dt
        lon_jerk[2:] = (lon_acc[2:] - lon_acc[1:-1]) / dt
        lat_jerk[2:] = (lat_acc[2:] - lat_acc[1:-1]) / dt
    jerk_mag = np.hypot(lon_jerk, lat_jerk)
    return {
        "lon_acc": lon_acc,
        "lat_acc": lat_acc,
        "yaw_rate": yaw_rate,
        "yaw_acc": yaw_acc,
        "lon_jerk": lon_jerk,
        "jerk_mag": jerk_mag,
    }


@dataclass
class TrajectoryLog:
    scenario_id: str
    dt: float
    route_length_m: float
    segment_bounds: list[tuple[float, float]]
    frames: list[FrameRecord]
    infractions: list[Infraction]
    segment_rc: list[float]
    end_reason: str
    decision_latencies_s: list[float] = field(default_factory=list)
    raw_latencies_s: list[float] = field(default_factory=list)  # before the frame-rate cap
    spiked_decisions: list[int] = field(default_factory=list)
    max_progress_s: list[float] = field(default_factory=list)
    dynamics: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.dynamics:
            self.dynamics = derive_dynamics([f.state for f in self.frames], self.dt)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def crashed(self) -> bool:
        return any(i.kind in COLLISIONS for i in self.infractions)

    @property
    def progress_fraction(self) -> float:
        if not self.max_progress_s:
            return 0.0
        return min(self.max_progress_s[-1] / self.route_length_m, 1.0)

    @property
    def speeds(self) -> np.ndarray:
        return np.array([f.state.v for f in self.frames], dtype=np.float64)

    def segment_infractions(self) -> list[list[Infraction]]:
        out: list[list[Infraction]] = [[] for _ in self.segment_bounds]
        for inf in self.infractions:
            out[inf.segment].append(inf)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["frame", "t", "x", "y", "heading", "v", "steer", "throttle", "brake", "n_skipped", "decision",
             "latency_s", "progress_s", "lateral_m", *DYNAMICS_FIELDS]
        )
        for k, f in enumerate(self.frames):
            s, a = f.state, f.action
            w.writerow(
                [k, repr(f.t), repr(s.x), repr(s.y), repr(s.heading), repr(s.v), repr(a.steer), repr(a.throttle),
                 repr(a.brake), f.n_skipped, int(f.decision), repr(f.latency_s), repr(f.progress_s),
                 repr(f.lateral_m), *(repr(float(self.dynamics[d][k])) for d in DYNAMICS_FIELDS)]
            )
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "scenario": self.scenario_id,
            "frames": len(self.frames),
            "decisions": len(self.decision_latencies_s),
            "end_reason": self.end_reason,
            "segment_rc": list(self.segment_rc),
            "infractions": [
                {"frame": i.frame, "kind": i.kind.value, "segment": i.segment, "detail": i.detail}
                for i in self.infractions
            ],
            "crashed": self.crashed,
        }


# -- blocked intervals ---------------------------------------------------------------------

def detect_blocked(
    log_or_speeds, speed_threshold: float = 0.1, duration: float = 60.0, dt: float | None = None
) -> list[tuple[int, int]]:
    """Maximal [start, end) frame intervals where speed stays at or below the threshold longer than duration."""
    if isinstance(log_or_speeds, TrajectoryLog):
        speeds, dt = log_or_speeds.speeds, log_or_speeds.dt
    else:
        speeds = np.asarray(log_or_speeds, dtype=np.float64)
        if dt is None:
            raise SimError("dt is required with a raw speed series")
    out = []
    start = None
    for k, v in enumerate(list(speeds) + [math.inf]):
        if v <= speed_threshold:
            if start is None:
                start = k
        elif start is not None:
            if (k - start) * dt > duration:
                out.append((start, k))
            start = None
    return out


# -- closed loop ---------------------------------------------------------------------------------

Policy = Callable[[Observation], Action]


class _World:
    def __init__(self, sc: Scenario, params: SimParams):
        self.sc = sc
        self.p = params
        self.pl = sc.polyline
        self.agents = sc.agents

    def agent_states(self, t: float):
        return [(a, a.state_at(t)) for a in self.agents]

    def observe(self, t: float, ego: EgoState, agents, progress: float, lateral: float) -> Observation:
        p, veh = self.p, self.p.vehicle
        ld = lookahead_distance(ego.v)
        look = self.pl.point_at(progress + ld)
        if progress + ld > self.pl.length:
            # extend past the route end along its final heading
            h = self.pl.heading_at(self.pl.length)
            extra = progress + ld - self.pl.length
            look = (look[0] + extra * math.cos(h), look[1] + extra * math.sin(h))
        gap, gap_speed, ahead = math.inf, 0.0, False
        ch, sh = math.cos(ego.heading), math.sin(ego.heading)
        for a, st in agents:
            dx, dy = st.x - ego.x, st.y - ego.y
            if math.hypot(dx, dy) > self.sc.visibility_m:
                continue
            lon = dx * ch + dy * sh
            lat = -dx * sh + dy * ch
            if 0 < lon <= p.obstacle_ahead_range_m and abs(lat) <= p.obstacle_ahead_lateral_m:
                ahead = True
            s_a, d_a = self.pl.project(st.x, st.y)
            if s_a <= progress:
                continue
            rel = st.heading - self.pl.heading_at(s_a)
            across = 0.5 * (a.width * abs(math.cos(rel)) + a.length * abs(math.sin(rel)))
            if abs(d_a) - across >= veh.width / 2 + p.path_margin_m:
                continue
            g = s_a - progress - veh.length / 2 - a.length / 2
            if g < gap:
                gap, gap_speed = max(g, 0.0), st.speed * math.cos(rel)
        return Observation(t, ego, progress, lateral, look, self.sc.target_speed, gap, max(gap_speed, 0.0), ahead)


def run_route(
    sc: Scenario,
    policy: Policy = builtin_policy,
    rts: RtsConfig = RtsConfig(),
    params: SimParams = SimParams(),
) -> TrajectoryLog:
    world = _World(sc, params)
    pl, veh, dt = world.pl, params.vehicle, rts.dt
    h0 = pl.heading_at(0.0)
    x0, y0 = sc.route[0]
    ego = EgoState(x0, y0, h0, min(sc.initial_speed, veh.v_max))
    cursor = rts.latency_source.cursor()
    bounds = sc.segment_bounds()
    seg_rc = [0.0] * len(bounds)
    max_frames = int(math.ceil(sc.timeout_s / dt - 1e-9))

    frames: list[FrameRecord] = []
    infractions: list[Infraction] = []
    lat_eff, lat_raw, spiked = [], [], []
    max_prog: list[float] = []
    best = 0.0
    crashed = False
    off_route = False
    still_frames = 0
    end_reason = "timeout"
    progress, lateral = pl.project(ego.x, ego.y)

    def segment_of(s: float) -> int:
        for i, (_, b) in enumerate(bounds):
            if s < b:
                return i
        return len(bounds) - 1

    k = 0  # next frame index; frame k covers time (k, k+1]·dt
    done = False
    while not done:
        t = k * dt
        agents = world.agent_states(t)
        obs = world.observe(t, ego, agents, progress, lateral)
        action = FULL_BRAKE if crashed else policy(obs)
        raw, fired = cursor.next(obs.obstacle_ahead)
        eff = max(raw, rts.min_latency_s)
        n = frames_to_skip(eff, dt)
        if fired:
            spiked.append(len(lat_eff))
        lat_eff.append(eff)
        lat_raw.append(raw)
        for j in range(n + 1):
            if crashed:
                ego = replace(step_ego(ego, FULL_BRAKE, dt, veh), v=0.0)
                applied = FULL_BRAKE
            else:
                ego = step_ego(ego, action, dt, veh)
                applied = action.resolved()
            k += 1
            t = k * dt
            progress, lateral = pl.project(ego.x, ego.y)
            seg = segment_of(progress)
            agents = world.agent_states(t)
            if not crashed:
                best = max(best, progress)
                for i, (a, b) in enumerate(bounds):
                    seg_rc[i] = max(seg_rc[i], min(max((best - a) / (b - a), 0.0), 1.0))
                box = (ego.x, ego.y, ego.heading, veh.length, veh.width)
                for a, st in agents:
                    if obb_overlap(box, (st.x, st.y, st.heading, a.length, a.width)):
                        infractions.append(Infraction(k - 1, COLLISION_KIND[a.kind], seg, a.id))
                        crashed = True
                        break
                if abs(lateral) > params.off_route_m:
                    if not off_route:
                        infractions.append(Infraction(k - 1, InfractionKind.OffRoute, seg, f"{lateral:.3f}"))
                    off_route = True
                else:
                    off_route = False
            neighbors = tuple(
                (math.hypot(st.x - ego.x, st.y - ego.y), st.speed)
                for a, st in agents
                if a.kind is AgentKind.Vehicle
                and math.hypot(st.x - ego.x, st.y - ego.y) <= params.neighbor_record_radius_m
            )
            frames.append(FrameRecord(t, ego, applied, n, j == 0, eff, progress, lateral, neighbors))
            max_prog.append(best)
            still_frames = still_frames + 1 if ego.v <= params.blocked_speed else 0
        # terminal conditions are checked at decision boundaries so every decision's hold completes
        if not crashed and best >= pl.length - params.completion_tol_m:
            seg_rc = [1.0] * len(bounds)
            end_reason, done = "completed", True
        elif not crashed and abs(lateral) > params.terminal_deviation_m:
            end_reason, done = "route_deviation", True
        elif still_frames * dt > params.blocked_duration_s:
            if not crashed:
                infractions.append(Infraction(k - 1, InfractionKind.Blocked, segment_of(progress)))
            end_reason, done = ("crashed" if crashed else "blocked"), True
        elif k >= max_frames:
            end_reason, done = ("crashed" if crashed else "timeout"), True

    return TrajectoryLog(
        scenario_id=sc.id,
        dt=dt,
        route_length_m=pl.length,
        segment_bounds=bounds,
        frames=frames,
        infractions=infractions,
        segment_rc=seg_rc,
        end_reason=end_reason,
        decision_latencies_s=lat_eff,
        raw_latencies_s=lat_raw,
        spiked_decisions=spiked,
        max_progress_s=max_prog,
    )


def obstacle_signal(log: TrajectoryLog) -> list[bool]:
    """Per-decision spike flags recorded during a run (for trace export)."""
    s = set(log.spiked_decisions)
    return [i in s for i in range(len(log.decision_latencies_s))]


def params_to_dict(p: SimParams) -> dict:
    return asdict(p)
