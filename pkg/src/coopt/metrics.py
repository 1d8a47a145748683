"""Closed-loop metrics (safety, efficiency, comfort), objective weighting, and the composite score."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .sim import InfractionKind, TrajectoryLog, detect_blocked


class MetricsError(ValueError):
    pass


INDICATORS = ("ds", "de", "dc", "energy")


@dataclass(frozen=True)
class PenaltyTable:
    coefficients: Mapping[str, float] = field(
        default_factory=lambda: {
            "CollisionPedestrian": 0.50,
            "CollisionVehicle": 0.60,
            "CollisionStatic": 0.65,
            "RedLight": 0.70,
            "OffRoute": 0.70,
        }
    )

    def __post_init__(self):
        coeffs = {InfractionKind(k).value: float(v) for k, v in self.coefficients.items()}
        bad = {k: v for k, v in coeffs.items() if not 0.0 < v <= 1.0}
        if bad:
            raise MetricsError(f"penalty coefficients must lie in (0, 1]: {bad}")
        object.__setattr__(self, "coefficients", coeffs)

    def __getitem__(self, kind) -> float:
        # kinds without a coefficient (e.g. Blocked) end the route but carry no multiplier
        return self.coefficients.get(InfractionKind(kind).value, 1.0)

    def to_dict(self) -> dict:
        return dict(self.coefficients)


COMFORT_VARIABLES = ("lon_acc", "lat_acc", "yaw_rate", "yaw_acc", "lon_jerk", "jerk_mag")


@dataclass(frozen=True)
class ComfortThresholds:
    lon_acc: tuple[float, float] = (-4.05, 2.40)
    lat_acc: tuple[float, float] = (-4.89, 4.89)
    yaw_rate: tuple[float, float] = (-0.95, 0.95)
    yaw_acc: tuple[float, float] = (-1.93, 1.93)
    lon_jerk: tuple[float, float] = (-4.13, 4.13)
    jerk_mag: tuple[float, float] = (-8.37, 8.37)

    def __post_init__(self):
        for name in COMFORT_VARIABLES:
            lo, hi = (float(v) for v in getattr(self, name))
            if not lo < hi:
                raise MetricsError(f"threshold {name}: lower bound must be below upper bound")
            object.__setattr__(self, name, (lo, hi))

    @classmethod
    def from_dict(cls, d: Mapping) -> "ComfortThresholds":
        return cls(**{k: tuple(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}


@dataclass(frozen=True)
class MetricParams:
    checkpoints: int = 20
    neighbor_radius_m: float = 50.0
    outlier_pct: float = 1000.0
    min_progress: float = 0.05
    segment_len: int = 20
    blocked_speed: float = 0.1
    blocked_duration_s: float = 60.0

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricParams":
        kw = dict(d)
        for k in ("checkpoints", "segment_len"):
            if k in kw:
                kw[k] = int(kw[k])
        return cls(**kw)


# -- per-route metrics ---------------------------------------------------------

def compute_ds(
    segment_rc: Sequence[float], segment_infractions: Sequence[Sequence], penalties: PenaltyTable = PenaltyTable()
) -> float:
    """Mean over segments of completion times the product of penalty coefficients, on a 0-100 scale."""
    if not segment_rc:
        raise MetricsError("at least one segment is required")
    if len(segment_rc) != len(segment_infractions):
        raise MetricsError("segment completion and infraction lists differ in length")
    total = 0.0
    for rc, infs in zip(segment_rc, segment_infractions):
        prod = 1.0
        for inf in infs:
            prod *= penalties[getattr(inf, "kind", inf)]
        total += rc * prod
    return 100.0 * total / len(segment_rc)


def route_ds(log: TrajectoryLog, penalties: PenaltyTable = PenaltyTable()) -> float:
    return compute_ds(log.segment_rc, log.segment_infractions(), penalties)


def checkpoint_frames(log: TrajectoryLog, m: int) -> list[int | None]:
    """First frame whose best progress reaches each of m evenly spaced arc-length checkpoints."""
    out: list[int | None] = []
    prog = log.max_progress_s
    k = 0
    for j in range(1, m + 1):
        target = log.route_length_m * j / m
        while k < len(prog) and prog[k] < target:
            k += 1
        out.append(k if k < len(prog) else None)
    return out


def compute_de(log: TrajectoryLog, p: MetricParams = MetricParams()) -> float | None:
    """Ego-to-neighbour speed ratio at arc-length checkpoints, in percent. None means excluded."""
    if log.progress_fraction < p.min_progress:
        return None
    ratios = []
    for k in checkpoint_frames(log, p.checkpoints):
        if k is None:
            continue
        speeds = [v for d, v in log.frames[k].neighbors if d <= p.neighbor_radius_m]
        if not speeds:
            continue
        mean = sum(speeds) / len(speeds)
        if mean <= 0:
            continue  # ratio undefined when every neighbour is stationary
        r = log.frames[k].state.v / mean
        if 100.0 * r > p.outlier_pct:
            continue
        ratios.append(r)
    if not ratios:
        return None
    return 100.0 * sum(ratios) / len(ratios)


def frame_passes(log: TrajectoryLog, th: ComfortThresholds = ComfortThresholds()) -> np.ndarray:
    ok = np.ones(len(log), dtype=bool)
    for name in COMFORT_VARIABLES:
        lo, hi = getattr(th, name)
        x = log.dynamics[name]
        if name == "lat_acc":
            x = np.abs(x)
        ok &= (x >= lo) & (x <= hi)
    return ok


def compute_dc(
    log: TrajectoryLog, th: ComfortThresholds = ComfortThresholds(), p: MetricParams = MetricParams()
) -> float | None:
    """Share of 20-frame segments whose frames all pass the comfort test. None means excluded."""
    n = len(log)
    if n < p.segment_len:
        return None
    ok = frame_passes(log, th)
    for a, b in detect_blocked(log, p.blocked_speed, p.blocked_duration_s):
        ok[a:b] = True  # blocked frames are an accepted stationary state
    n_seg = n // p.segment_len
    smooth = int(ok[: n_seg * p.segment_len].reshape(n_seg, p.segment_len).all(axis=1).sum())
    return smooth / n_seg


@dataclass(frozen=True)
class RouteMetrics:
    route: str
    ds: float
    de: float | None
    dc: float | None
    energy_per_frame_j: float
    crashed: bool
    fps: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def route_metrics(
    log: TrajectoryLog,
    energy_per_frame_j: float,
    penalties: PenaltyTable = PenaltyTable(),
    thresholds: ComfortThresholds = ComfortThresholds(),
    p: MetricParams = MetricParams(),
) -> RouteMetrics:
    fps = 1.0 / float(np.mean(log.decision_latencies_s)) if log.decision_latencies_s else 0.0
    return RouteMetrics(
        log.scenario_id,
        route_ds(log, penalties),
        compute_de(log, p),
        compute_dc(log, thresholds, p),
        float(energy_per_frame_j),
        log.crashed,
        fps,
    )


# -- population statistics --------------------------------------------------------------

def normalize(values: Sequence[float], higher_is_better: bool = True) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise MetricsError("cannot normalize an empty column")
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.full(v.shape, 0.5)
    return (v - lo) / (hi - lo) if higher_is_better else (hi - v) / (hi - lo)


CONFLICT_EPS = 1e-12


def critic_weights(matrix) -> np.ndarray:
    """Objective weights: contrast (population std) times total conflict with the other columns."""
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise MetricsError("CRITIC needs at least two rows")
    sigma = np.where(np.ptp(x, axis=0) == 0.0, 0.0, x.std(axis=0))  # a constant column has no spread even if its mean rounds
    m = x.shape[1]
    r = np.zeros((m, m))
    live = sigma > 0
    if live.any():
        centered = (x[:, live] - x[:, live].mean(axis=0)) / sigma[live]
        r_live = centered.T @ centered / x.shape[0]
        r[np.ix_(live, live)] = np.clip(r_live, -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    # pairs involving a constant column carry no correlation information and count as r = 0
    conflict = 1.0 - np.abs(r)
    conflict[conflict < CONFLICT_EPS] = 0.0  # rounding noise on perfectly correlated pairs
    c = sigma * conflict.sum(axis=1)
    total = c.sum()
    if total <= 0:
        return np.full(m, 1.0 / m)
    return c / total


def route_score(x_ds: float, x_de: float, x_dc: float, x_e: float, w: Sequence[float], crashed: bool, energy_sign: float = -1.0) -> float:
    """Composite route score; a crash zeroes every term except safety."""
    w_ds, w_de, w_dc, w_e = (float(v) for v in w)
    c = 0.0 if crashed else 1.0
    return w_ds * x_ds + c * (w_de * x_de + w_dc * x_dc + energy_sign * w_e * x_e)


def eer_av(q_scores: Sequence[float], scale: float = 100.0) -> float:
    if len(q_scores) == 0:
        raise MetricsError("no routes to aggregate")
    return scale * math.fsum(q_scores) / len(q_scores)


# -- reports -----------------------------------------------------------------------------

ENERGY_SIGNS = {"prose": -1.0, "equation": 1.0}


@dataclass
class EvaluationReport:
    scheme: str
    routes: list[RouteMetrics]
    weights: list[float]
    normalized: list[list[float]]  # per route: x_ds, x_de, x_dc, x_e
    q_scores: list[float]
    eer_av: float
    energy_sign: str = "prose"
    eer_av_alt: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def route_count(self) -> int:
        return len(self.routes)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "route_count": self.route_count,
            "weights": dict(zip(INDICATORS, self.weights)),
            "eer_av": self.eer_av,
            "energy_sign": self.energy_sign,
            "eer_av_by_sign": self.eer_av_alt,
            "routes": [
                {**r.to_dict(), "x": dict(zip(INDICATORS, x)), "q": q}
                for r, x, q in zip(self.routes, self.normalized, self.q_scores)
            ],
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["route", "ds", "de", "dc", "energy", "crashed", "q"])
        for r, q in zip(self.routes, self.q_scores):
            w.writerow(
                [r.route, repr(r.ds), "" if r.de is None else repr(r.de), "" if r.dc is None else repr(r.dc),
                 repr(r.energy_per_frame_j), int(r.crashed), repr(q)]
            )
        return buf.getvalue()


def indicator_matrix(routes: Sequence[RouteMetrics]) -> np.ndarray:
    """Normalized (x_ds, x_de, x_dc, x_e); excluded DE/DC entries map to 0.

    Energy is normalized with its raw orientation so a larger value means more energy.
    """
    ds = normalize([r.ds for r in routes])
    cols = [ds]
    for attr in ("de", "dc"):
        vals = [getattr(r, attr) for r in routes]
        present = [v for v in vals if v is not None]
        col = np.zeros(len(routes))
        if present:
            normed = normalize(present)
            it = iter(normed)
            col = np.array([next(it) if v is not None else 0.0 for v in vals])
        cols.append(col)
    cols.append(normalize([r.energy_per_frame_j for r in routes], higher_is_better=True))
    return np.column_stack(cols)


def critic_population(routes: Sequence[RouteMetrics], x: np.ndarray) -> np.ndarray:
    """Rows with every indicator present; falls back to all rows when fewer than two qualify."""
    keep = [i for i, r in enumerate(routes) if r.de is not None and r.dc is not None]
    if len(keep) < 2:
        keep = list(range(len(routes)))
    return x[keep]


def build_report(
    scheme: str,
    routes: Sequence[RouteMetrics],
    *,
    weights: Sequence[float] | None = None,
    energy_sign: str = "prose",
    scale: float = 100.0,
    population: Sequence[RouteMetrics] | None = None,
) -> EvaluationReport:
    """Score routes; normalization bounds and CRITIC weights come from ``population`` (default: routes)."""
    routes = sorted(routes, key=lambda r: r.route)
    if not routes:
        raise MetricsError("no routes to report")
    pop = list(population) if population is not None else list(routes)
    idx = {id(r): i for i, r in enumerate(pop)}
    if any(id(r) not in idx for r in routes):
        raise MetricsError("every reported route must belong to the normalization population")
    x_all = indicator_matrix(pop)
    if weights is None:
        w = critic_weights(critic_population(pop, x_all)) if len(pop) >= 2 else np.full(4, 0.25)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (4,) or np.any(w < 0) or not math.isclose(float(w.sum()), 1.0, abs_tol=1e-9):
            raise MetricsError("fixed weights must be four non-negative numbers summing to 1")
    x = x_all[[idx[id(r)] for r in routes]]
    signs = ENERGY_SIGNS if energy_sign == "both" else {energy_sign: ENERGY_SIGNS[energy_sign]}
    by_sign = {}
    for name, sgn in signs.items():
        q = [route_score(*row, w, r.crashed, sgn) for row, r in zip(x, routes)]
        by_sign[name] = (q, eer_av(q, scale))
    primary = "prose" if energy_sign == "both" else energy_sign
    q, score = by_sign[primary]
    return EvaluationReport(
        scheme,
        list(routes),
        [float(v) for v in w],
        [[float(v) for v in row] for row in x],
        [float(v) for v in q],
        float(score),
        energy_sign,
        {k: float(v[1]) for k, v in by_sign.items()},
    )
