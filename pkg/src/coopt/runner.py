"""End-to-end orchestration: scheme graph → latency/energy model → closed loop → report."""

from __future__ import annotations

import csv
import functools
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .cost import (
    LatencyTrace,
    active_rules,
    estimate_frame_energy,
    estimate_graph_latency,
    sliding_window_energy,
    warmup_frames,
)
from .fixtures import uniad_like
from .ir import Graph, load_graph
from .metrics import EvaluationReport, RouteMetrics, build_report, route_metrics
from .passes import DEFAULT_PIPELINE, PassReport, PruneSpec, fold_constants, optimize_pipeline, prune_modules
from .quant import CalibrationSet, QuantizationPlan, apply_plan, plan_for_graph, random_calibration
from .scenario import Scenario, load_suite
from .sim import Fixed, RtsConfig, TrajectoryLog, Triggered, builtin_policy, run_route


class RunError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def bundled_suite_path() -> Path:
    return Path(str(resources.files("coopt") / "data" / "desk_suite.json"))


def load_base_graph(cfg: RunConfig) -> Graph:
    p = cfg.path("graph_path")
    return uniad_like(0) if p is None else load_graph(p)


def load_scenarios(cfg: RunConfig) -> list[Scenario]:
    p = cfg.path("scenario_suite_path") or bundled_suite_path()
    return sorted(load_suite(p), key=lambda s: s.id)


def load_calibration(cfg: RunConfig, g: Graph) -> CalibrationSet:
    p = cfg.path("calibration_path")
    if p is None:
        return random_calibration(g, int(cfg.raw["quant"]["calibration_frames"]), cfg.seed)
    return CalibrationSet.load(p)


@dataclass
class SchemeArtifacts:
    label: str
    graph: Graph
    pass_reports: list[PassReport] = field(default_factory=list)
    plan: QuantizationPlan | None = None
    min_latency_s: float = 0.0

    def base_latency_s(self, cfg: RunConfig) -> float:
        return estimate_graph_latency(self.graph, cfg.hardware)

    def frame_energy_j(self, cfg: RunConfig) -> float:
        return estimate_frame_energy(self.graph, cfg.hardware)


def build_scheme(cfg: RunConfig, base: Graph | None = None, calib: CalibrationSet | None = None) -> SchemeArtifacts:
    g = load_base_graph(cfg) if base is None else base
    sc = cfg.scheme
    kind = sc.base if sc.kind == "FpsCap" else sc.kind
    art = SchemeArtifacts(sc.label, g)
    if kind == "Pruned":
        art.graph, rep = prune_modules(g, PruneSpec(frozenset(sc.tags)))
        art.pass_reports.append(rep)
    elif kind in ("HardwareOpt", "Quant"):
        art.graph, art.pass_reports = optimize_pipeline(g, DEFAULT_PIPELINE)
    if kind == "Quant":
        if calib is None:
            calib = load_calibration(cfg, art.graph)
        q = cfg.raw["quant"]
        art.plan = plan_for_graph(
            art.graph, sc.variant, calib, q["zero_point_mode"], jobs=cfg.jobs, seq_limit=int(q["seq_limit"])
        )
        # fold the now-constant weight quantizers into int8 constants
        art.graph, rep = fold_constants(apply_plan(art.graph, art.plan))
        art.pass_reports.append(rep)
    if sc.kind == "FpsCap":
        art.min_latency_s = 1.0 / sc.target_fps
    return art


def rts_for(cfg: RunConfig, art: SchemeArtifacts, route_index: int) -> RtsConfig:
    override = cfg.raw["latency_override_s"]
    if override is not None:
        src = Fixed(float(override))
    else:
        rules = active_rules(art.graph, cfg.spike_rules)
        src = Triggered(art.base_latency_s(cfg), tuple(rules), cfg.seed * 1000 + route_index)
    return RtsConfig(cfg.dt, src, art.min_latency_s)


def decision_energies(log: TrajectoryLog, base_latency_s: float, frame_energy_j: float, idle_power_w: float) -> list[float]:
    """Per-inference energy: spikes scale the frame's energy with its duration; capped idle time costs idle power."""
    out = []
    for raw, eff in zip(log.raw_latencies_s, log.decision_latencies_s):
        out.append(frame_energy_j * raw / base_latency_s + idle_power_w * (eff - raw))
    return out


@dataclass
class SchemeRun:
    label: str
    logs: list[TrajectoryLog]
    routes: list[RouteMetrics]
    energies: list[list[float]]
    fps: float
    energy_j: float  # sliding-window per-frame energy over the whole suite
    base_latency_s: float

    @property
    def power_w(self) -> float:
        return self.energy_j * self.fps

    def trace(self, i: int) -> LatencyTrace:
        log = self.logs[i]
        return LatencyTrace(list(log.decision_latencies_s), frozenset(log.spiked_decisions), 0)


def run_scheme(
    cfg: RunConfig, art: SchemeArtifacts, suite: Sequence[Scenario], jobs: int | None = None
) -> SchemeRun:
    suite = sorted(suite, key=lambda s: s.id)
    policy = functools.partial(builtin_policy, p=cfg.policy)
    base_t = art.base_latency_s(cfg)
    e_frame = art.frame_energy_j(cfg)
    if cfg.raw["latency_override_s"] is not None:
        # energy follows the imposed latency: dynamic part unchanged, idle part over the new duration
        dyn = e_frame - cfg.hardware.idle_power_w * base_t
        base_t = float(cfg.raw["latency_override_s"])
        e_frame = dyn + cfg.hardware.idle_power_w * base_t

    def one(i: int) -> TrajectoryLog:
        sc = suite[i]
        try:
            return run_route(sc, policy, rts_for(cfg, art, i), cfg.sim)
        except Exception as e:  # name the failing route
            raise RunError("simulate", f"route {sc.id}: {e}") from e

    jobs = cfg.jobs if jobs is None else jobs
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            logs = list(ex.map(one, range(len(suite))))
    else:
        logs = [one(i) for i in range(len(suite))]

    energies = [decision_energies(log, base_t, e_frame, cfg.hardware.idle_power_w) for log in logs]
    routes = [
        route_metrics(log, float(np.mean(e)), cfg.penalties, cfg.thresholds, cfg.metric_params)
        for log, e in zip(logs, energies)
    ]
    flat_e = [x for e in energies for x in e]
    flat_t = [t for log in logs for t in log.decision_latencies_s]
    period = float(np.mean(flat_t))
    ew = cfg.raw["energy"]
    skip = warmup_frames(float(ew["warmup_s"]), period)
    try:
        e_bar = sliding_window_energy(flat_e, int(ew["window"]), float(ew["warmup_s"]), period)
    except ValueError as e:
        raise RunError("energy", str(e)) from e
    fps = 1.0 / float(np.mean(flat_t[skip:]))
    return SchemeRun(art.label, logs, routes, energies, fps, e_bar, base_t)


def report_for(cfg: RunConfig, run: SchemeRun, population: Sequence[RouteMetrics] | None = None) -> EvaluationReport:
    rep = build_report(
        run.label,
        run.routes,
        weights=cfg.fixed_weights,
        energy_sign=cfg.raw["energy_sign"],
        scale=float(cfg.raw["eer_scale"]),
        population=population,
    )
    rep.extra = {
        "fps": run.fps,
        "energy_per_frame_j": run.energy_j,
        "power_w": run.power_w,
        "base_latency_s": run.base_latency_s,
        "config": cfg.raw,
    }
    return rep


def evaluate(cfg: RunConfig, suite: Sequence[Scenario] | None = None) -> tuple[SchemeArtifacts, SchemeRun, EvaluationReport]:
    try:
        art = build_scheme(cfg)
    except Exception as e:
        raise RunError("build", str(e)) from e
    suite = load_scenarios(cfg) if suite is None else suite
    run = run_scheme(cfg, art, suite)
    return art, run, report_for(cfg, run)


COMPARISON_FIELDS = ("scheme", "fps", "ds", "de", "dc", "energy_j", "power_w", "eer_av")


def _mean(vals) -> float:
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else math.nan


@dataclass
class SchemeComparison:
    rows: list[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COMPARISON_FIELDS)
        for r in self.rows:
            w.writerow([r["scheme"], *(repr(float(r[k])) for k in COMPARISON_FIELDS[1:])])
        return buf.getvalue()

    def to_text(self) -> str:
        head = [f"{'scheme':<22}", *(f"{k:>10}" for k in COMPARISON_FIELDS[1:])]
        lines = ["".join(head)]
        for r in self.rows:
            lines.append(f"{r['scheme']:<22}" + "".join(f"{float(r[k]):>10.3f}" for k in COMPARISON_FIELDS[1:]))
        return "\n".join(lines) + "\n"


def compare(cfgs: Sequence[RunConfig], runs: Sequence[SchemeRun]) -> tuple[SchemeComparison, list[EvaluationReport]]:
    """Score several schemes against one joint normalization population."""
    if len(runs) < 2:
        raise RunError("compare", "at least two evaluations are required")
    ids = [tuple(r.route for r in run.routes) for run in runs]
    if any(i != ids[0] for i in ids):
        raise RunError("compare", "evaluations do not share a scenario suite")
    population = [r for run in runs for r in run.routes]
    reports = [report_for(c, run, population) for c, run in zip(cfgs, runs)]
    rows = []
    for run, rep in zip(runs, reports):
        rows.append(
            {
                "scheme": run.label,
                "fps": run.fps,
                "ds": _mean(r.ds for r in run.routes),
                "de": _mean(r.de for r in run.routes),
                "dc": _mean(r.dc for r in run.routes),
                "energy_j": run.energy_j,
                "power_w": run.power_w,
                "eer_av": rep.eer_av,
            }
        )
    return SchemeComparison(rows), reports
