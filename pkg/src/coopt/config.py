"""Run configuration: one JSON document with every tunable constant and its default."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .cost import HardwareProfile, SpikeRule
from .ir import ModuleTag
from .metrics import ComfortThresholds, MetricParams, PenaltyTable
from .passes import PROTECTED_TAGS
from .quant import Scheme as QuantScheme
from .sim import PolicyParams, SimParams


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "graph_path": None,  # None: the bundled uniad-like fixture
    "scenario_suite_path": None,  # None: the bundled 20-scenario suite
    "calibration_path": None,  # None: seeded random calibration frames
    "scheme": {"kind": "Baseline"},
    "seed": 0,
    "output_dir": "out",
    "jobs": 1,
    "hardware": {
        "flops_per_second_f32": 7.0e8,
        "int8_speedup": 2.0,
        "launch_overhead_s": 5e-6,
        "bytes_per_second": 7.0e8,
        "joules_per_flop": 2.0e-8,
        "joules_per_byte": 1.0e-8,
        "idle_power_w": 2.0,
    },
    "spike_rules": [{"trigger": "ObstacleAhead", "added_latency_s": 0.150, "module": "Occ"}],
    "latency_override_s": None,  # fixed per-decision latency replacing the modeled one
    "rts": {"dt": 0.05},
    "sim": {},
    "policy": {},
    "quant": {"calibration_frames": 256, "seq_limit": 512, "zero_point_mode": "affine"},
    "energy": {"window": 100, "warmup_s": 30.0},
    "penalties": {
        "CollisionPedestrian": 0.50,
        "CollisionVehicle": 0.60,
        "CollisionStatic": 0.65,
        "RedLight": 0.70,
        "OffRoute": 0.70,
    },
    "thresholds": ComfortThresholds().to_dict(),
    "metrics": {
        "checkpoints": 20,
        "neighbor_radius_m": 50.0,
        "outlier_pct": 1000.0,
        "min_progress": 0.05,
        "segment_len": 20,
        "blocked_speed": 0.1,
        "blocked_duration_s": 60.0,
    },
    "weights": {"mode": "critic"},
    "energy_sign": "prose",
    "eer_scale": 100.0,
}

SCHEME_KINDS = ("Baseline", "Pruned", "HardwareOpt", "Quant", "FpsCap")
FPSCAP_BASES = ("Baseline", "HardwareOpt")


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {k!r}")
        if isinstance(base[k], dict) and isinstance(v, Mapping) and k not in ("scheme", "weights", "penalties"):
            out[k] = {**base[k], **v}
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class SchemeSpec:
    kind: str
    tags: tuple[str, ...] = ()
    variant: str | None = None
    target_fps: float | None = None
    base: str = "HardwareOpt"

    @property
    def label(self) -> str:
        if self.kind == "Pruned":
            return f"Pruned({','.join(self.tags)})"
        if self.kind == "Quant":
            return f"Quant({self.variant})"
        if self.kind == "FpsCap":
            return f"FpsCap({self.target_fps:g})"
        return self.kind

    @classmethod
    def from_dict(cls, d: Mapping) -> "SchemeSpec":
        kind = d.get("kind")
        if kind not in SCHEME_KINDS:
            raise ConfigError(f"scheme.kind must be one of {SCHEME_KINDS}, got {kind!r}")
        if kind == "Pruned":
            tags = tuple(sorted(d.get("tags", ())))
            if not tags:
                raise ConfigError("Pruned scheme needs a non-empty 'tags' list")
            try:
                for t in tags:
                    ModuleTag(t)
            except ValueError as e:
                raise ConfigError(f"unknown module tag: {e}") from e
            bad = [t for t in tags if ModuleTag(t) in PROTECTED_TAGS]
            if bad:
                raise ConfigError(f"Pruned scheme may not remove protected modules: {bad}")
            return cls(kind, tags=tags)
        if kind == "Quant":
            try:
                variant = QuantScheme(d.get("variant", "")).value
            except ValueError as e:
                raise ConfigError(f"Quant variant must be one of {[s.value for s in QuantScheme]}") from e
            return cls(kind, variant=variant)
        if kind == "FpsCap":
            fps = d.get("target_fps")
            if not isinstance(fps, (int, float)) or not fps > 0:
                raise ConfigError("FpsCap needs target_fps > 0")
            base = d.get("base", "HardwareOpt")
            if base not in FPSCAP_BASES:
                raise ConfigError(f"FpsCap base must be one of {FPSCAP_BASES}")
            return cls(kind, target_fps=float(fps), base=base)
        return cls(kind)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind}
        if self.kind == "Pruned":
            d["tags"] = list(self.tags)
        elif self.kind == "Quant":
            d["variant"] = self.variant
        elif self.kind == "FpsCap":
            d["target_fps"] = self.target_fps
            d["base"] = self.base
        return d


class RunConfig:
    """Resolved configuration. ``raw`` holds the full document with defaults expanded."""

    def __init__(self, doc: Mapping | None = None, base_dir: str | Path | None = None):
        self.raw = _merge(DEFAULTS, doc or {})
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        r = self.raw
        try:
            self.scheme = SchemeSpec.from_dict(r["scheme"])
            self.raw["scheme"] = self.scheme.to_dict()
            self.hardware = HardwareProfile.from_dict(r["hardware"])
            self.spike_rules = tuple(SpikeRule.from_dict(x) for x in r["spike_rules"])
            self.sim = SimParams.from_dict(r["sim"])
            self.policy = PolicyParams.from_dict(r["policy"])
            self.penalties = PenaltyTable(r["penalties"])
            self.thresholds = ComfortThresholds.from_dict(r["thresholds"])
            self.metric_params = MetricParams.from_dict(r["metrics"])
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(f"invalid configuration: {e}") from e
        self.dt = float(r["rts"]["dt"])
        if not self.dt > 0:
            raise ConfigError("rts.dt must be > 0")
        self.seed = int(r["seed"])
        self.jobs = max(1, int(r["jobs"]))
        if r["energy_sign"] not in ("prose", "equation", "both"):
            raise ConfigError("energy_sign must be 'prose', 'equation' or 'both'")
        w = r["weights"]
        if w.get("mode") not in ("critic", "fixed"):
            raise ConfigError("weights.mode must be 'critic' or 'fixed'")
        if w["mode"] == "fixed" and (not isinstance(w.get("w"), list) or len(w["w"]) != 4):
            raise ConfigError("fixed weights need a 4-element list 'w'")
        lo = r["latency_override_s"]
        if lo is not None and not float(lo) > 0:
            raise ConfigError("latency_override_s must be > 0")
        q = r["quant"]
        if q["zero_point_mode"] not in ("affine", "zero"):
            raise ConfigError("quant.zero_point_mode must be 'affine' or 'zero'")
        e = r["energy"]
        if int(e["window"]) < 1 or float(e["warmup_s"]) < 0:
            raise ConfigError("energy.window must be >= 1 and energy.warmup_s >= 0")

    @property
    def fixed_weights(self) -> list[float] | None:
        w = self.raw["weights"]
        return [float(v) for v in w["w"]] if w["mode"] == "fixed" else None

    def path(self, key: str) -> Path | None:
        v = self.raw[key]
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self) -> Path:
        return self.path("output_dir")

    def with_overrides(self, **over) -> "RunConfig":
        doc = copy.deepcopy(self.raw)
        doc.update(over)
        return RunConfig(doc, self.base_dir)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=1, sort_keys=True) + "\n"


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {p}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return RunConfig(doc, p.parent)
