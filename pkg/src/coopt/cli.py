"""Command-line front end: optimize, quantize, evaluate, compare, gen-suite, gen-calib."""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path
from typing import Sequence

from .config import ConfigError, RunConfig, load_config
from .ir import GraphError, GraphSyntaxError, GraphValidationError, save_graph, serialize
from .passes import DEFAULT_PIPELINE, InfeasiblePruneError, PassError, reports_to_json
from .quant import CalibrationSet, QuantError, random_calibration
from .runner import RunError, build_scheme, compare, evaluate, load_base_graph, load_scenarios, report_for, run_scheme
from .scenario import ScenarioError, save_suite
from .sim import SimError
from .suite import generate_suite

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_INFEASIBLE = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, code: int, stage: str, message: str):
        super().__init__(message)
        self.code = code
        self.stage = stage


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["output_dir"] = str(Path(args.out).resolve())
    if args.jobs is not None:
        over["jobs"] = args.jobs
    return cfg.with_overrides(**over) if over else cfg


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_optimize(args) -> int:
    cfg = _resolve(args)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    kind = cfg.scheme.base if cfg.scheme.kind == "FpsCap" else cfg.scheme.kind
    src = cfg.path("graph_path")
    if kind == "Baseline":
        if src is not None:
            shutil.copyfile(src, out / "graph.json")
        else:
            save_graph(load_base_graph(cfg), out / "graph.json")
        reports = []
    else:
        # quantization is a separate step; a Quant scheme optimizes like HardwareOpt here
        doc = dict(cfg.raw, scheme={"kind": "HardwareOpt"}) if kind == "Quant" else cfg.raw
        art = build_scheme(RunConfig(doc, cfg.base_dir))
        save_graph(art.graph, out / "graph.json")
        reports = art.pass_reports
    text = reports_to_json(reports)
    _write(out / "pass_reports.json", text if text.endswith("\n") else text + "\n")
    if args.emit_pass_report:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    print(f"wrote {out / 'graph.json'}", file=sys.stderr)
    return EXIT_OK


def cmd_quantize(args) -> int:
    cfg = _resolve(args)
    if args.variant:
        cfg = cfg.with_overrides(scheme={"kind": "Quant", "variant": args.variant})
    if cfg.scheme.kind != "Quant":
        raise CliError(EXIT_VALIDATION, "config", "quantize needs a Quant scheme or --variant")
    calib_path = Path(args.calib).resolve() if args.calib else cfg.path("calibration_path")
    if calib_path is None or not calib_path.exists():
        raise CliError(EXIT_VALIDATION, "calibration", f"calibration file missing: {calib_path}")
    calib = CalibrationSet.load(calib_path)
    art = build_scheme(cfg, calib=calib)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "plan.json", art.plan.to_json())
    save_graph(art.graph, out / "graph.quant.json")
    if not art.plan.quantized_nodes:
        print(f"warning: scheme {cfg.scheme.variant} selected no nodes; the plan is empty", file=sys.stderr)
    if args.emit_pass_report:
        sys.stdout.write(reports_to_json(art.pass_reports) + "\n")
    print(f"wrote {out / 'plan.json'} and {out / 'graph.quant.json'}", file=sys.stderr)
    return EXIT_OK


def _emit_run(out: Path, run, report) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "report.json", report.to_json())
    _write(out / "report.csv", report.to_csv())
    for i, log in enumerate(run.logs):
        _write(out / "logs" / f"{log.scenario_id}.csv", log.to_csv())
        _write(out / "traces" / f"{log.scenario_id}.csv", run.trace(i).to_csv())


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    art, run, report = evaluate(cfg)
    if args.emit_pass_report:
        sys.stdout.write(reports_to_json(art.pass_reports) + "\n")
    _emit_run(cfg.output_dir, run, report)
    print(f"{report.scheme}: EER_AV={report.eer_av:.4f} over {report.route_count} routes", file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.configs) < 2:
        raise CliError(EXIT_VALIDATION, "config", "compare needs at least two config files")
    base = _resolve(args)
    cfgs = []
    for p in args.configs:
        c = load_config(p)
        over = {k: base.raw[k] for k in ("seed", "jobs") if getattr(args, k) is not None}
        cfgs.append(c.with_overrides(**over) if over else c)
    suites = {str(c.path("scenario_suite_path")) for c in cfgs}
    if len(suites) > 1:
        raise CliError(EXIT_VALIDATION, "compare", "configs reference different scenario suites")
    suite = load_scenarios(cfgs[0])
    runs = []
    for c in cfgs:
        try:
            art = build_scheme(c)
        except (GraphError, ConfigError):
            raise
        except Exception as e:
            raise RunError("build", f"{c.scheme.label}: {e}") from e
        runs.append(run_scheme(c, art, suite))
    table, reports = compare(cfgs, runs)
    out = base.output_dir
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "comparison.csv", table.to_csv())
    _write(out / "comparison.txt", table.to_text())
    for i, (run, rep) in enumerate(zip(runs, reports)):
        _emit_run(out / f"{i:02d}_{_slug(run.label)}", run, rep)
    sys.stdout.write(table.to_text())
    return EXIT_OK


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in label).strip("_")


def cmd_gen_suite(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out) if args.out else Path("desk_suite.json")
    if out.suffix != ".json":
        out = out / "desk_suite.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_suite(generate_suite(cfg.seed), out)
    print(f"wrote {out}", file=sys.stderr)
    return EXIT_OK


def cmd_gen_calib(args) -> int:
    cfg = _resolve(args)
    g = load_base_graph(cfg)
    if args.optimized:
        g = build_scheme(cfg.with_overrides(scheme={"kind": "HardwareOpt"}), base=g).graph
    out = Path(args.out) if args.out else Path("calibration.npz")
    if out.suffix != ".npz":
        out = out / "calibration.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    random_calibration(g, int(cfg.raw["quant"]["calibration_frames"]), cfg.seed).save(out)
    print(f"wrote {out}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (file path for gen-suite/gen-calib)")
    common.add_argument("--jobs", type=int, help="worker threads for calibration and routes")
    common.add_argument("--emit-pass-report", action="store_true", help="print pass reports to stdout")

    p = argparse.ArgumentParser(prog="coopt", description="Graph optimization and latency-aware closed-loop evaluation.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("optimize", parents=[common], help="apply the scheme's pass pipeline").set_defaults(func=cmd_optimize)
    q = sub.add_parser("quantize", parents=[common], help="plan and apply post-training quantization")
    q.add_argument("--calib", help="calibration .npz (overrides calibration_path)")
    q.add_argument("--variant", choices=["Full", "FeatureExt", "Prediction"], help="quantization scheme")
    q.set_defaults(func=cmd_quantize)
    sub.add_parser("evaluate", parents=[common], help="run the scenario suite and score it").set_defaults(func=cmd_evaluate)
    c = sub.add_parser("compare", parents=[common], help="evaluate several configs with joint normalization")
    c.add_argument("configs", nargs="+", help="two or more run config files")
    c.set_defaults(func=cmd_compare)
    sub.add_parser("gen-suite", parents=[common], help="write the seeded desk scenario suite").set_defaults(func=cmd_gen_suite)
    g = sub.add_parser("gen-calib", parents=[common], help="write seeded calibration frames")
    g.add_argument("--optimized", action="store_true", help="calibrate against the HardwareOpt graph inputs")
    g.set_defaults(func=cmd_gen_calib)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error [{e.stage}]: {e}", file=sys.stderr)
        return e.code
    except (InfeasiblePruneError, PassError) as e:
        print(f"error [scheme]: infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, GraphSyntaxError, GraphValidationError, ScenarioError, QuantError) as e:
        print(f"error [validation]: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except RunError as e:
        print(f"error {e}", file=sys.stderr)
        cause = e.__cause__
        if isinstance(cause, (InfeasiblePruneError, PassError)):
            return EXIT_INFEASIBLE
        if isinstance(cause, (GraphSyntaxError, GraphValidationError, ScenarioError, QuantError, ConfigError)):
            return EXIT_VALIDATION
        return EXIT_RUNTIME
    except (GraphError, SimError, OSError, ValueError, RuntimeError) as e:
        print(f"error [runtime]: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
