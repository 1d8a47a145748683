import json
from pathlib import Path

import numpy as np
import pytest

from coopt.cli import EXIT_INFEASIBLE, EXIT_OK, EXIT_VALIDATION, main
from coopt.config import DEFAULTS, ConfigError, RunConfig, load_config
from coopt.cost import estimate_graph_latency
from coopt.fixtures import uniad_like
from coopt.ir import ModuleTag, load_graph, save_graph
from coopt.runner import build_scheme, compare, evaluate, load_scenarios, run_scheme


def _cfg(tmp_path: Path, name: str, doc: dict) -> Path:
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


# -- configuration ---------------------------------------------------------------------------

def test_defaults_resolve():
    cfg = RunConfig()
    assert cfg.scheme.kind == "Baseline" and cfg.dt == 0.05 and cfg.seed == 0
    assert set(cfg.raw) == set(DEFAULTS)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="colour"):
        RunConfig({"colour": "red"})


@pytest.mark.parametrize(
    "doc",
    [
        {"scheme": {"kind": "Fancy"}},
        {"scheme": {"kind": "Pruned", "tags": []}},
        {"scheme": {"kind": "Pruned", "tags": ["Radar"]}},
        {"scheme": {"kind": "Pruned", "tags": ["Planner"]}},
        {"scheme": {"kind": "Quant", "variant": "Half"}},
        {"scheme": {"kind": "FpsCap", "target_fps": 0}},
        {"rts": {"dt": 0}},
        {"energy_sign": "sideways"},
        {"weights": {"mode": "fixed", "w": [1, 0]}},
        {"hardware": {"flops_per_second_f32": -1}},
        {"quant": {"zero_point_mode": "odd"}},
    ],
)
def test_invalid_configs(doc):
    with pytest.raises(ConfigError):
        RunConfig(doc)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)


def test_relative_paths_resolve_against_config_dir(tmp_path):
    p = _cfg(tmp_path, "c.json", {"output_dir": "res"})
    assert load_config(p).output_dir == tmp_path / "res"


# -- scheme construction -------------------------------------------------------------------------

def test_pruned_scheme_drops_module():
    art = build_scheme(RunConfig({"scheme": {"kind": "Pruned", "tags": ["Occ"]}}))
    assert ModuleTag.Occ not in art.graph.tags()


def test_hardware_opt_has_fewer_nodes_and_lower_latency():
    cfg = RunConfig({"scheme": {"kind": "HardwareOpt"}})
    art = build_scheme(cfg)
    base = uniad_like(0)
    assert len(art.graph) < len(base)
    assert estimate_graph_latency(art.graph, cfg.hardware) < estimate_graph_latency(base, cfg.hardware)


def test_fps_cap_sets_minimum_latency():
    art = build_scheme(RunConfig({"scheme": {"kind": "FpsCap", "target_fps": 4}}))
    assert art.min_latency_s == 0.25 and art.label == "FpsCap(4)"


# -- evaluation --------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def suite():
    return load_scenarios(RunConfig())[:6]


def test_report_echoes_config_and_routes(suite):
    cfg = RunConfig({"scheme": {"kind": "HardwareOpt"}, "energy": {"warmup_s": 1.0}})
    _, run, rep = evaluate(cfg, suite)
    d = json.loads(rep.to_json())
    assert d["config"] == json.loads(cfg.to_json())
    assert d["route_count"] == len(suite) == len(rep.q_scores)
    assert rep.eer_av == pytest.approx(100 * float(np.mean(rep.q_scores)))


def test_evaluation_deterministic(suite):
    cfg = RunConfig({"scheme": {"kind": "HardwareOpt"}, "energy": {"warmup_s": 1.0}, "jobs": 3})
    a = evaluate(cfg, suite)[2].to_json()
    b = evaluate(cfg.with_overrides(jobs=1), suite)[2].to_json()
    assert json.loads(a)["routes"] == json.loads(b)["routes"]
    assert evaluate(cfg, suite)[2].to_json() == a


def test_compare_self_gives_identical_rows(suite):
    cfg = RunConfig({"scheme": {"kind": "HardwareOpt"}, "energy": {"warmup_s": 1.0}})
    art = build_scheme(cfg)
    runs = [run_scheme(cfg, art, suite), run_scheme(cfg, art, suite)]
    table, reports = compare([cfg, cfg], runs)
    assert len(table.rows) == 2 and table.rows[0] == table.rows[1]
    assert reports[0].to_json() == reports[1].to_json()


def test_optimization_raises_fps_and_cuts_energy(suite):
    base = RunConfig({"energy": {"warmup_s": 1.0}})
    hw = base.with_overrides(scheme={"kind": "HardwareOpt"})
    rb = run_scheme(base, build_scheme(base), suite)
    rh = run_scheme(hw, build_scheme(hw), suite)
    assert rh.fps > rb.fps
    assert rh.energy_j < rb.energy_j


def test_lower_fps_cap_draws_less_power(suite):
    runs = []
    for fps in (10, 22):
        cfg = RunConfig({"scheme": {"kind": "FpsCap", "target_fps": fps}, "energy": {"warmup_s": 1.0}})
        runs.append(run_scheme(cfg, build_scheme(cfg), suite))
    assert runs[0].power_w < runs[1].power_w


def test_latency_override_fixes_latency(suite):
    cfg = RunConfig({"latency_override_s": 0.2, "energy": {"warmup_s": 1.0}})
    run = run_scheme(cfg, build_scheme(cfg), suite[:2])
    assert {t for log in run.logs for t in log.decision_latencies_s} == {0.2}


# -- command line ------------------------------------------------------------------------------------

def test_cli_optimize_baseline_is_byte_copy(tmp_path):
    g = tmp_path / "g.json"
    save_graph(uniad_like(1), g)
    cfg = _cfg(tmp_path, "c.json", {"graph_path": "g.json"})
    assert main(["optimize", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    assert (tmp_path / "o" / "graph.json").read_bytes() == g.read_bytes()


def test_cli_optimize_hardware(tmp_path, capsys):
    cfg = _cfg(tmp_path, "c.json", {"scheme": {"kind": "HardwareOpt"}})
    assert main(["optimize", "--config", str(cfg), "--out", str(tmp_path / "o"), "--emit-pass-report"]) == EXIT_OK
    reports = json.loads(capsys.readouterr().out)
    assert [r["pass_name"] for r in reports] == ["fold", "dce", "fuse_basic", "fuse_attention"]
    assert len(load_graph(tmp_path / "o" / "graph.json")) < len(uniad_like(0))


def test_cli_invalid_graph_exit_1(tmp_path, capsys):
    (tmp_path / "g.json").write_text('{"nodes": []}')
    cfg = _cfg(tmp_path, "c.json", {"graph_path": "g.json", "scheme": {"kind": "HardwareOpt"}})
    assert main(["optimize", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    assert "error" in capsys.readouterr().err


def test_cli_protected_prune_is_config_error(tmp_path):
    cfg = _cfg(tmp_path, "c.json", {"scheme": {"kind": "Pruned", "tags": ["Backbone", "Occ"]}})
    assert main(["optimize", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION


def test_cli_infeasible_prune_exit_3(tmp_path):
    from coopt.builder import GraphBuilder
    from coopt.ir import NodeKind

    b = GraphBuilder()
    x = b.input("x", (2, 4))
    occ = b.op(NodeKind.MatMul, [x, b.weight("w", np.ones((4, 3)))], ModuleTag.Occ)
    y = b.op(NodeKind.Relu, [occ], ModuleTag.Planner)
    save_graph(b.build([y]), tmp_path / "g.json")
    cfg = _cfg(tmp_path, "c.json", {"graph_path": "g.json", "scheme": {"kind": "Pruned", "tags": ["Occ"]}})
    assert main(["optimize", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INFEASIBLE


def test_cli_quantize_without_calibration_exit_1(tmp_path):
    cfg = _cfg(tmp_path, "c.json", {"scheme": {"kind": "Quant", "variant": "FeatureExt"}})
    assert main(["quantize", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION


def test_cli_quantize_feature_ext(tmp_path):
    calib = tmp_path / "calib.npz"
    assert main(["gen-calib", "--optimized", "--out", str(calib)]) == EXIT_OK
    cfg = _cfg(tmp_path, "c.json", {"quant": {"calibration_frames": 4}})
    assert main(["quantize", "--config", str(cfg), "--variant", "FeatureExt", "--calib", str(calib),
                 "--out", str(tmp_path / "q")]) == EXIT_OK
    assert main(["optimize", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    plan = json.loads((tmp_path / "q" / "plan.json").read_text())
    assert plan["scheme"] == "FeatureExt" and plan["quantized_nodes"]
    assert "LongSeqMHA" in plan["excluded_nodes"].values()
    hw = tmp_path / "hw"
    cfg_hw = _cfg(tmp_path, "h.json", {"scheme": {"kind": "HardwareOpt"}})
    assert main(["optimize", "--config", str(cfg_hw), "--out", str(hw)]) == EXIT_OK
    q_bytes = (tmp_path / "q" / "graph.quant.json").stat().st_size
    assert q_bytes < (hw / "graph.json").stat().st_size


def test_cli_gen_suite_matches_bundled(tmp_path):
    out = tmp_path / "suite.json"
    assert main(["gen-suite", "--out", str(out)]) == EXIT_OK
    assert out.read_bytes() == (Path(__file__).resolve().parents[1] / "src" / "coopt" / "data" / "desk_suite.json").read_bytes()


def test_cli_evaluate_and_compare(tmp_path, capsys):
    from coopt.scenario import save_suite

    save_suite(load_scenarios(RunConfig())[:4], tmp_path / "s.json")
    common = {"scenario_suite_path": "s.json", "energy": {"warmup_s": 1.0}}
    a = _cfg(tmp_path, "a.json", common)
    b = _cfg(tmp_path, "b.json", {**common, "scheme": {"kind": "HardwareOpt"}})
    assert main(["evaluate", "--config", str(b), "--out", str(tmp_path / "e1")]) == EXIT_OK
    first = {n: (tmp_path / "e1" / n).read_bytes() for n in ("report.json", "report.csv")}
    assert main(["evaluate", "--config", str(b), "--out", str(tmp_path / "e1")]) == EXIT_OK
    for name, data in first.items():
        assert (tmp_path / "e1" / name).read_bytes() == data
    assert len(list((tmp_path / "e1" / "logs").glob("*.csv"))) == 4
    assert len(list((tmp_path / "e1" / "traces").glob("*.csv"))) == 4
    capsys.readouterr()
    assert main(["compare", str(a), str(b), "--config", str(a), "--out", str(tmp_path / "cmp")]) == EXIT_OK
    lines = (tmp_path / "cmp" / "comparison.csv").read_text().splitlines()
    assert lines[0].startswith("scheme,fps") and len(lines) == 3
    assert "HardwareOpt" in capsys.readouterr().out


def test_cli_compare_needs_two(tmp_path):
    a = _cfg(tmp_path, "a.json", {})
    assert main(["compare", str(a), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION


def test_cli_missing_config_exit_1(tmp_path):
    assert main(["evaluate", "--config", str(tmp_path / "none.json")]) == EXIT_VALIDATION


def test_cli_quantize_candidate_free_graph_warns(tmp_path, capsys):
    from coopt.builder import GraphBuilder
    from coopt.ir import NodeKind

    b = GraphBuilder()
    y = b.op(NodeKind.Relu, [b.input("x", (2, 4))], ModuleTag.Backbone)
    save_graph(b.build([y]), tmp_path / "g.json")
    cfg = _cfg(tmp_path, "c.json", {"graph_path": "g.json", "quant": {"calibration_frames": 3}})
    assert main(["gen-calib", "--config", str(cfg), "--out", str(tmp_path / "calib.npz")]) == EXIT_OK
    capsys.readouterr()
    assert main(["quantize", "--config", str(cfg), "--variant", "Full", "--calib", str(tmp_path / "calib.npz"),
                 "--out", str(tmp_path / "q")]) == EXIT_OK
    assert "warning" in capsys.readouterr().err
    plan = json.loads((tmp_path / "q" / "plan.json").read_text())
    assert plan["quantized_nodes"] == [] and plan["excluded_nodes"]
