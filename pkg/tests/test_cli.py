import csv
import json
import math
import subprocess
import sys

import pytest

from separatrix_lab import cli
from separatrix_lab.cli import ConfigError, atomic_path, load_config, main

QUICK = {
    "schema_version": 1,
    "epsilons": [0.0],
    "levels": [6, 7],
    "omegas": {"count": 2},
    "tolerances": {"min_curves": 2, "distance_to_sigma": 0.1, "rotation_samples": 2},
}


def write_config(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data, indent=2))
    return p


# -- config


def test_defaults_validate():
    cfg = load_config(None)
    assert cfg["levels"] == list(range(6, 13))
    cli.precheck(cfg)


def test_partial_config_is_merged(tmp_path):
    cfg = load_config(write_config(tmp_path, {"fundamental_domain": {"y_star": 0.02}}))
    assert cfg["fundamental_domain"] == {"x_star": 0.08, "y_star": 0.02, "c_star": 0.5}


def test_syntax_error_reports_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "levels": [6, 7,]\n}\n')
    with pytest.raises(ConfigError, match=r"bad\.json:2:"):
        load_config(p)


def test_unknown_field_is_named(tmp_path):
    with pytest.raises(ConfigError, match="field model"):
        load_config(write_config(tmp_path, {"model": {"lamda": 1.0}}))


def test_type_error_is_named(tmp_path):
    with pytest.raises(ConfigError, match="field levels/1"):
        load_config(write_config(tmp_path, {"levels": [6, "seven"]}))


def test_bad_config_exit_code(tmp_path, capsys):
    p = write_config(tmp_path, {"seed": -1})
    assert main(["model", "-c", str(p), "--check-only"]) == 2
    assert "field seed" in capsys.readouterr().err


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2


# -- check-only


def test_check_only_rejects_tall_domain_without_dynamics(tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise AssertionError("dynamics ran")

    monkeypatch.setattr("separatrix_lab.model.trace_separatrix", boom)
    monkeypatch.setattr("separatrix_lab.model.f_eps_tracked", boom)
    p = write_config(tmp_path, {"fundamental_domain": {"y_star": 0.09}})
    assert main(["curves", "-c", str(p), "--check-only"]) == 2
    err = capsys.readouterr().err
    assert "precondition failed" in err and "y*" in err


def test_check_only_rejects_low_level(tmp_path, capsys):
    p = write_config(tmp_path, {"levels": [3, 6]})
    assert main(["curves", "-c", str(p), "--check-only"]) == 2
    assert "n=3" in capsys.readouterr().err


def test_check_only_passes(tmp_path):
    assert main(["report", "-c", str(write_config(tmp_path, QUICK)), "--check-only"]) == 0


# -- output directory and atomic writes


def test_output_dir_precedence(monkeypatch, tmp_path):
    cfg = load_config(None)
    monkeypatch.delenv(cli.ENV_OUTPUT_DIR, raising=False)
    assert str(cli.output_dir(cfg, None)) == "seplab-out"
    monkeypatch.setenv(cli.ENV_OUTPUT_DIR, str(tmp_path / "env"))
    assert cli.output_dir(cfg, None) == tmp_path / "env"
    assert cli.output_dir(cfg, str(tmp_path / "flag")) == tmp_path / "flag"


def test_atomic_path_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "a.json"
    with pytest.raises(RuntimeError):
        with atomic_path(target) as tmp:
            tmp.write_text("partial")
            raise RuntimeError
    assert list(tmp_path.iterdir()) == []
    with atomic_path(target) as tmp:
        tmp.write_text("done")
    assert target.read_text() == "done" and list(tmp_path.iterdir()) == [target]


def test_return_map_via_env_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.ENV_OUTPUT_DIR, str(tmp_path / "env"))
    assert main(["return-map", "-q", "--v", "1e-8", "1e-5"]) == 0
    rows = list(csv.DictReader((tmp_path / "env" / "return_map.csv").open()))
    assert len(rows) == 2
    for r in rows:
        assert abs(int(r["return_index"]) - abs(math.log(float(r["v"])))) <= 1.0
        assert float(r["x"]) * float(r["y"]) == pytest.approx(float(r["v"]), rel=1e-12)
        assert 0 <= float(r["h_x"]) < 1


def test_orbit_csv(tmp_path):
    out = tmp_path / "o"
    assert main(["orbit", "-q", "-o", str(out), "--x", "0.5", "--y", "0.5", "--steps", "3"]) == 0
    rows = list(csv.reader((out / "orbit.csv").open()))
    assert rows[0] == ["step", "x", "y", "H0"] and len(rows) == 5
    h = [float(r[3]) for r in rows[1:]]
    assert max(h) - min(h) < 1e-12


# -- plots


def test_plots_on_empty_dir_fails_cleanly(tmp_path, capsys):
    out = tmp_path / "empty"
    out.mkdir()
    assert main(["plots", "-o", str(out)]) == 2
    assert "no artifacts" in capsys.readouterr().err
    assert list(out.iterdir()) == []


def test_plots_named_figure_needs_its_data(tmp_path):
    out = tmp_path / "o"
    out.mkdir()
    (out / "separatrix.csv").write_text("x,y\n0,0\n")
    assert main(["plots", "-o", str(out), "--figure", "phase_portrait"]) == 2
    assert not (out / "plots").exists()


# -- scenarios


@pytest.fixture(scope="module")
def curve_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("scen")
    cfg = write_config(base, QUICK)
    codes = {}
    for jobs in (1, 2):
        out = base / f"jobs{jobs}"
        codes[jobs] = main(["curves", "-q", "-c", str(cfg), "-o", str(out), "-j", str(jobs)])
    return base, codes


def test_curve_scenario(curve_runs):
    base, codes = curve_runs
    out = base / "jobs1"
    assert codes[1] == 0
    cat = json.loads((out / "curves" / "catalog.json").read_text())
    assert cat["schema_version"] == 1 and len(cat["curves"]) == 4
    assert all(c["converged"] and c["residual"] < 1e-10 for c in cat["curves"])
    rows = list(csv.DictReader((out / "curves" / "accumulation.csv").open()))
    assert [int(r["n"]) for r in rows] == [6, 7]
    d = [float(r["distance_to_sigma"]) for r in rows]
    assert d[1] < d[0]
    rep = json.loads((out / "report_curves.json").read_text())
    assert rep["passed"] and rep["checks"][0]["criterion"] == 7
    assert "curves/lifted_eps0.0_n7.csv" in rep["artifacts"]


def test_parallel_sweep_is_byte_identical(curve_runs):
    base, codes = curve_runs
    assert codes[2] == 0
    for rel in ("curves/catalog.json", "curves/accumulation.csv", "curves/lifted_eps0.0_n6.csv",
                "report_curves.json"):
        assert (base / "jobs1" / rel).read_bytes() == (base / "jobs2" / rel).read_bytes()


def test_strict_tolerances_give_exit_one(tmp_path):
    cfg = dict(QUICK, levels=[6], tolerances={"min_curves": 30})
    p = write_config(tmp_path, cfg)
    assert main(["curves", "-q", "-c", str(p), "-o", str(tmp_path / "o")]) == 1
    rep = json.loads((tmp_path / "o" / "report_curves.json").read_text())
    assert rep["passed"] is False
    assert rep["checks"][0]["measured"]["parts"]["curve_count"] is False


def test_counterexample_scenario_and_plots(tmp_path):
    out = tmp_path / "b"
    p = write_config(tmp_path, dict(QUICK, counterexample={"control_omegas": 2}))
    assert main(["counterexample", "-q", "-c", str(p), "-o", str(out)]) == 0
    cert = json.loads((out / "counterexample" / "certificate.json").read_text())
    assert cert["produced"] is True
    desc = json.loads((out / "counterexample" / "descent.json").read_text())
    assert len(desc["sup_logy"]) == 11
    control = json.loads((out / "counterexample" / "control.json").read_text())
    assert control["curves_found"] == 2 and not control["certificate_produced"]
    assert main(["plots", "-q", "-o", str(out)]) == 0
    made = sorted(p.name for p in (out / "plots").iterdir())
    assert made == ["plot_graph_push.py", "push_graph.csv"]
    src = (out / "plots" / "plot_graph_push.py").read_text()
    compile(src, "plot_graph_push.py", "exec")
    assert "matplotlib" in src


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "separatrix_lab", "--version"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("seplab ")
