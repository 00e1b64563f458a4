"""seplab: scenario runner for the separatrix renormalization toolkit.

Every subcommand reads the same JSON config (see DEFAULT_CONFIG and
CONFIG_SCHEMA), writes CSV/JSON artifacts into the output directory and
exits with 0 when its checks pass, 1 when a check fails and 2 on a usage,
config or precondition error.

The output directory is taken from --out, then $SEPLAB_OUTPUT_DIR, then the
config's "output_dir".
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from ._validation import ConvergenceError, DomainError
from .checks import (
    DEFAULT_TOLERANCES,
    STRUCTURAL_CHECKS,
    CheckResult,
    Workspace,
    accumulation_rows,
    check_counterexample,
    check_determinism,
    check_invariant_curves,
    run_counterexample,
    safe_check,
)
from .counterexample import LogGraph, push_graph, write_certificate, write_report, write_witness_csv
from .curves import catalog_records, sweep_level, write_catalog
from .model import Glue, f_eps, model_skeleton, orbit
from .return_renorm import AnnulusPoint, check_placement, first_return, normalizer_h

ENV_OUTPUT_DIR = "SEPLAB_OUTPUT_DIR"
SCHEMA_VERSION = 1

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

DEFAULT_CONFIG = {
    "schema_version": 1,
    "model": {"lambda": 1.0, "r0": 0.1, "q_higher": [], "resolution": 1e-3,
              "glue": {"r_in": 0.3, "r_out": 0.5, "kappa": 1.0}},
    "fundamental_domain": {"x_star": 0.08, "y_star": 0.034, "c_star": 0.5},
    "epsilons": [0.0, 1e-3],
    "levels": [6, 7, 8, 9, 10, 11, 12],
    "omegas": {"count": 30},
    "counterexample": {"M": None, "rho": None, "steps": 10, "log_y0": None,
                       "control_level": 9, "control_omegas": 3,
                       "cross_validation_logy": [-8.0, -10.0]},
    "output_dir": "seplab-out",
    "seed": 0,
    "tolerances": dict(DEFAULT_TOLERANCES),
}

_num = {"type": "number"}
_opt_num = {"type": ["number", "null"]}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": 1},
        "model": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "lambda": {"type": "number", "exclusiveMinimum": 0},
                "r0": {"type": "number", "exclusiveMinimum": 0},
                "q_higher": {"type": "array", "items": _num},
                "resolution": {"type": "number", "exclusiveMinimum": 0},
                "glue": {"type": "object", "additionalProperties": False,
                         "properties": {"r_in": _num, "r_out": _num, "kappa": _num}},
            },
        },
        "fundamental_domain": {
            "type": "object", "additionalProperties": False,
            "properties": {"x_star": _num, "y_star": _num, "c_star": _num},
        },
        "epsilons": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
        "levels": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
        "omegas": {
            "oneOf": [
                {"type": "object", "additionalProperties": False, "required": ["count"],
                 "properties": {"count": {"type": "integer", "minimum": 1, "maximum": 60}}},
                {"type": "array", "minItems": 1,
                 "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
            ],
        },
        "counterexample": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "M": {"type": ["number", "null"], "minimum": 0},
                "rho": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "steps": {"type": "integer", "minimum": 1, "maximum": 50},
                "log_y0": _opt_num,
                "control_level": {"type": "integer", "minimum": 1},
                "control_omegas": {"type": "integer", "minimum": 1},
                "cross_validation_logy": {"type": "array", "items": _num},
            },
        },
        "output_dir": {"type": "string", "minLength": 1},
        "seed": {"type": "integer", "minimum": 0},
        "tolerances": {
            "type": "object", "additionalProperties": False,
            "properties": {k: _num for k in DEFAULT_TOLERANCES},
        },
    },
}


class ConfigError(Exception):
    """Bad config file or arguments; exit status 2."""


class StageError(Exception):
    """A module error annotated with the pipeline stage it came from."""

    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"{stage}: {type(exc).__name__}: {exc}")
        self.stage = stage


@contextmanager
def stage(name: str):
    try:
        yield
    except (DomainError, ConvergenceError, ValueError) as exc:
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------------------
# config


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | os.PathLike | None) -> dict:
    """Parse, validate and fill in defaults. Raises ConfigError with a line or field."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    errors = sorted(jsonschema.Draft7Validator(CONFIG_SCHEMA).iter_errors(raw),
                    key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{path}: field {where}: {e.message}")
    return _merge(DEFAULT_CONFIG, raw)


def precheck(cfg: dict) -> None:
    """Closed-form preconditions of every module; nothing is iterated or integrated."""
    mc = cfg["model"]
    m = model_skeleton(mc["lambda"], mc["r0"], Glue(**mc["glue"]), tuple(mc["q_higher"]))
    f = cfg["fundamental_domain"]
    check_placement(m, f["x_star"], f["y_star"], f["c_star"])
    c = f["x_star"] * f["y_star"]
    for n in cfg["levels"] + [cfg["counterexample"]["control_level"]]:
        if math.exp(-(n + 1)) >= f["c_star"] * c or math.exp(-n) >= c:
            raise DomainError(f"renormalization level n={n} too small for the annulus")
    cc = cfg["counterexample"]
    if cc["M"] is not None and cc["M"] > 0 and cc["rho"] is not None and cc["rho"] > 0.5:
        raise DomainError("rho must be at most 1/2")


def output_dir(cfg: dict, cli_out: str | None) -> Path:
    return Path(cli_out or os.environ.get(ENV_OUTPUT_DIR) or cfg["output_dir"])


# ---------------------------------------------------------------------------
# atomic output


@contextmanager
def atomic_path(path: Path):
    """Yield a temporary sibling of `path`; it replaces `path` only on success."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_text(path: Path, text: str) -> Path:
    with atomic_path(path) as tmp:
        tmp.write_text(text)
    return path


def write_json(path: Path, data: dict) -> Path:
    return write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header: list[str], rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return write_text(path, buf.getvalue())


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def save(path: Path, writer, *args) -> Path:
    """Run a module writer into a temporary file, then move it into place."""
    with atomic_path(path) as tmp:
        writer(tmp, *args)
    return path


# ---------------------------------------------------------------------------
# runs


class Run:
    """One invocation: parsed config, lazily built workspace, output dir, log."""

    def __init__(self, cfg: dict, out: Path, jobs: int = 1, quiet: bool = False):
        self.cfg = cfg
        self.ws = Workspace(cfg)
        self.out = out
        self.jobs = jobs
        self.quiet = quiet
        self.written: list[Path] = []

    def log(self, msg: str) -> None:
        if not self.quiet:
            print(msg, file=sys.stderr)

    def put(self, path: Path) -> Path:
        self.written.append(path)
        return path

    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def report(self, name: str, scenario: str, checks: list[CheckResult]) -> dict:
        data = {
            "schema_version": SCHEMA_VERSION,
            "tool": "seplab",
            "version": __version__,
            "scenario": scenario,
            "config": self.cfg,
            "checks": [c.to_dict() for c in sorted(checks, key=lambda c: c.criterion)],
            "passed": all(c.passed for c in checks),
            "artifacts": sorted(str(p.relative_to(self.out)) for p in self.written),
        }
        write_json(self.path(name), data)
        for c in sorted(checks, key=lambda c: c.criterion):
            self.log(c.line())
        return data


def do_model(run: Run, args) -> int:
    ws = run.ws
    with stage("building the model"):
        m = ws.model
    with stage("placing the fundamental domain"):
        fd = ws.fd
    desc = m.describe()
    desc["fundamental_domain"] = fd.describe()
    desc["separatrix"] = {"points": len(m.separatrix.points), "area": m.separatrix.area,
                          "max_extent": m.separatrix.max_extent}
    run.put(write_json(run.path("model.json"), desc))
    run.put(write_csv(run.path("separatrix.csv"), ["x", "y"], m.separatrix.points.tolist()))
    rows = []
    for piece, pts in fd.boundary(m).items():
        rows += [(piece, x, y) for x, y in pts.tolist()]
    run.put(write_csv(run.path("domain_boundary.csv"), ["piece", "x", "y"], rows))
    # a few orbits inside the lobe for the phase portrait
    sep = m.separatrix.points[m.separatrix.lobe_start:m.separatrix.lobe_end]
    centre = sep.mean(axis=0)
    anchor = sep[len(sep) // 2]
    z = centre + np.linspace(0.2, 0.9, args.orbits)[:, None] * (anchor - centre)
    steps = [z]
    with stage("iterating phase-portrait orbits"):
        for _ in range(args.steps):
            p = f_eps(m, (steps[-1][:, 0], steps[-1][:, 1]))
            steps.append(np.column_stack([p.x, p.y]))
    rows = [(k, i, float(pt[k, 0]), float(pt[k, 1]))
            for k in range(args.orbits) for i, pt in enumerate(steps)]
    run.put(write_csv(run.path("phase_orbits.csv"), ["orbit", "step", "x", "y"], rows))
    run.log(f"model: N = {fd.N}, separatrix area {m.separatrix.area:.6g}")
    return EXIT_PASS


def do_orbit(run: Run, args) -> int:
    with stage("building the model"):
        m = run.ws.model.with_epsilon(args.epsilon)
    with stage("iterating the orbit"):
        pts = orbit(m, (args.x, args.y), args.steps)
    h = m.H0(pts[:, 0], pts[:, 1])
    rows = [(i, x, y, e) for i, ((x, y), e) in enumerate(zip(pts.tolist(), h.tolist()))]
    run.put(write_csv(run.path(args.name), ["step", "x", "y", "H0"], rows))
    return EXIT_PASS


def do_return_map(run: Run, args) -> int:
    ws = run.ws
    with stage("placing the fundamental domain"):
        m, fd = ws.model, ws.fd
    vs = np.array(args.v if args.v else np.logspace(-10, -4, 13))
    x = fd.x_star * math.exp(-0.3)
    with stage("computing first returns"):
        p, n = first_return(m, fd, (np.full(len(vs), x), vs / x))
        a = normalizer_h(m, fd, (p.x, p.y))
    rows = zip(vs.tolist(), np.asarray(n).tolist(), p.x.tolist(), p.y.tolist(),
               np.asarray(a.x).tolist(), np.asarray(a.logy).tolist())
    run.put(write_csv(run.path("return_map.csv"),
                      ["v", "return_index", "x", "y", "h_x", "logv"], rows))
    return EXIT_PASS


def do_renorm(run: Run, args) -> int:
    ws = run.ws
    with stage("tabulating sigma"):
        table = ws.ren0.table
    run.put(write_json(run.path("sigma.json"), {
        "schema_version": SCHEMA_VERSION, "limit": table.limit, "v_max": table.v_max,
        "chebyshev_tail": table.tail, "N": ws.fd.N,
        "coefficients": [float(c) for c in table.cheb.coef]}))
    levels = ws.config["levels"]
    with stage("twist profiles"):
        for n in levels:
            ws.ren0.check_level(n)
            y = np.linspace(math.exp(-1), 1.0, 101)
            rows = zip(y.tolist(), ws.ren0.l_ring(n, y).tolist(), ws.ren0.dl_ring(n, y).tolist())
            run.put(write_csv(run.path("renorm", f"twist_n{n}.csv"), ["y", "l", "dl_dy"], rows))
    # strip images: a band of fibers and its image under bar_f
    xs, ls = np.meshgrid(np.linspace(0, 1, args.strip_x, endpoint=False),
                         np.linspace(-12.0, -10.0, args.strip_y))
    a = AnnulusPoint(xs.ravel(), ls.ravel())
    rows = []
    with stage("strip images of bar_f"):
        for eps in sorted(set(ws.config["epsilons"])):
            out = ws.renormalization(eps).bar_f(a)
            rows += [(eps, *r) for r in zip(a.x.tolist(), a.logy.tolist(),
                                            np.asarray(out.x).tolist(), np.asarray(out.logy).tolist())]
    run.put(write_csv(run.path("renorm", "strip_image.csv"),
                      ["epsilon", "x", "logy", "x_image", "logy_image"], rows))
    return EXIT_PASS


def _curve_task(task):
    ren, n, omegas, poly_path = task
    summary = sweep_level(ren, n, omegas)
    with atomic_path(Path(poly_path)) as tmp:
        buf = ["x,y"] + [f"{x!r},{y!r}" for x, y in summary.lifted.polyline.tolist()]
        tmp.write_text("\n".join(buf) + "\n")
    return summary


def sweep(run: Run) -> list:
    ws = run.ws
    tasks = []
    with stage("preparing renormalizations"):
        for eps in ws.config["epsilons"]:
            ren = ws.renormalization(eps)
            ren.table
            if eps != 0.0:
                ren.passage
            for n in ws.config["levels"]:
                ren.check_level(n)
                path = run.path("curves", f"lifted_eps{eps!r}_n{n}.csv")
                tasks.append((ren, n, ws.omegas, str(path)))
    t0 = time.perf_counter()
    with stage("invariant curve sweep"):
        if run.jobs > 1:
            with ProcessPoolExecutor(max_workers=run.jobs) as pool:
                summaries = list(pool.map(_curve_task, tasks))
        else:
            summaries = [_curve_task(t) for t in tasks]
    for t in tasks:
        run.put(Path(t[3]))
    run.log(f"curves: {len(tasks)} (epsilon, n) tasks in {time.perf_counter() - t0:.0f} s")
    return summaries


def curve_scenario(run: Run) -> CheckResult:
    summaries = sweep(run)
    run.put(save(run.path("curves", "catalog.json"), write_catalog, catalog_records(summaries)))
    rows = accumulation_rows(summaries)
    header = list(rows[0])
    run.put(write_csv(run.path("curves", "accumulation.csv"), header,
                      [[r[k] for k in header] for r in rows]))
    return check_invariant_curves(run.ws, summaries)


def descent_scenario(run: Run) -> CheckResult:
    ws = run.ws
    with stage("counterexample parameters"):
        params = ws.params
    with stage("graph descent and certificate"):
        res = run_counterexample(ws)
    run.put(save(run.path("counterexample", "descent.json"), write_report, res.report))
    run.put(save(run.path("counterexample", "witness.csv"), write_witness_csv, res.report))
    run.put(save(run.path("counterexample", "certificate.json"), write_certificate, res.certificate))
    run.put(write_json(run.path("counterexample", "control.json"),
                       {"schema_version": SCHEMA_VERSION, **res.control}))
    # the first push of the seed graph, for the graph-push picture
    g = LogGraph.seed(params, res.report.log_y0)
    with stage("pushing the seed graph"):
        pushed = push_graph(params, g)
    x = np.linspace(-1.0, 0.0, 401, endpoint=False)
    run.put(write_csv(run.path("counterexample", "push_graph.csv"),
                      ["x", "logy_seed", "logy_pushed"],
                      zip(x.tolist(), g(x).tolist(), pushed.graph(x).tolist())))
    run.put(write_json(run.path("counterexample", "params.json"),
                       {"schema_version": SCHEMA_VERSION, **params.describe(),
                        "J_next": list(pushed.J_next), "shift": pushed.shift}))
    return check_counterexample(ws, res)


def do_curves(run: Run, args) -> int:
    check = curve_scenario(run)
    data = run.report("report_curves.json", "theorem-a", [check])
    return EXIT_PASS if data["passed"] else EXIT_FAIL


def do_counterexample(run: Run, args) -> int:
    check = descent_scenario(run)
    data = run.report("report_counterexample.json", "theorem-b", [check])
    return EXIT_PASS if data["passed"] else EXIT_FAIL


def _tree_bytes(root: Path, skip=("report.json",)) -> dict[str, bytes]:
    out = {}
    for p in sorted(root.rglob("*")):
        rel = str(p.relative_to(root))
        if p.is_file() and rel not in skip and not p.name.startswith("."):
            out[rel] = p.read_bytes()
    return out


def _report_core(path: Path) -> bytes:
    """report.json without the determinism entry, re-serialized canonically."""
    data = json.loads(path.read_text())
    data["checks"] = [c for c in data["checks"] if c["criterion"] != 9]
    data.pop("passed", None)
    return json.dumps(data, indent=2, sort_keys=True).encode()


def do_report(run: Run, args) -> int:
    checks: list[CheckResult] = []
    scen = args.scenario
    if scen in ("all", "structural"):
        for k, fn in enumerate(STRUCTURAL_CHECKS, start=1):
            t0 = time.perf_counter()
            with stage(f"check {k}"):
                checks.append(safe_check(k, fn, run.ws))
            run.log(f"check {k}: {time.perf_counter() - t0:.1f} s")
    if scen in ("all", "theorem-a"):
        checks.append(curve_scenario(run))
    if scen in ("all", "theorem-b"):
        checks.append(descent_scenario(run))
    if args.against:
        # write once without the determinism entry so both cores can be compared
        run.report("report.json", scen, checks)
        other = Path(args.against)
        if not (other / "report.json").is_file():
            raise ConfigError(f"--against: {other} has no report.json")
        a = _tree_bytes(other)
        b = _tree_bytes(run.out)
        a["report.json"] = _report_core(other / "report.json")
        b["report.json"] = _report_core(run.path("report.json"))
        checks.append(check_determinism(a, b))
    data = run.report("report.json", scen, checks)
    return EXIT_PASS if data["passed"] else EXIT_FAIL


# ---------------------------------------------------------------------------
# plot scripts

_PLOT_HEAD = '''"""Generated by seplab plots; run with python3 from this directory."""
import numpy as np
import matplotlib.pyplot as plt


def load(name):
    return np.genfromtxt(name, delimiter=",", names=True, dtype=None, encoding="utf-8")

'''

FIGURES = {
    "phase_portrait": {
        "needs": ["separatrix.csv", "domain_boundary.csv", "phase_orbits.csv"],
        "body": '''
sep = load("separatrix.csv")
box = load("domain_boundary.csv")
orb = load("phase_orbits.csv")
fig, ax = plt.subplots(figsize=(6, 6))
ax.plot(sep["x"], sep["y"], "k-", lw=1, label="separatrix")
for k in np.unique(orb["orbit"]):
    sel = orb["orbit"] == k
    ax.plot(orb["x"][sel], orb["y"][sel], ".", ms=1)
for piece in np.unique(box["piece"]):
    sel = box["piece"] == piece
    ax.plot(box["x"][sel], box["y"][sel], "r-", lw=1.5)
ax.set(xlabel="x", ylabel="y", aspect="equal", title="phase portrait and fundamental domain")
ax.legend(loc="upper right")
fig.savefig("phase_portrait.png", dpi=150)
''',
    },
    "strip_image": {
        "needs": ["renorm/strip_image.csv"],
        "body": '''
d = load("strip_image.csv")
eps = np.unique(d["epsilon"])
fig, axes = plt.subplots(1, len(eps), figsize=(5 * len(eps), 4), squeeze=False)
for ax, e in zip(axes[0], eps):
    sel = d["epsilon"] == e
    ax.plot(d["x"][sel], d["logy"][sel], ".", ms=2, color="0.6", label="band")
    ax.plot(d["x_image"][sel], d["logy_image"][sel], ".", ms=2, color="C0", label="image")
    ax.set(xlabel="x (mod 1)", ylabel="ln v", title=f"bar_f, epsilon = {e:g}")
    ax.legend(loc="upper right")
fig.tight_layout()
fig.savefig("strip_image.png", dpi=150)
''',
    },
    "graph_push": {
        "needs": ["counterexample/push_graph.csv"],
        "body": '''
d = load("push_graph.csv")
fig, (a1, a2) = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
a1.plot(d["x"], d["logy_seed"], "C0-")
a1.set(ylabel="ln y", title="seed graph")
a2.plot(d["x"], d["logy_pushed"], "C3-")
a2.set(xlabel="x", ylabel="ln y", title="pushed graph")
fig.tight_layout()
fig.savefig("graph_push.png", dpi=150)
''',
    },
    "lifted_circles": {
        "needs": ["separatrix.csv", "curves/accumulation.csv"],
        "glob": "curves/lifted_*.csv",
        "body": '''
import glob
sep = load("separatrix.csv")
fig, ax = plt.subplots(figsize=(6, 6))
ax.plot(sep["x"], sep["y"], "k-", lw=1)
for name in sorted(glob.glob("lifted_*.csv")):
    c = load(name)
    ax.plot(c["x"], c["y"], "-", lw=0.7)
ax.set(xlabel="x", ylabel="y", aspect="equal", title="lifted invariant circles")
fig.savefig("lifted_circles.png", dpi=150)
''',
    },
}


def do_plots(run: Run, args) -> int:
    wanted = args.figure or list(FIGURES)
    plan: dict[str, bytes] = {}
    made = []
    for name in wanted:
        spec = FIGURES[name]
        files = [run.path(f) for f in spec["needs"]]
        if "glob" in spec:
            files += sorted(run.out.glob(spec["glob"]))
        missing = [str(f.relative_to(run.out)) for f in files if not f.is_file()]
        if missing:
            if args.figure:
                raise ConfigError(f"plots: figure {name} needs missing artifacts: {', '.join(missing)}")
            continue
        for f in files:
            plan[f.name] = f.read_bytes()
        plan[f"plot_{name}.py"] = (_PLOT_HEAD + spec["body"]).encode()
        made.append(name)
    if not made:
        raise ConfigError(f"plots: no artifacts in {run.out}; run model, renorm, curves or "
                          "counterexample first")
    for name, content in sorted(plan.items()):
        target = run.path("plots", name)
        with atomic_path(target) as tmp:
            tmp.write_bytes(content)
        run.put(target)
    run.log(f"plots: wrote scripts for {', '.join(made)}")
    return EXIT_PASS


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seplab", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"seplab {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="JSON config file (defaults built in)")
    common.add_argument("-o", "--out", help=f"output directory (overrides ${ENV_OUTPUT_DIR})")
    common.add_argument("-j", "--jobs", type=int, default=1, help="worker processes for sweeps")
    common.add_argument("--check-only", action="store_true",
                        help="validate the config and closed-form preconditions, then stop")
    common.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("model", parents=[common], help="model description, separatrix, domain")
    s.add_argument("--orbits", type=int, default=6)
    s.add_argument("--steps", type=int, default=60)
    s.set_defaults(func=do_model)

    s = sub.add_parser("orbit", parents=[common], help="plane orbit of one point")
    s.add_argument("--x", type=float, required=True)
    s.add_argument("--y", type=float, required=True)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--epsilon", type=float, default=0.0)
    s.add_argument("--name", default="orbit.csv")
    s.set_defaults(func=do_orbit)

    s = sub.add_parser("return-map", parents=[common], help="first returns to the fundamental domain")
    s.add_argument("--v", type=float, nargs="+", help="fiber values (default: 13 values 1e-10..1e-4)")
    s.set_defaults(func=do_return_map)

    s = sub.add_parser("renorm", parents=[common], help="sigma table, twist profiles, strip images")
    s.add_argument("--strip-x", type=int, default=40)
    s.add_argument("--strip-y", type=int, default=5)
    s.set_defaults(func=do_renorm)

    s = sub.add_parser("curves", parents=[common], help="theorem-a scenario: invariant curve catalog")
    s.set_defaults(func=do_curves)

    s = sub.add_parser("counterexample", parents=[common],
                       help="theorem-b scenario: descent report and certificate")
    s.set_defaults(func=do_counterexample)

    s = sub.add_parser("report", parents=[common], help="run the checks and write report.json")
    s.add_argument("--scenario", choices=["all", "structural", "theorem-a", "theorem-b"],
                   default="all")
    s.add_argument("--against", help="earlier output directory to compare byte for byte")
    s.set_defaults(func=do_report)

    s = sub.add_parser("plots", parents=[common], help="write plot scripts for existing artifacts")
    s.add_argument("--figure", action="append", choices=sorted(FIGURES))
    s.set_defaults(func=do_plots)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = load_config(args.config)
        try:
            precheck(cfg)
        except DomainError as exc:
            raise ConfigError(f"precondition failed: {exc}") from exc
        if args.check_only:
            print("config ok", file=sys.stderr)
            return EXIT_PASS
        run = Run(cfg, output_dir(cfg, args.out), args.jobs, args.quiet)
        return args.func(run, args)
    except ConfigError as exc:
        print(f"seplab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"seplab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc.__cause__, DomainError) else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
