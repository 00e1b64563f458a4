"""One test per acceptance criterion, each run at its stated tolerance and time budget."""
import json
import time

import pytest

from separatrix_lab.checks import (
    Workspace,
    check_bnf_order,
    check_counterexample,
    check_flow_conservation,
    check_invariant_curves,
    check_renorm_oracle,
    check_return_time,
    check_symplectic,
    check_twist,
    run_counterexample,
)
from separatrix_lab.cli import load_config, main
from separatrix_lab.curves import sweep_level

BUDGET = {1: 5.0, 2: 1.0, 3: 30.0, 4: 10.0, 5: 60.0, 6: 60.0, 7: 600.0, 8: 300.0}


@pytest.fixture(scope="module")
def ws():
    w = Workspace(load_config(None))
    # shared setup outside the timed sections
    w.ren0.table
    w.params
    return w


def record(log, result, seconds):
    budget = BUDGET[result.criterion]
    ok = result.passed and seconds < budget
    line = (f"criterion {result.criterion}: {'PASS' if ok else 'FAIL'}  {result.name}  "
            f"({seconds:.1f} s of {budget:.0f} s)")
    if not result.passed:
        failed = [k for k, v in result.measured.get("parts", {}).items() if not v]
        line += f"  failing: {', '.join(failed) or result.note or 'see measured values'}"
    print(line)
    log.append(line)
    return ok


def timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t0


@pytest.mark.parametrize("criterion, check", [
    (1, check_symplectic),
    (2, check_flow_conservation),
    (3, check_bnf_order),
    (4, check_return_time),
    (5, check_renorm_oracle),
    (6, check_twist),
])
def test_structural_criterion(ws, acceptance_log, criterion, check):
    res, sec = timed(check, ws)
    assert res.criterion == criterion
    ok = record(acceptance_log, res, sec)
    assert res.passed, res.to_dict()
    assert ok, f"over budget: {sec:.1f} s"


@pytest.mark.slow
def test_invariant_curves_accumulate(ws, acceptance_log):
    def sweep():
        out = []
        for eps in (0.0, 1e-3):
            ren = ws.renormalization(eps)
            for n in range(6, 13):
                out.append(sweep_level(ren, n, ws.omegas))
        return out

    summaries, sec = timed(sweep)
    res = check_invariant_curves(ws, summaries)
    ok = record(acceptance_log, res, sec)
    print(json.dumps(res.to_dict()["measured"], indent=1))
    assert res.passed, res.to_dict()["measured"]["parts"]
    assert ok


@pytest.mark.slow
def test_counterexample_descent_and_certificate(ws, acceptance_log):
    run, sec = timed(run_counterexample, ws)
    res = check_counterexample(ws, run)
    ok = record(acceptance_log, res, sec)
    assert res.passed, res.to_dict()["measured"]["parts"]
    assert ok


REDUCED = {
    "schema_version": 1,
    "levels": [6, 7],
    "omegas": {"count": 3},
    "counterexample": {"control_omegas": 2},
    "tolerances": {"min_curves": 3, "distance_to_sigma": 0.1, "rotation_samples": 4},
}


@pytest.mark.slow
def test_reruns_are_byte_identical(tmp_path, acceptance_log):
    cfg = tmp_path / "reduced.json"
    cfg.write_text(json.dumps(REDUCED))
    t0 = time.perf_counter()
    first = main(["report", "-q", "-c", str(cfg), "-o", str(tmp_path / "a")])
    second = main(["report", "-q", "-c", str(cfg), "-o", str(tmp_path / "b"),
                   "--against", str(tmp_path / "a")])
    sec = time.perf_counter() - t0
    rep = json.loads((tmp_path / "b" / "report.json").read_text())
    det = [c for c in rep["checks"] if c["criterion"] == 9][0]
    # two runs against twice the summed budget of criteria 1-8
    budget = 2 * sum(BUDGET.values())
    ok = det["passed"] and sec < budget
    line = (f"criterion 9: {'PASS' if ok else 'FAIL'}  reruns are byte-identical  "
            f"({det['measured']['files_compared']} files, {sec:.1f} s of {budget:.0f} s)")
    print(line)
    acceptance_log.append(line)
    assert first == 0 and second == 0
    assert det["passed"], det["measured"]["differing"]
    assert ok
