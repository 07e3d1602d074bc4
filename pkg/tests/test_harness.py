import csv
import dataclasses
import hashlib
import json

import numpy as np
import pytest

from shiftsafe.diffusion import DiffusionConfig
from shiftsafe.harness import cli
from shiftsafe.harness.config import (CalibConfig, DataConfig, ExperimentConfig, RunConfig, SCHEMA_VERSION,
                                      from_json, load)
from shiftsafe.harness.experiment import (CalibrationSource, Calibrator, CaseSpec, Workspace, collision_consistency,
                                          generate, per_step_timing, run_case, training_rows)
from shiftsafe.harness.report import COLUMNS, emit_report, load_results, save_result
from shiftsafe.scores import index_grid
from shiftsafe.shift import ShiftKind

TINY = ExperimentConfig(
    diffusion=DiffusionConfig(net_hidden=(16, 16), enc_hidden=(16, 16), epochs=1, enc_epochs=1, T_diff=20),
    data=DataConfig(train_episodes=6, val_episodes=6, base_sigma_episodes=10, base_calib_episodes=40),
    calib=CalibConfig(K=40, l2_pairs=32), run=RunConfig(episodes=2))


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    return Workspace(TINY, tmp_path_factory.mktemp("ws"))


@pytest.fixture(scope="module")
def results(ws):
    cal = Calibrator(ws)
    return {c: run_case(ws, CaseSpec(c), 9, 2, cal) for c in (0, 1, 2, 3)}


def test_config_roundtrip(tmp_path):
    path = tmp_path / "c.json"
    TINY.save(path)
    assert load(path) == TINY and load(path).digest() == TINY.digest()


def test_config_rejects_other_schema_and_unknown_keys():
    d = TINY.to_json()
    with pytest.raises(ValueError):
        from_json({**d, "schema_version": SCHEMA_VERSION + 1})
    with pytest.raises(ValueError):
        from_json({**d, "calib": {**d["calib"], "kappa": 3}})


def test_workspace_refuses_other_config(ws):
    with pytest.raises(ValueError):
        Workspace(dataclasses.replace(TINY, seed=5), ws.root)


def test_case_spec_mapping():
    assert CaseSpec(0).calibration_source is CalibrationSource.REAL_TRAIN_ENV and CaseSpec(0).shift_kind is None
    assert CaseSpec(1).calibration_source is CalibrationSource.SYNTHETIC and CaseSpec(1).shift_kind is None
    assert CaseSpec(2).shift_kind is ShiftKind.EMPIRICAL_WINF
    assert CaseSpec(3).shift_kind is ShiftKind.ANALYTIC_W2_BOUND
    with pytest.raises(ValueError):
        CaseSpec(4)
    with pytest.raises(ValueError):
        CaseSpec(1, "sideways")


def test_one_episode_per_env_gives_five_index_sets():
    s = TINY.sim
    n_rows = sum(len(training_rows(generate(TINY, "diff-train", e, 1), s.H, s.dt)[1])
                 for e in TINY.data.seen_envs)
    assert n_rows == 5 * len(index_grid(s.T, s.H, 2))


def test_dataset_hash_is_stable():
    def digest():
        C, y = training_rows(generate(TINY, "diff-train", 4, 2), TINY.sim.H, TINY.sim.dt)
        return hashlib.sha256(C.tobytes() + y.tobytes()).hexdigest()
    assert digest() == digest()


def test_largest_shift_env_has_larger_errors():
    s = TINY.sim
    mean = lambda e: np.abs(training_rows(generate(TINY, "diff-train", e, 30), s.H, s.dt)[1]).mean()
    assert mean(10) > mean(2)


def test_small_run_covers_all_cases(results):
    for c, res in results.items():
        row = res.row()
        assert set(COLUMNS) <= set(row) and row["n"] == 2 and row["failed"] == 0, res.failures
        for k in ("coverage", "safety", "infeasible"):
            assert 0.0 <= row[k] <= 1.0
        assert not collision_consistency(res.traces)


def test_robust_cases_never_shrink_radii(ws, results):
    cal = Calibrator(ws)
    for eta in results[1].traces[0].eta, 0.05:
        plain = cal.calibrate(CaseSpec(1), eta).scale
        assert cal.calibrate(CaseSpec(2), eta).scale >= plain
        assert cal.calibrate(CaseSpec(3), eta).scale >= plain


def test_saved_results_feed_the_report(ws, results, tmp_path):
    for res in results.values():
        save_result(tmp_path, res)
    rows = [d["row"] for d in load_results(tmp_path)]
    csv_path = emit_report(rows, tmp_path / "report")[0]
    with open(csv_path) as fh:
        got = list(csv.DictReader(fh))
    assert len(got) == 4 and list(got[0]) == COLUMNS


def test_empty_report_is_header_only(tmp_path):
    assert cli.main(["report", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "report" / "report.csv").read_text().strip() == ",".join(COLUMNS)


def test_report_is_deterministic(results, tmp_path):
    rows = [r.row() for r in results.values()]
    a = emit_report(rows, tmp_path / "a")[0].read_bytes()
    b = emit_report(list(reversed(rows)), tmp_path / "b")[0].read_bytes()
    assert a == b


def test_gates():
    good = [{"loop": "closed", "case": c, "env": e, "coverage": 0.95 if c else 0.5, "safety": 1.0}
            for c in (0, 2, 3) for e in range(1, 11)]
    assert cli.gate_failures(good) == []
    bad = [dict(r, coverage=0.8) if r["case"] == 2 and r["env"] == 4 else r for r in good]
    assert len(cli.gate_failures(bad)) == 1


def test_amortized_timing():
    t = per_step_timing([np.array([2.0, 4.0]), np.array([6.0, 8.0])], gen_ms=100.0)
    assert t["mpc_mean_ms"] == pytest.approx(5.0)
    assert t["amortized_mean_ms"] == pytest.approx(55.0)
    assert t["unamortized_mean_ms"] == pytest.approx(105.0)


def test_cli_env_argument():
    p = cli.build_parser()
    assert p.parse_args(["run", "--out", "x", "--env", "train", "3"]).env == ["train", 3]
    with pytest.raises(SystemExit):
        p.parse_args(["run", "--out", "x", "--env", "11"])
