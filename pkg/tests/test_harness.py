import dataclasses
import json

import numpy as np
import pytest

from agp import cli, harness
from agp.harness import (
    ExperimentConfig,
    RunRecord,
    StrategyConfig,
    audit_failures,
    initial_design,
    load_config,
    load_records,
    measurements,
    preset,
    report,
    run_experiment,
)
from agp.sampler import SampleSchedule
from agp.work_model import WorkModel

TINY = dict(J=2, n_measurements=1, repetitions=1, grid_coarse=60, opt_samples=300, warmup_first=50,
            warmup_later=10, sample_schedule=dict(n_first=200, n_last=400, h_first=100, h_last=200, J=2))


def tiny_config(seed=3):
    return dataclasses.replace(preset("synthetic2d", "desk", seed), **TINY)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    cfg = tiny_config()
    return cfg, out, run_experiment(cfg, out)


def test_paper_presets():
    c2 = preset("synthetic2d", "paper")
    assert (c2.initial_size, c2.tol_default, c2.noise_std, c2.J, c2.candidates_per_iter) == (5, 0.05, 0.02, 13, 3)
    assert (c2.n_measurements, c2.repetitions, c2.geometric_ratio) == (5, 5, 1.173)
    assert c2.exponents == (1.0, 1.5, 2.0, 3.0)
    c3 = preset("diffusion3d", "paper")
    assert (c3.initial_size, c3.tol_default, c3.noise_std, c3.n_measurements, c3.repetitions) == (9, 0.02, 0.01, 3, 5)
    c4 = preset("poisson4d", "paper")
    assert (c4.initial_size, c4.tol_default, c4.noise_std, c4.J, c4.candidates_per_iter) == (17, 0.04, 0.05, 20, 5)
    assert (c4.n_measurements, c4.repetitions) == (3, 4)
    assert c4.sample_schedule.every == 2


def test_desk_preset():
    c = preset("synthetic2d", "desk", 7)
    assert (c.J, c.n_measurements, c.repetitions, c.exponents, c.seed) == (6, 2, 2, (1.0,), 7)
    strat = [s for s in c.strategy_configs() if s.name == "AGP-geom"][0]
    assert strat.total_budget == pytest.approx(6 * 3 * 20.0)
    with pytest.raises(ValueError):
        preset("synthetic2d", "huge")
    with pytest.raises(KeyError):
        preset("nope")


def test_paper_budget_totals():
    c = preset("synthetic2d", "paper")
    const = StrategyConfig("AGP-const", "KL", 1.0, c.tol_default, c.J, c.candidates_per_iter)
    assert const.total_budget == pytest.approx(780.0)
    assert const.budget_increments()[0] == pytest.approx(60.0)
    geom = StrategyConfig("AGP-geom", "KL", 1.0, c.tol_default, c.J, c.candidates_per_iter, c.geometric_ratio)
    assert geom.budget_increments()[0] == pytest.approx(20.0)
    assert geom.budget_increments()[1] == pytest.approx(20.0 * 1.173)


def test_config_validation_and_roundtrip():
    c = preset("diffusion3d", "desk")
    back = ExperimentConfig.from_dict(json.loads(json.dumps(c.to_dict())))
    assert back == c
    with pytest.raises(ValueError):
        dataclasses.replace(c, repetitions=0)
    with pytest.raises(ValueError):
        dataclasses.replace(c, strategies=("AGP",))
    with pytest.raises(ValueError):
        StrategyConfig("LHSGP", "KL", 1.0, 0.0, 3, 2)


def test_load_config_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"problem": "synthetic2d", "preset": "desk", "seed": 4, "J": 3}))
    c = load_config(p)
    assert c.J == 3 and c.sample_schedule.J == 3 and c.seed == 4
    assert load_config(p, "paper", 9).seed == 9
    p.write_text(json.dumps({"problem": "synthetic2d", "bogus": 1}))
    with pytest.raises(ValueError, match="bogus"):
        load_config(p)


@pytest.mark.parametrize("problem,size,tol", [("synthetic2d", 5, 0.05), ("diffusion3d", 9, 0.02), ("poisson4d", 17, 0.04)])
def test_initial_design_is_latin(problem, size, tol):
    design, data = initial_design(problem, size, tol, 11)
    assert len(design) == size and np.all(design.tolerances == tol)
    lo, hi = data.points.min(), data.points.max()
    fm = harness.make_model(problem)
    u = (design.points - fm.lower) / (fm.upper - fm.lower)
    for a in range(design.dim):
        assert sorted(np.floor(u[:, a] * size).astype(int)) == list(range(size))
    _, again = initial_design(problem, size, tol, 11)
    np.testing.assert_array_equal(again.values, data.values)


def test_measurements_deterministic():
    c = preset("synthetic2d", "paper", 1)
    a, b = measurements(c), measurements(c)
    assert len(a) == 5
    for (p1, m1), (p2, m2) in zip(a, b):
        np.testing.assert_array_equal(m1.y_m, m2.y_m)
        assert m1.noise_std == 0.02


def test_tiny_run_records(tiny_run):
    cfg, out, recs = tiny_run
    assert len(recs) == 8
    assert not audit_failures(recs)
    for r in recs:
        assert len(r.rows) == cfg.J + 1
        works = [row["cumulative_work"] for row in r.rows]
        sizes = [row["design_size"] for row in r.rows]
        assert np.all(np.diff(works) >= -1e-12) and np.all(np.diff(sizes) >= 0)
        assert works[-1] <= r.info["total_budget"] + 1e-9
        expected, n = 0, []
        for j in range(1, cfg.J + 2):
            nj, hj = cfg.sample_schedule.counts(j)
            expected = max(expected - hj, 0) + nj
            n.append(expected)
        assert [row["chain_length"] for row in r.rows] == n
        assert (out / r.samples_file).exists()


def test_benchmark_strategies_add_fixed_points(tiny_run):
    cfg, _, recs = tiny_run
    for r in recs:
        if r.strategy in ("LHSGP", "posAGP"):
            sizes = [row["design_size"] for row in r.rows]
            assert np.all(np.diff(sizes) == cfg.candidates_per_iter)
            assert set(r.final_data["design"]["tolerances"]) == {cfg.tol_default}


def test_lhsgp_independent_of_error_kind(tiny_run):
    _, _, recs = tiny_run
    by = {(r.strategy, r.error_kind): r for r in recs}
    assert by["LHSGP", "KL"].rows == by["LHSGP", "L2"].rows


def test_report_files_and_identities(tiny_run, tmp_path):
    _, _, recs = tiny_run
    paths = report(recs, tmp_path)
    conv = np.genfromtxt(paths["convergence"], delimiter=",", names=True, dtype=None, encoding=None)
    assert len(conv) == sum(len(r.rows) for r in recs)
    assert "wall_time" not in paths["convergence"].read_text()
    tol_lines = paths["tolerances"].read_text().strip().splitlines()
    assert len(tol_lines) - 1 == sum(len(r.final_data["design"]["tolerances"]) for r in recs)
    summary = paths["summary"].read_text().strip().splitlines()
    assert len(summary) == 1 + 8


def test_averaged_curve_of_identical_runs(tiny_run, tmp_path):
    _, _, recs = tiny_run
    one = recs[0]
    twin = RunRecord.from_dict({**one.to_dict(), "repetition": 1, "run_id": one.run_id + "_twin"})
    paths = report([one, twin], tmp_path)
    rows = paths["averaged"].read_text().strip().splitlines()[1:]
    for line, row in zip([l for l in rows if l.split(",")[3] == "all"], one.rows):
        f = line.split(",")
        assert f[4] == "2"
        assert float(f[8]) == pytest.approx(row["metric_kl"], rel=1e-12)
        assert float(f[10]) == row["design_size"]


def test_resume_skips_finished_runs(tiny_run, monkeypatch):
    cfg, out, recs = tiny_run

    def boom(*args, **kwargs):
        raise AssertionError("finished run recomputed")

    monkeypatch.setattr(harness, "run_single", boom)
    again = run_experiment(cfg, out)
    assert [r.to_dict() for r in again] == [r.to_dict() for r in recs]
    assert len(load_records(out)) == 8


def test_audit_failure_reported(tiny_run):
    _, _, recs = tiny_run
    bad = RunRecord.from_dict(recs[0].to_dict())
    bad.audits = {**bad.audits, "budget": False, "messages": ["iteration 1: cumulative work exceeds budget"]}
    msgs = audit_failures([bad])
    assert len(msgs) == 1 and "exceeds budget" in msgs[0]
    shrink = RunRecord.from_dict(recs[0].to_dict())
    shrink.rows[-1]["design_size"] = 0
    assert "decreased" in audit_failures([shrink])[0]


def test_cli_run_report_and_exit_codes(tmp_path, tiny_run, capsys):
    cfg_file = tmp_path / "tiny.json"
    cfg_file.write_text(json.dumps({"problem": "synthetic2d", "preset": "desk", **TINY,
                                    "strategies": ["LHSGP"], "error_kinds": ["KL"]}))
    out = tmp_path / "run"
    assert cli.main(["run", "--config", str(cfg_file), "--seed", "3", "--out", str(out)]) == 0
    assert (out / "summary.csv").exists()
    rep = tmp_path / "rep"
    assert cli.main(["report", "--in", str(out), "--out", str(rep)]) == 0
    assert (rep / "summary.csv").read_bytes() == (out / "summary.csv").read_bytes()
    assert cli.main(["report", "--in", str(tmp_path / "empty"), "--out", str(rep)]) == 2

    rec_path = next((out / "runs").glob("*.json"))
    d = json.loads(rec_path.read_text())
    d["audits"]["refinement"] = False
    rec_path.write_text(json.dumps(d))
    assert cli.main(["report", "--in", str(out), "--out", str(rep)]) == 1
    assert "AUDIT FAILURE" in capsys.readouterr().err


def test_cli_verify_quick(capsys):
    assert cli.main(["verify", "--quick"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 12 and all(l.startswith("[PASS]") for l in lines)
