import numpy as np
import pytest
from hypothesis import given, strategies as st

import agp.design as design_mod
from agp.bayes import Measurement
from agp.design import (
    CANDIDATE_SEPARATION,
    Acquisition,
    CandidateSet,
    FrozenMeanObjective,
    ToleranceVector,
    acquisition,
    apply_design_update,
    optimize_tolerances,
    select_candidates,
)
from agp.error_models import log_indicator_diag
from agp.forward_models import SimulatedEvaluator, make_model
from agp.gp_core import Design, Kernel, TrainingData, fit
from agp.verification import tolerance_oracle_suite
from agp.work_model import WorkModel


def _model(points, tols, values, ell=0.3, c=0.5):
    points = np.atleast_2d(points)
    data = TrainingData(Design(points, tols), np.asarray(values, float).reshape(len(tols), -1))
    return fit(Kernel(np.full(points.shape[1], ell), [c] * data.values.shape[1]), data)


def _frozen_error(model, p, tau, samples, meas, kind):
    """Mean indicator with ``p`` added at ``tau`` and the mean kept at its current value."""
    mean, _ = model.predict_batch(samples)
    d = model.data
    data = TrainingData(Design(np.vstack([d.points, p]), np.append(d.tolerances, tau)), np.vstack([d.values, 0 * d.values[:1]]))
    _, var = fit(model.kernel, data).predict_batch(samples)
    return np.mean(np.exp(log_indicator_diag(kind, meas, mean, var)[0]))


@pytest.mark.parametrize("kind", ["KL", "L2"])
@pytest.mark.parametrize("q", [1.0, 2.0])
@given(seed=st.integers(0, 10_000))
def test_acquisition_matches_finite_difference_of_error(kind, q, seed):
    rng = np.random.default_rng(seed)
    model = _model(rng.uniform(-1, 1, (1, 1)), [0.1], rng.normal(size=1))
    samples = rng.uniform(-1, 1, (int(rng.integers(1, 4)), 1))
    meas = Measurement([rng.normal(0, 0.3)], 0.5)
    wm = WorkModel(q)
    p = samples[0] + rng.normal(0, 0.2, 1)
    tau_p = float(np.sqrt(model.predict_batch(p[None])[1][0, 0]))
    W = wm.work_of_tol(tau_p)
    h = 1e-4 * W
    E = lambda w: _frozen_error(model, p, wm.tol_of_work(w), samples, meas, kind)
    fd = -(E(W + h) - E(W - h)) / (2 * h)
    got = acquisition(p, model, meas, kind, samples, wm)
    assert got == pytest.approx(fd, rel=1e-4, abs=1e-12 * abs(E(W)))


def test_acquisition_vanishes_for_converged_surrogate():
    X = np.array([[-0.5], [0.0], [0.5]])
    model = _model(X, [1e-9] * 3, [0.1, 0.2, 0.3])
    val = acquisition(np.array([0.25]), model, Measurement([0.2], 0.1), "KL", X, WorkModel(1.0))
    assert val < 1e-12


def test_acquisition_vanishes_far_from_samples():
    model = _model([[0.0]], [0.1], [0.3])
    samples = np.array([[0.0], [0.1]])
    assert acquisition(np.array([30.0]), model, Measurement([0.2], 0.1), "L2", samples, WorkModel(1.0)) == 0.0


def test_acquisition_needs_samples():
    with pytest.raises(ValueError):
        Acquisition(_model([[0.0]], [0.1], [0.3]), Measurement([0.2], 0.1), "KL", np.zeros((0, 1)), WorkModel(1.0))


def _synthetic_setup(seed=0):
    fm = make_model("synthetic2d")
    rng = np.random.default_rng(seed)
    X = rng.uniform(-0.5, 0.5, (6, 2))
    model = fit(Kernel([0.2, 0.2], [0.1, 0.1, 0.1]), TrainingData(Design(X, [0.05] * 6), fm.eval_exact(X)))
    meas = Measurement(fm.eval_exact([0.1, -0.2]), 0.02)
    samples = rng.uniform(-0.5, 0.5, (300, 2))
    return fm, model, meas, samples


def test_select_candidates_count_and_separation():
    fm, model, meas, samples = _synthetic_setup()
    cs = select_candidates(model, meas, "KL", samples, WorkModel(1.0), 3, fm.lower, fm.upper, seed=0,
                           exclude=model.data.points)
    assert 1 <= len(cs) <= 3
    assert np.all(np.diff(cs.log_values) <= 0)
    width = fm.upper - fm.lower
    for a in range(len(cs)):
        assert np.all(fm.contains(cs.points[a]))
        for b in range(a):
            assert np.max(np.abs(cs.points[a] - cs.points[b]) / width) >= CANDIDATE_SEPARATION


def test_select_candidates_one_per_local_maximum():
    model = _model([[-0.9]], [0.1], [0.0])
    meas, samples, wm = Measurement([0.0], 0.2), np.array([[0.4]]), WorkModel(1.0)
    cs = select_candidates(model, meas, "L2", samples, wm, 10, [-1.0], [1.0], seed=0, n_starts=12)
    grid = np.linspace(-1, 1, 4001)
    v = Acquisition(model, meas, "L2", samples, wm).log_values(grid[:, None])
    padded = np.concatenate([[-np.inf], v, [-np.inf]])
    peaks = grid[(v >= padded[:-2]) & (v >= padded[2:]) & np.isfinite(v)]
    assert len(cs) == len(peaks)
    for x in cs.points[:, 0]:
        assert np.min(np.abs(peaks - x)) < 1e-3


def test_select_candidates_empty_when_acquisition_is_zero(monkeypatch):
    monkeypatch.setattr(Acquisition, "log_values", lambda self, P: np.full(len(np.atleast_2d(P)), -np.inf))
    fm, model, meas, samples = _synthetic_setup()
    cs = select_candidates(model, meas, "KL", samples, WorkModel(1.0), 3, fm.lower, fm.upper, seed=0)
    assert len(cs) == 0 and cs.points.shape == (0, 2)
    with pytest.raises(ValueError):
        select_candidates(model, meas, "KL", samples, WorkModel(1.0), 0, fm.lower, fm.upper)


def test_candidate_values_overflow_to_inf():
    cs = CandidateSet(np.zeros((2, 1)), np.array([1.0, 1000.0]))
    assert cs.values[0] == pytest.approx(np.e) and np.isinf(cs.values[1])


def test_frozen_objective_gradient():
    fm, model, meas, samples = _synthetic_setup(1)
    pts = np.vstack([model.data.points, [[0.1, -0.2]]])
    obj = FrozenMeanObjective(model, pts, meas, "L2", samples[:50], WorkModel(1.5))
    w = np.full(len(pts), 30.0)
    f, g = obj(w)
    for i in range(len(pts)):
        e = np.zeros(len(pts))
        e[i] = 1e-4 * w[i]
        fd = (obj.value(w + e) - obj.value(w - e)) / (2 * e[i])
        assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_frozen_objective_matches_direct_fit():
    fm, model, meas, samples = _synthetic_setup(2)
    pts = np.vstack([model.data.points, [[0.3, 0.3]]])
    wm = WorkModel(1.0)
    w = np.append(wm.work_of_tol(model.data.tolerances), 0.0)
    obj = FrozenMeanObjective(model, pts, meas, "KL", samples, wm)
    mean, var = model.predict_batch(samples)
    var_obj, _ = obj.variances(w)
    np.testing.assert_allclose(var_obj, var, rtol=1e-8, atol=1e-14)


def test_zero_budget_keeps_design():
    fm, model, meas, samples = _synthetic_setup()
    cands = np.array([[0.2, 0.2], [-0.3, 0.1]])
    tv = optimize_tolerances(model.data.design, cands, 0.0, model, meas, "KL", samples, WorkModel(1.0), 0.05)
    np.testing.assert_array_equal(tv.old, model.data.tolerances)
    assert np.all(np.isinf(tv.candidates))
    assert tv.objective == tv.objective_noop


def test_single_candidate_gets_whole_budget():
    wm = WorkModel(1.0)
    model = fit(Kernel([0.3], [1.0]), TrainingData(Design.empty(1), np.zeros((0, 1))))
    samples = np.random.default_rng(0).uniform(-0.3, 0.3, (50, 1))
    tv = optimize_tolerances(Design.empty(1), np.array([[0.0]]), 40.0, model, Measurement([0.1], 0.5), "KL",
                             samples, wm, 0.05)
    assert tv.n_old == 0
    assert tv.candidates[0] == pytest.approx(wm.tol_of_work(40.0), rel=1e-6)
    assert tv.objective < tv.objective_noop


@pytest.mark.parametrize("kind", ["KL", "L2"])
def test_budget_respected_and_refinement(kind):
    fm, model, meas, samples = _synthetic_setup(3)
    wm = WorkModel(2.0)
    budget = 3 * wm.work_of_tol(0.05)
    cands = np.array([[0.2, 0.2], [-0.3, 0.1], [0.0, -0.4]])
    tv = optimize_tolerances(model.data.design, cands, budget, model, meas, kind, samples, wm, 0.05, seed=1)
    spent = wm.work_of_tol(tv.values).sum() - wm.work_of_tol(model.data.tolerances).sum()
    assert spent <= budget + 1e-9
    assert np.all(tv.old <= model.data.tolerances)
    assert tv.objective <= tv.objective_noop


def test_optimizer_against_grid_oracle():
    gap, overspend = tolerance_oracle_suite(n=5)
    assert gap.passed, gap.line()
    assert overspend.passed, overspend.line()


def _data():
    return TrainingData(Design([[0.0, 0.0], [0.2, 0.1]], [0.05, 0.05]), np.zeros((2, 3)))


def test_apply_update_noop():
    ev = SimulatedEvaluator(make_model("synthetic2d"), 0)
    data = _data()
    tv = ToleranceVector(np.array([0.05, 0.05, np.inf]), 2, 0.0, 0.0)
    out, n = apply_design_update(data, tv, np.array([[0.3, 0.3]]), ev)
    assert n == 0 and ev.n_evaluations == 0
    np.testing.assert_array_equal(out.values, data.values)


def test_apply_update_adds_candidate():
    ev = SimulatedEvaluator(make_model("synthetic2d"), 0)
    tv = ToleranceVector(np.array([0.05, 0.05, 0.02]), 2, 0.0, 0.0)
    out, n = apply_design_update(_data(), tv, np.array([[0.3, 0.3]]), ev)
    assert n == 1 and len(out) == 3
    assert out.tolerances[-1] == 0.02


def test_apply_update_refines_in_place():
    ev = SimulatedEvaluator(make_model("synthetic2d"), 0)
    tv = ToleranceVector(np.array([0.05, 0.01, np.inf]), 2, 0.0, 0.0)
    out, n = apply_design_update(_data(), tv, np.array([[0.3, 0.3]]), ev)
    assert n == 1 and len(out) == 2
    np.testing.assert_array_equal(out.tolerances, [0.05, 0.01])
    np.testing.assert_array_equal(out.values[0], 0.0)
    assert np.all(out.values[1] != 0.0)
