import numpy as np
import pytest
from hypothesis import given, strategies as st

from agp.gp_core import (
    DegenerateDataWarning,
    Design,
    FitError,
    Kernel,
    TrainingData,
    default_kernel,
    dvariance_dtol,
    fit,
    mean_pred_std,
    merge_duplicates,
    penalized_log_marginal_likelihood,
    tune_hyperparameters,
)
from agp.verification import _dense_predict, dvar_dtol_check, random_gp


def test_kernel_values():
    k = Kernel([1.0], [1.0])
    assert k([0.0], [1.0])[0, 0] == pytest.approx(np.exp(-1.0))
    assert k([0.0], [1.0])[0, 0] == pytest.approx(0.367879, abs=1e-6)
    k2 = Kernel([0.3, 0.5], [2.0, 3.0])
    np.testing.assert_allclose(k2([0.1, 0.2], [0.1, 0.2]), np.diag([2.0, 3.0]), rtol=1e-14)
    np.testing.assert_array_equal(k2([0.0, 0.0], [100.0, 0.0]), np.zeros((2, 2)))


def test_kernel_validation():
    with pytest.raises(ValueError):
        Kernel([0.0], [1.0])
    with pytest.raises(ValueError):
        Kernel([1.0], [-1.0])


def test_empty_design_is_prior():
    k = Kernel([0.5, 0.5], [2.0, 0.5])
    model = fit(k, TrainingData(Design.empty(2), np.zeros((0, 2))))
    mean, var = model.predict_batch(np.random.default_rng(0).uniform(-1, 1, (5, 2)))
    np.testing.assert_array_equal(mean, 0.0)
    np.testing.assert_array_equal(var, np.tile([2.0, 0.5], (5, 1)))
    assert mean_pred_std(fit(Kernel([1.0], [1.0, 1.0]), TrainingData(Design.empty(1), np.zeros((0, 2)))), [0.0]) == 1.0


def test_noiseless_interpolation():
    k = Kernel([0.4], [1.0])
    data = TrainingData(Design([[0.2]], [1e-8]), [[0.7]])
    pred = fit(k, data).predict([0.2])
    assert pred.mean[0] == pytest.approx(0.7, rel=1e-8)
    assert pred.variance[0] < 1e-10


def test_far_point_recovers_prior(rng):
    kernel, data = random_gp(rng, d=2, m=2, s=5)
    pred = fit(kernel, data).predict([50.0, 50.0])
    np.testing.assert_allclose(pred.mean, 0.0, atol=1e-300)
    np.testing.assert_allclose(pred.variance, kernel.variances)


@given(st.integers(0, 10_000))
def test_predict_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    kernel, data = random_gp(rng)
    P = rng.uniform(-1, 1, (4, data.design.dim))
    mean, var = fit(kernel, data).predict_batch(P)
    m0, v0 = _dense_predict(kernel, data, P)
    assert np.max(np.abs(mean - m0)) <= 1e-10 * np.max(np.abs(m0))
    assert np.max(np.abs(var - v0) / v0) <= 1e-10


def test_predict_single_matches_batch(rng):
    kernel, data = random_gp(rng, d=3, m=2, s=6)
    model = fit(kernel, data)
    p = rng.uniform(-1, 1, 3)
    pred = model.predict(p)
    mean, var = model.predict_batch(p[None])
    np.testing.assert_allclose(pred.mean, mean[0])
    np.testing.assert_allclose(pred.variance, var[0])


@given(st.integers(0, 10_000))
def test_dvariance_dtol_matches_finite_differences(seed):
    assert dvar_dtol_check(np.random.default_rng(seed)) <= 1e-5


@given(st.integers(0, 10_000))
def test_variance_nondecreasing_in_tolerance(seed):
    rng = np.random.default_rng(seed)
    kernel, data = random_gp(rng)
    model = fit(kernel, data)
    i = int(rng.integers(len(data)))
    p = rng.uniform(-1, 1, data.design.dim)
    assert np.all(np.diag(dvariance_dtol(model, p, i)) >= 0)
    tol = data.tolerances.copy()
    tol[i] *= 2
    bigger = fit(kernel, TrainingData(Design(data.points, tol), data.values))
    assert np.all(bigger.predict_batch(p[None])[1] >= model.predict_batch(p[None])[1] - 1e-12)


def test_dvariance_dtol_vanishes_far_away(rng):
    kernel, data = random_gp(rng, d=2, m=1, s=3)
    np.testing.assert_array_equal(dvariance_dtol(fit(kernel, data), [40.0, 40.0], 0), 0.0)
    with pytest.raises(IndexError):
        dvariance_dtol(fit(kernel, data), [0.0, 0.0], 3)


def test_duplicates_merge_keeps_smaller_tolerance():
    data = TrainingData(Design([[0.0], [1e-12], [0.5]], [0.1, 0.01, 0.1]), [[1.0], [2.0], [3.0]])
    merged = merge_duplicates(data)
    assert len(merged) == 2
    np.testing.assert_array_equal(merged.tolerances, [0.01, 0.1])
    np.testing.assert_array_equal(merged.values[:, 0], [2.0, 3.0])


def test_exact_duplicates_fit_through_jitter():
    data = TrainingData(Design([[0.0], [0.0], [0.3]], [1e-12, 1e-12, 0.1]), [[1.0], [1.0], [0.5]])
    pred = fit(Kernel([0.5], [1.0]), data).predict([0.0])
    assert pred.mean[0] == pytest.approx(1.0, abs=1e-4)


def test_unfactorizable_system_raises_fit_error(monkeypatch):
    import agp.gp_core as gc

    def refuse(*args, **kwargs):
        raise gc.linalg.LinAlgError("not positive definite")

    monkeypatch.setattr(gc.linalg, "cho_factor", refuse)
    data = TrainingData(Design([[0.0], [0.5]], [0.1, 0.1]), [[1.0], [2.0]])
    with pytest.raises(FitError, match="condition number"):
        fit(Kernel([0.5], [1.0]), data)


def _sample_gp(rng, n, ell, noise):
    X = rng.uniform(-1, 1, (n, 1))
    K = np.exp(-((X - X.T) / ell) ** 2) + 1e-10 * np.eye(n)
    y = np.linalg.cholesky(K) @ rng.standard_normal(n) + noise * rng.standard_normal(n)
    return TrainingData(Design(X, np.full(n, noise)), y[:, None])


def test_known_lengthscale_recovered():
    rng = np.random.default_rng(4)
    data = _sample_gp(rng, 40, 0.3, 1e-3)
    k = tune_hyperparameters(data, default_kernel(data, [-1.0], [1.0]), n_iter=400)
    assert 0.15 <= k.lengthscales[0] <= 0.6


@given(st.integers(0, 10_000))
def test_tuning_never_decreases_objective(seed):
    rng = np.random.default_rng(seed)
    kernel, data = random_gp(rng, s=int(rng.integers(2, 9)))
    tuned = tune_hyperparameters(data, kernel, n_iter=30)
    assert penalized_log_marginal_likelihood(tuned, data) >= penalized_log_marginal_likelihood(kernel, data)


def test_output_scaling_scales_variance_quadratically():
    rng = np.random.default_rng(5)
    data = _sample_gp(rng, 25, 0.4, 1e-2)
    k1 = tune_hyperparameters(data, default_kernel(data, [-1.0], [1.0]), n_iter=600, lr=0.02)
    c = 3.0
    scaled = TrainingData(Design(data.points, c * data.tolerances), c * data.values)
    init = Kernel(k1.lengthscales, c**2 * k1.variances)
    k2 = tune_hyperparameters(scaled, init, n_iter=600, lr=0.02)
    assert k2.variances[0] / k1.variances[0] == pytest.approx(c**2, rel=0.02)
    assert k2.lengthscales[0] == pytest.approx(k1.lengthscales[0], rel=0.02)


def test_lengthscale_floor_respected():
    data = TrainingData(Design([[-0.4], [0.1], [0.45]], [0.05] * 3), [[0.3], [-0.2], [0.1]])
    k = tune_hyperparameters(data, Kernel([0.5], [0.1]), min_lengthscale=0.2)
    assert k.lengthscales[0] >= 0.2 * (1 - 1e-12)


def test_degenerate_data_warns():
    data = TrainingData(Design([[0.1]], [0.05]), [[1.0]])
    init = Kernel([0.3], [1.0])
    with pytest.warns(DegenerateDataWarning):
        assert tune_hyperparameters(data, init) is init


def test_serialization_roundtrip(rng):
    kernel, data = random_gp(rng)
    assert Kernel.from_dict(kernel.to_dict()).to_dict() == kernel.to_dict()
    back = TrainingData.from_dict(data.to_dict())
    np.testing.assert_array_equal(back.values, data.values)
    np.testing.assert_array_equal(back.tolerances, data.tolerances)


def test_design_validation():
    with pytest.raises(ValueError):
        Design([[0.0], [1.0]], [0.1])
    with pytest.raises(ValueError):
        Design([[0.0]], [0.0])
