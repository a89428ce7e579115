"""Tests for the weighted ensemble: fusion, weight updates, switching and shutdown."""

import math
from dataclasses import replace

import numpy as np
import pytest

import core.ensemble as ensemble_module
from adapters.streams import gen_stream
from core.ensemble import (
    UNDERFLOW_LOSS,
    EnsembleState,
    EnsembleStateError,
    build_ensemble,
    correct,
    predict,
    predict_weights_switching,
    regret_accumulators,
    step,
    update_weights,
)
from core.expert import fresh_expert, predict_gauss
from core.kernels import make_rng, phi
from core.models import KernelSpec, StreamSpec


def _run(state, stream):
    return [step(state, x, y) for x, y in stream]


def test_single_expert_ensemble_matches_expert(rbf_spec):
    state = build_ensemble([rbf_spec], n_rf=30, seed=0)
    expert = state.experts[0]
    prediction = predict(state, [0.3])
    moments = predict_gauss(expert, [0.3])
    assert prediction.mean == moments.mean
    assert prediction.variance == moments.variance


def test_two_expert_mixture_moments(rbf_spec, rbf_map):
    f = phi(rbf_map, [0.3])
    low = replace(fresh_expert(rbf_spec, rbf_map), mean=-f)
    high = replace(fresh_expert(rbf_spec, rbf_map), mean=f)
    state = EnsembleState(experts=[low, high], log_weights=np.log([0.5, 0.5]))
    prediction = predict(state, [0.3])
    assert prediction.per_expert[0].mean == pytest.approx(-1.0, abs=1e-12)
    assert prediction.mean == pytest.approx(0.0, abs=1e-12)
    assert prediction.variance == pytest.approx(2.01, abs=1e-9)


def test_zero_weight_expert_is_ignored(rbf_spec, rbf_map):
    f = phi(rbf_map, [0.3])
    kept = replace(fresh_expert(rbf_spec, rbf_map), mean=f)
    other = replace(fresh_expert(rbf_spec, rbf_map), mean=-f)
    state = EnsembleState(experts=[kept, other], log_weights=np.array([0.0, -np.inf]))
    prediction = predict(state, [0.3])
    moments = predict_gauss(kept, [0.3])
    assert prediction.mean == pytest.approx(moments.mean, abs=1e-15)
    assert prediction.variance == pytest.approx(moments.variance, abs=1e-15)


def test_switching_prediction_arithmetic():
    assert np.allclose(predict_weights_switching([1.0, 0.0], 0.9), [0.9, 0.1])
    assert np.allclose(predict_weights_switching([0.25] * 4, 0.7), [0.25] * 4)
    assert np.array_equal(predict_weights_switching([0.3, 0.7], 1.0), [0.3, 0.7])
    assert np.array_equal(predict_weights_switching([1.0], 0.5), [1.0])
    with pytest.raises(ValueError):
        predict_weights_switching([0.5, 0.5], 1.5)


def test_bayesian_weight_update():
    weights, loss = update_weights([0.5, 0.5], -np.log([0.2, 0.1]))
    assert np.allclose(weights, [2.0 / 3.0, 1.0 / 3.0])
    assert loss == pytest.approx(-math.log(0.15))

    unchanged, _ = update_weights([0.2, 0.8], [1.3, 1.3])
    assert np.allclose(unchanged, [0.2, 0.8])


def test_ensemble_loss_between_expert_losses(rbf_dictionary):
    state = build_ensemble(rbf_dictionary, n_rf=20, seed=1)
    _, loss = correct(state, [0.4], 0.9)
    _, per_expert = regret_accumulators(state)
    assert per_expert.min() <= loss <= per_expert.max()


def test_repeated_predict_returns_staged_prediction(rbf_dictionary):
    state = build_ensemble(rbf_dictionary, n_rf=20, seed=1, mode="switching_dynamic", drift=0.01)
    first = predict(state, [0.4])
    assert predict(state, [0.4]) is first
    correct(state, [0.4], 0.2)
    assert state.t == 1
    assert predict(state, [0.4]) is not first


def test_weight_identity_over_stream(rbf_dictionary):
    """Σ ensemble loss - Σ expert loss = log M + log w_T for every surviving expert."""
    stream = gen_stream(StreamSpec(kind="sin_mix", T=500, noise=0.01, seed=2))
    state = build_ensemble(rbf_dictionary, n_rf=50, seed=0)
    _run(state, stream)
    cum_loss, cum_expert = regret_accumulators(state)
    for m in np.flatnonzero(state.active):
        identity = cum_loss - cum_expert[m] - math.log(state.size) - state.log_weights[m]
        assert identity == pytest.approx(0.0, abs=1e-8)


def test_mixture_loss_bound_without_shutdown(rbf_dictionary, sin_mix_spec):
    state = build_ensemble(rbf_dictionary, n_rf=30, seed=0, shutdown_threshold=0.0)
    _run(state, gen_stream(sin_mix_spec))
    cum_loss, cum_expert = regret_accumulators(state)
    assert cum_loss <= cum_expert.min() + math.log(state.size) + 1e-9


def test_switching_with_unit_stay_probability_equals_static(rbf_dictionary, sin_mix_spec):
    stream = gen_stream(sin_mix_spec)
    static = build_ensemble(rbf_dictionary, n_rf=20, seed=4, shutdown_threshold=0.0)
    switching = build_ensemble(rbf_dictionary, n_rf=20, seed=4, mode="switching", q0=1.0)
    a, b = _run(static, stream), _run(switching, stream)
    assert [r.loss for r in a] == [r.loss for r in b]
    assert np.array_equal(static.log_weights, switching.log_weights)


def test_switching_keeps_weights_positive(rbf_dictionary, sin_mix_spec):
    state = build_ensemble(rbf_dictionary, n_rf=20, seed=4, mode="switching", q0=0.99)
    records = _run(state, gen_stream(sin_mix_spec))
    assert all(min(r.weights) > 0.0 for r in records)
    assert state.weights.sum() == pytest.approx(1.0)
    assert state.active.all()


def test_dynamic_mode_applies_drift_before_predicting(rbf_spec):
    state = build_ensemble([rbf_spec], n_rf=30, seed=0, mode="dynamic", drift=0.001)
    assert predict(state, [0.1]).variance == pytest.approx(1.011, abs=1e-9)


def test_poor_expert_is_shut_down_and_frozen():
    good = KernelSpec(family="rbf", lengthscale=1.0)
    bad = KernelSpec(family="rbf", lengthscale=0.001)
    state = build_ensemble([good, bad], n_rf=50, seed=0)
    rng = make_rng(5)
    X = rng.standard_normal((300, 1))
    y_all = np.sin(X[:, 0]) + 0.1 * rng.standard_normal(300)

    shut_at = None
    for x, y in zip(X, y_all):
        step(state, x, y)
        if shut_at is None and not state.active[1]:
            shut_at = state.t
            frozen_counts = state.update_counts.copy()
            frozen_loss = state.cum_expert_loss[1]
            frozen_mean = state.experts[1].mean.copy()
    assert shut_at is not None and shut_at < 300
    assert state.update_counts[1] == frozen_counts[1]
    assert state.update_counts[0] == 300
    assert state.cum_expert_loss[1] == frozen_loss
    assert np.array_equal(state.experts[1].mean, frozen_mean)
    assert state.weights[1] == 0.0
    assert state.weights[0] == pytest.approx(1.0)


def test_predict_without_active_experts_fails(rbf_dictionary):
    state = build_ensemble(rbf_dictionary, n_rf=10, seed=0)
    state.active[:] = False
    with pytest.raises(EnsembleStateError):
        predict(state, [0.0])


def test_all_likelihoods_underflow(rbf_dictionary, monkeypatch):
    state = build_ensemble(rbf_dictionary, n_rf=10, seed=0)
    before = state.log_weights.copy()
    monkeypatch.setattr(ensemble_module, "_correct_expert", lambda expert, x, y: (expert, math.inf))
    _, loss = correct(state, [0.0], 1.0)
    assert loss == UNDERFLOW_LOSS
    assert np.array_equal(state.log_weights, before)


def test_worker_threads_do_not_change_results(rbf_dictionary, sin_mix_spec):
    stream = gen_stream(sin_mix_spec)
    serial = build_ensemble(rbf_dictionary, n_rf=20, seed=3, mode="switching")
    threaded = build_ensemble(rbf_dictionary, n_rf=20, seed=3, mode="switching", workers=3)
    assert [r.loss for r in _run(serial, stream)] == [r.loss for r in _run(threaded, stream)]
    assert serial.pool is None


def test_worker_pool_is_reused_across_steps(rbf_dictionary, sin_mix_spec):
    state = build_ensemble(rbf_dictionary, n_rf=10, seed=0, workers=2)
    pool = state.pool
    assert pool is not None
    _run(state, gen_stream(sin_mix_spec.model_copy(update={"T": 20})))
    assert state.pool is pool
    state.close()
    assert state._pool is None


def test_classification_ensemble_weights(rbf_dictionary):
    stream = gen_stream(StreamSpec(kind="two_gaussians", T=200, seed=1))
    state = build_ensemble(rbf_dictionary, n_rf=15, seed=0, likelihood="logistic")
    records = _run(state, stream)
    assert all(0.0 <= r.mean <= 1.0 for r in records)
    assert state.weights.sum() == pytest.approx(1.0)


def test_identifies_generating_kernel():
    """On an exact GP draw from the l=1 RBF, the l=1 expert takes the weight."""
    dictionary = [KernelSpec(family="rbf", lengthscale=10.0**k) for k in range(-2, 3)]
    stream = gen_stream(StreamSpec(kind="gp_draw", T=500, noise=0.01, kernel=KernelSpec(lengthscale=1.0), seed=21))

    state = build_ensemble(dictionary, n_rf=50, seed=0)
    _run(state, stream)
    assert state.weights[2] > 0.9
