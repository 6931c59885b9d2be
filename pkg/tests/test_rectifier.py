import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import forler.rectifier as rect
from forler.approximator import ApproximatorParams, LayerSpec, forward
from forler.losses import CriticPair, min_q
from forler.rectifier import (RectifiedCache, RectifierConfig, distribution_update, full_search, periodic_rectify,
                              softmax_weights)
from helpers import critic_pair, net


def test_softmax_examples():
    assert np.allclose(softmax_weights(np.full(5, 0.3), 2.0), 0.2)
    assert np.allclose(softmax_weights([0.0, np.log(3)], 1.0), [0.25, 0.75], atol=1e-15)
    assert np.allclose(softmax_weights([10.0, 10 + np.log(3)], 1.0), [0.25, 0.75], atol=1e-12)
    with pytest.raises(ValueError):
        softmax_weights([], 1.0)


@settings(max_examples=100, deadline=None)
@given(q=st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40), beta=st.floats(0.01, 50),
       shift=st.floats(-1e3, 1e3))
def test_softmax_sums_to_one_and_is_shift_invariant(q, beta, shift):
    w = softmax_weights(q, beta)
    assert np.all(w >= 0)
    assert abs(w.sum() - 1.0) <= 1e-12
    assert np.allclose(softmax_weights(np.asarray(q) + shift, beta), w, atol=1e-9)


def test_distribution_update_examples():
    d = distribution_update([0.0, 2.0], [0.5, 0.5])
    assert d.mean[0] == pytest.approx(1.0) and d.std == pytest.approx(1.0)
    d = distribution_update([[0.4, -0.2]], [1.0])
    assert np.array_equal(d.mean, [0.4, -0.2]) and d.std == 0.0
    d = distribution_update([[1.0, 2.0], [3.0, 4.0]], [1.0, 0.0])
    assert np.array_equal(d.mean, [1.0, 2.0]) and d.std == 0.0
    with pytest.raises(ValueError):
        distribution_update([[1.0], [2.0]], [1.0])


def test_uniform_weights_give_plain_mean_and_rms():
    rng = np.random.default_rng(0)
    cand = rng.normal(size=(9, 3))
    d = distribution_update(cand, np.full(9, 1 / 9))
    mean = cand.mean(axis=0)
    assert np.allclose(d.mean, mean, atol=1e-14)
    assert d.std == pytest.approx(np.sqrt(np.mean(np.sum((cand - mean) ** 2, axis=1))), rel=1e-12)


def constant_pair(value, n_in):
    p = ApproximatorParams((LayerSpec(n_in, 1, "identity"),), np.r_[np.zeros(n_in), value])
    return CriticPair.from_online(p, p)


def test_constant_critic_keeps_actor_action():
    rng = np.random.default_rng(1)
    actor = net(rng, 3, 2, out_act="tanh")
    states = rng.normal(size=(8, 3))
    out, used = full_search(constant_pair(1.5, 5), states, actor, RectifierConfig(population=16, iterations=3), rng)
    assert np.array_equal(out, forward(actor, states))
    assert used == 8 * (3 * 16 + 1)


def test_planted_quadratic_is_found(monkeypatch):
    monkeypatch.setattr(rect, "_score", lambda pair, s, a: -np.sum((a - 0.7) ** 2, axis=1))
    rng = np.random.default_rng(2)
    actor = net(rng, 2, 1, out_act="tanh", scale=0.01)
    out, _ = full_search(None, rng.normal(size=(20, 2)), actor, RectifierConfig(population=64, iterations=10), rng)
    assert np.max(np.abs(out - 0.7)) < 0.05


def bump_pair(centre, width=0.2, k=8.0):
    # Q(s, a) = tanh(k(a - c + w)) - tanh(k(a - c - w)): symmetric bump with its maximum at a = c
    W1 = np.array([[0.0, k], [0.0, k]])
    b1 = np.array([k * (width - centre), -k * (width + centre)])
    p = ApproximatorParams((LayerSpec(2, 2, "tanh"), LayerSpec(2, 1, "identity")),
                           np.r_[W1.ravel(), b1, 1.0, -1.0, 0.0])
    return CriticPair.from_online(p, p)


def test_bump_network_argmax_is_found():
    rng = np.random.default_rng(3)
    actor = net(rng, 1, 1, out_act="tanh", scale=0.01)
    states = rng.normal(size=(10, 1))
    out, _ = full_search(bump_pair(0.7), states, actor, RectifierConfig(population=64, iterations=10), rng)
    assert np.max(np.abs(out - 0.7)) < 0.05


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), N=st.integers(1, 12), I=st.integers(1, 4))
def test_rectified_q_never_below_actor_q(seed, N, I):
    rng = np.random.default_rng(seed)
    pair = critic_pair(rng, 5)
    actor = net(rng, 3, 2, out_act="tanh")
    states = rng.normal(size=(6, 3))
    out, used = full_search(pair, states, actor, RectifierConfig(population=N, iterations=I), rng)
    assert used == 6 * (I * N + 1)
    assert np.all(min_q(pair.heads, states, out) >= min_q(pair.heads, states, forward(actor, states)))
    assert np.all(np.abs(out) <= 1.0)


def test_delta_one_matches_full_search_every_step():
    rng = np.random.default_rng(4)
    pair = critic_pair(rng, 5)
    actor = net(rng, 3, 2, out_act="tanh")
    states = rng.normal(size=(5, 3))
    cfg = RectifierConfig(population=8, iterations=2, delta=1)
    cache = RectifiedCache()
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    for tau in range(4):
        got = periodic_rectify(cache, tau, pair, states, actor, cfg, r1)
        want, _ = full_search(pair, states, actor, cfg, r2)
        assert np.array_equal(got, want)
    assert cache.n_full_searches == 4


def test_cache_step_picks_higher_scoring_action(monkeypatch):
    states = np.zeros((1, 1))
    actor = ApproximatorParams((LayerSpec(1, 1, "identity"),), np.array([0.0, 0.3]))  # always 0.3
    cache = RectifiedCache(actions=np.array([[-0.5]]))
    # cached scores 0.9, actor scores 1.1
    monkeypatch.setattr(rect, "_score", lambda pair, s, a: np.where(a[:, 0] > 0, 1.1, 0.9))
    out = periodic_rectify(cache, 3, None, states, actor, RectifierConfig(delta=2), np.random.default_rng(0))
    assert np.allclose(out, [[0.3]])
    assert cache.q_eval_count == 2


def test_tau_zero_always_full_search():
    rng = np.random.default_rng(5)
    cache = RectifiedCache()
    periodic_rectify(cache, 0, critic_pair(rng, 5), rng.normal(size=(4, 3)), net(rng, 3, 2, out_act="tanh"),
                     RectifierConfig(population=4, iterations=2, delta=7), rng)
    assert cache.n_full_searches == 1 and cache.q_eval_count == 4 * (2 * 4 + 1)


def test_cache_row_mismatch_raises():
    rng = np.random.default_rng(6)
    pair = critic_pair(rng, 5)
    actor = net(rng, 3, 2, out_act="tanh")
    cfg = RectifierConfig(population=4, iterations=1, delta=3)
    cache = RectifiedCache()
    periodic_rectify(cache, 0, pair, rng.normal(size=(4, 3)), actor, cfg, rng)
    with pytest.raises(ValueError):
        periodic_rectify(cache, 1, pair, rng.normal(size=(5, 3)), actor, cfg, rng)


def full_search_evals(delta, steps=40, B=4, N=8, I=3):
    rng = np.random.default_rng(7)
    pair = critic_pair(rng, 5)
    actor = net(rng, 3, 2, out_act="tanh")
    cfg = RectifierConfig(population=N, iterations=I, delta=delta)
    cache = RectifiedCache()
    states = rng.normal(size=(B, 3))
    for tau in range(steps):
        if tau % delta == 0:
            states = rng.normal(size=(B, 3))  # minibatch refresh aligned with delta
        periodic_rectify(cache, tau, pair, states, actor, cfg, rng)
    return cache


@pytest.mark.parametrize("delta", [1, 2, 3, 5, 7])
def test_full_search_eval_count(delta):
    cache = full_search_evals(delta)
    assert cache.full_search_evals == -(-40 // delta) * (3 * 8 + 1) * 4
    non_refresh = 40 - -(-40 // delta)
    assert cache.q_eval_count == cache.full_search_evals + 2 * 4 * non_refresh


def test_delta_five_saves_a_factor_of_five():
    assert full_search_evals(5).full_search_evals <= (1 / 5 + 1e-9) * full_search_evals(1).full_search_evals


def test_config_validation():
    for bad in (dict(population=0), dict(iterations=0), dict(delta=0), dict(beta_w=0.0), dict(init_std=-1.0)):
        with pytest.raises(ValueError):
            RectifierConfig(**bad)
