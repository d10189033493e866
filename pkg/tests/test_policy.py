import numpy as np
import pytest
from hypothesis import given, strategies as st

from imas2.policy import (PolicyCollapseError, PolicyDescriptor, PolicyParams, RecurrentPolicy,
                          batch_logprob_grad, history_distribution, init_params, initial_state,
                          load_checkpoint, logprob_and_grad, record_action, save_checkpoint, step,
                          zero_params)

from _models import fd_relative_error, random_history

DESC = PolicyDescriptor(n_obs=3, n_actions=4, hidden=5)


def test_init_is_deterministic_per_seed():
    a, b = init_params(DESC, 7), init_params(DESC, 7)
    np.testing.assert_array_equal(a.vector, b.vector)
    assert not np.array_equal(a.vector, init_params(DESC, 8).vector)
    assert np.all(np.abs(a.vector) <= 0.1)


@pytest.mark.parametrize("kw", [dict(hidden=0), dict(n_obs=0), dict(n_actions=0)])
def test_non_positive_sizes_are_rejected(kw):
    with pytest.raises(ValueError):
        PolicyDescriptor(**{**dict(n_obs=2, n_actions=2, hidden=3), **kw})


def test_layout_covers_vector_once():
    seen = np.zeros(DESC.size, dtype=int)
    for sl, shape in DESC.layout().values():
        assert sl.stop - sl.start == int(np.prod(shape))
        seen[sl] += 1
    assert np.all(seen == 1)


def test_zero_params_give_uniform_actions():
    pi, _ = step(zero_params(DESC), initial_state(DESC), 1)
    np.testing.assert_array_equal(pi, np.full(4, 0.25))


def test_step_is_pure():
    p = init_params(DESC, 1)
    s = record_action(step(p, initial_state(DESC), 2)[1], 3)
    a, sa = step(p, s, 0)
    b, sb = step(p, s, 0)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(sa.hidden, sb.hidden)
    assert abs(a.sum() - 1) <= 1e-12


def test_unrolled_steps_match_history_replay():
    p = init_params(DESC, 2, scale=1.0)
    rng = np.random.default_rng(0)
    h = random_history(rng, 3, 4, 4)
    state = initial_state(DESC)
    for t in range(0, len(h), 2):
        pi, state = step(p, state, h[t])
        np.testing.assert_array_equal(pi, history_distribution(p, h[:t + 1]))
        if t + 1 < len(h):
            state = record_action(state, h[t + 1])


def test_recurrent_policy_batch_path_matches_replay():
    p = init_params(DESC, 3, scale=1.0)
    pol = RecurrentPolicy(p, floor=1e-3)
    rng = np.random.default_rng(1)
    hists = [random_history(rng, 3, 4, 3) for _ in range(6)]
    carry = pol.start(len(hists))
    prev = None
    for t in range(4):
        obs = np.array([h[2 * t] for h in hists])
        pi, carry = pol.probs(carry, obs, prev)
        for m, h in enumerate(hists):
            np.testing.assert_allclose(pi[m], pol.action_probs(h[:2 * t + 1]), atol=1e-15)
        prev = np.array([h[2 * t + 1] for h in hists]) if t < 3 else None


def test_unknown_observation_is_rejected():
    with pytest.raises(ValueError):
        step(zero_params(DESC), initial_state(DESC), 3)
    with pytest.raises(ValueError):
        logprob_and_grad(zero_params(DESC), (0, 1, 5, 0, 1))


def test_zero_params_logprob_and_readout_bias_gradient():
    h = (0, 2, 1, 0, 2, 2, 1)
    n_actions = 3
    logp, g = logprob_and_grad(zero_params(DESC), h)
    assert logp == pytest.approx(n_actions * np.log(0.25), abs=1e-12)
    sl, _ = DESC.layout()["b_o"]
    want = sum(np.eye(4)[a] - 0.25 for a in h[1::2])
    np.testing.assert_allclose(g[sl], want, atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 1e-3]), st.booleans())
def test_gradient_matches_finite_differences(seed, floor, feed):
    rng = np.random.default_rng(seed)
    d = PolicyDescriptor(int(rng.integers(1, 4)), int(rng.integers(2, 5)), int(rng.integers(1, 6)), feed)
    p = init_params(d, seed, scale=1.0)
    h = random_history(rng, d.n_obs, d.n_actions, 3)
    assert fd_relative_error(p, h, floor) <= 1e-4


@given(st.integers(0, 2**32 - 1))
def test_expected_score_is_zero_per_step(seed):
    rng = np.random.default_rng(seed)
    p = init_params(DESC, seed, scale=1.0)
    prefix = random_history(rng, 3, 4, 2)
    pi = history_distribution(p, prefix)
    total = np.zeros(DESC.size)
    # score of the last action alone: full gradient minus the gradient of the earlier actions
    _, g0 = logprob_and_grad(p, prefix[:-1])
    for a in range(4):
        _, g = logprob_and_grad(p, prefix + (a, 0))
        total += pi[a] * (g - g0)
    assert np.max(np.abs(total)) <= 1e-9


@given(st.integers(0, 2**32 - 1))
def test_likelihood_is_product_of_step_probabilities(seed):
    rng = np.random.default_rng(seed)
    p = init_params(DESC, seed, scale=1.0)
    h = random_history(rng, 3, 4, 4)
    logp, _ = logprob_and_grad(p, h, floor=1e-3)
    prod = 1.0
    for t in range(1, len(h), 2):
        prod *= history_distribution(p, h[:t], floor=1e-3)[h[t]]
    assert np.exp(logp) == pytest.approx(prod, rel=1e-12)


def test_batch_gradient_is_weighted_sum_of_single_gradients():
    rng = np.random.default_rng(4)
    p = init_params(DESC, 4, scale=0.5)
    hists = [random_history(rng, 3, 4, 3) for _ in range(5)]
    w = rng.normal(size=5)
    obs = np.array([h[0::2] for h in hists])
    acts = np.array([h[1::2] for h in hists])
    logp, g = batch_logprob_grad(p, obs, acts, w, floor=1e-3)
    want = sum(wi * logprob_and_grad(p, h, 1e-3)[1] for wi, h in zip(w, hists))
    np.testing.assert_allclose(g, want, atol=1e-12)
    np.testing.assert_allclose(logp, [logprob_and_grad(p, h, 1e-3)[0] for h in hists], atol=1e-12)


def test_zero_probability_action_signals_collapse():
    d = PolicyDescriptor(1, 2, 1)
    v = np.zeros(d.size)
    v[d.layout()["b_o"][0]] = [1000.0, -1000.0]
    with pytest.raises(PolicyCollapseError):
        logprob_and_grad(PolicyParams(d, v), (0, 1, 0))
    # the exploration floor keeps the same history finite
    logp, _ = logprob_and_grad(PolicyParams(d, v), (0, 1, 0), floor=1e-3)
    assert np.isfinite(logp)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    p = init_params(PolicyDescriptor(2, 4, 7, feed_actions=False), 9)
    save_checkpoint(tmp_path / "c.json", p, 1e-3, agent=3)
    q, floor = load_checkpoint(tmp_path / "c.json")
    assert q.descriptor == p.descriptor and floor == 1e-3
    assert q.vector.tobytes() == p.vector.tobytes()


def test_non_finite_parameters_are_rejected():
    with pytest.raises(ValueError):
        PolicyParams(DESC, np.full(DESC.size, np.nan))
