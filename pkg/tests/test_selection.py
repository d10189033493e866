import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imas2.inference import conditional_mi, exact_conditional_entropy, exact_joint, prior_entropy
from imas2.model import FactoredDecPomdp, FixedPolicySet, UniformPolicy, random_tabular_policy
from imas2.optimizer import OptimizerConfig
from imas2.oracle import InstanceBounds, random_factored_instance
from imas2.selection import (FinitePolicyInner, FixedInner, GainEvaluator, GradientInner,
                             gain_ratio_certificate, imas2, marginal_gain)

from _models import bsc_model, passive_agent, static_env, steerable_model

TINY = InstanceBounds(max_agents=4, max_horizon=2, budget=200_000)
GREEDY = 1 - 1 / math.e


def noisy_and_blind(horizon=2):
    env = static_env(2)
    seeing = passive_agent("seeing", [[0.8, 0.2], [0.2, 0.8]])
    blind = passive_agent("blind", [[0.5, 0.5], [0.5, 0.5]])
    model = FactoredDecPomdp(horizon, env, (seeing, blind))
    return model, bsc_model(0.1)[1]


# ---------------------------------------------------------------------------
# certificate


def test_certificate_withholds_bound_when_ratio_premise_fails():
    c = gain_ratio_certificate([0.22, 0.18, 0.12], 3)
    assert c.monotone_gains and not c.premise_holds and not c.bound_certified
    assert c.ratios == pytest.approx([0.22 / 0.18, 1.5])
    assert c.threshold == pytest.approx(4 / 3)
    assert len(c.violations) == 1 and "1.5" in c.violations[0]


def test_certificate_with_equal_gains():
    c = gain_ratio_certificate([0.2, 0.2, 0.2], 3)
    assert c.monotone_gains and c.premise_holds and c.bound_certified
    assert c.violations == []


def test_certificate_flags_increasing_gains_beyond_noise():
    c = gain_ratio_certificate([0.1, 0.3], 2, stderr=[0.01, 0.01])
    assert not c.monotone_gains
    assert any("exceeds gain[1]" in v for v in c.violations)


def test_certificate_tolerates_increase_within_noise():
    c = gain_ratio_certificate([0.1, 0.11], 2, stderr=[0.01, 0.01])
    assert c.monotone_gains


def test_certificate_zero_gains():
    c = gain_ratio_certificate([0.3, 0.0], 2)
    assert c.ratios == [math.inf] and not c.premise_holds
    assert gain_ratio_certificate([0.0, 0.0], 2).premise_holds
    json.dumps(c.to_dict())


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=6))
def test_certificate_premise_matches_ratio_check(gains):
    k = len(gains)
    c = gain_ratio_certificate(gains, k)
    want = all(a / b <= (k + 1) / k + 1e-9 for a, b in zip(gains, gains[1:]))
    assert c.premise_holds == want


# ---------------------------------------------------------------------------
# marginal gain


def test_blind_candidate_gain_is_noise_level():
    model, secret = noisy_and_blind()
    g = marginal_gain(model, [0], FixedPolicySet(), 1, None, GainEvaluator("mc", 500, 3, secret=secret))
    assert abs(g.gain) <= 3 * g.stderr + 1e-12


@given(st.integers(0, 10_000))
@settings(max_examples=20)
def test_exact_gain_is_conditional_mutual_information(seed):
    inst = random_factored_instance(seed, TINY)
    m, s = inst.model, inst.secret
    K, j = [0], m.n_agents - 1
    g = marginal_gain(m, K, inst.policies, j, None, GainEvaluator("exact", secret=s))
    joint = exact_joint(m, inst.policies, K + [j], "secret", s)
    assert g.gain == pytest.approx(conditional_mi(joint.probs, (0,), (2,), (1,)), abs=1e-9)


def test_gain_from_empty_set_is_singleton_value():
    model, secret = steerable_model()
    pols = FixedPolicySet()
    g = marginal_gain(model, [], pols, 1, None, GainEvaluator("exact", secret=secret))
    f1 = prior_entropy(model, "secret", secret) - exact_conditional_entropy(model, pols, [1], "secret", secret)
    assert g.gain == f1


def test_gain_rejects_selected_candidate():
    model, secret = steerable_model()
    with pytest.raises(ValueError):
        marginal_gain(model, [1], FixedPolicySet(), 1, None, GainEvaluator("exact", secret=secret))


# ---------------------------------------------------------------------------
# greedy loop


def test_single_candidate_with_trained_policy():
    model, secret = steerable_model()
    cfg = OptimizerConfig(iterations=5, hidden=3, batch=20, eval_samples=200, eval_every=5)
    res = imas2(model, [0], 1, GradientInner(cfg, secret), GainEvaluator("mc", 200, secret=secret))
    assert res.agents == [0] and 0 in res.params and 0 in res.policies
    assert (1, 0) in res.traces


def test_budget_larger_than_candidates_is_rejected():
    model, secret = steerable_model()
    with pytest.raises(ValueError, match="budget"):
        imas2(model, [0, 1], 3, FixedInner(FixedPolicySet()), GainEvaluator("exact", secret=secret))


def test_zero_budget_gives_empty_selection():
    model, secret = steerable_model()
    res = imas2(model, [0, 1], 0, FixedInner(FixedPolicySet()), GainEvaluator("exact", secret=secret))
    assert res.agents == [] and res.objective_values == [0.0] and res.entropies == [1.0]


def test_ties_go_to_lowest_index():
    model, secret = bsc_model(0.2, horizon=1, n_agents=3)
    res = imas2(model, [2, 1, 0], 1, FixedInner(FixedPolicySet()), GainEvaluator("exact", secret=secret))
    assert res.agents == [0]


@given(st.integers(0, 10_000))
@settings(max_examples=20)
def test_exact_gains_telescope(seed):
    inst = random_factored_instance(seed, TINY)
    m, s = inst.model, inst.secret
    k = m.n_agents
    res = imas2(m, range(k), k, FixedInner(inst.policies), GainEvaluator("exact", secret=s))
    f = prior_entropy(m, "secret", s) - exact_conditional_entropy(m, inst.policies, res.agents, "secret", s)
    assert sum(res.gains) == pytest.approx(f, abs=1e-9)
    assert res.objective_values[-1] == pytest.approx(f, abs=1e-9)


def _best_fixed(m, pols, s, k):
    h0 = prior_entropy(m, "secret", s)
    return max(h0 - exact_conditional_entropy(m, pols, list(S), "secret", s) if S else 0.0
               for S in itertools.combinations(range(m.n_agents), k))


@given(st.integers(0, 10_000), st.integers(1, 3))
@settings(max_examples=30)
def test_pure_subset_greedy_reaches_the_greedy_fraction_of_optimum(seed, k):
    inst = random_factored_instance(seed, TINY)
    m, s = inst.model, inst.secret
    k = min(k, m.n_agents)
    res = imas2(m, range(m.n_agents), k, FixedInner(inst.policies), GainEvaluator("exact", secret=s))
    assert res.objective_values[-1] >= GREEDY * _best_fixed(m, inst.policies, s, k) - 1e-9


@given(st.integers(0, 10_000))
@settings(max_examples=20)
def test_finite_policy_greedy_against_exhaustive_search(seed):
    inst = random_factored_instance(seed, TINY)
    m, s = inst.model, inst.secret
    rng = np.random.default_rng([seed, 7])
    options = {i: [random_tabular_policy(rng, len(a.observations), len(a.actions), m.horizon, deterministic=True)
                   for _ in range(3)] + [UniformPolicy(len(a.actions))] for i, a in enumerate(m.agents)}
    k = min(2, m.n_agents)
    res = imas2(m, range(m.n_agents), k, FinitePolicyInner(options, secret=s), GainEvaluator("exact", secret=s))
    h0 = prior_entropy(m, "secret", s)
    best = 0.0
    for S in itertools.combinations(range(m.n_agents), k):
        for combo in itertools.product(*(options[i] for i in S)):
            pols = FixedPolicySet(dict(zip(S, combo)))
            best = max(best, h0 - exact_conditional_entropy(m, pols, list(S), "secret", s))
    assert res.objective_values[-1] >= GREEDY * best - 1e-9


def test_same_inputs_give_identical_results():
    model, secret = steerable_model()
    cfg = OptimizerConfig(iterations=6, hidden=3, batch=20, eval_samples=200, eval_every=3)
    runs = [imas2(model, [0, 1], 2, GradientInner(cfg, secret), GainEvaluator("mc", 300, 5, secret=secret))
            for _ in range(2)]
    assert json.dumps(runs[0].to_dict()) == json.dumps(runs[1].to_dict())
    for j in runs[0].params:
        np.testing.assert_array_equal(runs[0].params[j].vector, runs[1].params[j].vector)


def test_parallel_candidates_match_serial():
    model, secret = steerable_model()
    cfg = OptimizerConfig(iterations=4, hidden=3, batch=20, eval_samples=200, eval_every=2)
    args = (model, [0, 1], 2, GradientInner(cfg, secret), GainEvaluator("mc", 300, 5, secret=secret))
    assert json.dumps(imas2(*args).to_dict()) == json.dumps(imas2(*args, jobs=2).to_dict())


def test_result_files(tmp_path):
    model, secret = steerable_model()
    cfg = OptimizerConfig(iterations=2, hidden=3, batch=20, eval_samples=100, eval_every=2)
    res = imas2(model, [0, 1], 1, GradientInner(cfg, secret), GainEvaluator("mc", 100, secret=secret))
    path = res.write(tmp_path)
    doc = json.loads(path.read_text())
    j = res.agents[0]
    assert doc["agents"] == [j] and (tmp_path / doc["checkpoints"][str(j)]).exists()
    assert (tmp_path / f"trace_round1_agent{1 - j}.csv").exists()
    assert "(1-1/e) bound certified" in res.summary()
