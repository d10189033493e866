import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from imas2.gridworld import (ORIENTATIONS, GridSpec, bfs_distances, build_env_chain, build_experiment,
                             build_sensor_agent, grid_spec_from_dict, move_outcomes, parse_ascii,
                             robot_policy, state_index)
from imas2.inference import exact_conditional_entropy, mc_conditional_entropy, prior_entropy
from imas2.model import ConfigError, FixedPolicySet, ModelError, read_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def benchmark_spec(**over) -> GridSpec:
    doc = read_config(CONFIGS / "benchmark_grid.toml")
    doc.pop("optimizer", None)
    doc.update(over)
    return grid_spec_from_dict(doc)


def small_spec(rows, horizon=2, **kw) -> GridSpec:
    layout = parse_ascii(rows)
    cells = layout.pop("sensor_cells")
    return GridSpec(sensors=tuple((c, "small") for c in cells), horizon=horizon, **layout, **kw)


# ---------------------------------------------------------------------------
# environment chain


def test_benchmark_layout_benign_distance_never_increases_in_the_hard_limit():
    spec = benchmark_spec(kappa="inf")
    env, _ = build_env_chain(spec)
    idx = state_index(spec)
    dist = bfs_distances(spec, spec.normal_goal)
    rev = {s: key for key, s in idx.items()}
    for s, (r, c, b) in rev.items():
        if b:
            continue
        for t in np.nonzero(env.transition[s])[0]:
            r2, c2, b2 = rev[t]
            assert b2 == 0
            assert dist[(r2, c2)] <= dist[(r, c)]


def test_softmax_robot_drifts_towards_its_goal():
    spec = benchmark_spec()
    env, _ = build_env_chain(spec)
    idx = state_index(spec)
    rev = {s: key for key, s in idx.items()}
    dists = [bfs_distances(spec, spec.normal_goal), bfs_distances(spec, spec.adversary_goal)]
    for s, (r, c, b) in rev.items():
        if dists[b][(r, c)] == 0:
            continue
        expected = sum(p * dists[b][rev[t][:2]] for t, p in enumerate(env.transition[s]) if p > 0)
        assert expected < dists[b][(r, c)]


def test_forced_move_on_two_cell_grid():
    spec = small_spec(["AG"], horizon=1, kappa=math.inf, type_prior=0.0)
    env, _ = build_env_chain(spec)
    idx = state_index(spec)
    assert env.transition[idx[(0, 0, 0)], idx[(0, 1, 0)]] == 1.0


def test_slip_row_masses():
    spec = benchmark_spec(slip_probability=0.1)
    out = move_outcomes(spec, (5, 5), "N")
    assert out == pytest.approx({(4, 5): 0.8, (5, 6): 0.1, (5, 4): 0.1})


def test_slip_into_wall_folds_into_stay():
    spec = benchmark_spec(slip_probability=0.1)
    out = move_outcomes(spec, (0, 0), "E")
    assert out == pytest.approx({(0, 1): 0.8, (0, 0): 0.1, (1, 0): 0.1})


def test_corridor_hitting_time_equals_bfs_distance():
    spec = small_spec(["G.....", ".#####", "A....."], horizon=6, kappa=math.inf, initial_column=5,
                      type_prior=0.0)
    env, _ = build_env_chain(spec)
    idx = state_index(spec)
    start, goal = idx[(0, 5, 0)], idx[(0, 0, 0)]
    p = np.zeros(env.n_states)
    p[start] = 1.0
    hit = None
    for t in range(1, 10):
        p = p @ env.transition
        if hit is None and p[goal] == 1.0:
            hit = t
    assert hit == bfs_distances(spec, spec.normal_goal)[(0, 5)] == 5


def test_type_conservation_and_absorption():
    spec = benchmark_spec(slip_probability=0.1)
    env, secret = build_env_chain(spec)
    idx = state_index(spec)
    b = np.array([k[2] for k in idx])
    assert np.all(env.transition[np.ix_(b == 0, b == 1)] == 0)
    assert np.all(env.transition[np.ix_(b == 1, b == 0)] == 0)
    g = spec.normal_goal
    assert env.transition[idx[(g[0], g[1], 0)], idx[(g[0], g[1], 0)]] == 1.0
    a = spec.adversary_goal
    assert env.transition[idx[(a[0], a[1], 1)], idx[(a[0], a[1], 1)]] == 1.0
    assert list(secret.of_initial) == list(b)


def test_initial_distribution_is_uniform_on_first_column_times_type_prior():
    spec = benchmark_spec(type_prior=0.3)
    env, _ = build_env_chain(spec)
    idx = state_index(spec)
    for r in range(10):
        assert env.initial[idx[(r, 0, 1)]] == pytest.approx(0.03)
        assert env.initial[idx[(r, 0, 0)]] == pytest.approx(0.07)
    assert env.initial.sum() == pytest.approx(1.0)


def test_unreachable_goal_is_an_error():
    spec = small_spec(["..0.G", "#####", "....A"])
    with pytest.raises(ModelError, match="unreachable"):
        build_env_chain(spec)


@given(st.sampled_from(["N", "S", "E", "W", "stay"]), st.integers(0, 9), st.integers(0, 9),
       st.floats(0, 0.5))
def test_move_outcomes_sum_to_one(move, r, c, slip):
    spec = benchmark_spec(slip_probability=slip)
    if not spec.free((r, c)):
        return
    out = move_outcomes(spec, (r, c), move)
    assert sum(out.values()) == pytest.approx(1.0, abs=1e-12)
    assert all(spec.free(cell) for cell in out)


@given(st.floats(0, 20))
def test_robot_policy_is_a_distribution(kappa):
    spec = benchmark_spec(kappa=kappa)
    dist = bfs_distances(spec, spec.normal_goal)
    for cell in spec.cells():
        assert sum(robot_policy(spec, dist, cell).values()) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# sensors


def _emission_row(spec, agent, cell, orientation, b=0):
    idx = state_index(spec)
    return agent.emission[idx[(cell[0], cell[1], b)], ORIENTATIONS.index(orientation)]


def test_sensor_detects_with_half_probability_inside_coverage():
    spec = benchmark_spec()
    k = 4
    agent = build_sensor_agent(spec, k)
    sensor = spec.sensors[k][0]
    inside = (sensor[0] - 1, sensor[1] + 1)
    np.testing.assert_array_equal(_emission_row(spec, agent, inside, "NE"), [0.5, 0.5])
    np.testing.assert_array_equal(_emission_row(spec, agent, inside, "SW"), [1.0, 0.0])


def test_uninitialised_orientation_emits_null():
    spec = benchmark_spec()
    agent = build_sensor_agent(spec, 0)
    assert agent.states[-1] == "uninit" and agent.initial[-1] == 1.0
    np.testing.assert_array_equal(agent.emission[:, -1], np.tile([1.0, 0.0], (agent.emission.shape[0], 1)))


def test_sensor_local_transition_follows_action():
    agent = build_sensor_agent(benchmark_spec(), 2)
    for s in range(5):
        np.testing.assert_array_equal(agent.transition[s], np.eye(5)[:4])


def test_emission_depends_only_on_cell_and_orientation():
    spec = benchmark_spec()
    agent = build_sensor_agent(spec, 3)
    idx = state_index(spec)
    for (r, c, b), s in idx.items():
        if b == 1:
            np.testing.assert_array_equal(agent.emission[s], agent.emission[idx[(r, c, 0)]])


def test_benchmark_layout_has_nine_candidates():
    model, secret = build_experiment(benchmark_spec())
    assert model.n_agents == 9
    assert model.validate().ok
    assert prior_entropy(model, "secret", secret) == 1.0


def test_sensor_on_obstacle_is_rejected():
    spec = benchmark_spec()
    bad = GridSpec(spec.width, spec.height, spec.normal_goal, spec.adversary_goal, (((2, 5), "small"),),
                   spec.horizon, spec.obstacles)
    with pytest.raises(ModelError, match="sensor 0"):
        build_experiment(bad)


def test_smoke_instance_is_enumerable_and_matches_monte_carlo():
    spec = small_spec(["0G", ".A"], horizon=2)
    model, secret = build_experiment(spec)
    exact = exact_conditional_entropy(model, FixedPolicySet(), [0], "secret", secret)
    mc, se = mc_conditional_entropy(model, FixedPolicySet(), [0], "secret", 20_000, 5, secret)
    assert 0 <= exact < 1
    assert abs(mc - exact) <= 3 * se


# ---------------------------------------------------------------------------
# config parsing


def test_parse_ascii_reads_all_symbols():
    out = parse_ascii(["0.#G", "..1A"])
    assert out["obstacles"] == frozenset({(0, 2)})
    assert out["sensor_cells"] == [(0, 0), (1, 2)]
    assert (out["normal_goal"], out["adversary_goal"]) == ((0, 3), (1, 3))


@pytest.mark.parametrize("rows, msg", [(["..G", ".A"], "unequal"), (["..G", "..."], "needs both"),
                                       (["GGA"], "more than once"), (["G?A"], "unknown"),
                                       (["G1A"], "sensor")])
def test_parse_ascii_rejects_malformed_maps(rows, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_ascii(rows)


def test_unknown_grid_key_is_rejected():
    with pytest.raises(ConfigError, match="colour"):
        grid_spec_from_dict({"map": "GA", "horizon": 1, "colour": 1})


def test_custom_offsets_override_quadrants():
    offsets = {o: [[0, 0]] for o in ORIENTATIONS}
    spec = grid_spec_from_dict({"map": ["0.G", "..A"], "horizon": 1, "range": "dot",
                                "offsets": {"dot": offsets}})
    agent = build_sensor_agent(spec, 0)
    idx = state_index(spec)
    covered = agent.emission[:, 0, 1] > 0
    assert {k[:2] for k, s in idx.items() if covered[s]} == {(0, 0)}
