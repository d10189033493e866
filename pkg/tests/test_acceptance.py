"""Acceptance criteria 1-8, one pass/fail line each.

Each test records a line in the terminal summary before asserting, so a
failing criterion still reports the measured values.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from imas2.cli import NONDETERMINISTIC_FILES, main
from imas2.inference import exact_conditional_entropy, mc_conditional_entropy
from imas2.model import FixedPolicySet
from imas2.optimizer import OptimizerConfig, grad_conditional_entropy, initial_params
from imas2.oracle import (InstanceBounds, brute_force_best, check_conditional_independence,
                          check_monotone_submodular, conformance_report, greedy_on_table,
                          random_factored_instance, shared_state_counterexample, tabulate_set_function)
from imas2.policy import PolicyDescriptor, RecurrentPolicy, init_params

from _models import fd_relative_error, random_history, switch_model

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
DESK = str(CONFIGS / "desk_grid.toml")
SEEDS = range(5)

pytestmark = pytest.mark.slow


@pytest.fixture
def record(request):
    tr = request.config.pluginmanager.getplugin("terminalreporter")

    def _record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines[n] = line
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
    return _record


def run(*argv) -> int:
    return main([str(a) for a in argv])


def load(path: Path) -> dict:
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    """Greedy k=3 and a random size-3 IPG baseline on the desk grid, one pair per seed."""
    root = tmp_path_factory.mktemp("desk")
    out = {}
    for s in SEEDS:
        g, b = root / f"greedy{s}", root / f"ipg{s}"
        t0 = time.perf_counter()
        assert run("greedy", "--config", DESK, "-k", 3, "--seed", s, "--out-dir", g) == 0
        seconds = time.perf_counter() - t0
        assert run("baseline", "--config", DESK, "--random-size", 3, "--seed", s,
                   "--selection", g / "selection.json", "--out-dir", b) == 0
        out[s] = {"greedy": g, "ipg": b, "seconds": seconds}
    e = root / "eval0"
    assert run("eval", "--config", DESK, "--selection", out[0]["greedy"] / "selection.json",
               "--episodes", 1000, "--seed", 0, "--out-dir", e) == 0
    out["eval"] = e
    return out


def test_criterion1_structural_conformance(record):
    t0 = time.perf_counter()
    report = conformance_report(200, seed=0, bounds=InstanceBounds())
    seconds = time.perf_counter() - t0
    checks = report["checks"]
    failing = [f"{k} {v['n_failed']}/{v['checked']} (max {v['max_value']:.3g})"
               for k, v in checks.items() if not v["passed"]]
    ci = max(checks[k]["max_value"] for k in ("ci_joint_trajectory", "ci_env_trajectory"))
    gap = max(checks[k]["max_value"] for k in ("entropy_gap_joint_trajectory", "entropy_gap_env_trajectory"))
    ok = report["all_pass"] and seconds <= 300
    record(1, ok, f"200 instances, CI {ci:.2e}, entropy gap {gap:.2e}, decomposition "
                  f"{checks['secret_decomposition']['max_value']:.2e}, {seconds:.0f}s; failing: "
                  f"{', '.join(failing) or 'none'}")
    assert ok


def test_criterion2_counterexample_power(record):
    model, pols = shared_state_counterexample()
    dev = check_conditional_independence(model, pols, 0, 1, "env_trajectory").max_deviation
    ok = dev > 1e-6
    record(2, ok, f"shared-state model CI deviation given the environment trajectory {dev:.3e} (> 1e-6)")
    assert ok


def test_criterion3_greedy_bound_on_tables(record):
    t0 = time.perf_counter()
    bounds = InstanceBounds(min_agents=3, max_agents=6, max_horizon=2, budget=2_000_000)
    certified = bound_ok = order_ok = 0
    worst = math.inf
    seed = 0
    while certified < 100:
        inst = random_factored_instance((3, seed), bounds)
        seed += 1
        n = inst.model.n_agents
        table = tabulate_set_function(inst.model, inst.policies, range(n))
        if check_monotone_submodular(table):
            continue
        certified += 1
        k = 1 + seed % min(4, n)
        chosen, gains = greedy_on_table(table, k)
        best = brute_force_best(table, k)[1]
        ratio = table(chosen) / best if best > 0 else 1.0
        worst = min(worst, ratio)
        bound_ok += ratio >= 1 - 1 / math.e - 1e-12
        order_ok += all(b <= a + 1e-12 for a, b in zip(gains, gains[1:]))
    seconds = time.perf_counter() - t0
    ok = bound_ok == 100 and order_ok == 100 and seconds <= 60
    record(3, ok, f"bound {bound_ok}/100 (worst ratio {worst:.6f}), non-increasing gains {order_ok}/100, "
                  f"{seed} instances drawn, {seconds:.1f}s")
    assert ok


def test_criterion4_gradient_fidelity(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for probe in range(100):
        d = PolicyDescriptor(int(rng.integers(1, 4)), int(rng.integers(2, 5)), int(rng.integers(1, 6)),
                             bool(rng.random() < 0.5))
        p = init_params(d, [4, probe], scale=1.0)
        h = random_history(rng, d.n_obs, d.n_actions, int(rng.integers(1, 4)))
        worst = max(worst, fd_relative_error(p, h, 1e-3))

    model, secret = switch_model(horizon=3)
    cfg = OptimizerConfig(hidden=3, batch=100, init_scale=1.0)
    theta = initial_params(model, 0, cfg)
    coords = np.random.default_rng(1).choice(theta.vector.size, 10, replace=False)
    est = np.array([grad_conditional_entropy(model, FixedPolicySet(), [], 0, theta, cfg, [44, r], secret)[0][coords]
                    for r in range(200)])
    mean, se = est.mean(axis=0), est.std(axis=0, ddof=1) / math.sqrt(len(est))

    def h(v):
        pol = FixedPolicySet({0: RecurrentPolicy(theta.replace(v), cfg.floor)})
        return exact_conditional_entropy(model, pol, [0], "secret", secret)

    fd = np.empty(len(coords))
    for q, c in enumerate(coords):
        e = np.zeros(theta.vector.size)
        e[c] = 1e-3
        fd[q] = (h(theta.vector + e) - h(theta.vector - e)) / 2e-3
    z = np.abs(mean - fd) / se
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-4 and bool(np.all(z <= 3)) and seconds <= 600
    record(4, ok, f"score vs central differences max rel err {worst:.2e} over 100 probes; estimator mean vs "
                  f"exact finite difference max {z.max():.2f} SE over 10 coordinates, {seconds:.1f}s")
    assert ok


def test_criterion5_estimator_consistency(record):
    inside = 0
    bounds = InstanceBounds(max_agents=3, max_horizon=2)
    for r in range(100):
        inst = random_factored_instance((5, r), bounds)
        agents = list(range(inst.model.n_agents))
        exact = exact_conditional_entropy(inst.model, inst.policies, agents, "secret", inst.secret)
        mc, se = mc_conditional_entropy(inst.model, inst.policies, agents, "secret", 10_000, [5, r], inst.secret)
        inside += abs(mc - exact) <= 3 * se + 1e-12
    ok = inside >= 99
    record(5, ok, f"M = 10^4 within 3 SE of exact in {inside}/100 reseeds (need >= 99)")
    assert ok


def test_criterion6_desk_experiment(record, desk_runs):
    sel = load(desk_runs[0]["greedy"] / "selection.json")
    ev = load(desk_runs["eval"] / "eval.json")
    h, g, se = sel["entropies"], sel["gains"], sel["gain_stderr"]
    decreasing = all(b < a for a, b in zip(h, h[1:]))
    significant = all(x > 3 * s for x, s in zip(g, se))
    threshold = ev["chance_rate"] + 3 * ev["chance_sigma"]
    seconds = desk_runs[0]["seconds"]
    ok = (h[0] == 1.0 and len(g) == 3 and decreasing and significant and h[-1] <= 0.8
          and ev["mean_posterior_entropy"] <= 0.8 and ev["accuracy"] > threshold and seconds <= 900)
    record(6, ok, f"agents {sel['agents']}, H {' > '.join(f'{x:.3f}' for x in h)}, gain/SE "
                  f"{', '.join(f'{x / s:.1f}' for x, s in zip(g, se))}, held-out H {ev['mean_posterior_entropy']:.3f}, "
                  f"accuracy {ev['accuracy']:.3f} vs {threshold:.3f}, {seconds:.0f}s")
    assert ok


def test_criterion7_baseline_direction(record, desk_runs):
    wins, cells = 0, []
    for s in SEEDS:
        rows = {r["method"]: r for r in load(desk_runs[s]["ipg"] / "comparison.json")["rows"]}
        a, b = rows["IMAS2"]["final_entropy"], rows["IPG"]["final_entropy"]
        wins += a <= b
        cells.append(f"{a:.3f}/{b:.3f}")
    ok = wins >= 4
    record(7, ok, f"IMAS2 <= IPG in {wins}/5 seeds (IMAS2/IPG final entropy: {', '.join(cells)})")
    assert ok


def _outputs(d: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name not in NONDETERMINISTIC_FILES}


def test_criterion8_determinism(record, desk_runs, tmp_path):
    first = {"greedy": desk_runs[0]["greedy"], "baseline": desk_runs[0]["ipg"], "eval": desk_runs["eval"]}
    for cmd, argv in [("validate", ["validate", "--config", DESK]), ("export", ["export", "--config", DESK]),
                      ("oracle-check", ["oracle-check", "--instances", 10, "--counterexamples"])]:
        run(*argv, "--out-dir", tmp_path / cmd)
        first[cmd] = tmp_path / cmd
    same = []
    for cmd, d in first.items():
        again = tmp_path / f"{cmd}-rerun"
        run("--from-manifest", d / "manifest.json", "--out-dir", again)
        same.append((cmd, _outputs(d) == _outputs(again)))
    ok = all(s for _, s in same)
    record(8, ok, "rerun from manifest byte-identical: " + ", ".join(f"{c} {'yes' if s else 'NO'}" for c, s in same))
    assert ok
