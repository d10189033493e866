"""Brute-force oracles: set-function tables, structural checks and random instances.

Conditional-independence and entropy-gap checks always enumerate the
flattened joint process, so they never rely on the product structure they
are meant to test. Set-function tables use the factored route, which is
cross-checked against the flattened route in the test suite.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .inference import (DEFAULT_CAP, conditional_entropy, decomposition_terms, exact_joint,
                        mutual_information)
from .model import (AgentBlock, EnvironmentChain, FactoredDecPomdp, FixedPolicySet,
                    GeneralDecPomdp, SecretMap, TabularPolicy, UniformPolicy, flatten,
                    induced_process, random_tabular_policy)

TOL_CI = 1e-12
TOL_ENTROPY = 1e-9
TOL_SUBMODULAR = 1e-9
TOL_IDENTITY = 1e-9


# ---------------------------------------------------------------------------
# Set functions


@dataclass
class SetFunctionTable:
    candidates: tuple[int, ...]
    values: dict[frozenset, float]
    latent: str = ""
    meta: dict = field(default_factory=dict)

    def __call__(self, subset) -> float:
        return self.values[frozenset(subset)]

    def complete(self) -> bool:
        return all(frozenset(s) in self.values for s in _subsets(self.candidates))


def _subsets(items: Sequence[int]):
    for r in range(len(items) + 1):
        yield from itertools.combinations(items, r)


def table_from_function(candidates: Sequence[int], f, latent: str = "") -> SetFunctionTable:
    cands = tuple(sorted(candidates))
    return SetFunctionTable(cands, {frozenset(s): float(f(frozenset(s))) for s in _subsets(cands)},
                            latent)


def tabulate_set_function(model, policies: FixedPolicySet, candidates: Sequence[int],
                          latent: str = "env_trajectory", secret: SecretMap | None = None,
                          include_actions: bool = True, cap: int = DEFAULT_CAP) -> SetFunctionTable:
    """f(A) = I(latent; Y_A) for every subset A of the candidates, exactly."""
    cands = tuple(sorted(candidates))
    cache: dict = {}
    values = {}
    for s in _subsets(cands):
        if not s:
            values[frozenset()] = 0.0
            continue
        j = exact_joint(model, policies, s, latent, secret, include_actions, cap,
                        tables=cache if isinstance(model, FactoredDecPomdp) else None)
        values[frozenset(s)] = mutual_information(j.probs, (0,), j.y_axes)
    return SetFunctionTable(cands, values, latent, {"include_actions": include_actions})


@dataclass(frozen=True)
class Violation:
    kind: str  # "monotone" or "submodular"
    a: tuple[int, ...]
    b: tuple[int, ...]
    j: int | None
    amount: float


def check_monotone_submodular(table: SetFunctionTable, tol: float = TOL_SUBMODULAR) -> list[Violation]:
    """Every violation of f(A) <= f(B) and f(j|A) >= f(j|B) over A subset of B, j outside B."""
    if not table.complete():
        raise ValueError("set-function table is incomplete")
    f = table.values
    cands = table.candidates
    out = []
    for b in _subsets(cands):
        B = frozenset(b)
        rest = [j for j in cands if j not in B]
        for a in _subsets(b):
            A = frozenset(a)
            if f[A] > f[B] + tol:
                out.append(Violation("monotone", a, b, None, f[A] - f[B]))
            for j in rest:
                ga = f[A | {j}] - f[A]
                gb = f[B | {j}] - f[B]
                if gb > ga + tol:
                    out.append(Violation("submodular", a, b, j, gb - ga))
    return out


def brute_force_best(table: SetFunctionTable, k: int) -> tuple[tuple[int, ...], float]:
    """Exhaustive best size-k subset; the lexicographically first wins ties."""
    if k < 0 or k > len(table.candidates):
        raise ValueError(f"k={k} is outside [0, {len(table.candidates)}]")
    best, best_v = None, -math.inf
    for s in itertools.combinations(table.candidates, k):
        v = table(s)
        if v > best_v:
            best, best_v = s, v
    return best, best_v


def greedy_on_table(table: SetFunctionTable, k: int) -> tuple[tuple[int, ...], list[float]]:
    """Classic greedy on a frozen set function; lowest index wins ties."""
    if k < 0 or k > len(table.candidates):
        raise ValueError(f"k={k} is outside [0, {len(table.candidates)}]")
    chosen: list[int] = []
    gains = []
    for _ in range(k):
        cur = table(chosen)
        best_j, best_g = None, -math.inf
        for j in table.candidates:
            if j in chosen:
                continue
            g = table(chosen + [j]) - cur
            if g > best_g:
                best_j, best_g = j, g
        chosen.append(best_j)
        gains.append(best_g)
    return tuple(chosen), gains


# ---------------------------------------------------------------------------
# Conditional-independence and entropy-gap checks


def _brute_force_joint(model, policies: FixedPolicySet, agents: Sequence[int], latent: str,
                       include_actions: bool, cap: int) -> np.ndarray:
    """probs[latent, y_agents...] by enumeration of the flattened process."""
    agents = list(agents)
    if isinstance(model, FactoredDecPomdp):
        gm = flatten(model.restrict(agents), cap=cap)
        pols = FixedPolicySet({q: policies.for_agent(i, len(model.agents[i].actions))
                               for q, i in enumerate(agents)})
        idx = list(range(len(agents)))
    else:
        gm, pols, idx = model, policies, agents
    if latent == "joint_trajectory":
        chain = induced_process(gm, pols, idx, cap=cap)
    elif latent == "env_trajectory":
        env = gm.env_component()
        chain = induced_process(gm, pols, idx, cap=cap, latent=env, latent_size=int(env.max()) + 1)
    else:
        raise ValueError(f"latent must be joint_trajectory or env_trajectory, got {latent!r}")
    if not include_actions:
        chain = chain.observations_only()
    return chain.probs


@dataclass
class CIResult:
    max_deviation: float
    skipped: int

    def passed(self, tol: float = TOL_CI) -> bool:
        return self.max_deviation <= tol


def check_conditional_independence(model, policies: FixedPolicySet, i: int, j: int,
                                   latent: str = "env_trajectory", include_actions: bool = True,
                                   cap: int = DEFAULT_CAP) -> CIResult:
    """max |P(y_i, y_j | x) - P(y_i | x) P(y_j | x)| over x with P(x) > 0."""
    if i == j:
        raise ValueError("need two distinct agents")
    p = _brute_force_joint(model, policies, [i, j], latent, include_actions, cap)
    px = p.sum(axis=(1, 2))
    live = px > 0
    cond = p[live] / px[live, None, None]
    prod = cond.sum(axis=2)[:, :, None] * cond.sum(axis=1)[:, None, :]
    dev = float(np.max(np.abs(cond - prod))) if cond.size else 0.0
    return CIResult(dev, int((~live).sum()))


def check_entropy_gap(model, policies: FixedPolicySet, A: Sequence[int], j: int,
                 latent: str = "env_trajectory", include_actions: bool = True,
                 cap: int = DEFAULT_CAP) -> float:
    """|H(Y_j | Y_A, latent) - H(Y_j | latent)| by brute-force enumeration."""
    A = list(A)
    if j in A:
        raise ValueError("j must lie outside A")
    p = _brute_force_joint(model, policies, A + [j], latent, include_actions, cap)
    last = p.ndim - 1
    full = conditional_entropy(p, (last,), tuple(range(last)))
    base = conditional_entropy(p, (last,), (0,))
    return abs(full - base)


# ---------------------------------------------------------------------------
# Random instances


@dataclass(frozen=True)
class InstanceBounds:
    max_env: int = 3
    max_local: int = 2
    max_obs: int = 3
    max_actions: int = 2
    max_horizon: int = 3
    min_agents: int = 2
    max_agents: int = 4
    budget: int = 4_000_000


@dataclass
class Instance:
    seed: tuple[int, ...]
    model: FactoredDecPomdp
    policies: FixedPolicySet
    secret: SecretMap

    def describe(self) -> dict:
        m = self.model
        return {"seed": list(self.seed), "horizon": m.horizon, "env_states": m.environment.n_states,
                "agents": [[len(a.states), len(a.actions), len(a.observations)] for a in m.agents],
                "secret_size": self.secret.size,
                "secret_kind": "initial" if self.secret.of_initial is not None else "trajectory"}


def _dirichlet(rng, shape):
    return rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])


def instance_cost(se: int, horizon: int, sizes: Sequence[tuple[int, int, int]]) -> int:
    """Peak working-tensor size when enumerating the joint trajectory and every history."""
    c = se ** (horizon + 1) * se
    for s, a, o in sizes:
        c *= s ** (horizon + 1) * o ** (horizon + 1) * a ** horizon * s * max(a, o)
    return c


def random_factored_instance(seed, bounds: InstanceBounds = InstanceBounds()) -> Instance:
    """Random factored model with Dirichlet(1) rows, random tabular policies and a secret."""
    seed = tuple(seed) if isinstance(seed, (list, tuple)) else (int(seed),)
    rng = np.random.default_rng(list(seed))
    se = int(rng.integers(2, bounds.max_env + 1))
    n = int(rng.integers(bounds.min_agents, bounds.max_agents + 1))
    T = int(rng.integers(0, bounds.max_horizon + 1))
    sizes = [(int(rng.integers(1, bounds.max_local + 1)), int(rng.integers(1, bounds.max_actions + 1)),
              int(rng.integers(2, bounds.max_obs + 1))) for _ in range(n)]
    while instance_cost(se, T, sizes) > bounds.budget:
        # shrink the horizon or the team at random so both stay represented
        if T > 0 and (len(sizes) <= bounds.min_agents or rng.random() < 0.5):
            T -= 1
        else:
            sizes.pop()
    env = EnvironmentChain(tuple(f"e{k}" for k in range(se)), _dirichlet(rng, (se, se)),
                           rng.dirichlet(np.ones(se)))
    agents = []
    pols = {}
    for i, (s, a, o) in enumerate(sizes):
        agents.append(AgentBlock(f"a{i}", tuple(f"s{k}" for k in range(s)), tuple(f"u{k}" for k in range(a)),
                                 tuple(f"o{k}" for k in range(o)), _dirichlet(rng, (s, a, s)),
                                 rng.dirichlet(np.ones(s)), _dirichlet(rng, (se, s, o))))
        pols[i] = random_tabular_policy(rng, o, a, T, deterministic=bool(rng.random() < 0.25))
    model = FactoredDecPomdp(T, env, tuple(agents))
    zsize = int(rng.integers(2, min(3, se) + 1))
    if rng.random() < 0.5:
        z = np.concatenate([np.arange(zsize), rng.integers(0, zsize, se - zsize)])
        secret = SecretMap(tuple(f"z{k}" for k in range(zsize)), of_initial=rng.permutation(z))
    else:
        n_traj = se ** (T + 1)
        if n_traj < zsize:
            zsize = n_traj
        table = rng.permutation(np.concatenate([np.arange(zsize),
                                                rng.integers(0, zsize, n_traj - zsize)]))
        secret = SecretMap(tuple(f"z{k}" for k in range(zsize)),
                           function=_TrajectoryTable(table, se))
    return Instance(seed, model, FixedPolicySet(pols), secret)


@dataclass(frozen=True, eq=False)
class _TrajectoryTable:
    table: np.ndarray
    n_env: int

    def __call__(self, traj):
        return int(self.table[np.ravel_multi_index(traj, (self.n_env,) * len(traj))])


# ---------------------------------------------------------------------------
# Counterexamples


def shared_state_counterexample() -> tuple[GeneralDecPomdp, FixedPolicySet]:
    """Two agents observe a hidden bit that is not part of the environment state.

    Emissions satisfy per-state independence, but they depend on a shared
    non-environment component, so the histories are dependent given the
    environment trajectory.
    """
    comps = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])  # (env bit, shared bit)
    S = 4
    P = np.zeros((S, 1, 1, S))
    P[:, 0, 0, :] = 0.25
    mu = np.full(S, 0.25)
    E = np.zeros((S, 2))
    E[np.arange(S), comps[:, 1]] = 0.9
    E[np.arange(S), 1 - comps[:, 1]] = 0.1
    model = GeneralDecPomdp(1, ("e0c0", "e0c1", "e1c0", "e1c1"), (("u",), ("u",)),
                            (("o0", "o1"), ("o0", "o1")), P, mu, (E, E.copy()),
                            state_components=comps)
    return model, FixedPolicySet()


def action_coupled_counterexample() -> tuple[GeneralDecPomdp, FixedPolicySet]:
    """The next state is the XOR of both agents' actions.

    Per-state emissions are independent, yet conditioning on the state
    trajectory couples the two agents' actions and hence their histories.
    """
    S = 2
    P = np.zeros((S, 2, 2, S))
    for s, a1, a2 in itertools.product(range(2), range(2), range(2)):
        P[s, a1, a2, a1 ^ a2] = 1.0
    mu = np.array([0.5, 0.5])
    E = np.array([[0.8, 0.2], [0.2, 0.8]])
    copy_obs = TabularPolicy({(0,): [1.0, 0.0], (1,): [0.0, 1.0]}, 2)
    model = GeneralDecPomdp(1, ("s0", "s1"), (("a0", "a1"), ("a0", "a1")),
                            (("o0", "o1"), ("o0", "o1")), P, mu, (E, E.copy()),
                            state_components=np.array([[0], [1]]))
    return model, FixedPolicySet({0: copy_obs, 1: copy_obs})


def xor_secret_counterexample() -> tuple[FactoredDecPomdp, FixedPolicySet, SecretMap]:
    """Static two-bit environment; agent k reads bit k exactly; the secret is their XOR."""
    states = ("00", "01", "10", "11")
    env = EnvironmentChain(states, np.eye(4), np.full(4, 0.25))
    agents = []
    for k in range(2):
        E = np.zeros((4, 1, 2))
        for s in range(4):
            E[s, 0, (s >> (1 - k)) & 1] = 1.0
        agents.append(AgentBlock(f"bit{k}", ("x",), ("u",), ("0", "1"), np.ones((1, 1, 1)),
                                 np.ones(1), E))
    model = FactoredDecPomdp(0, env, tuple(agents))
    secret = SecretMap(("even", "odd"), of_initial=np.array([0, 1, 1, 0]))
    return model, FixedPolicySet(), secret


# ---------------------------------------------------------------------------
# Conformance report


@dataclass
class CheckSummary:
    name: str
    description: str
    tolerance: float
    checked: int = 0
    n_failed: int = 0
    max_value: float = 0.0
    failures: list = field(default_factory=list)  # first few failing instance seeds
    expect_fail: bool = False

    def add(self, value: float, seed, failed: bool | None = None) -> None:
        self.checked += 1
        self.max_value = max(self.max_value, float(value))
        bad = value > self.tolerance if failed is None else failed
        if bad:
            self.n_failed += 1
            if len(self.failures) < 20:
                self.failures.append(list(seed) if isinstance(seed, tuple) else seed)

    @property
    def passed(self) -> bool:
        return self.n_failed == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        if self.expect_fail:
            d["status"] = "expected-fail" if not self.passed else "unexpected-pass"
        else:
            d["status"] = "pass" if self.passed else "FAIL"
        return d


STRUCTURAL_CHECKS = {
    "ci_joint_trajectory": "histories of two agents independent given the joint state trajectory",
    "ci_env_trajectory": "histories of two agents independent given the environment trajectory",
    "entropy_gap_joint_trajectory": "H(Y_j | Y_A, X) = H(Y_j | X)",
    "entropy_gap_env_trajectory": "H(Y_j | Y_A, X_e) = H(Y_j | X_e)",
    "submodular_joint_trajectory": "I(X; Y_A) monotone and submodular",
    "submodular_env_trajectory": "I(X_e; Y_A) monotone and submodular",
    "submodular_secret": "I(Z; Y_A) monotone and submodular",
    "secret_decomposition": "I(Z;Y_A) = I(X_e;Y_A) - H(X_e) + H(Z) + H(X_e|Z,Y_A)",
    "nonselected_indifference": "I(X_e; Y_A) unchanged when non-selected agents switch policy",
}


def _check_instance(inst: Instance, checks: dict[str, CheckSummary], include_actions: bool,
                    cap: int) -> None:
    model, pols, secret, seed = inst.model, inst.policies, inst.secret, inst.seed
    n = model.n_agents
    agents = list(range(n))
    rng = np.random.default_rng(list(seed) + [99])
    for latent in ("joint_trajectory", "env_trajectory"):
        for i, j in itertools.combinations(agents, 2):
            r = check_conditional_independence(model, pols, i, j, latent, include_actions, cap)
            checks[f"ci_{latent}"].add(r.max_deviation, seed)
        j = int(rng.integers(n))
        others = [a for a in agents if a != j]
        A = sorted(rng.choice(others, size=min(2, len(others)), replace=False).tolist()) if others else []
        checks[f"entropy_gap_{latent}"].add(check_entropy_gap(model, pols, A, j, latent, include_actions, cap),
                                            seed)
        table = tabulate_set_function(model, pols, agents, latent, None, include_actions, cap)
        v = check_monotone_submodular(table)
        checks[f"submodular_{latent}"].add(max((x.amount for x in v), default=0.0), seed, bool(v))
    table = tabulate_set_function(model, pols, agents, "secret", secret, include_actions, cap)
    v = check_monotone_submodular(table)
    checks["submodular_secret"].add(max((x.amount for x in v), default=0.0), seed, bool(v))
    worst = 0.0
    for s in _subsets(agents):
        worst = max(worst, decomposition_terms(model, pols, list(s), secret, include_actions, cap).residual)
    checks["secret_decomposition"].add(worst, seed)
    # switching the policy of an agent outside A must not change I(X_e; Y_A)
    if n >= 2:
        ag1 = model.agents[1]
        alt = random_tabular_policy(rng, len(ag1.observations), len(ag1.actions), model.horizon)
        vals = []
        for other in (pols.for_agent(1, len(ag1.actions)), alt, UniformPolicy(len(ag1.actions))):
            p = FixedPolicySet({0: pols.for_agent(0, len(model.agents[0].actions)), 1: other})
            joint = _brute_force_joint(model, p, [0, 1], "env_trajectory", include_actions, cap)
            vals.append(mutual_information(joint.sum(axis=2), (0,), (1,)))
        checks["nonselected_indifference"].add(max(vals) - min(vals), seed)


def conformance_report(n_instances: int = 200, seed: int = 0, bounds: InstanceBounds = InstanceBounds(),
                       include_actions: bool = True, counterexamples: bool = False,
                       cap: int = DEFAULT_CAP) -> dict:
    """Run every structural check over random factored instances."""
    tol = {"ci": TOL_CI, "entropy": TOL_ENTROPY, "submodular": TOL_SUBMODULAR,
           "secret": TOL_IDENTITY, "nonselected": TOL_ENTROPY}
    checks = {name: CheckSummary(name, desc, tol[name.split("_")[0]])
              for name, desc in STRUCTURAL_CHECKS.items()}
    instances = []
    for k in range(n_instances):
        inst = random_factored_instance((seed, k), bounds)
        instances.append(inst.describe())
        _check_instance(inst, checks, include_actions, cap)
    report = {
        "seed": seed,
        "n_instances": n_instances,
        "bounds": asdict(bounds),
        "include_actions": include_actions,
        "checks": {k: v.to_dict() for k, v in checks.items()},
        "instances": instances,
    }
    ok = all(v.passed for v in checks.values())
    if counterexamples:
        ce = counterexample_report()
        report["counterexamples"] = ce
    report["all_pass"] = ok
    return report


def counterexample_report() -> dict:
    """Checks on constructed models that violate a premise; each is expected to fail."""
    out = {}
    m, p = shared_state_counterexample()
    r = check_conditional_independence(m, p, 0, 1, "env_trajectory")
    s = CheckSummary("shared_state_ci_env", "shared non-environment state breaks independence given X_e",
                     1e-6, expect_fail=True)
    s.add(r.max_deviation, "shared_state", r.max_deviation > 1e-6)
    out[s.name] = s.to_dict()
    g = check_entropy_gap(m, p, [0], 1, "env_trajectory")
    s = CheckSummary("shared_state_entropy_gap", "entropy gap given X_e on the shared-state model",
                     1e-6, expect_fail=True)
    s.add(g, "shared_state", g > 1e-6)
    out[s.name] = s.to_dict()
    m, p = action_coupled_counterexample()
    r = check_conditional_independence(m, p, 0, 1, "joint_trajectory")
    s = CheckSummary("action_coupled_ci_joint", "jointly action-driven transitions break independence given X",
                     1e-6, expect_fail=True)
    s.add(r.max_deviation, "action_coupled", r.max_deviation > 1e-6)
    out[s.name] = s.to_dict()
    m, p, z = xor_secret_counterexample()
    table = tabulate_set_function(m, p, [0, 1], "secret", z)
    v = check_monotone_submodular(table)
    s = CheckSummary("xor_secret_submodular", "I(Z; Y_A) for Z = XOR of two observed bits",
                     TOL_SUBMODULAR, expect_fail=True)
    s.add(max((x.amount for x in v), default=0.0), "xor_secret", bool(v))
    out[s.name] = s.to_dict()
    return out


def uniform_policies(model) -> FixedPolicySet:
    acts = model.actions if isinstance(model, GeneralDecPomdp) else [a.actions for a in model.agents]
    return FixedPolicySet({i: UniformPolicy(len(a)) for i, a in enumerate(acts)})
