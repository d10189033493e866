"""Dec-POMDP model types, validation, flattening and exhaustive enumeration.

Two model flavours live here:

* :class:`GeneralDecPomdp` -- an arbitrary finite Dec-POMDP with a dense joint
  transition tensor ``P[s, a_1, ..., a_N, s']`` and per-agent emissions.
* :class:`FactoredDecPomdp` -- an uncontrolled environment chain times
  independent controlled per-agent chains, with emissions depending only on
  ``(environment state, own local state)``.

:func:`flatten` materialises the product form of a factored model as a general
one, and :func:`induced_process` enumerates the exact joint law of state
trajectories and local histories under fixed policies.

Histories are tuples of integers alternating observation and action indices,
always starting with an observation: ``(o_0, a_0, o_1, ..., o_t)``.
"""

from __future__ import annotations

import itertools
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Protocol, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONSTRUCTION_TOL = 1e-12
HORIZON_TOL = 1e-9


class EnumerationCapExceeded(RuntimeError):
    """Raised when an exhaustive computation would exceed its size cap."""


class ModelError(ValueError):
    """Raised for structurally invalid models or specs."""


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, msg: str) -> None:
        self.violations.append(msg)

    def raise_if_invalid(self) -> None:
        if self.violations:
            raise ModelError("; ".join(self.violations))


def _check_row(report: ValidationReport, row: np.ndarray, name: str, tol: float) -> None:
    row = np.asarray(row, dtype=float)
    if np.isnan(row).any():
        report.add(f"{name}: missing row")
        return
    if (row < 0).any():
        report.add(f"{name}: negative entry")
    total = float(row.sum())
    if abs(total - 1.0) > tol:
        report.add(f"{name}: sums to {total!r}")


# ---------------------------------------------------------------------------
# Policies


class Policy(Protocol):
    """Maps a local history to a distribution over the agent's actions.

    ``start``/``probs`` are the batched rollout interface; ``action_probs`` is
    the single-history interface used by exact enumeration.
    """

    n_actions: int

    def action_probs(self, history: tuple[int, ...]) -> np.ndarray: ...

    def start(self, m: int): ...

    def probs(self, carry, obs: np.ndarray, prev_action: np.ndarray | None): ...


class UniformPolicy:
    def __init__(self, n_actions: int):
        self.n_actions = n_actions
        self._p = np.full(n_actions, 1.0 / n_actions)

    def action_probs(self, history):
        return self._p

    def start(self, m):
        return m

    def probs(self, carry, obs, prev_action):
        return np.broadcast_to(self._p, (len(obs), self.n_actions)), carry

    def __repr__(self):
        return f"UniformPolicy({self.n_actions})"


class TabularPolicy:
    """Lookup-table policy keyed by full history tuples.

    Histories missing from the table fall back to ``default`` (uniform when
    not given).
    """

    def __init__(self, table: Mapping[tuple[int, ...], Sequence[float]], n_actions: int,
                 default: Sequence[float] | None = None):
        self.n_actions = n_actions
        self.table = {tuple(k): np.asarray(v, dtype=float) for k, v in table.items()}
        self.default = (np.full(n_actions, 1.0 / n_actions) if default is None
                        else np.asarray(default, dtype=float))

    def action_probs(self, history):
        return self.table.get(tuple(history), self.default)

    def start(self, m):
        return [() for _ in range(m)]

    def probs(self, carry, obs, prev_action):
        if prev_action is None:
            hist = [(int(o),) for o in obs]
        else:
            hist = [h + (int(a), int(o)) for h, a, o in zip(carry, prev_action, obs)]
        out = np.stack([self.action_probs(h) for h in hist])
        return out, hist


@dataclass
class FixedPolicySet:
    """Per-agent policies; agents without an entry act uniformly at random."""

    policies: dict[int, Policy] = field(default_factory=dict)

    def for_agent(self, i: int, n_actions: int) -> Policy:
        pol = self.policies.get(i)
        return UniformPolicy(n_actions) if pol is None else pol

    def has(self, i: int) -> bool:
        return i in self.policies

    def with_policy(self, i: int, policy: Policy) -> "FixedPolicySet":
        return FixedPolicySet({**self.policies, i: policy})

    def agents(self) -> list[int]:
        return sorted(self.policies)


def all_histories(n_obs: int, n_actions: int, t: int) -> list[tuple[int, ...]]:
    """All histories ``(o_0, a_0, ..., o_t)`` in C order of their digits."""
    digits = []
    for step in range(t + 1):
        digits.append(range(n_obs))
        if step < t:
            digits.append(range(n_actions))
    return [tuple(h) for h in itertools.product(*digits)]


def random_tabular_policy(rng: np.random.Generator, n_obs: int, n_actions: int,
                          horizon: int, deterministic: bool = False) -> TabularPolicy:
    table = {}
    for t in range(horizon):
        for h in all_histories(n_obs, n_actions, t):
            if deterministic:
                row = np.zeros(n_actions)
                row[rng.integers(n_actions)] = 1.0
            else:
                row = rng.dirichlet(np.ones(n_actions))
            table[h] = row
    return TabularPolicy(table, n_actions)


# ---------------------------------------------------------------------------
# General model


@dataclass(frozen=True, eq=False)
class GeneralDecPomdp:
    """Finite-horizon Dec-POMDP without reward.

    ``transition`` has shape ``(S, A_1, ..., A_N, S)``; ``emissions[i]`` has
    shape ``(S, O_i)``. Missing rows are encoded as NaN so that
    :func:`validate_general` can report them. ``joint_emission``, when set,
    is a correlated observation model of shape ``(S, O_1, ..., O_N)`` that
    replaces the product of per-agent emissions. ``state_components`` is filled
    in by :func:`flatten` and maps each joint state to its (environment,
    agent_1, ..., agent_N) component indices.
    """

    horizon: int
    states: tuple[str, ...]
    actions: tuple[tuple[str, ...], ...]
    observations: tuple[tuple[str, ...], ...]
    transition: np.ndarray
    initial: np.ndarray
    emissions: tuple[np.ndarray, ...]
    joint_emission: np.ndarray | None = None
    state_components: np.ndarray | None = None

    @property
    def n_agents(self) -> int:
        return len(self.actions)

    @property
    def n_states(self) -> int:
        return len(self.states)

    def env_component(self) -> np.ndarray:
        if self.state_components is None:
            raise ModelError("model has no environment component (not produced by flatten)")
        return self.state_components[:, 0]


def validate_general(model: GeneralDecPomdp) -> ValidationReport:
    rep = ValidationReport()
    S = model.n_states
    n = model.n_agents
    if model.horizon < 0 or int(model.horizon) != model.horizon:
        rep.add(f"horizon must be a non-negative integer, got {model.horizon!r}")
    if len(model.observations) != n or len(model.emissions) != n:
        rep.add("actions, observations and emissions must have one entry per agent")
        return rep
    a_sizes = tuple(len(a) for a in model.actions)
    expect = (S, *a_sizes, S)
    if model.transition.shape != expect:
        rep.add(f"transition shape {model.transition.shape} != {expect}")
    else:
        for idx in itertools.product(range(S), *(range(k) for k in a_sizes)):
            joint = ",".join(model.actions[i][a] for i, a in enumerate(idx[1:]))
            _check_row(rep, model.transition[idx], f"transition[{model.states[idx[0]]}; {joint}]",
                       CONSTRUCTION_TOL)
    if model.initial.shape != (S,):
        rep.add(f"initial shape {model.initial.shape} != {(S,)}")
    else:
        _check_row(rep, model.initial, "initial", CONSTRUCTION_TOL)
    for i, E in enumerate(model.emissions):
        if E.shape != (S, len(model.observations[i])):
            rep.add(f"emission[{i}] shape {E.shape} != {(S, len(model.observations[i]))}")
            continue
        for s in range(S):
            _check_row(rep, E[s], f"emission[agent {i}, state {model.states[s]}]", CONSTRUCTION_TOL)
    if model.joint_emission is not None:
        J = model.joint_emission
        o_sizes = tuple(len(o) for o in model.observations)
        if J.shape != (S, *o_sizes):
            rep.add(f"joint_emission shape {J.shape} != {(S, *o_sizes)}")
        else:
            for s in range(S):
                _check_row(rep, J[s].ravel(), f"joint_emission[{model.states[s]}]", CONSTRUCTION_TOL)
                for i in range(n):
                    axes = tuple(k + 1 for k in range(n) if k != i)
                    marg = J[s].sum(axis=tuple(a - 1 for a in axes))
                    if np.max(np.abs(marg - model.emissions[i][s])) > CONSTRUCTION_TOL:
                        rep.add(f"joint_emission[{model.states[s]}] marginal for agent {i} "
                                "disagrees with emissions")
    return rep


def check_assumption1(model: GeneralDecPomdp, tol: float = CONSTRUCTION_TOL) -> bool:
    """True iff every pair of agents' observations is independent given the state."""
    J = model.joint_emission
    n = model.n_agents
    if J is None or n < 2:
        return True
    for s in range(model.n_states):
        js = J[s]
        for i, j in itertools.combinations(range(n), 2):
            keep = (i, j)
            pair = js.sum(axis=tuple(k for k in range(n) if k not in keep))
            prod = np.outer(pair.sum(axis=1), pair.sum(axis=0))
            if np.max(np.abs(pair - prod)) > tol:
                return False
    return True


# ---------------------------------------------------------------------------
# Factored model


@dataclass(frozen=True, eq=False)
class EnvironmentChain:
    states: tuple[str, ...]
    transition: np.ndarray  # (Se, Se)
    initial: np.ndarray  # (Se,)

    @property
    def n_states(self) -> int:
        return len(self.states)


@dataclass(frozen=True, eq=False)
class AgentBlock:
    name: str
    states: tuple[str, ...]
    actions: tuple[str, ...]
    observations: tuple[str, ...]
    transition: np.ndarray  # (Si, Ai, Si)
    initial: np.ndarray  # (Si,)
    emission: np.ndarray  # (Se, Si, Oi)

    def deterministic_local(self) -> bool:
        """True when the local state is a known function of the agent's own actions."""
        one_hot = lambda a: bool(np.all(np.isclose(a.max(axis=-1), 1.0)))  # noqa: E731
        return one_hot(self.initial[None]) and one_hot(self.transition)


@dataclass(frozen=True, eq=False)
class FactoredDecPomdp:
    horizon: int
    environment: EnvironmentChain
    agents: tuple[AgentBlock, ...]

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def restrict(self, indices: Sequence[int]) -> "FactoredDecPomdp":
        return FactoredDecPomdp(self.horizon, self.environment,
                                tuple(self.agents[i] for i in indices))

    def with_horizon(self, horizon: int) -> "FactoredDecPomdp":
        return FactoredDecPomdp(horizon, self.environment, self.agents)

    def validate(self) -> ValidationReport:
        rep = ValidationReport()
        env = self.environment
        Se = env.n_states
        if self.horizon < 0 or int(self.horizon) != self.horizon:
            rep.add(f"horizon must be a non-negative integer, got {self.horizon!r}")
        if env.transition.shape != (Se, Se):
            rep.add(f"environment transition shape {env.transition.shape} != {(Se, Se)}")
        else:
            for s in range(Se):
                _check_row(rep, env.transition[s], f"environment.transition[{env.states[s]}]",
                           CONSTRUCTION_TOL)
        if env.initial.shape != (Se,):
            rep.add("environment initial has wrong shape")
        else:
            _check_row(rep, env.initial, "environment.initial", CONSTRUCTION_TOL)
        for ag in self.agents:
            Si, Ai, Oi = len(ag.states), len(ag.actions), len(ag.observations)
            if ag.transition.shape != (Si, Ai, Si):
                rep.add(f"agent {ag.name}: transition shape {ag.transition.shape} != {(Si, Ai, Si)}")
            else:
                for s in range(Si):
                    for a in range(Ai):
                        _check_row(rep, ag.transition[s, a],
                                   f"agent {ag.name}: transition[{ag.states[s]}; {ag.actions[a]}]",
                                   CONSTRUCTION_TOL)
            if ag.initial.shape != (Si,):
                rep.add(f"agent {ag.name}: initial has wrong shape")
            else:
                _check_row(rep, ag.initial, f"agent {ag.name}: initial", CONSTRUCTION_TOL)
            if ag.emission.shape != (Se, Si, Oi):
                rep.add(f"agent {ag.name}: emission shape {ag.emission.shape} != {(Se, Si, Oi)}")
            else:
                for se in range(Se):
                    for s in range(Si):
                        _check_row(rep, ag.emission[se, s],
                                   f"agent {ag.name}: emission[{env.states[se]}; {ag.states[s]}]",
                                   CONSTRUCTION_TOL)
        return rep


def flatten(model: FactoredDecPomdp, cap: int = 4096) -> GeneralDecPomdp:
    """Materialise the product-form joint model of a factored Dec-POMDP.

    ``cap`` bounds the number of joint states.
    """
    env = model.environment
    sizes = (env.n_states, *(len(a.states) for a in model.agents))
    S = int(np.prod(sizes))
    if S > cap:
        raise EnumerationCapExceeded(f"joint state space {S} exceeds cap {cap}")
    n = model.n_agents
    a_sizes = tuple(len(a.actions) for a in model.agents)
    # T[e, s_1..s_N, a_1..a_N, e', s_1'..s_N'] built by successive outer products
    T = env.transition.reshape((sizes[0],) + (1,) * (2 * n) + (sizes[0],) + (1,) * n)
    for i, ag in enumerate(model.agents):
        shape = [1] * (2 + 3 * n)
        shape[1 + i] = sizes[1 + i]
        shape[1 + n + i] = a_sizes[i]
        shape[2 + 2 * n + i] = sizes[1 + i]
        T = T * ag.transition.reshape(shape)
    T = T.reshape((S, *a_sizes, S))
    mu = env.initial
    for ag in model.agents:
        mu = np.multiply.outer(mu, ag.initial)
    comps = np.stack(np.unravel_index(np.arange(S), sizes), axis=1)
    emissions = []
    for i, ag in enumerate(model.agents):
        emissions.append(ag.emission[comps[:, 0], comps[:, 1 + i]])
    labels = tuple("|".join([env.states[c[0]]] + [model.agents[i].states[c[1 + i]] for i in range(n)])
                   for c in comps)
    return GeneralDecPomdp(
        horizon=model.horizon,
        states=labels,
        actions=tuple(a.actions for a in model.agents),
        observations=tuple(a.observations for a in model.agents),
        transition=T,
        initial=np.asarray(mu).reshape(S),
        emissions=tuple(emissions),
        state_components=comps,
    )


# ---------------------------------------------------------------------------
# Secrets


@dataclass(frozen=True, eq=False)
class SecretMap:
    """Surjective map from environment trajectories to a finite secret alphabet.

    Either ``of_initial`` (secret fixed by the initial environment state) or
    ``function`` (arbitrary map of the trajectory tuple) must be given.
    """

    labels: tuple[str, ...]
    of_initial: np.ndarray | None = None
    function: object = None

    def __call__(self, trajectory: Sequence[int]) -> int:
        if self.of_initial is not None:
            return int(self.of_initial[trajectory[0]])
        return int(self.function(tuple(int(s) for s in trajectory)))

    @property
    def size(self) -> int:
        return len(self.labels)

    def table(self, n_env: int, horizon: int) -> np.ndarray:
        """Secret index of every environment trajectory in C order."""
        n = n_env ** (horizon + 1)
        if self.of_initial is not None:
            return np.repeat(np.asarray(self.of_initial, dtype=int), n_env ** horizon)
        trajs = itertools.product(range(n_env), repeat=horizon + 1)
        return np.fromiter((self(t) for t in trajs), dtype=int, count=n)

    def validate(self, env: EnvironmentChain, horizon: int, cap: int = 20_000_000) -> ValidationReport:
        rep = ValidationReport()
        if self.of_initial is not None:
            # only the initial state matters, so skip trajectory enumeration
            z = np.asarray(self.of_initial, dtype=int)
            prior = np.asarray(env.initial, dtype=float)
            if z.shape != (env.n_states,):
                rep.add(f"secret map has {z.size} entries for {env.n_states} environment states")
                return rep
        else:
            n = env.n_states ** (horizon + 1)
            if n > cap:
                raise EnumerationCapExceeded(f"{n} environment trajectories exceed the cap {cap}")
            prior = env_trajectory_prior(env, horizon)
            z = self.table(env.n_states, horizon)
        if z.min() < 0 or z.max() >= self.size:
            rep.add("secret map produces an index outside its alphabet")
            return rep
        hit = np.bincount(z[prior > 0], minlength=self.size)
        for k, label in enumerate(self.labels):
            if hit[k] == 0:
                rep.add(f"secret label {label!r} is never produced (map not surjective)")
        return rep


def identity_secret(n_env: int, horizon: int) -> SecretMap:
    """Secret equal to the whole environment trajectory."""
    n = n_env ** (horizon + 1)
    labels = tuple(str(k) for k in range(n))
    return SecretMap(labels, function=lambda t: int(np.ravel_multi_index(t, (n_env,) * len(t))))


def env_trajectory_prior(env: EnvironmentChain, horizon: int) -> np.ndarray:
    """Dense probability of every environment trajectory (C order, base ``Se``)."""
    p = env.initial.copy()
    for _ in range(horizon):
        last = np.arange(p.size) % env.n_states
        p = (p[:, None] * env.transition[last]).reshape(-1)
    return p


# ---------------------------------------------------------------------------
# Exhaustive enumeration of the induced process


@dataclass
class JointChain:
    """Exact joint law of latent trajectories and local histories.

    ``probs[l, y_1, ..., y_k]`` where ``l`` indexes latent trajectories in
    C order over ``latent_size`` symbols per step and ``y_i`` indexes
    ``histories[i]`` for the ``i``-th agent of ``subset``.
    """

    subset: tuple[int, ...]
    horizon: int
    latent_size: int
    probs: np.ndarray
    histories: list[list[tuple[int, ...]]]

    def latent_trajectory(self, index: int) -> tuple[int, ...]:
        return tuple(int(d) for d in np.unravel_index(index, (self.latent_size,) * (self.horizon + 1)))

    def entries(self) -> Iterator[tuple[tuple[int, ...], tuple[tuple[int, ...], ...], float]]:
        for idx in zip(*np.nonzero(self.probs)):
            hists = tuple(self.histories[k][y] for k, y in enumerate(idx[1:]))
            yield self.latent_trajectory(int(idx[0])), hists, float(self.probs[idx])

    def observations_only(self) -> "JointChain":
        """Marginalise the action entries out of every history."""
        probs = self.probs
        new_hists = []
        for k, hs in enumerate(self.histories):
            obs_keys = sorted({h[::2] for h in hs})
            pos = {key: n for n, key in enumerate(obs_keys)}
            M = np.zeros((len(hs), len(obs_keys)))
            for n, h in enumerate(hs):
                M[n, pos[h[::2]]] = 1.0
            probs = np.moveaxis(np.tensordot(probs, M, axes=([1 + k], [0])), -1, 1 + k)
            new_hists.append(obs_keys)
        return JointChain(self.subset, self.horizon, self.latent_size, probs, new_hists)

    def project_latent(self, mapping: np.ndarray, size: int) -> "JointChain":
        """Apply a per-step symbol map to the latent trajectory axis."""
        T1 = self.horizon + 1
        traj = np.stack(np.unravel_index(np.arange(self.probs.shape[0]), (self.latent_size,) * T1), axis=1)
        new = np.ravel_multi_index(tuple(np.asarray(mapping)[traj].T), (size,) * T1)
        out = np.zeros((size ** T1,) + self.probs.shape[1:])
        np.add.at(out, new, self.probs)
        return JointChain(self.subset, self.horizon, size, out, self.histories)


def induced_process(model: GeneralDecPomdp, policies: FixedPolicySet, subset: Sequence[int],
                    cap: int = 20_000_000, latent: np.ndarray | None = None,
                    latent_size: int | None = None) -> JointChain:
    """Enumerate the exact joint law of (latent trajectory, subset histories).

    Agents with an explicit policy in ``policies`` have their histories tracked
    (their actions depend on them); the remaining agents act uniformly at
    random and are marginalised as they go. ``latent`` maps each state to a
    latent symbol (identity by default). ``cap`` bounds the number of entries
    of the working tensor.
    """
    subset = tuple(subset)
    n = model.n_agents
    if any(i < 0 or i >= n for i in subset) or len(set(subset)) != len(subset):
        raise ModelError(f"invalid agent subset {subset}")
    S = model.n_states
    T = model.horizon
    if latent is None:
        latent = np.arange(S)
        latent_size = S
    latent = np.asarray(latent, dtype=int)
    if latent_size is None:
        latent_size = int(latent.max()) + 1
    C = np.zeros((S, latent_size))
    C[np.arange(S), latent] = 1.0

    tracked = sorted(set(subset) | {i for i in policies.agents() if i < n})
    k = len(tracked)
    o_sizes = [len(model.observations[i]) for i in tracked]
    a_sizes = [len(model.actions[i]) for i in tracked]
    pols = [policies.for_agent(i, len(model.actions[i])) for i in tracked]

    # transition over tracked actions, untracked agents uniform
    untracked = [i for i in range(n) if i not in tracked]
    P = model.transition.mean(axis=tuple(1 + i for i in untracked)) if untracked else model.transition
    if model.joint_emission is not None:
        E = model.joint_emission
        E = E.sum(axis=tuple(1 + i for i in untracked)) if untracked else E
    else:
        E = None

    def check(size):
        if size > cap:
            raise EnumerationCapExceeded(f"working tensor of {size} entries exceeds cap {cap}")

    # axes: latent-prefix, h_1..h_k, state
    alpha = (model.initial[:, None] * C).T.reshape((latent_size,) + (1,) * k + (S,))
    hists: list[list[tuple[int, ...]]] = [[()] for _ in range(k)]
    L, Hs, s_ax = 0, list(range(1, k + 1)), k + 1
    for t in range(T + 1):
        check(alpha.size * int(np.prod(o_sizes)))
        # emission
        new_o = list(range(k + 2, 2 * k + 2))
        if E is not None:
            factor, factor_sub = E, [s_ax] + new_o
            operands = [alpha, [L] + Hs + [s_ax], factor, factor_sub]
        else:
            operands = [alpha, [L] + Hs + [s_ax]]
            for q, i in enumerate(tracked):
                operands += [model.emissions[i], [s_ax, new_o[q]]]
        out = [L]
        for q in range(k):
            out += [Hs[q], new_o[q]]
        out.append(s_ax)
        alpha = np.einsum(*operands, out)
        shape = [alpha.shape[0]] + [alpha.shape[1 + 2 * q] * alpha.shape[2 + 2 * q] for q in range(k)]
        alpha = alpha.reshape(shape + [S])
        hists = [[h + (o,) for h in hs for o in range(o_sizes[q])] for q, hs in enumerate(hists)]
        if t == T:
            break
        check(alpha.size * int(np.prod(a_sizes)) * S)
        # actions and transition
        new_a = list(range(k + 2, 2 * k + 2))
        s_next = 2 * k + 2
        operands = [alpha, [L] + Hs + [s_ax]]
        for q in range(k):
            pi = np.stack([np.asarray(pols[q].action_probs(h), dtype=float) for h in hists[q]])
            operands += [pi, [Hs[q], new_a[q]]]
        operands += [P, [s_ax] + new_a + [s_next]]
        out = [L]
        for q in range(k):
            out += [Hs[q], new_a[q]]
        out.append(s_next)
        alpha = np.einsum(*operands, out)
        shape = [alpha.shape[0]] + [alpha.shape[1 + 2 * q] * alpha.shape[2 + 2 * q] for q in range(k)]
        alpha = alpha.reshape(shape + [S])
        hists = [[h + (a,) for h in hs for a in range(a_sizes[q])] for q, hs in enumerate(hists)]
        # extend latent prefix with the latent symbol of the new state
        check(alpha.size * latent_size)
        alpha = np.einsum(alpha, [L] + Hs + [s_ax], C, [s_ax, s_next], [L, s_next] + Hs + [s_ax])
        alpha = alpha.reshape((-1,) + alpha.shape[2:])

    probs = alpha.sum(axis=-1)
    # drop tracked agents outside the subset
    drop = tuple(1 + q for q, i in enumerate(tracked) if i not in subset)
    if drop:
        probs = probs.sum(axis=drop)
    kept = [i for i in tracked if i in subset]
    order = [kept.index(i) for i in subset]
    probs = np.transpose(probs, [0] + [1 + q for q in order])
    out_hists = [hists[tracked.index(i)] for i in subset]
    total = probs.sum()
    if abs(total - 1.0) > HORIZON_TOL:
        raise ModelError(f"induced process mass {total!r} differs from 1")
    return JointChain(subset, T, latent_size, probs, out_hists)


# ---------------------------------------------------------------------------
# Config files


class ConfigError(ValueError):
    """Malformed or unknown structure in a config document."""


def read_config(path) -> dict:
    """Parse a TOML or JSON document, chosen by file suffix."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".json":
            return json.loads(path.read_text())
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None


MODEL_KEYS = {"kind", "horizon", "environment", "agents", "secret"}
ENV_KEYS = {"states", "initial", "transition"}
AGENT_KEYS = {"name", "states", "actions", "observations", "initial", "transition", "emission"}
SECRET_KEYS = {"labels", "of_initial"}


def _keys(doc, allowed: set, where: str, required: set | None = None) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a table")
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    missing = (allowed if required is None else required) - set(doc)
    if missing:
        raise ConfigError(f"missing keys in {where}: {sorted(missing)}")


def _array(value, where: str) -> np.ndarray:
    try:
        return np.array(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise ConfigError(f"{where} is not a rectangular numeric array") from None


def secret_from_spec(spec, env_states: Sequence[str]) -> SecretMap:
    """``"initial_component:<k>"`` or ``{labels, of_initial}`` (one label per env state)."""
    if isinstance(spec, str):
        prefix = "initial_component:"
        if not spec.startswith(prefix):
            raise ConfigError(f"unknown secret form {spec!r}")
        try:
            k = int(spec[len(prefix):])
            parts = [s.split(",")[k] for s in env_states]
        except (ValueError, IndexError):
            raise ConfigError(f"secret {spec!r} does not match the environment state labels") from None
        labels = tuple(sorted(set(parts)))
        return SecretMap(labels, of_initial=np.array([labels.index(p) for p in parts]))
    _keys(spec, SECRET_KEYS, "secret")
    labels = tuple(str(x) for x in spec["labels"])
    if len(spec["of_initial"]) != len(env_states):
        raise ConfigError("secret.of_initial needs one label per environment state")
    try:
        idx = [labels.index(str(x)) for x in spec["of_initial"]]
    except ValueError:
        raise ConfigError("secret.of_initial uses a label outside secret.labels") from None
    return SecretMap(labels, of_initial=np.array(idx))


def model_from_dict(doc: dict) -> tuple[FactoredDecPomdp, SecretMap | None]:
    """Build a factored model (and optional secret) from a parsed config document."""
    _keys(doc, MODEL_KEYS, "model", {"horizon", "environment", "agents"})
    env_doc = doc["environment"]
    _keys(env_doc, ENV_KEYS, "environment")
    env = EnvironmentChain(tuple(str(s) for s in env_doc["states"]),
                           _array(env_doc["transition"], "environment.transition"),
                           _array(env_doc["initial"], "environment.initial"))
    agents = []
    if not isinstance(doc["agents"], list):
        raise ConfigError("agents must be a list of tables")
    for k, a in enumerate(doc["agents"]):
        where = f"agents[{k}]"
        _keys(a, AGENT_KEYS, where, AGENT_KEYS - {"name"})
        agents.append(AgentBlock(
            str(a.get("name", f"agent{k}")), tuple(map(str, a["states"])), tuple(map(str, a["actions"])),
            tuple(map(str, a["observations"])), _array(a["transition"], f"{where}.transition"),
            _array(a["initial"], f"{where}.initial"), _array(a["emission"], f"{where}.emission")))
    horizon = doc["horizon"]
    if not isinstance(horizon, int) or isinstance(horizon, bool):
        raise ConfigError("horizon must be an integer")
    model = FactoredDecPomdp(horizon, env, tuple(agents))
    secret = secret_from_spec(doc["secret"], env.states) if "secret" in doc else None
    return model, secret


def model_to_dict(model: FactoredDecPomdp, secret: SecretMap | None = None) -> dict:
    """Inverse of :func:`model_from_dict` for secrets fixed by the initial state."""
    env = model.environment
    doc = {
        "horizon": int(model.horizon),
        "environment": {"states": list(env.states), "initial": env.initial.tolist(),
                        "transition": env.transition.tolist()},
        "agents": [{"name": a.name, "states": list(a.states), "actions": list(a.actions),
                    "observations": list(a.observations), "initial": a.initial.tolist(),
                    "transition": a.transition.tolist(), "emission": a.emission.tolist()}
                   for a in model.agents],
    }
    if secret is not None:
        if secret.of_initial is None:
            raise ModelError("only secrets fixed by the initial state can be exported")
        doc["secret"] = {"labels": list(secret.labels),
                         "of_initial": [secret.labels[k] for k in secret.of_initial]}
    return doc
