"""Posteriors, conditional entropies and mutual information.

Exact quantities come from dense joint tables. For a factored model the joint
over ``(latent, Y_A)`` is assembled from per-agent tables ``P(y_i | x_e)``,
each obtained by exhaustive enumeration of the single-agent flattened model.
A general (flattened) model goes through :func:`~imas2.model.induced_process`
directly, which is the brute-force route the oracles compare against.

Monte Carlo quantities use vectorised rollouts and exact per-sample filtering.
All entropies are in bits.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import (
    EnumerationCapExceeded,
    FactoredDecPomdp,
    FixedPolicySet,
    GeneralDecPomdp,
    SecretMap,
    env_trajectory_prior,
    flatten,
    induced_process,
)

DEFAULT_CAP = 20_000_000
OBJECTIVES = ("secret", "env_trajectory")
LATENTS = ("joint_trajectory", "env_trajectory", "secret")


class ZeroLikelihoodError(RuntimeError):
    """Every hypothesis assigns zero probability to an observed history."""


@dataclass
class PosteriorBelief:
    labels: tuple[str, ...]
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.min(initial=0.0) < 0 or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("posterior must be a probability vector")


def entropy(p, axis=None) -> float | np.ndarray:
    """Shannon entropy in bits with ``0 log 0 = 0``."""
    if isinstance(p, PosteriorBelief):
        p = p.probs
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=axis)


def _marginal(p: np.ndarray, keep: Sequence[int]) -> np.ndarray:
    drop = tuple(a for a in range(p.ndim) if a not in keep)
    return p.sum(axis=drop) if drop else p


def mutual_information(p: np.ndarray, a_axes: Sequence[int], b_axes: Sequence[int]) -> float:
    """I(A; B) = H(A) + H(B) - H(A, B) from a dense joint table."""
    return float(entropy(_marginal(p, a_axes)) + entropy(_marginal(p, b_axes))
                 - entropy(_marginal(p, tuple(a_axes) + tuple(b_axes))))


def definitional_mi(p: np.ndarray, a_axes: Sequence[int], b_axes: Sequence[int]) -> float:
    """I(A; B) = sum p(a, b) log p(a, b) / (p(a) p(b)), summed term by term."""
    a_axes, b_axes = tuple(a_axes), tuple(b_axes)
    pab = _marginal(p, a_axes + b_axes)
    na = len(a_axes)
    pa = pab.sum(axis=tuple(range(na, pab.ndim))).reshape(pab.shape[:na] + (1,) * (pab.ndim - na))
    pb = pab.sum(axis=tuple(range(na))).reshape((1,) * na + pab.shape[na:])
    mask = pab > 0
    ratio = pab[mask] / (np.broadcast_to(pa, pab.shape)[mask] * np.broadcast_to(pb, pab.shape)[mask])
    return float(np.sum(pab[mask] * np.log2(ratio)))


def conditional_mi(p: np.ndarray, a_axes, b_axes, c_axes) -> float:
    """I(A; B | C) = sum p(a,b,c) log p(a,b,c) p(c) / (p(a,c) p(b,c))."""
    a_axes, b_axes, c_axes = tuple(a_axes), tuple(b_axes), tuple(c_axes)
    keep = a_axes + b_axes + c_axes
    q = _marginal(p, keep)
    # q axes are in increasing original order; map
    order = sorted(keep)
    pos = {ax: k for k, ax in enumerate(order)}
    A = tuple(pos[a] for a in a_axes)
    B = tuple(pos[b] for b in b_axes)
    C = tuple(pos[c] for c in c_axes)
    pac = q.sum(axis=B, keepdims=True)
    pbc = q.sum(axis=A, keepdims=True)
    pc = q.sum(axis=A + B, keepdims=True)
    mask = q > 0
    num = q * np.broadcast_to(pc, q.shape)
    den = np.broadcast_to(pac, q.shape) * np.broadcast_to(pbc, q.shape)
    return float(np.sum(q[mask] * np.log2(num[mask] / den[mask])))


def conditional_entropy(p: np.ndarray, target_axes, given_axes) -> float:
    """H(target | given) = H(target, given) - H(given)."""
    return float(entropy(_marginal(p, tuple(target_axes) + tuple(given_axes)))
                 - entropy(_marginal(p, tuple(given_axes))))


# ---------------------------------------------------------------------------
# Exact tables


@dataclass
class AgentTable:
    """Per-agent conditional table ``P(y_i | x_e)`` (or ``P(x_i, y_i | x_e)``)."""

    histories: list[tuple[int, ...]]
    cond: np.ndarray  # (n_xe, n_y) or (n_xe, n_xi, n_y)


def agent_table(model: FactoredDecPomdp, i: int, policies: FixedPolicySet,
                with_local: bool = False, include_actions: bool = True,
                cap: int = DEFAULT_CAP) -> AgentTable:
    """Exhaustively enumerate agent ``i``'s history law given each env trajectory."""
    ag = model.agents[i]
    sub = flatten(model.restrict([i]))
    pol = FixedPolicySet({0: policies.for_agent(i, len(ag.actions))})
    Se, Si, T = model.environment.n_states, len(ag.states), model.horizon
    if with_local:
        chain = induced_process(sub, pol, [0], cap=cap)
    else:
        chain = induced_process(sub, pol, [0], cap=cap, latent=sub.env_component(),
                                latent_size=Se)
    if not include_actions:
        chain = chain.observations_only()
    joint = chain.probs
    prior = env_trajectory_prior(model.environment, T)
    safe = np.where(prior > 0, prior, 1.0)
    if with_local:
        ny = joint.shape[1]
        joint = joint.reshape((Se, Si) * (T + 1) + (ny,))
        perm = [2 * t for t in range(T + 1)] + [2 * t + 1 for t in range(T + 1)] + [2 * (T + 1)]
        joint = joint.transpose(perm).reshape(Se ** (T + 1), Si ** (T + 1), ny)
        cond = joint / safe[:, None, None]
        cond[prior == 0] = 0.0
    else:
        cond = joint / safe[:, None]
        cond[prior == 0] = 0.0
    # drop histories that can never occur
    live = cond.reshape(-1, cond.shape[-1]).sum(axis=0) > 0
    hist = [h for h, keep in zip(chain.histories[0], live) if keep]
    return AgentTable(hist, cond[..., live])


@dataclass
class ExactJoint:
    """Dense joint ``probs[latent, y_1, ..., y_k]`` for an agent subset."""

    subset: tuple[int, ...]
    latent: str
    probs: np.ndarray
    histories: list[list[tuple[int, ...]]] = field(default_factory=list)

    @property
    def y_axes(self) -> tuple[int, ...]:
        return tuple(range(1, self.probs.ndim))


def _secret_onehot(secret: SecretMap, n_env: int, horizon: int) -> np.ndarray:
    z = secret.table(n_env, horizon)
    M = np.zeros((z.size, secret.size))
    M[np.arange(z.size), z] = 1.0
    return M


def exact_joint(model, policies: FixedPolicySet, subset: Sequence[int], latent: str,
                secret: SecretMap | None = None, include_actions: bool = True,
                cap: int = DEFAULT_CAP, tables: dict | None = None) -> ExactJoint:
    """Exact joint law of a latent variable and the subset's histories.

    ``latent`` is one of ``joint_trajectory``, ``env_trajectory``, ``secret``.
    For factored models the joint-trajectory latent carries the environment
    trajectory and the subset's own local-state trajectories; the other
    agents' local trajectories are independent of ``Y_A`` given those and do
    not change any information quantity involving ``Y_A``.
    """
    subset = tuple(subset)
    if latent not in LATENTS:
        raise ValueError(f"unknown latent {latent!r}")
    if latent == "secret" and secret is None:
        raise ValueError("secret latent requires a SecretMap")
    if isinstance(model, GeneralDecPomdp):
        return _exact_joint_general(model, policies, subset, latent, secret, include_actions, cap)

    T = model.horizon
    Se = model.environment.n_states
    prior = env_trajectory_prior(model.environment, T)
    with_local = latent == "joint_trajectory"
    tabs = []
    for i in subset:
        key = (i, with_local, include_actions)
        if tables is not None and key in tables:
            tabs.append(tables[key])
            continue
        tab = agent_table(model, i, policies, with_local, include_actions, cap)
        if tables is not None:
            tables[key] = tab
        tabs.append(tab)

    size = prior.size
    for tab in tabs:
        size *= int(np.prod(tab.cond.shape[1:]))
    if size > cap:
        raise EnumerationCapExceeded(f"joint table of {size} entries exceeds cap {cap}")

    k = len(subset)
    if with_local:
        # axes: x_e, x_1, y_1, x_2, y_2, ...
        p = prior
        for tab in tabs:
            p = p[..., None, None] * tab.cond.reshape(
                (tab.cond.shape[0],) + (1,) * (p.ndim - 1) + tab.cond.shape[1:])
        x_axes = [0] + [1 + 2 * q for q in range(k)]
        y_axes = [2 + 2 * q for q in range(k)]
        p = p.transpose(x_axes + y_axes)
        p = p.reshape((-1,) + p.shape[k + 1:])
    else:
        p = prior
        for tab in tabs:
            p = p[..., None] * tab.cond.reshape((tab.cond.shape[0],) + (1,) * (p.ndim - 1)
                                                + (tab.cond.shape[1],))
        if latent == "secret":
            Z = _secret_onehot(secret, Se, T)
            p = np.tensordot(Z.T, p, axes=([1], [0]))
    return ExactJoint(subset, latent, p, [t.histories for t in tabs])


def _exact_joint_general(model: GeneralDecPomdp, policies, subset, latent, secret,
                         include_actions, cap) -> ExactJoint:
    T = model.horizon
    if latent == "joint_trajectory":
        chain = induced_process(model, policies, subset, cap=cap)
    else:
        env = model.env_component()
        Se = int(env.max()) + 1
        chain = induced_process(model, policies, subset, cap=cap, latent=env, latent_size=Se)
    if not include_actions:
        chain = chain.observations_only()
    p = chain.probs
    if latent == "secret":
        Z = _secret_onehot(secret, chain.latent_size, T)
        p = np.tensordot(Z.T, p, axes=([1], [0]))
    return ExactJoint(tuple(subset), latent, p, chain.histories)


def exact_conditional_entropy(model, policies: FixedPolicySet, subset: Sequence[int],
                              objective: str = "secret", secret: SecretMap | None = None,
                              include_actions: bool = True, cap: int = DEFAULT_CAP) -> float:
    """H(latent | Y_subset) from the exact joint table."""
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    latent = "secret" if objective == "secret" else "env_trajectory"
    j = exact_joint(model, policies, subset, latent, secret, include_actions, cap)
    return conditional_entropy(j.probs, (0,), j.y_axes)


def exact_mutual_information(model, policies: FixedPolicySet, subset: Sequence[int],
                             latent: str = "env_trajectory", secret: SecretMap | None = None,
                             include_actions: bool = True, cap: int = DEFAULT_CAP) -> float:
    """I(latent; Y_subset) = H(latent) - H(latent | Y_subset), exactly."""
    if not subset:
        return 0.0
    j = exact_joint(model, policies, subset, latent, secret, include_actions, cap)
    return mutual_information(j.probs, (0,), j.y_axes)


def prior_entropy(model: FactoredDecPomdp, objective: str = "secret",
                  secret: SecretMap | None = None) -> float:
    env = model.environment
    if objective == "secret":
        if secret.of_initial is not None:
            return float(entropy(np.bincount(np.asarray(secret.of_initial), weights=env.initial,
                                             minlength=secret.size)))
        prior = env_trajectory_prior(env, model.horizon)
        z = secret.table(env.n_states, model.horizon)
        return float(entropy(np.bincount(z, weights=prior, minlength=secret.size)))
    # chain rule over the Markov chain: H(S_0) + sum_t E[H(S_{t+1} | S_t)]
    h_rows = entropy(env.transition, axis=1)
    p, h = env.initial, float(entropy(env.initial))
    for _ in range(model.horizon):
        h += float(p @ h_rows)
        p = p @ env.transition
    return h


@dataclass
class DecompositionTerms:
    mi_secret: float
    mi_env: float
    h_env: float
    h_secret: float
    h_env_given_secret_obs: float

    @property
    def residual(self) -> float:
        rhs = self.mi_env - self.h_env + self.h_secret + self.h_env_given_secret_obs
        return abs(self.mi_secret - rhs)


def decomposition_terms(model, policies: FixedPolicySet, subset: Sequence[int],
                        secret: SecretMap, include_actions: bool = True,
                        cap: int = DEFAULT_CAP) -> DecompositionTerms:
    """Compute the five terms of I(Z;Y) = I(X_e;Y) - H(X_e) + H(Z) + H(X_e|Z,Y).

    Each term is computed from its own table by its own definition.
    """
    env_joint = exact_joint(model, policies, subset, "env_trajectory", None, include_actions, cap)
    sec_joint = exact_joint(model, policies, subset, "secret", secret, include_actions, cap)
    p = env_joint.probs
    y_axes = env_joint.y_axes
    if isinstance(model, GeneralDecPomdp):
        Se = int(model.env_component().max()) + 1
    else:
        Se = model.environment.n_states
    z = secret.table(Se, model.horizon)
    # P(x_e, z, y): z is a function of x_e
    p_xe = _marginal(p, (0,))
    h_xe = float(entropy(p_xe))
    h_z = float(entropy(_marginal(sec_joint.probs, (0,))))
    if y_axes:
        mi_env = definitional_mi(p, (0,), y_axes)
        mi_sec = definitional_mi(sec_joint.probs, (0,), sec_joint.y_axes)
        # H(X_e | Z, Y) = -sum p(x,y) log p(x | z(x), y)
        pzy = sec_joint.probs[z]  # p(z(x), y) aligned with x
        mask = p > 0
        h_cond = float(-np.sum(p[mask] * np.log2(p[mask] / pzy[mask])))
    else:
        mi_env = mi_sec = 0.0
        pz = _marginal(sec_joint.probs, (0,))[z]
        mask = p_xe > 0
        h_cond = float(-np.sum(p_xe[mask] * np.log2(p_xe[mask] / pz[mask])))
    return DecompositionTerms(mi_sec, mi_env, h_xe, h_z, h_cond)


def decomposition_identity_check(model, policies, subset, secret, include_actions=True,
                                 cap=DEFAULT_CAP) -> float:
    return decomposition_terms(model, policies, subset, secret, include_actions, cap).residual


# ---------------------------------------------------------------------------
# Monte Carlo rollouts


@dataclass
class TrajectoryBatch:
    """``m`` joint rollouts of the environment and a set of agents."""

    env: np.ndarray  # (m, T+1)
    obs: dict[int, np.ndarray] = field(default_factory=dict)  # (m, T+1)
    actions: dict[int, np.ndarray] = field(default_factory=dict)  # (m, T)
    local: dict[int, np.ndarray] = field(default_factory=dict)  # (m, T+1)
    logp: dict[int, np.ndarray] = field(default_factory=dict)  # (m, T)
    secret: np.ndarray | None = None

    @property
    def m(self) -> int:
        return self.env.shape[0]

    @property
    def horizon(self) -> int:
        return self.env.shape[1] - 1

    def history(self, sample: int, agent: int) -> tuple[int, ...]:
        o, a = self.obs[agent][sample], self.actions[agent][sample]
        out = []
        for t in range(len(o)):
            out.append(int(o[t]))
            if t < len(a):
                out.append(int(a[t]))
        return tuple(out)


def _categorical(rng: np.random.Generator, p: np.ndarray) -> np.ndarray:
    u = rng.random((p.shape[0], 1))
    idx = (np.cumsum(p, axis=1) < u).sum(axis=1)
    return np.minimum(idx, p.shape[1] - 1)


def sample_env(model: FactoredDecPomdp, m: int, seed) -> np.ndarray:
    env = model.environment
    rng = np.random.default_rng(_seed_seq(seed, 0))
    out = np.empty((m, model.horizon + 1), dtype=np.int64)
    out[:, 0] = _categorical(rng, np.broadcast_to(env.initial, (m, env.n_states)))
    for t in range(model.horizon):
        out[:, t + 1] = _categorical(rng, env.transition[out[:, t]])
    return out


def _seed_seq(seed, *path) -> list[int]:
    base = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    return base + [int(p) for p in path]


def sample_agent(model: FactoredDecPomdp, i: int, policy, env: np.ndarray, seed,
                 batch: TrajectoryBatch) -> None:
    """Roll agent ``i`` forward along the given environment trajectories."""
    ag = model.agents[i]
    rng = np.random.default_rng(_seed_seq(seed, 1, i))
    m, T1 = env.shape
    T = T1 - 1
    Si = len(ag.states)
    local = np.empty((m, T1), dtype=np.int64)
    obs = np.empty((m, T1), dtype=np.int64)
    acts = np.empty((m, T), dtype=np.int64)
    logp = np.empty((m, T))
    local[:, 0] = _categorical(rng, np.broadcast_to(ag.initial, (m, Si)))
    carry = policy.start(m)
    prev = None
    rows = np.arange(m)
    for t in range(T1):
        obs[:, t] = _categorical(rng, ag.emission[env[:, t], local[:, t]])
        if t == T:
            break
        probs, carry = policy.probs(carry, obs[:, t], prev)
        a = _categorical(rng, probs)
        with np.errstate(divide="ignore"):
            logp[:, t] = np.log(probs[rows, a])
        acts[:, t] = a
        prev = a
        local[:, t + 1] = _categorical(rng, ag.transition[local[:, t], a])
    batch.obs[i], batch.actions[i], batch.local[i], batch.logp[i] = obs, acts, local, logp


def sample_batch(model: FactoredDecPomdp, policies: FixedPolicySet, agents: Sequence[int],
                 m: int, seed, secret: SecretMap | None = None) -> TrajectoryBatch:
    """Sample ``m`` rollouts. Each agent draws from its own seeded stream, so the
    environment and every agent's samples are unchanged when agents are added."""
    env = sample_env(model, m, seed)
    batch = TrajectoryBatch(env)
    for i in agents:
        sample_agent(model, i, policies.for_agent(i, len(model.agents[i].actions)), env, seed, batch)
    if secret is not None:
        if secret.of_initial is not None:
            batch.secret = np.asarray(secret.of_initial)[env[:, 0]]
        else:
            batch.secret = np.array([secret(tuple(row)) for row in env])
    return batch


# ---------------------------------------------------------------------------
# Filtering


def _known_local(ag, actions: np.ndarray) -> np.ndarray:
    """Local-state sequence of a deterministic-local agent from its actions."""
    m, T = actions.shape
    s = np.empty((m, T + 1), dtype=np.int64)
    s[:, 0] = int(np.argmax(ag.initial))
    det = np.argmax(ag.transition, axis=-1)
    for t in range(T):
        s[:, t + 1] = det[s[:, t], actions[:, t]]
    return s


def secret_posterior_batch(model: FactoredDecPomdp, secret: SecretMap, batch: TrajectoryBatch,
                           agents: Sequence[int]) -> np.ndarray:
    """P(z | y_agents) for every sample, shape ``(m, |Z|)``.

    Runs a forward recursion over (secret, environment state, hidden local
    states of agents whose local dynamics are stochastic). Actions enter only
    through the local dynamics; policy factors cancel.
    """
    if secret.of_initial is None:
        post = env_posterior_batch(model, batch, agents)
        z = secret.table(model.environment.n_states, model.horizon)
        out = np.zeros((batch.m, secret.size))
        for k in range(secret.size):
            out[:, k] = post[:, z == k].sum(axis=1)
        return out
    env = model.environment
    Se, T, m = env.n_states, batch.horizon, batch.m
    Z = secret.size
    det = [i for i in agents if model.agents[i].deterministic_local()]
    hid = [i for i in agents if i not in det]
    known = {i: _known_local(model.agents[i], batch.actions[i]) for i in det}
    hid_sizes = [len(model.agents[i].states) for i in hid]
    rows = np.arange(m)

    def obs_factor(t):
        f = np.ones((m, 1, Se) + (1,) * len(hid))
        for i in det:
            E = model.agents[i].emission  # (Se, Si, Oi)
            lik = E[:, known[i][:, t], batch.obs[i][:, t]].T  # (m, Se)
            f = f * lik.reshape((m, 1, Se) + (1,) * len(hid))
        for q, i in enumerate(hid):
            E = model.agents[i].emission
            lik = np.moveaxis(E[:, :, batch.obs[i][:, t]], -1, 0)  # (m, Se, Si)
            shape = [m, 1, Se] + [1] * len(hid)
            shape[3 + q] = hid_sizes[q]
            f = f * lik.reshape(shape)
        return f

    init = np.zeros((Z, Se))
    init[np.asarray(secret.of_initial), np.arange(Se)] = env.initial
    alpha = np.broadcast_to(init.reshape((1, Z, Se) + (1,) * len(hid)), (m, Z, Se) + (1,) * len(hid))
    for q, i in enumerate(hid):
        shape = [1, 1, 1] + [1] * len(hid)
        shape[3 + q] = hid_sizes[q]
        alpha = alpha * model.agents[i].initial.reshape(shape)
    alpha = alpha * obs_factor(0)
    alpha = _normalise(alpha)
    for t in range(T):
        alpha = np.moveaxis(np.tensordot(alpha, env.transition, axes=([2], [0])), -1, 2)
        for q, i in enumerate(hid):
            Pa = model.agents[i].transition[:, batch.actions[i][:, t], :]  # (Si, m, Si')
            Pa = np.moveaxis(Pa, 1, 0)
            ax = 3 + q
            alpha = np.moveaxis(alpha, ax, -1)
            alpha = np.einsum("m...s,mst->m...t", alpha, Pa)
            alpha = np.moveaxis(alpha, -1, ax)
        alpha = alpha * obs_factor(t + 1)
        alpha = _normalise(alpha)
    return alpha.reshape(m, Z, -1).sum(axis=2)


def _normalise(alpha: np.ndarray) -> np.ndarray:
    tot = alpha.reshape(alpha.shape[0], -1).sum(axis=1)
    if np.any(tot <= 0) or not np.all(np.isfinite(tot)):
        raise ZeroLikelihoodError("observed history has zero likelihood under every hypothesis")
    return alpha / tot.reshape((-1,) + (1,) * (alpha.ndim - 1))


def env_posterior_batch(model: FactoredDecPomdp, batch: TrajectoryBatch, agents: Sequence[int],
                        cap: int = 2_000_000) -> np.ndarray:
    """P(x_e | y_agents) over all environment trajectories, shape ``(m, n_xe)``."""
    env = model.environment
    Se, T, m = env.n_states, batch.horizon, batch.m
    n_xe = Se ** (T + 1)
    if n_xe * m > cap:
        raise EnumerationCapExceeded(f"{m} x {n_xe} trajectory posterior exceeds cap {cap}")
    prior = env_trajectory_prior(env, T)
    traj = np.stack(np.unravel_index(np.arange(n_xe), (Se,) * (T + 1)), axis=1)  # (n_xe, T+1)
    with np.errstate(divide="ignore"):
        logw = np.broadcast_to(np.log(prior), (m, n_xe)).copy()
    for i in agents:
        ag = model.agents[i]
        o = batch.obs[i]
        if ag.deterministic_local():
            s = _known_local(ag, batch.actions[i])
            for t in range(T + 1):
                lik = ag.emission[traj[None, :, t], s[:, t, None], o[:, t, None]]
                with np.errstate(divide="ignore"):
                    logw += np.log(lik)
        else:
            beta = ag.initial[None, None, :] * np.moveaxis(
                ag.emission[traj[:, 0]][:, :, o[:, 0]], -1, 0)  # (m, n_xe, Si)
            logc = np.zeros((m, n_xe))
            for t in range(T):
                Pa = np.moveaxis(ag.transition[:, batch.actions[i][:, t], :], 1, 0)  # (m, Si, Si)
                beta = np.einsum("mxs,mst->mxt", beta, Pa)
                beta = beta * np.moveaxis(ag.emission[traj[:, t + 1]][:, :, o[:, t + 1]], -1, 0)
                c = beta.sum(axis=2)
                safe = np.where(c > 0, c, 1.0)
                beta = beta / safe[..., None]
                with np.errstate(divide="ignore"):
                    logc += np.where(c > 0, np.log(safe), -np.inf)
            tot = beta.sum(axis=2)
            with np.errstate(divide="ignore"):
                logw += logc + np.log(tot)
    mx = logw.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(mx)):
        raise ZeroLikelihoodError("observed history has zero likelihood under every trajectory")
    w = np.exp(logw - mx)
    return w / w.sum(axis=1, keepdims=True)


def sample_entropies(model: FactoredDecPomdp, batch: TrajectoryBatch, agents: Sequence[int],
                     objective: str = "secret", secret: SecretMap | None = None) -> np.ndarray:
    """Per-sample posterior entropy H(latent | Y = y_m) in bits."""
    if objective == "secret":
        if not agents:
            return np.full(batch.m, prior_entropy(model, "secret", secret))
        return entropy(secret_posterior_batch(model, secret, batch, agents), axis=1)
    if objective == "env_trajectory":
        if not agents:
            return np.full(batch.m, prior_entropy(model, "env_trajectory"))
        return entropy(env_posterior_batch(model, batch, agents), axis=1)
    raise ValueError(f"unknown objective {objective!r}")


def mc_conditional_entropy(model: FactoredDecPomdp, policies: FixedPolicySet,
                           subset: Sequence[int], objective: str = "secret", m: int = 1000,
                           seed=0, secret: SecretMap | None = None) -> tuple[float, float]:
    """Monte Carlo estimate of H(latent | Y_subset) and its standard error."""
    subset = list(subset)
    if not subset:
        return prior_entropy(model, objective, secret), 0.0
    batch = sample_batch(model, policies, subset, m, seed, secret)
    h = sample_entropies(model, batch, subset, objective, secret)
    return float(h.mean()), float(h.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0


def forward_secret_posterior(model: FactoredDecPomdp, secret: SecretMap,
                             histories: dict[int, Sequence[int]]) -> PosteriorBelief:
    """P(z | y) for one set of interleaved local histories keyed by agent index."""
    agents = sorted(histories)
    lengths = {len(histories[i]) for i in agents}
    if len(lengths) > 1:
        raise ValueError("all histories must have the same length")
    batch = TrajectoryBatch(np.zeros((1, model.horizon + 1), dtype=np.int64))
    for i in agents:
        h = list(histories[i])
        ag = model.agents[i]
        o = np.array(h[0::2], dtype=np.int64)
        a = np.array(h[1::2], dtype=np.int64)
        if len(o) != model.horizon + 1 or len(a) != model.horizon:
            raise ValueError(f"history of agent {i} does not span the horizon")
        if o.max(initial=0) >= len(ag.observations) or a.max(initial=0) >= len(ag.actions):
            raise ValueError(f"history of agent {i} uses an unknown label")
        batch.obs[i] = o[None]
        batch.actions[i] = a[None]
    post = secret_posterior_batch(model, secret, batch, agents)[0]
    return PosteriorBelief(secret.labels, post)


def exact_secret_posterior(model: FactoredDecPomdp, secret: SecretMap,
                           histories: dict[int, Sequence[int]]) -> np.ndarray:
    """P(z | y) by summing over every environment trajectory explicitly."""
    env = model.environment
    T = model.horizon
    post = np.zeros(secret.size)
    for traj in itertools.product(range(env.n_states), repeat=T + 1):
        p = env.initial[traj[0]]
        for t in range(T):
            p *= env.transition[traj[t], traj[t + 1]]
        if p == 0:
            continue
        for i, h in histories.items():
            ag = model.agents[i]
            o, a = h[0::2], h[1::2]
            # sum over local-state paths
            belief = ag.initial * ag.emission[traj[0], :, o[0]]
            for t in range(T):
                belief = (belief @ ag.transition[:, a[t], :]) * ag.emission[traj[t + 1], :, o[t + 1]]
            p *= belief.sum()
        post[secret(traj)] += p
    if post.sum() == 0:
        raise ZeroLikelihoodError("history impossible under the model")
    return post / post.sum()


__all__ = [
    "AgentTable", "ClassificationReport", "DecompositionTerms", "ExactJoint", "PosteriorBelief", "TrajectoryBatch",
    "ZeroLikelihoodError", "agent_table", "conditional_entropy", "conditional_mi",
    "classify_episodes", "decomposition_identity_check", "decomposition_terms", "definitional_mi", "entropy",
    "env_posterior_batch", "exact_conditional_entropy", "exact_joint", "exact_mutual_information",
    "exact_secret_posterior", "forward_secret_posterior", "mc_conditional_entropy",
    "mutual_information", "prior_entropy", "sample_batch", "sample_entropies",
    "secret_posterior_batch",
]


@dataclass
class ClassificationReport:
    """Confusion counts (rows: true secret, columns: MAP estimate) over episodes."""

    labels: tuple[str, ...]
    confusion: np.ndarray
    mean_entropy: float
    entropy_stderr: float
    chance: float

    @property
    def episodes(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.confusion.sum())

    @property
    def chance_sigma(self) -> float:
        n = self.episodes
        return math.sqrt(self.chance * (1 - self.chance) / n) if n else 0.0

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "confusion": self.confusion.astype(int).tolist(),
                "episodes": self.episodes, "accuracy": self.accuracy,
                "mean_posterior_entropy": self.mean_entropy, "entropy_stderr": self.entropy_stderr,
                "chance_rate": self.chance, "chance_sigma": self.chance_sigma}


def classify_episodes(model: FactoredDecPomdp, secret: SecretMap, policies: FixedPolicySet,
                      agents: Sequence[int], episodes: int = 1000, seed=0) -> ClassificationReport:
    """Simulate episodes and classify the secret by the posterior mode (ties -> lowest label)."""
    agents = list(agents)
    batch = sample_batch(model, policies, agents, episodes, seed, secret)
    if agents:
        post = secret_posterior_batch(model, secret, batch, agents)
    else:
        post = np.broadcast_to(_secret_prior(model, secret), (episodes, secret.size))
    # argmax returns the first maximal index, i.e. label 0 on ties
    guess = np.argmax(post, axis=1)
    conf = np.zeros((secret.size, secret.size), dtype=np.int64)
    np.add.at(conf, (batch.secret, guess), 1)
    h = entropy(post, axis=1)
    se = float(h.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0
    prior_z = _secret_prior(model, secret)
    return ClassificationReport(secret.labels, conf, float(h.mean()), se, float(prior_z.max()))


def _secret_prior(model: FactoredDecPomdp, secret: SecretMap) -> np.ndarray:
    env = model.environment
    if secret.of_initial is not None:
        return np.bincount(np.asarray(secret.of_initial), weights=env.initial, minlength=secret.size)
    traj = env_trajectory_prior(env, model.horizon)
    return np.bincount(secret.table(env.n_states, model.horizon), weights=traj, minlength=secret.size)
