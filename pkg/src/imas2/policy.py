"""Recurrent stochastic policies over local histories.

A single-layer gated recurrent cell reads, at every step, the one-hot current
observation concatenated with the one-hot previous action, and a linear
softmax readout produces the action distribution. Gradients of history
log-likelihoods are computed by hand-written backpropagation through time.

    z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
    r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
    n_t = tanh(W_n x_t + U_n (r_t * h_{t-1}) + b_n)
    h_t = (1 - z_t) * n_t + z_t * h_{t-1}
    pi_t = (1 - eps) * softmax(W_o h_t + b_o) + eps / |A|
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1
DEFAULT_FLOOR = 1e-3


class PolicyCollapseError(FloatingPointError):
    """A history contains an action the policy assigns zero probability."""


@dataclass(frozen=True)
class PolicyDescriptor:
    n_obs: int
    n_actions: int
    hidden: int = 16
    feed_actions: bool = True

    def __post_init__(self):
        if self.n_obs <= 0 or self.n_actions <= 0 or self.hidden <= 0:
            raise ValueError(f"policy sizes must be positive: {self}")

    @property
    def input_size(self) -> int:
        return self.n_obs + (self.n_actions if self.feed_actions else 0)

    def layout(self) -> dict[str, tuple[slice, tuple[int, ...]]]:
        h, d, a = self.hidden, self.input_size, self.n_actions
        shapes = [
            ("W_z", (h, d)), ("W_r", (h, d)), ("W_n", (h, d)),
            ("U_z", (h, h)), ("U_r", (h, h)), ("U_n", (h, h)),
            ("b_z", (h,)), ("b_r", (h,)), ("b_n", (h,)),
            ("W_o", (a, h)), ("b_o", (a,)),
        ]
        out, start = {}, 0
        for name, shape in shapes:
            size = int(np.prod(shape))
            out[name] = (slice(start, start + size), shape)
            start += size
        return out

    @property
    def size(self) -> int:
        return sum(sl.stop - sl.start for sl, _ in self.layout().values())


@dataclass(frozen=True, eq=False)
class PolicyParams:
    descriptor: PolicyDescriptor
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.shape != (self.descriptor.size,):
            raise ValueError(f"parameter vector has shape {v.shape}, expected ({self.descriptor.size},)")
        if not np.all(np.isfinite(v)):
            raise ValueError("parameter vector has non-finite entries")
        object.__setattr__(self, "vector", v)

    def blocks(self) -> dict[str, np.ndarray]:
        return {k: self.vector[sl].reshape(shape) for k, (sl, shape) in self.descriptor.layout().items()}

    def replace(self, vector: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.descriptor, vector)


@dataclass(frozen=True, eq=False)
class PolicyState:
    hidden: np.ndarray
    last_action: int | None = None


def init_params(descriptor: PolicyDescriptor, seed, scale: float = 0.1) -> PolicyParams:
    rng = np.random.default_rng(seed)
    return PolicyParams(descriptor, rng.uniform(-scale, scale, descriptor.size))


def zero_params(descriptor: PolicyDescriptor) -> PolicyParams:
    return PolicyParams(descriptor, np.zeros(descriptor.size))


def initial_state(descriptor: PolicyDescriptor) -> PolicyState:
    return PolicyState(np.zeros(descriptor.hidden))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _inputs(d: PolicyDescriptor, obs: np.ndarray, prev: np.ndarray | None) -> np.ndarray:
    m = obs.shape[0]
    x = np.zeros((m, d.input_size))
    x[np.arange(m), obs] = 1.0
    if d.feed_actions and prev is not None:
        x[np.arange(m), d.n_obs + prev] = 1.0
    return x


def _cell(B: dict, x: np.ndarray, h: np.ndarray):
    z = _sigmoid(x @ B["W_z"].T + h @ B["U_z"].T + B["b_z"])
    r = _sigmoid(x @ B["W_r"].T + h @ B["U_r"].T + B["b_r"])
    n = np.tanh(x @ B["W_n"].T + (r * h) @ B["U_n"].T + B["b_n"])
    return (1.0 - z) * n + z * h, (z, r, n)


def _dist(B: dict, h: np.ndarray, floor: float, n_actions: int) -> tuple[np.ndarray, np.ndarray]:
    p = _softmax(h @ B["W_o"].T + B["b_o"])
    return (1.0 - floor) * p + floor / n_actions, p


def step(params: PolicyParams, state: PolicyState, observation: int,
         floor: float = 0.0) -> tuple[np.ndarray, PolicyState]:
    """Consume one observation; return the action distribution and new carry.

    The carry's ``last_action`` is the previous action (fed as input); record
    the action actually taken with :func:`record_action` before the next step.
    """
    d = params.descriptor
    if not 0 <= observation < d.n_obs:
        raise ValueError(f"unknown observation index {observation}")
    B = params.blocks()
    prev = None if state.last_action is None else np.array([state.last_action])
    x = _inputs(d, np.array([observation]), prev)
    h, _ = _cell(B, x, state.hidden[None])
    pi, _ = _dist(B, h, floor, d.n_actions)
    return pi[0], PolicyState(h[0], None)


def record_action(state: PolicyState, action: int) -> PolicyState:
    return PolicyState(state.hidden, int(action))


def history_distribution(params: PolicyParams, history, floor: float = 0.0) -> np.ndarray:
    """Action distribution after replaying a history ending in an observation."""
    state = initial_state(params.descriptor)
    pi = None
    for k, sym in enumerate(history):
        if k % 2 == 0:
            pi, state = step(params, state, int(sym), floor)
        else:
            state = record_action(state, int(sym))
    if pi is None:
        raise ValueError("history must contain at least one observation")
    return pi


def batch_logprob_grad(params: PolicyParams, obs: np.ndarray, actions: np.ndarray,
                       weights: np.ndarray | None = None, floor: float = 0.0,
                       need_grad: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
    """Log-likelihood of each history's actions and the weighted gradient.

    ``obs`` is ``(m, L)``, ``actions`` is ``(m, n)`` with ``n <= L``; the
    action at step ``t`` is scored against the distribution produced after
    observation ``t``. Returns per-history log-probabilities ``(m,)`` and
    ``sum_m weights[m] * grad log P_theta(actions_m | obs_m)``.
    """
    d = params.descriptor
    obs = np.asarray(obs, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    m, n = actions.shape
    if obs.shape[0] != m or obs.shape[1] < n:
        raise ValueError("every action needs a preceding observation")
    if obs.size and (obs.min() < 0 or obs.max() >= d.n_obs):
        raise ValueError("history contains an unknown observation label")
    if actions.size and (actions.min() < 0 or actions.max() >= d.n_actions):
        raise ValueError("history contains an unknown action label")
    B = params.blocks()
    rows = np.arange(m)
    h = np.zeros((m, d.hidden))
    cache = []
    logp = np.zeros(m)
    for t in range(n):
        x = _inputs(d, obs[:, t], actions[:, t - 1] if t > 0 else None)
        h_new, gates = _cell(B, x, h)
        pi, p = _dist(B, h_new, floor, d.n_actions)
        pa = pi[rows, actions[:, t]]
        if np.any(pa <= 0):
            raise PolicyCollapseError("zero-probability action in history")
        logp += np.log(pa)
        cache.append((x, h, h_new, gates, p, pa))
        h = h_new
    if not need_grad:
        return logp, None
    w = np.ones(m) if weights is None else np.asarray(weights, dtype=float)
    G = {k: np.zeros_like(v) for k, v in B.items()}
    dh_next = np.zeros((m, d.hidden))
    for t in reversed(range(n)):
        x, h_prev, h_t, (z, r, nn), p, pa = cache[t]
        a = actions[:, t]
        # d log pi_a / d logits_k = (1 - eps) p_a (delta_ak - p_k) / pi_a
        coef = w * (1.0 - floor) * p[rows, a] / pa
        g = -p * coef[:, None]
        g[rows, a] += coef
        G["W_o"] += g.T @ h_t
        G["b_o"] += g.sum(axis=0)
        dh = g @ B["W_o"] + dh_next
        dz = dh * (h_prev - nn)
        dn = dh * (1.0 - z)
        dh_prev = dh * z
        dan = dn * (1.0 - nn ** 2)
        G["W_n"] += dan.T @ x
        G["b_n"] += dan.sum(axis=0)
        rh = r * h_prev
        G["U_n"] += dan.T @ rh
        drh = dan @ B["U_n"]
        dr = drh * h_prev
        dh_prev += drh * r
        dar = dr * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        G["W_r"] += dar.T @ x
        G["U_r"] += dar.T @ h_prev
        G["b_r"] += dar.sum(axis=0)
        G["W_z"] += daz.T @ x
        G["U_z"] += daz.T @ h_prev
        G["b_z"] += daz.sum(axis=0)
        dh_prev += dar @ B["U_r"] + daz @ B["U_z"]
        dh_next = dh_prev
    grad = np.zeros(d.size)
    for k, (sl, _) in d.layout().items():
        grad[sl] = G[k].ravel()
    return logp, grad


def logprob_and_grad(params: PolicyParams, history, floor: float = 0.0) -> tuple[float, np.ndarray]:
    """log P_theta(actions in history | observations) and its gradient."""
    history = [int(v) for v in history]
    obs = np.array(history[0::2], dtype=np.int64)[None]
    acts = np.array(history[1::2], dtype=np.int64)[None]
    logp, grad = batch_logprob_grad(params, obs, acts, floor=floor)
    return float(logp[0]), grad


class RecurrentPolicy:
    """Adapter exposing :class:`PolicyParams` through the model's policy protocol."""

    def __init__(self, params: PolicyParams, floor: float = DEFAULT_FLOOR):
        self.params = params
        self.floor = floor
        self.n_actions = params.descriptor.n_actions
        self._blocks = params.blocks()
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    def action_probs(self, history):
        key = tuple(int(v) for v in history)
        out = self._cache.get(key)
        if out is None:
            out = history_distribution(self.params, key, self.floor)
            self._cache[key] = out
        return out

    def start(self, m):
        return np.zeros((m, self.params.descriptor.hidden))

    def probs(self, carry, obs, prev_action):
        d = self.params.descriptor
        x = _inputs(d, np.asarray(obs, dtype=np.int64), prev_action)
        h, _ = _cell(self._blocks, x, carry)
        pi, _ = _dist(self._blocks, h, self.floor, d.n_actions)
        return pi, h

    def __repr__(self):
        return f"RecurrentPolicy(hidden={self.params.descriptor.hidden}, floor={self.floor})"


def save_checkpoint(path, params: PolicyParams, floor: float = DEFAULT_FLOOR, **meta) -> None:
    d = params.descriptor
    doc = {
        "version": CHECKPOINT_VERSION,
        "descriptor": {"n_obs": d.n_obs, "n_actions": d.n_actions, "hidden": d.hidden,
                       "feed_actions": d.feed_actions},
        "floor": floor,
        "vector": [float(v) for v in params.vector],
        **meta,
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path) -> tuple[PolicyParams, float]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    d = PolicyDescriptor(**doc["descriptor"])
    return PolicyParams(d, np.array(doc["vector"], dtype=np.float64)), float(doc["floor"])
