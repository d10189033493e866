"""Policy-gradient minimisation of conditional entropy and the IPG baseline.

For a candidate agent j with parameters theta_j and every other selected
agent frozen, the gradient of H(latent | Y) is estimated from a batch of
rollouts as the mean of (H(latent | y_m) - b_m) * grad log P_theta(y_{j,m}),
where b_m is the mean entropy of the other samples in the batch. The
per-sample entropy conditions on the full interleaved observation-action
histories, so it does not depend on theta given y and the estimator is
unbiased.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .inference import (OBJECTIVES, exact_conditional_entropy, mc_conditional_entropy,
                        sample_batch, sample_entropies)
from .model import FactoredDecPomdp, FixedPolicySet, SecretMap
from .policy import (DEFAULT_FLOOR, PolicyDescriptor, PolicyParams, RecurrentPolicy,
                     batch_logprob_grad, init_params, save_checkpoint)

BASELINES = ("batch-mean", "none")
EVAL_MODES = ("mc", "exact")

# sub-stream tags appended to the run seed
_INIT, _TRAIN, _EVAL = 11, 12, 13


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.001
    iterations: int = 300
    batch: int = 100
    seed: int = 0
    baseline: str = "batch-mean"
    objective: str = "secret"
    eval_every: int = 10
    eval_samples: int = 1000
    eval_mode: str = "mc"
    restarts: int = 1
    hidden: int = 16
    feed_actions: bool = True
    floor: float = DEFAULT_FLOOR
    init_scale: float = 0.1
    patience: int = 50
    min_improvement: float = 1e-3

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.batch < 2:
            raise ValueError("batch must be at least 2")
        if self.eval_every < 1 or self.eval_samples < 2:
            raise ValueError("eval_every must be >= 1 and eval_samples >= 2")
        if not 1 <= self.restarts:
            raise ValueError("restarts must be at least 1")
        if self.hidden < 1:
            raise ValueError("hidden must be positive")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.eval_mode not in EVAL_MODES:
            raise ValueError(f"eval_mode must be one of {EVAL_MODES}")
        if not 0 <= self.floor < 1:
            raise ValueError("floor must lie in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be positive")


@dataclass
class TrainingTrace:
    """Per-iteration batch statistics plus the periodic evaluations."""

    subset: tuple[int, ...]
    seed: int
    restart: list[int] = field(default_factory=list)
    iteration: list[int] = field(default_factory=list)
    estimate: list[float] = field(default_factory=list)
    stderr: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    eval_restart: list[int] = field(default_factory=list)
    eval_iteration: list[int] = field(default_factory=list)
    eval_estimate: list[float] = field(default_factory=list)
    eval_stderr: list[float] = field(default_factory=list)
    best_estimate: list[float] = field(default_factory=list)

    @property
    def best(self) -> float:
        return self.best_estimate[-1]

    def record_eval(self, restart: int, it: int, est: float, se: float) -> bool:
        improved = not self.best_estimate or est < self.best_estimate[-1]
        self.eval_restart.append(restart)
        self.eval_iteration.append(it)
        self.eval_estimate.append(est)
        self.eval_stderr.append(se)
        self.best_estimate.append(est if improved else self.best_estimate[-1])
        return improved

    def write_csv(self, path) -> None:
        """Deterministic CSV of batch and evaluation rows (wall time excluded)."""
        subset = " ".join(str(i) for i in self.subset)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "restart", "iteration", "subset", "estimate", "stderr", "grad_norm",
                        "best_estimate", "seed"])
            for r, it, e, s, g in zip(self.restart, self.iteration, self.estimate, self.stderr,
                                      self.grad_norm):
                w.writerow(["batch", r, it, subset, repr(e), repr(s), repr(g), "", self.seed])
            for r, it, e, s, b in zip(self.eval_restart, self.eval_iteration, self.eval_estimate,
                                      self.eval_stderr, self.best_estimate):
                w.writerow(["eval", r, it, subset, repr(e), repr(s), "", repr(b), self.seed])

    def seconds_per_iteration(self) -> float:
        return float(np.mean(self.wall_time)) if self.wall_time else 0.0


@dataclass
class Evaluator:
    """Evaluates H(latent | Y_subset) exactly or by Monte Carlo with a fixed seed."""

    mode: str = "mc"
    samples: int = 1000
    seed: object = 0
    objective: str = "secret"
    secret: SecretMap | None = None
    cap: int = 20_000_000

    def __call__(self, model: FactoredDecPomdp, policies: FixedPolicySet,
                 subset: Sequence[int]) -> tuple[float, float]:
        if self.mode == "exact":
            return exact_conditional_entropy(model, policies, list(subset), self.objective,
                                             self.secret, cap=self.cap), 0.0
        return mc_conditional_entropy(model, policies, list(subset), self.objective,
                                      self.samples, self.seed, self.secret)


def make_evaluator(config: OptimizerConfig, secret: SecretMap | None, seed=None) -> Evaluator:
    return Evaluator(config.eval_mode, config.eval_samples,
                     [config.seed, _EVAL] if seed is None else seed, config.objective, secret)


def descriptor_for(model: FactoredDecPomdp, j: int, config: OptimizerConfig) -> PolicyDescriptor:
    ag = model.agents[j]
    return PolicyDescriptor(len(ag.observations), len(ag.actions), config.hidden, config.feed_actions)


def initial_params(model: FactoredDecPomdp, j: int, config: OptimizerConfig,
                   restart: int = 0) -> PolicyParams:
    return init_params(descriptor_for(model, j, config), [config.seed, _INIT, j, restart],
                       config.init_scale)


def _weights(h: np.ndarray, baseline: str) -> np.ndarray:
    m = h.size
    if baseline == "none":
        return h / m
    # leave-one-out mean keeps each sample's baseline independent of it
    loo = (h.sum() - h) / (m - 1)
    return (h - loo) / m


def batch_gradients(model: FactoredDecPomdp, frozen: FixedPolicySet, conditioning: Sequence[int],
                    params: dict[int, PolicyParams], config: OptimizerConfig, seed,
                    secret: SecretMap | None = None):
    """Score-function gradients for every agent in ``params`` from one shared batch.

    ``conditioning`` lists the agents whose histories enter the posterior;
    it must contain every key of ``params``. Returns (grads, estimate, stderr).
    """
    missing = set(params) - set(conditioning)
    if missing:
        raise ValueError(f"trained agents {sorted(missing)} are not in the conditioning set")
    policies = frozen
    for j, p in params.items():
        policies = policies.with_policy(j, RecurrentPolicy(p, config.floor))
    batch = sample_batch(model, policies, list(conditioning), config.batch, seed, secret)
    h = sample_entropies(model, batch, list(conditioning), config.objective, secret)
    w = _weights(h, config.baseline)
    grads = {}
    for j, p in params.items():
        _, g = batch_logprob_grad(p, batch.obs[j], batch.actions[j], w, config.floor)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for agent {j}")
        grads[j] = g
    se = float(h.std(ddof=1) / math.sqrt(h.size))
    return grads, float(h.mean()), se


def grad_conditional_entropy(model: FactoredDecPomdp, frozen: FixedPolicySet,
                             selected: Sequence[int], j: int, theta: PolicyParams,
                             config: OptimizerConfig, seed=0,
                             secret: SecretMap | None = None) -> tuple[np.ndarray, float, float]:
    """Gradient of H(latent | Y_{selected + j}) in theta_j with the rest frozen."""
    if j in selected:
        raise ValueError(f"candidate {j} is already selected")
    grads, est, se = batch_gradients(model, frozen, list(selected) + [j], {j: theta}, config,
                                     seed, secret)
    return grads[j], est, se


def _train(model, frozen: FixedPolicySet, selected: Sequence[int], trained: Sequence[int],
           config: OptimizerConfig, secret, evaluator: Evaluator | None):
    trained = list(trained)
    conditioning = list(selected) + trained
    evaluator = evaluator or make_evaluator(config, secret)
    trace = TrainingTrace(tuple(conditioning), config.seed)
    best_params = None

    def evaluate(params):
        pol = frozen
        for j, p in params.items():
            pol = pol.with_policy(j, RecurrentPolicy(p, config.floor))
        return evaluator(model, pol, conditioning)

    for r in range(config.restarts):
        params = {j: initial_params(model, j, config, r) for j in trained}
        est, se = evaluate(params)
        if trace.record_eval(r, 0, est, se):
            best_params = dict(params)
        stale_since = trace.best
        last_gain_eval = 0
        n_evals = 0
        for it in range(1, config.iterations + 1):
            t0 = time.perf_counter()
            grads, est, se = batch_gradients(model, frozen, conditioning, params, config,
                                             [config.seed, _TRAIN, r, it], secret)
            params = {j: params[j].replace(params[j].vector - config.lr * grads[j]) for j in trained}
            trace.restart.append(r)
            trace.iteration.append(it)
            trace.estimate.append(est)
            trace.stderr.append(se)
            trace.grad_norm.append(float(np.sqrt(sum(float(g @ g) for g in grads.values()))))
            trace.wall_time.append(time.perf_counter() - t0)
            if it % config.eval_every == 0 or it == config.iterations:
                est, se = evaluate(params)
                n_evals += 1
                if trace.record_eval(r, it, est, se):
                    best_params = dict(params)
                if stale_since - trace.best >= config.min_improvement:
                    stale_since, last_gain_eval = trace.best, n_evals
                elif n_evals - last_gain_eval >= config.patience:
                    break
    return best_params, trace


def optimize_policy(model: FactoredDecPomdp, frozen: FixedPolicySet, selected: Sequence[int],
                    j: int, config: OptimizerConfig, secret: SecretMap | None = None,
                    evaluator: Evaluator | None = None) -> tuple[PolicyParams, TrainingTrace]:
    """Gradient descent on theta_j; returns the best evaluated iterate and its trace."""
    if j in selected:
        raise ValueError(f"candidate {j} is already selected")
    best, trace = _train(model, frozen, selected, [j], config, secret, evaluator)
    return best[j], trace


def ipg_baseline(model: FactoredDecPomdp, subset: Sequence[int], config: OptimizerConfig,
                 secret: SecretMap | None = None,
                 evaluator: Evaluator | None = None) -> tuple[dict[int, PolicyParams], TrainingTrace]:
    """Independent policy gradient: every agent of a fixed subset updates simultaneously."""
    subset = list(subset)
    if not subset:
        raise ValueError("IPG needs a non-empty agent subset")
    if len(set(subset)) != len(subset):
        raise ValueError("IPG subset has repeated agents")
    return _train(model, FixedPolicySet(), [], subset, config, secret, evaluator)


def config_dict(config: OptimizerConfig) -> dict:
    return asdict(config)


def write_params(path, params: PolicyParams, config: OptimizerConfig, **meta) -> None:
    save_checkpoint(Path(path), params, config.floor, **meta)
