"""Greedy joint agent selection and policy synthesis with its bound certificate."""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .inference import (exact_conditional_entropy, prior_entropy, sample_batch,
                        sample_entropies)
from .model import FactoredDecPomdp, FixedPolicySet, Policy, SecretMap
from .optimizer import OptimizerConfig, TrainingTrace, optimize_policy
from .policy import PolicyParams, RecurrentPolicy, save_checkpoint

_ROUND, _REEVAL = 21, 22


@dataclass(frozen=True)
class GainEvaluator:
    """How marginal gains are measured: ``exact`` tables or paired Monte Carlo."""

    mode: str = "mc"
    samples: int = 1000
    seed: int = 0
    objective: str = "secret"
    secret: SecretMap | None = None
    cap: int = 20_000_000

    def __post_init__(self):
        if self.mode not in ("exact", "mc"):
            raise ValueError("evaluation mode must be 'exact' or 'mc'")


@dataclass
class Gain:
    candidate: int
    gain: float
    stderr: float
    entropy: float
    samples: np.ndarray | None = None  # per-sample H(.|y_{K+j}) in MC mode


def marginal_gain(model: FactoredDecPomdp, selected: Sequence[int], policies: FixedPolicySet,
                  j: int, policy: Policy | None, evaluator: GainEvaluator,
                  seed=None) -> Gain:
    """f(K + j) - f(K) in bits, with a paired standard error in MC mode."""
    selected = list(selected)
    if j in selected:
        raise ValueError(f"candidate {j} is already selected")
    pol = policies if policy is None else policies.with_policy(j, policy)
    obj, secret = evaluator.objective, evaluator.secret
    if evaluator.mode == "exact":
        hk = (prior_entropy(model, obj, secret) if not selected else
              exact_conditional_entropy(model, pol, selected, obj, secret, cap=evaluator.cap))
        hkj = exact_conditional_entropy(model, pol, selected + [j], obj, secret, cap=evaluator.cap)
        return Gain(j, hk - hkj, 0.0, hkj)
    seed = [evaluator.seed, _ROUND] if seed is None else seed
    batch = sample_batch(model, pol, selected + [j], evaluator.samples, seed, secret)
    hk = sample_entropies(model, batch, selected, obj, secret)
    hkj = sample_entropies(model, batch, selected + [j], obj, secret)
    d = hk - hkj
    se = float(d.std(ddof=1) / math.sqrt(d.size))
    return Gain(j, float(d.mean()), se, float(hkj.mean()), hkj)


# ---------------------------------------------------------------------------
# Inner policy optimisers


@dataclass
class InnerResult:
    policy: Policy
    params: PolicyParams | None = None
    trace: TrainingTrace | None = None


@dataclass(frozen=True)
class GradientInner:
    """Inner maximisation by policy gradient on a recurrent policy."""

    config: OptimizerConfig
    secret: SecretMap | None = None

    def __call__(self, model, frozen, selected, j) -> InnerResult:
        params, trace = optimize_policy(model, frozen, selected, j, self.config, self.secret)
        return InnerResult(RecurrentPolicy(params, self.config.floor), params, trace)


@dataclass(frozen=True)
class FinitePolicyInner:
    """Inner maximisation over a finite list of policies per agent, evaluated exactly."""

    options: dict
    objective: str = "secret"
    secret: SecretMap | None = None
    cap: int = 20_000_000

    def __call__(self, model, frozen, selected, j) -> InnerResult:
        best, best_h = None, math.inf
        for pol in self.options[j]:
            h = exact_conditional_entropy(model, frozen.with_policy(j, pol), list(selected) + [j],
                                          self.objective, self.secret, cap=self.cap)
            if h < best_h - 1e-12:
                best, best_h = pol, h
        return InnerResult(best)


@dataclass(frozen=True)
class FixedInner:
    """No synthesis: every agent keeps a pre-specified policy (pure subset selection)."""

    policies: FixedPolicySet

    def __call__(self, model, frozen, selected, j) -> InnerResult:
        return InnerResult(self.policies.for_agent(j, len(model.agents[j].actions)))


# ---------------------------------------------------------------------------
# Certificate


@dataclass
class Certificate:
    k: int
    gains: list[float]
    ratios: list[float]
    threshold: float
    premise_holds: bool
    monotone_gains: bool
    violations: list[str]

    @property
    def bound_certified(self) -> bool:
        return self.premise_holds

    def to_dict(self) -> dict:
        return {"k": self.k, "gains": self.gains, "ratios": [_json_float(r) for r in self.ratios],
                "threshold": self.threshold, "premise_holds": self.premise_holds,
                "monotone_gains": self.monotone_gains, "bound_certified": self.bound_certified,
                "violations": self.violations}


def _json_float(x: float):
    return x if math.isfinite(x) else str(x)


def gain_ratio_certificate(gains: Sequence[float], k: int | None = None,
                           stderr: Sequence[float] | None = None, z: float = 3.0,
                           tol: float = 1e-9) -> Certificate:
    """Check the gain-ratio premise and gain monotonicity of a finished run.

    Monotonicity tolerates ``z`` combined standard errors when ``stderr`` is
    given. Ratios use 0/0 = 1 and x/0 = inf for x > 0.
    """
    gains = [float(g) for g in gains]
    k = len(gains) if k is None else k
    thr = (k + 1) / k if k > 0 else math.inf
    se = [0.0] * len(gains) if stderr is None else [float(s) for s in stderr]
    ratios, viol = [], []
    premise, mono = True, True
    for i in range(len(gains) - 1):
        a, b = gains[i], gains[i + 1]
        if b > 0:
            r = a / b
        elif abs(a) <= tol and abs(b) <= tol:
            r = 1.0
        else:
            r = math.inf
        ratios.append(r)
        if not r <= thr + tol:
            premise = False
            viol.append(f"ratio gain[{i + 1}]/gain[{i + 2}] = {r:.6g} exceeds {thr:.6g}")
        slack = tol + z * math.hypot(se[i], se[i + 1])
        if b > a + slack:
            mono = False
            viol.append(f"gain[{i + 2}] = {b:.6g} exceeds gain[{i + 1}] = {a:.6g} beyond noise")
    return Certificate(k, gains, ratios, thr, premise, mono, viol)


# ---------------------------------------------------------------------------
# Greedy loop


@dataclass
class SelectionResult:
    agents: list[int]
    gains: list[float]
    gain_stderr: list[float]
    entropies: list[float]  # H(latent | Y_K) after each round, starting with the prior
    objective_values: list[float]  # f(K^(i)) = prior - H, starting with 0
    rounds: list[list[dict]]
    certificate: Certificate
    policies: dict[int, Policy] = field(default_factory=dict)
    params: dict[int, PolicyParams] = field(default_factory=dict)
    traces: dict[tuple[int, int], TrainingTrace] = field(default_factory=dict)

    def policy_set(self) -> FixedPolicySet:
        return FixedPolicySet(dict(self.policies))

    def to_dict(self, checkpoints: dict[int, str] | None = None) -> dict:
        return {
            "agents": self.agents,
            "gains": self.gains,
            "gain_stderr": self.gain_stderr,
            "entropies": self.entropies,
            "objective_values": self.objective_values,
            "certificate": self.certificate.to_dict(),
            "rounds": self.rounds,
            "checkpoints": {str(k): v for k, v in (checkpoints or {}).items()},
        }

    def write(self, out_dir, write_traces: bool = True) -> Path:
        """Write ``selection.json``, policy checkpoints and per-candidate trace CSVs."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpts = {}
        for j, p in self.params.items():
            name = f"policy_agent{j}.json"
            save_checkpoint(out / name, p, self.policies[j].floor, agent=j)
            ckpts[j] = name
        if write_traces:
            for (r, j), tr in self.traces.items():
                tr.write_csv(out / f"trace_round{r}_agent{j}.csv")
        path = out / "selection.json"
        path.write_text(json.dumps(self.to_dict(ckpts), indent=1))
        return path

    def summary(self) -> str:
        lines = ["round  agent  gain(bits)  stderr    H(latent|Y)"]
        lines.append(f"{0:>5}  {'-':>5}  {'':>10}  {'':>8}  {self.entropies[0]:.4f}")
        for r, (j, g, s) in enumerate(zip(self.agents, self.gains, self.gain_stderr), start=1):
            lines.append(f"{r:>5}  {j:>5}  {g:>10.4f}  {s:>8.4f}  {self.entropies[r]:.4f}")
        c = self.certificate
        lines.append(f"gain monotone: {c.monotone_gains}; ratio premise: {c.premise_holds}; "
                     f"(1-1/e) bound certified: {c.bound_certified}")
        return "\n".join(lines)


def _run_inner(args):
    inner, model, frozen, selected, j = args
    return inner(model, frozen, selected, j)


def imas2(model: FactoredDecPomdp, candidates: Sequence[int], k: int,
          inner: Callable[..., InnerResult], evaluator: GainEvaluator, jobs: int = 1,
          reevaluate: bool = True) -> SelectionResult:
    """Select ``k`` agents greedily, synthesising each candidate's policy per round.

    Ties go to the lowest agent index. In MC mode a round whose winner leads
    the runner-up by less than one paired standard error is re-evaluated once
    with four times the samples.
    """
    candidates = sorted(set(candidates))
    if k < 0 or k > len(candidates):
        raise ValueError(f"budget k={k} must lie in [0, {len(candidates)}]")
    bad = [c for c in candidates if not 0 <= c < model.n_agents]
    if bad:
        raise ValueError(f"unknown candidate agents {bad}")
    obj, secret = evaluator.objective, evaluator.secret
    h0 = prior_entropy(model, obj, secret)
    selected: list[int] = []
    frozen = FixedPolicySet()
    result = SelectionResult([], [], [], [h0], [0.0], [], gain_ratio_certificate([], k))
    pool = ProcessPoolExecutor(jobs) if jobs > 1 else None
    try:
        for rnd in range(1, k + 1):
            remaining = [j for j in candidates if j not in selected]
            jobs_in = [(inner, model, frozen, list(selected), j) for j in remaining]
            inner_out = list(pool.map(_run_inner, jobs_in)) if pool else [_run_inner(a) for a in jobs_in]
            seed = [evaluator.seed, _ROUND, rnd]
            gains = [marginal_gain(model, selected, frozen, j, io.policy, evaluator, seed)
                     for j, io in zip(remaining, inner_out)]
            win = _argmax(gains)
            reevaluated = False
            if reevaluate and evaluator.mode == "mc" and len(gains) > 1:
                runner = _argmax([g for q, g in enumerate(gains) if q != win])
                runner = runner if runner < win else runner + 1
                d = gains[win].samples - gains[runner].samples
                se = float(d.std(ddof=1) / math.sqrt(d.size))
                if gains[win].gain - gains[runner].gain < se:
                    big = GainEvaluator("mc", 4 * evaluator.samples, evaluator.seed, obj, secret)
                    gains = [marginal_gain(model, selected, frozen, j, io.policy, big,
                                           [evaluator.seed, _REEVAL, rnd])
                             for j, io in zip(remaining, inner_out)]
                    win = _argmax(gains)
                    reevaluated = True
            g = gains[win]
            j = g.candidate
            result.rounds.append([
                {"candidate": x.candidate, "gain": x.gain, "stderr": x.stderr, "entropy": x.entropy,
                 "train_best": (io.trace.best if io.trace is not None else None),
                 "reevaluated": reevaluated}
                for x, io in zip(gains, inner_out)])
            for x, io in zip(gains, inner_out):
                if io.trace is not None:
                    result.traces[(rnd, x.candidate)] = io.trace
            io = inner_out[win]
            selected.append(j)
            frozen = frozen.with_policy(j, io.policy)
            result.agents.append(j)
            result.gains.append(g.gain)
            result.gain_stderr.append(g.stderr)
            result.entropies.append(g.entropy)
            result.objective_values.append(result.objective_values[-1] + g.gain)
            result.policies[j] = io.policy
            if io.params is not None:
                result.params[j] = io.params
    finally:
        if pool:
            pool.shutdown()
    result.certificate = gain_ratio_certificate(result.gains, k, result.gain_stderr)
    return result


def _argmax(gains: Sequence[Gain]) -> int:
    best = 0
    for q in range(1, len(gains)):
        # strict improvement keeps the lowest agent index on ties
        if gains[q].gain > gains[best].gain:
            best = q
    return best
