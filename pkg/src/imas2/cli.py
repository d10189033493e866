"""Command-line entry point: validation, greedy planning, baselines, evaluation, oracles.

Exit codes: 0 success, 1 domain failure (invalid model, failed check, numeric
collapse), 2 usage or config error.
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import json
import sys
import time
from dataclasses import asdict, fields
from importlib import metadata
from pathlib import Path

import numpy as np

from .gridworld import build_experiment, grid_spec_from_dict
from .inference import (OBJECTIVES, ZeroLikelihoodError, classify_episodes,
                        mc_conditional_entropy, prior_entropy)
from .model import (ConfigError, EnumerationCapExceeded, FactoredDecPomdp, FixedPolicySet, ModelError,
                    model_from_dict, model_to_dict, read_config)
from .optimizer import BASELINES, EVAL_MODES, OptimizerConfig, ipg_baseline
from .oracle import InstanceBounds, conformance_report
from .policy import PolicyCollapseError, RecurrentPolicy, load_checkpoint, save_checkpoint
from .selection import GainEvaluator, GradientInner, imas2

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2

# files whose content legitimately differs between reruns
NONDETERMINISTIC_FILES = ("manifest.json", "timing.json", "comparison.txt")

_FINAL_ENTROPY, _FINAL_EPISODES, _BASELINE_SUBSET = 41, 42, 43


def _version() -> str:
    try:
        return metadata.version("imas2")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# ---------------------------------------------------------------------------
# Problem loading


class Problem:
    def __init__(self, model: FactoredDecPomdp, secret, kind: str, doc: dict):
        self.model, self.secret, self.kind, self.doc = model, secret, kind, doc


def split_config(doc: dict) -> tuple[dict, dict]:
    """Separate the optional ``optimizer`` table from the model description."""
    doc = copy.deepcopy(doc)
    opt = doc.pop("optimizer", {})
    if not isinstance(opt, dict):
        raise ConfigError("optimizer must be a table")
    allowed = {f.name for f in fields(OptimizerConfig)}
    unknown = set(opt) - allowed
    if unknown:
        raise ConfigError(f"unknown optimizer keys: {sorted(unknown)}")
    return doc, opt


def load_problem(doc: dict, horizon: int | None = None) -> Problem:
    model_doc, _ = split_config(doc)
    kind = model_doc.get("kind", "model")
    if kind == "grid":
        if horizon is not None:
            model_doc["horizon"] = horizon
        spec = grid_spec_from_dict(model_doc)
        model, secret = build_experiment(spec)
    elif kind == "model":
        model, secret = model_from_dict(model_doc)
        if horizon is not None:
            model = model.with_horizon(horizon)
    else:
        raise ConfigError(f"unknown config kind {kind!r}")
    return Problem(model, secret, kind, doc)


_FLAG_TO_FIELD = {"lr": "lr", "iters": "iterations", "samples": "batch", "baseline_mode": "baseline",
                  "objective": "objective", "eval_every": "eval_every", "eval_samples": "eval_samples",
                  "eval_mode": "eval_mode", "restarts": "restarts", "hidden_size": "hidden"}


def optimizer_config(args, doc: dict) -> OptimizerConfig:
    """Defaults, then the config file's optimizer table, then explicit flags."""
    _, opt = split_config(doc)
    values = dict(opt)
    for flag, name in _FLAG_TO_FIELD.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    values["seed"] = args.seed
    try:
        return OptimizerConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid optimizer settings: {exc}") from None


# ---------------------------------------------------------------------------
# Output helpers


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=False) + "\n")


def write_manifest(out: Path, command: str, args, doc: dict | None, outputs: list[str],
                   resolved: OptimizerConfig | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    arg_dict = {k: v for k, v in vars(args).items() if k not in ("func", "out_dir")}
    manifest = {
        "command": command,
        "args": arg_dict,
        "config_snapshot": doc,
        "optimizer": asdict(resolved) if resolved is not None else None,
        "seed": args.seed,
        "software_version": _version(),
        "numpy_version": np.__version__,
        "python_version": sys.version.split()[0],
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "outputs": outputs,
    }
    _write_json(out / "manifest.json", manifest)


def _out_dir(args, command: str) -> Path:
    return Path(args.out_dir) if args.out_dir else Path("runs") / f"{command}-seed{args.seed}"


def _parse_agents(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x != ""]
    except ValueError:
        raise ConfigError(f"cannot parse agent list {text!r}") from None


def load_policies(selection_path: Path) -> tuple[list[int], FixedPolicySet]:
    """Agents and recurrent policies referenced by a selection or baseline result file."""
    try:
        doc = json.loads(Path(selection_path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"result file not found: {selection_path}") from None
    agents = [int(a) for a in doc["agents"]]
    pols = {}
    for a in agents:
        name = doc["checkpoints"].get(str(a))
        if name is None:
            raise ModelError(f"no checkpoint recorded for agent {a}")
        params, floor = load_checkpoint(Path(selection_path).parent / name)
        pols[a] = RecurrentPolicy(params, floor)
    return agents, FixedPolicySet(pols)


def _check_policies(model: FactoredDecPomdp, pols: FixedPolicySet) -> None:
    for a, p in pols.policies.items():
        if a >= model.n_agents:
            raise ModelError(f"checkpoint agent {a} does not exist in the model")
        d = p.params.descriptor
        ag = model.agents[a]
        if d.n_obs != len(ag.observations) or d.n_actions != len(ag.actions):
            raise ModelError(f"checkpoint for agent {a} does not match the model's alphabets")


def final_metrics(problem: Problem, agents, pols: FixedPolicySet, args, config: OptimizerConfig) -> dict:
    """Entropy and classification accuracy of a finished policy set on fresh seeds."""
    h, se = mc_conditional_entropy(problem.model, pols, agents, config.objective, args.episodes,
                                   [args.seed, _FINAL_ENTROPY], problem.secret)
    out = {"agents": list(agents), "final_entropy": h, "final_entropy_stderr": se}
    if problem.secret is not None:
        rep = classify_episodes(problem.model, problem.secret, pols, agents, args.episodes,
                                [args.seed, _FINAL_EPISODES])
        out["accuracy"] = rep.accuracy
    return out


# ---------------------------------------------------------------------------
# Commands


def cmd_validate(args, doc) -> int:
    out = _out_dir(args, "validate")
    write_manifest(out, "validate", args, doc, ["report.json"])
    try:
        problem = load_problem(doc, args.horizon)
    except ModelError as exc:
        print(f"INVALID: {exc}")
        _write_json(out / "report.json", {"valid": False, "violations": [str(exc)]})
        return EXIT_DOMAIN
    rep = problem.model.validate()
    violations = list(rep.violations)
    if problem.secret is not None and rep.ok:
        violations += problem.secret.validate(problem.model.environment, problem.model.horizon).violations
    _write_json(out / "report.json", {"valid": not violations, "violations": violations,
                                      "agents": problem.model.n_agents,
                                      "env_states": problem.model.environment.n_states,
                                      "horizon": problem.model.horizon})
    if violations:
        for v in violations:
            print(f"violation: {v}")
        return EXIT_DOMAIN
    m = problem.model
    print(f"OK: {m.n_agents} agents, {m.environment.n_states} environment states, horizon {m.horizon}")
    return EXIT_OK


def _need_secret(problem: Problem, config: OptimizerConfig) -> None:
    if config.objective == "secret" and problem.secret is None:
        raise ConfigError("objective 'secret' needs a secret in the model config")


def cmd_greedy(args, doc) -> int:
    out = _out_dir(args, "greedy")
    problem = load_problem(doc, args.horizon)
    problem.model.validate().raise_if_invalid()
    config = optimizer_config(args, doc)
    _need_secret(problem, config)
    write_manifest(out, "greedy", args, doc, ["selection.json", "summary.txt", "trace_round*_agent*.csv",
                                             "policy_agent*.json"], config)
    cands = _parse_agents(args.candidates) or list(range(problem.model.n_agents))
    if args.k > len(cands):
        raise ConfigError(f"k={args.k} exceeds the {len(cands)} candidates")
    evaluator = GainEvaluator(config.eval_mode, config.eval_samples, args.seed, config.objective,
                              problem.secret)
    t0 = time.perf_counter()
    result = imas2(problem.model, cands, args.k, GradientInner(config, problem.secret), evaluator,
                   jobs=args.jobs)
    elapsed = time.perf_counter() - t0
    result.write(out)
    summary = result.summary()
    (out / "summary.txt").write_text(summary + "\n")
    iters = [len(tr.wall_time) for tr in result.traces.values()]
    per_iter = [tr.seconds_per_iteration() for tr in result.traces.values() if tr.wall_time]
    _write_json(out / "timing.json", {"seconds": elapsed, "inner_iterations": int(sum(iters)),
                                      "seconds_per_iteration": float(np.mean(per_iter)) if per_iter else 0.0})
    print(summary)
    return EXIT_OK


def cmd_baseline(args, doc) -> int:
    out = _out_dir(args, "baseline")
    problem = load_problem(doc, args.horizon)
    problem.model.validate().raise_if_invalid()
    config = optimizer_config(args, doc)
    _need_secret(problem, config)
    write_manifest(out, "baseline", args, doc, ["ipg.json", "trace.csv", "policy_agent*.json",
                                               "comparison.json"], config)
    subset = _parse_agents(args.subset)
    if subset is None:
        if args.random_size is None:
            raise ConfigError("give --subset or --random-size")
        rng = np.random.default_rng([args.seed, _BASELINE_SUBSET])
        subset = sorted(rng.choice(problem.model.n_agents, size=args.random_size, replace=False).tolist())
    if not subset or any(not 0 <= a < problem.model.n_agents for a in subset):
        raise ConfigError(f"invalid baseline subset {subset}")
    t0 = time.perf_counter()
    params, trace = ipg_baseline(problem.model, subset, config, problem.secret)
    elapsed = time.perf_counter() - t0
    ckpts = {}
    for a, p in params.items():
        name = f"policy_agent{a}.json"
        save_checkpoint(out / name, p, config.floor, agent=a)
        ckpts[str(a)] = name
    trace.write_csv(out / "trace.csv")
    pols = FixedPolicySet({a: RecurrentPolicy(p, config.floor) for a, p in params.items()})
    ipg_row = {"method": "IPG", **final_metrics(problem, subset, pols, args, config)}
    _write_json(out / "ipg.json", {"agents": subset, "best_training_entropy": trace.best,
                                   "checkpoints": ckpts, **{k: v for k, v in ipg_row.items()
                                                            if k not in ("agents", "method")}})
    rows = [ipg_row]
    times = {"IPG": trace.seconds_per_iteration()}
    if args.selection:
        agents, sel = load_policies(Path(args.selection))
        _check_policies(problem.model, sel)
        rows.insert(0, {"method": "IMAS2", **final_metrics(problem, agents, sel, args, config)})
        tpath = Path(args.selection).parent / "timing.json"
        times["IMAS2"] = (json.loads(tpath.read_text())["seconds_per_iteration"]
                          if tpath.exists() else float("nan"))
    _write_json(out / "comparison.json", {"rows": rows})
    _write_json(out / "timing.json", {"seconds": elapsed, "seconds_per_iteration": times})
    lines = ["method  agents            entropy  accuracy  s/iter"]
    for r in rows:
        acc = r.get("accuracy", float("nan"))
        lines.append(f"{r['method']:<7} {str(r['agents']):<17} {r['final_entropy']:.4f}   "
                     f"{acc:.3f}     {times.get(r['method'], float('nan')):.4f}")
    table = "\n".join(lines)
    (out / "comparison.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_eval(args, doc) -> int:
    out = _out_dir(args, "eval")
    write_manifest(out, "eval", args, doc, ["eval.json"])
    problem = load_problem(doc, args.horizon)
    if problem.secret is None:
        raise ConfigError("evaluation needs a secret in the model config")
    agents, pols = load_policies(Path(args.selection))
    _check_policies(problem.model, pols)
    rep = classify_episodes(problem.model, problem.secret, pols, agents, args.episodes, args.seed)
    doc_out = {"agents": agents, **rep.to_dict(),
               "prior_entropy": prior_entropy(problem.model, "secret", problem.secret)}
    _write_json(out / "eval.json", doc_out)
    print("confusion (rows true, columns predicted):")
    for label, row in zip(rep.labels, rep.confusion):
        print(f"  {label:>12}: " + " ".join(f"{int(c):>6}" for c in row))
    print(f"accuracy {rep.accuracy:.4f} (chance {rep.chance:.3f} +/- {rep.chance_sigma:.3f}); "
          f"mean H(Z|Y) {rep.mean_entropy:.4f} +/- {rep.entropy_stderr:.4f}")
    return EXIT_OK


def cmd_oracle_check(args, doc) -> int:
    out = _out_dir(args, "oracle-check")
    write_manifest(out, "oracle-check", args, doc, ["report.json"])
    t0 = time.perf_counter()
    report = conformance_report(args.instances, args.seed, InstanceBounds(),
                                include_actions=not args.observations_only,
                                counterexamples=args.counterexamples)
    _write_json(out / "report.json", report)
    _write_json(out / "timing.json", {"seconds": time.perf_counter() - t0})
    for name, c in report["checks"].items():
        print(f"{c['status']:<13} {name:<32} max {c['max_value']:.3e} "
              f"({c['n_failed']}/{c['checked']} failing)")
    for name, c in report.get("counterexamples", {}).items():
        print(f"{c['status']:<13} {name:<32} value {c['max_value']:.3e}")
    ce_ok = all(c["status"] == "expected-fail" for c in report.get("counterexamples", {}).values())
    return EXIT_OK if report["all_pass"] and ce_ok else EXIT_DOMAIN


def cmd_export(args, doc) -> int:
    out = _out_dir(args, "export")
    write_manifest(out, "export", args, doc, ["model.json"])
    problem = load_problem(doc, args.horizon)
    problem.model.validate().raise_if_invalid()
    _write_json(out / "model.json", model_to_dict(problem.model, problem.secret))
    print(f"wrote {out / 'model.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--config", help="model or grid config file (TOML or JSON)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--jobs", type=int, default=1, help="worker processes for candidate evaluation")
    g.add_argument("--out-dir", help="output directory (default runs/<command>-seed<seed>)")
    g.add_argument("--eval-mode", choices=EVAL_MODES)
    g.add_argument("--samples", type=int, help="rollouts per gradient batch (M)")
    g.add_argument("--eval-samples", type=int, help="rollouts per evaluation")
    g.add_argument("--eval-every", type=int)
    g.add_argument("--horizon", type=int, help="override the model horizon")
    g.add_argument("--lr", type=float)
    g.add_argument("--iters", type=int, help="inner iterations per candidate")
    g.add_argument("--restarts", type=int)
    g.add_argument("--hidden-size", type=int)
    g.add_argument("--objective", choices=OBJECTIVES)
    g.add_argument("--baseline-mode", choices=BASELINES, help="control variate for the gradient")
    g.add_argument("--episodes", type=int, default=1000, help="episodes for final evaluation")

    p = argparse.ArgumentParser(prog="imas2", description=__doc__.splitlines()[0])
    p.add_argument("--from-manifest", help="rerun the command recorded in a manifest")
    sub = p.add_subparsers(dest="command")
    s = sub.add_parser("validate", parents=[common], help="validate a model config")
    s.set_defaults(func=cmd_validate)
    s = sub.add_parser("greedy", parents=[common], help="greedy selection with policy synthesis")
    s.add_argument("-k", "--k", type=int, required=True, help="number of agents to select")
    s.add_argument("--candidates", help="comma-separated candidate agents (default all)")
    s.set_defaults(func=cmd_greedy)
    s = sub.add_parser("baseline", parents=[common], help="independent policy gradient on a fixed subset")
    s.add_argument("--subset", help="comma-separated agents")
    s.add_argument("--random-size", type=int, help="draw a random subset of this size from --seed")
    s.add_argument("--selection", help="selection.json of a greedy run to compare against")
    s.set_defaults(func=cmd_baseline)
    s = sub.add_parser("eval", parents=[common], help="confusion matrix and accuracy of trained policies")
    s.add_argument("--selection", required=True, help="selection.json or ipg.json")
    s.set_defaults(func=cmd_eval)
    s = sub.add_parser("oracle-check", parents=[common], help="structural checks on random instances")
    s.add_argument("--instances", type=int, default=200)
    s.add_argument("--counterexamples", action="store_true", help="also run premise-violating models")
    s.add_argument("--observations-only", action="store_true",
                   help="condition on observation sequences without actions")
    s.set_defaults(func=cmd_oracle_check)
    s = sub.add_parser("export", parents=[common], help="write the (built) model as a JSON model file")
    s.set_defaults(func=cmd_export)
    return p


def _from_manifest(path: str, out_dir: str | None):
    try:
        manifest = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"manifest not found: {path}") from None
    parser = build_parser()
    command = manifest["command"]
    ns = parser.parse_args([command] + (["-k", "0"] if command == "greedy" else [])
                           + (["--selection", "x"] if command == "eval" else []))
    for k, v in manifest["args"].items():
        setattr(ns, k, v)
    ns.out_dir = out_dir
    return ns, manifest["config_snapshot"]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if argv and argv[0] == "--from-manifest":
            p = argparse.ArgumentParser(prog="imas2 --from-manifest")
            p.add_argument("--from-manifest", required=True)
            p.add_argument("--out-dir")
            a = p.parse_args(argv)
            args, doc = _from_manifest(a.from_manifest, a.out_dir)
        else:
            args = build_parser().parse_args(argv)
            if args.command is None:
                build_parser().print_help()
                return EXIT_USAGE
            doc = None
            if args.command != "oracle-check":
                if not args.config:
                    raise ConfigError(f"{args.command} needs --config")
                doc = read_config(args.config)
        return args.func(args, doc)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelError, EnumerationCapExceeded, ZeroLikelihoodError, PolicyCollapseError,
            FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
