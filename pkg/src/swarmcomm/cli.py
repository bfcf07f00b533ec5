"""Command-line pipeline: train-oracle, collect, synthesize, retrain, evaluate, sweep, attn-dump.

Every stage writes a RunManifest next to its primary output; `swarmcomm rerun
<manifest>` replays the stage with the recorded arguments and seed, which must
reproduce the outputs byte for byte. The SWARM_SEED environment variable
overrides any configured seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dsl, env, harness, synth
from .dsl import parse_program, print_program
from .env import RewardParams, TaskConfig, rollout
from .harness import RunManifest, evaluate, report, resolve_seed
from .policy import POLICY_NAMES, make_policy
from .synth import SynthConfig, SynthDataset, collect_dataset, mcmc_synthesize, synthesize_multiround, write_chain_csv
from .training import TrainConfig, retrain, train_oracle, write_curve_csv
from .transformer import TransformerParams


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _load_task(path: str) -> tuple[TaskConfig, RewardParams]:
    p = Path(path)
    if not p.exists():
        raise CliError("missing-input", f"config file not found: {path}")
    try:
        return env.load_config(p)
    except (json.JSONDecodeError, env.EnvError, KeyError, TypeError) as exc:
        raise CliError("bad-config", f"{path}: {exc}") from exc


def _load_params(path: str) -> TransformerParams:
    p = Path(path)
    if not p.exists():
        raise CliError("missing-input", f"parameter file not found: {path}")
    try:
        return TransformerParams.load(p)
    except (json.JSONDecodeError, KeyError) as exc:
        raise CliError("bad-config", f"{path}: {exc}") from exc


def _load_programs(paths: Sequence[str]) -> list[dsl.Program]:
    programs = []
    for path in paths:
        p = Path(path)
        if not p.exists():
            raise CliError("missing-input", f"program file not found: {path}")
        try:
            programs.append(parse_program(p.read_text()))
        except dsl.ParseError as exc:
            raise CliError("bad-config", f"{path}: {exc}") from exc
    return programs


def _check_dims(params: TransformerParams, cfg: TaskConfig) -> None:
    if params.task_kind != cfg.task_kind:
        raise CliError(
            "dim-mismatch",
            f"parameters were trained for {params.task_kind!r}, config is {cfg.task_kind!r}",
        )
    if params.state_dim != cfg.state_dim or params.action_dim != cfg.action_dim:
        raise CliError(
            "dim-mismatch",
            f"parameter dims (state {params.state_dim}, action {params.action_dim}) do not "
            f"match config dims (state {cfg.state_dim}, action {cfg.action_dim})",
        )


def _write_manifest(command: str, args: argparse.Namespace, seed: int, inputs, outputs, path: Path) -> None:
    manifest = RunManifest.capture(command, {k: v for k, v in vars(args).items() if k != "func"}, seed, inputs)
    manifest.outputs = [str(o) for o in outputs]
    manifest.save(path)


def _manifest_path(primary_output: str) -> Path:
    return Path(str(primary_output) + ".manifest.json")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train_oracle(args: argparse.Namespace) -> int:
    cfg, rewards = _load_task(args.config)
    seed = resolve_seed(args.seed)
    train_cfg = TrainConfig(
        n_rollouts=args.rollouts,
        batch_size=args.batch,
        discount=args.discount,
        learning_rate=args.lr,
        grad_clip=args.clip,
        seed=seed,
    )
    rng = np.random.Generator(np.random.PCG64(seed))
    result = train_oracle(cfg, train_cfg, rng, rewards)
    result.params.save(args.out)
    outputs = [args.out]
    if args.curve:
        write_curve_csv(args.curve, result.curve)
        outputs.append(args.curve)
    _write_manifest("train-oracle", args, seed, [args.config], outputs, _manifest_path(args.out))
    print(f"trained oracle -> {args.out} (best validation {result.best_validation:.4f})")
    return 0


def cmd_collect(args: argparse.Namespace) -> int:
    cfg, rewards = _load_task(args.config)
    params = _load_params(args.params)
    _check_dims(params, cfg)
    seed = resolve_seed(args.seed)
    rng = np.random.Generator(np.random.PCG64(seed))
    dataset = collect_dataset(params, cfg, args.rollouts, rng, rewards)
    dataset.save_jsonl(args.out)
    _write_manifest("collect", args, seed, [args.config, args.params], [args.out], _manifest_path(args.out))
    print(f"collected {dataset.n_tuples} tuples from {args.rollouts} rollouts -> {args.out}")
    return 0


def _round_out_paths(out: str, rounds: int) -> list[Path]:
    base = Path(out)
    if rounds == 1:
        return [base]
    return [base] + [base.with_name(f"{base.stem}.round{r + 1}{base.suffix}") for r in range(1, rounds)]


def cmd_synthesize(args: argparse.Namespace) -> int:
    path = Path(args.dataset)
    if not path.exists():
        raise CliError("missing-input", f"dataset not found: {args.dataset}")
    dataset = SynthDataset.load_jsonl(path)
    seed = resolve_seed(args.seed)
    cfg = SynthConfig(
        degree_weight=args.tradeoff,
        mcmc_steps=args.steps,
        inv_temperature=args.beta,
        n_rules=args.rules,
        feature_version=args.features,
        allow_random_rules=not args.det_only,
        rand_rule_samples=args.samples,
        seed=seed,
    )
    rng = np.random.Generator(np.random.PCG64(seed))
    if dataset.rounds == 1:
        results = [mcmc_synthesize(dataset, cfg, rng)]
    else:
        results = synthesize_multiround(dataset, cfg, rng)
    outputs = []
    out_paths = _round_out_paths(args.out, dataset.rounds)
    for r, (result, out_path) in enumerate(zip(results, out_paths)):
        out_path.write_text(print_program(result.program, dataset.state_dim))
        outputs.append(out_path)
        print(f"round {r + 1}: objective {result.objective:.4f} -> {out_path}")
    if args.chain_log:
        write_chain_csv(args.chain_log, results[0].chain)
        outputs.append(args.chain_log)
    _write_manifest("synthesize", args, seed, [args.dataset], outputs, _manifest_path(args.out))
    return 0


def cmd_retrain(args: argparse.Namespace) -> int:
    cfg, rewards = _load_task(args.config)
    params = _load_params(args.params)
    _check_dims(params, cfg)
    programs = _load_programs(args.program)
    if len(programs) != params.rounds:
        raise CliError(
            "dim-mismatch",
            f"{params.rounds} communication rounds need {params.rounds} program files, got {len(programs)}",
        )
    seed = resolve_seed(args.seed)
    train_cfg = TrainConfig(
        n_rollouts=args.rollouts,
        batch_size=args.batch,
        discount=args.discount,
        learning_rate=args.lr,
        grad_clip=args.clip,
        seed=seed,
    )
    rng = np.random.Generator(np.random.PCG64(seed))
    result = retrain(params, programs, cfg, train_cfg, rng, rewards)
    result.params.save(args.out)
    outputs = [args.out]
    if args.curve:
        write_curve_csv(args.curve, result.curve)
        outputs.append(args.curve)
    inputs = [args.config, args.params, *args.program]
    _write_manifest("retrain", args, seed, inputs, outputs, _manifest_path(args.out))
    print(f"retrained -> {args.out} (best validation {result.best_validation:.4f})")
    return 0


def _build_policy(args: argparse.Namespace, params: TransformerParams, cfg: TaskConfig):
    programs = _load_programs(args.program) if args.program else None
    if args.policy == "combined" and programs is not None and len(programs) != params.rounds:
        raise CliError(
            "dim-mismatch",
            f"{params.rounds} communication rounds need {params.rounds} program files, got {len(programs)}",
        )
    try:
        return make_policy(args.policy, params, v_max=cfg.v_max, k=args.k, programs=programs)
    except ValueError as exc:
        raise CliError("usage", str(exc)) from exc


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg, rewards = _load_task(args.config)
    params = _load_params(args.params)
    _check_dims(params, cfg)
    policy = _build_policy(args, params, cfg)
    seed = resolve_seed(args.seed)
    metrics = evaluate(
        policy, cfg, args.rollouts, args.comm_weight, seed, rewards, gamma=args.gamma
    )
    Path(args.out).write_text(json.dumps(metrics.to_json_dict(), indent=2, sort_keys=True) + "\n")
    outputs = [args.out]
    if args.report_dir:
        paths = report([metrics], args.report_dir)
        outputs.extend(paths.values())
    inputs = [args.config, args.params, *(args.program or [])]
    _write_manifest("evaluate", args, seed, inputs, outputs, _manifest_path(args.out))
    print(
        f"{metrics.policy}: loss {metrics.loss_mean:.4f} +/- {metrics.loss_std:.4f}, "
        f"max degree {metrics.total_deg_mean:.2f} -> {args.out}"
    )
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    path = Path(args.dataset)
    if not path.exists():
        raise CliError("missing-input", f"dataset not found: {args.dataset}")
    dataset = SynthDataset.load_jsonl(path)
    cfg, rewards = _load_task(args.config)
    seed = resolve_seed(args.seed)
    base = SynthConfig(mcmc_steps=args.steps, seed=seed)
    rng = np.random.Generator(np.random.PCG64(seed))

    def policy_factory(programs):
        return make_policy("combined", dataset.params, v_max=cfg.v_max, programs=programs)

    result = harness.sweep(
        dataset,
        policy_factory,
        base,
        cfg,
        rng,
        n_val_rollouts=args.val_rollouts,
        comm_weight=args.comm_weight,
        reward_params=rewards,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells_csv = out_dir / "sweep_cells.csv"
    with open(cells_csv, "w") as fh:
        fh.write("degree_weight,n_rules,feature_version,loss_mean,total_deg_mean\n")
        for cell in result.cells:
            fh.write(
                f"{cell.degree_weight},{cell.n_rules},{cell.feature_version},"
                f"{cell.metrics.loss_mean!r},{cell.metrics.total_deg_mean!r}\n"
            )
    best_doc = {
        "degree_weight": result.best.degree_weight,
        "n_rules": result.best.n_rules,
        "feature_version": result.best.feature_version,
        "loss_mean": result.best.metrics.loss_mean,
        "total_deg_mean": result.best.metrics.total_deg_mean,
    }
    best_json = out_dir / "sweep_best.json"
    best_json.write_text(json.dumps(best_doc, indent=2, sort_keys=True) + "\n")
    best_prog = out_dir / "sweep_best_program.txt"
    best_prog.write_text(print_program(result.best.result.program, dataset.state_dim))
    _write_manifest(
        "sweep", args, seed, [args.dataset, args.config], [cells_csv, best_json, best_prog],
        out_dir / "sweep.manifest.json",
    )
    print(
        f"sweep best: tradeoff {result.best.degree_weight}, rules {result.best.n_rules}, "
        f"features {result.best.feature_version} -> {best_json}"
    )
    return 0


def cmd_attn_dump(args: argparse.Namespace) -> int:
    cfg, rewards = _load_task(args.config)
    params = _load_params(args.params)
    _check_dims(params, cfg)
    policy = _build_policy(args, params, cfg)
    seed = resolve_seed(args.seed)
    rng = np.random.Generator(np.random.PCG64(seed))
    traj = rollout(policy, cfg, rng, rewards)
    with open(args.out, "w") as fh:
        fh.write(
            json.dumps(
                {"kind": "attention-dump", "policy": args.policy, "length": len(traj.steps)},
                sort_keys=True,
            )
            + "\n"
        )
        for t, step in enumerate(traj.steps):
            fh.write(
                json.dumps(
                    {
                        "t": t,
                        "attention": [a.tolist() for a in step.attentions],
                        "edges": sorted(list(step.graph.edges)),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    _write_manifest("attn-dump", args, seed, [args.config, args.params], [args.out], _manifest_path(args.out))
    print(f"wrote per-step attention for {len(traj.steps)} steps -> {args.out}")
    return 0


def cmd_rerun(args: argparse.Namespace) -> int:
    path = Path(args.manifest)
    if not path.exists():
        raise CliError("missing-input", f"manifest not found: {args.manifest}")
    manifest = RunManifest.load(path)
    handler = _HANDLERS.get(manifest.command)
    if handler is None:
        raise CliError("bad-config", f"manifest references unknown command {manifest.command!r}")
    replay = argparse.Namespace(**manifest.args)
    return handler(replay)


_HANDLERS = {
    "train-oracle": cmd_train_oracle,
    "collect": cmd_collect,
    "synthesize": cmd_synthesize,
    "retrain": cmd_retrain,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "attn-dump": cmd_attn_dump,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swarmcomm",
        description="train, distill, and evaluate low-degree communication policies",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-oracle", help="train the full-communication policy")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rollouts", type=int, default=2000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--discount", type=float, default=0.99)
    p.add_argument("--clip", type=float, default=10.0)
    p.add_argument("--curve", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train_oracle)

    p = sub.add_parser("collect", help="cache per-step tuples from oracle rollouts")
    p.add_argument("--params", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--rollouts", type=int, default=300)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("synthesize", help="search for a communication program")
    p.add_argument("--dataset", required=True)
    p.add_argument("--lambda", dest="tradeoff", type=float, default=0.5)
    p.add_argument("--rules", type=int, default=2)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--features", choices=("v1", "v2"), default="v1")
    p.add_argument("--beta", type=float, default=5.0)
    p.add_argument("--det-only", action="store_true", help="exclude nondeterministic rules")
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--out", default="program.txt")
    p.add_argument("--chain-log", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("retrain", help="fine-tune the networks under hard attention")
    p.add_argument("--params", required=True)
    p.add_argument("--program", action="append", required=True, help="one per communication round")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rollouts", type=int, default=500)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--discount", type=float, default=0.99)
    p.add_argument("--clip", type=float, default=10.0)
    p.add_argument("--curve", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("evaluate", help="measure loss and communication degrees")
    p.add_argument("--params", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--policy", choices=POLICY_NAMES, default="tf-full")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--program", action="append", default=None)
    p.add_argument("--rollouts", type=int, default=100)
    p.add_argument("--comm-weight", dest="comm_weight", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--out", required=True)
    p.add_argument("--report-dir", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="grid search over tradeoff, rule count, features")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--val-rollouts", dest="val_rollouts", type=int, default=20)
    p.add_argument("--comm-weight", dest="comm_weight", type=float, default=1.0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("attn-dump", help="write per-step attention matrices for one rollout")
    p.add_argument("--params", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--policy", choices=POLICY_NAMES, default="tf-full")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--program", action="append", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_attn_dump)

    p = sub.add_parser("rerun", help="replay a stage from its manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_rerun)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 1
    except (env.EnvError, dsl.DslError, synth.SynthError) as exc:
        print(f"error[bad-config]: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error[missing-input]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
