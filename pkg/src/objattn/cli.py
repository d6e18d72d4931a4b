"""Command line interface.

Subcommands cover the pipeline end to end: demo generation, attention
training and finetuning, policy training, evaluation rollouts, full
experiment runs, and report rendering. Every subcommand accepts --seed,
--out, and --config; errors exit nonzero with a one-line diagnostic.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from . import experiments, io
from .attention import TrainConfig, finetune_attention, model_from_dict, train_attention
from .core import ArtifactError, SchemaError
from .policy import BCConfig, RLConfig, behavior_clone, policy_from_dict, rollout, train_rl
from .sim import ExpertFailureError, PlacementError


def _load_config(path: str | None) -> dict:
    return io.read_json(path) if path else {}


def _config_from(cls, cfg: dict, ctx: str):
    try:
        return cls(**cfg)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"invalid {ctx} config: {exc}") from exc


def _load_spec(args) -> experiments.ExperimentSpec:
    """Experiment spec from a file, with --config overrides and --seed applied."""
    data = io.read_json(args.spec)
    overrides = _load_config(args.config)
    spec = experiments.spec_from_dict(experiments._merge(data, overrides))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    return spec


def _cmd_gen_demos(args) -> int:
    spec = _load_spec(args)
    demos = experiments.collect_spec_demonstrations(spec, args.stage)
    out = args.out or "demos.json"
    io.save_demos(out, demos)
    print(f"wrote {len(demos)} demonstrations to {out}")
    return 0


def _cmd_train_attention(args) -> int:
    demos = io.load_demos(args.demos)
    cfg = _load_config(args.config)
    n_rows = int(cfg.pop("n_rows", 1))
    crops = cfg.pop("crops", None)
    if crops is not None:
        crops = [np.asarray(c, dtype=float) for c in crops]
    if args.seed is not None:
        cfg["seed"] = args.seed
    model = train_attention(demos, _config_from(TrainConfig, cfg, "attention"), n_rows, crops)
    out = args.out or "attention.json"
    io.save_artifact(out, model)
    print(f"wrote attention model ({model.n_rows} rows, d={model.feature_dim}) to {out}")
    return 0


def _cmd_finetune_attention(args) -> int:
    model = model_from_dict(io.read_json(args.model))
    demos = io.load_demos(args.demos)
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    tuned = finetune_attention(model, demos, _config_from(TrainConfig, cfg, "finetune"))
    out = args.out or "attention.json"
    io.save_artifact(out, tuned)
    print(f"wrote finetuned attention model to {out}")
    return 0


def _cmd_train_policy(args) -> int:
    demos = io.load_demos(args.demos)
    model = model_from_dict(io.read_json(args.model))
    cfg = _load_config(args.config)
    method = cfg.pop("method", "bc")
    vision = bool(cfg.pop("vision", True))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if method == "bc":
        policy = behavior_clone(demos, model, _config_from(BCConfig, cfg, "bc"), vision)
    elif method == "rl":
        spec_path = cfg.pop("experiment_spec", None)
        if spec_path is None:
            raise SchemaError(
                "rl training needs an 'experiment_spec' path in --config for the environment"
            )
        warm_start = bool(cfg.pop("warm_start", True))
        spec = experiments.resolve_spec(experiments.load_spec(spec_path))
        bank = experiments.build_bank(spec)
        task = experiments.training_task(spec)
        train_prop = _config_from(
            experiments.ProposerConfig, spec.proposer["train"], "proposer.train"
        )
        rl_cfg = _config_from(RLConfig, cfg, "rl")
        init = None
        if warm_start:
            bc_cfg = _config_from(
                BCConfig, {**spec.bc, "hidden": list(rl_cfg.hidden)}, "bc"
            )
            init = behavior_clone(demos, model, bc_cfg, vision)
        policy = train_rl(
            task, model, rl_cfg, vision, bank, train_prop, spec.train_seeds, init_policy=init
        )
    else:
        raise SchemaError(f"unknown training method '{method}' (expected 'bc' or 'rl')")
    out = args.out or "policy.json"
    io.save_artifact(out, policy)
    print(f"wrote {'vision' if policy.vision else 'no-vision'} policy to {out}")
    return 0


def _cmd_eval(args) -> int:
    policy = policy_from_dict(io.read_json(args.policy))
    model = model_from_dict(io.read_json(args.model))
    cfg = _load_config(args.config)
    spec_path = cfg.pop("experiment_spec", None)
    if spec_path is None:
        raise SchemaError("eval needs an 'experiment_spec' path in --config for the environment")
    spec = experiments.resolve_spec(experiments.load_spec(spec_path))
    if args.seed is not None:
        spec = experiments.resolve_spec(
            replace(spec, seed=args.seed, train_seeds=(), eval_seeds=())
        )
    bank = experiments.build_bank(spec)
    task = experiments.evaluation_task(spec)
    eval_prop = _config_from(experiments.ProposerConfig, spec.proposer["eval"], "proposer.eval")
    seeds = cfg.pop("seeds", list(spec.eval_seeds))
    results = []
    for cond in seeds:
        res = rollout(policy, model, task, int(cond), bank, eval_prop)
        results.append({"condition_seed": int(cond), "success": bool(res.success)})
    rate = sum(r["success"] for r in results) / len(results) if results else 0.0
    payload = {
        "schema_version": io.SCHEMA_VERSION,
        "results": results,
        "success_rate": rate,
        "count": len(results),
    }
    if args.out:
        io.write_json(args.out, payload)
        print(f"wrote evaluation results to {args.out}")
    print(f"success rate: {rate:.3f} over {len(results)} conditions")
    return 0


def _cmd_experiment(args) -> int:
    spec = _load_spec(args)
    report = experiments.run_experiment(spec)
    out = args.out or "report.json"
    experiments.save_report(out, report)
    print(experiments.render_report(report), end="")
    print(f"wrote report to {out}")
    return 0


def _cmd_report(args) -> int:
    report = experiments.load_report(args.report)
    text = experiments.render_report(report)
    print(text, end="")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote rendered report to {args.out}")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="override the operation's seed")
    p.add_argument("--out", default=None, help="output path")
    p.add_argument("--config", default=None, help="JSON file with config overrides")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="objattn",
        description="attention-over-proposals pipeline: demos, attention, policies, experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demos", help="run the scripted expert and save demonstrations")
    p.add_argument("spec", help="experiment spec JSON describing bank, task, and proposer")
    p.add_argument(
        "--stage", default="train", choices=["train", "finetune"], help="which demo pool"
    )
    _add_common(p)
    p.set_defaults(func=_cmd_gen_demos)

    p = sub.add_parser("train-attention", help="fit attention rows and the motion predictor")
    p.add_argument("demos", help="demonstrations JSON")
    _add_common(p)
    p.set_defaults(func=_cmd_train_attention)

    p = sub.add_parser("finetune-attention", help="continue attention training on new demos")
    p.add_argument("model", help="attention model JSON")
    p.add_argument("demos", help="demonstrations JSON")
    _add_common(p)
    p.set_defaults(func=_cmd_finetune_attention)

    p = sub.add_parser("train-policy", help="behavior-clone or RL-train a policy")
    p.add_argument("demos", help="demonstrations JSON")
    p.add_argument("model", help="attention model JSON")
    _add_common(p)
    p.set_defaults(func=_cmd_train_policy)

    p = sub.add_parser("eval", help="roll a policy over evaluation conditions")
    p.add_argument("policy", help="policy JSON")
    p.add_argument("model", help="attention model JSON")
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("experiment", help="run a full experiment spec and write its report")
    p.add_argument("spec", help="experiment spec JSON")
    _add_common(p)
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("report", help="render a stored report as a text table")
    p.add_argument("report", help="experiment report JSON")
    _add_common(p)
    p.set_defaults(func=_cmd_report)

    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        if code is None:
            return 0
        return code if isinstance(code, int) else 2
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return 1
    except (ArtifactError, ExpertFailureError, PlacementError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
