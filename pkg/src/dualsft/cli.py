"""Command-line entry point.

Subcommands: run (full pipeline), score, select, finetune (from a saved
masks file), diagnose <kind>, synth (write JSONL datasets). Exit code 0 on
success, 2 on configuration errors, 3 on numeric failures."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import report as report_mod
from .pipeline import (
    DIAGNOSTIC_KINDS,
    RunConfig,
    StageError,
    build_context,
    diagnose,
    finetune,
    make_split,
    run_dualsft,
    stage_rng,
    STAGE_FT,
)
from .surrogate import DIAG, FIRST
from .tensor import NumericsError


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=Path("out"))
    ds = parser.add_argument_group("dataset")
    ds.add_argument("--dataset-kind", default=data_mod.MIXTURE,
                    choices=list(data_mod.DATASET_KINDS) + ["jsonl"])
    ds.add_argument("--train-size", type=int, default=400)
    ds.add_argument("--val-size", type=int, default=128)
    ds.add_argument("--anchor-size", type=int, default=256)
    ds.add_argument("--noise-fraction", type=float, default=0.0)
    ds.add_argument("--num-features", type=int, default=6)
    ds.add_argument("--num-classes", type=int, default=2)
    ds.add_argument("--vocab-size", type=int, default=16)
    ds.add_argument("--jsonl-train", type=Path)
    ds.add_argument("--jsonl-val", type=Path)
    ds.add_argument("--jsonl-anchor", type=Path)
    md = parser.add_argument_group("model")
    md.add_argument("--model", default="softmax_classifier",
                    choices=["softmax_classifier", "mlp", "tiny_causal_lm"])
    md.add_argument("--hidden-dims", default="8")
    md.add_argument("--embed-dim", type=int, default=8)
    hp = parser.add_argument_group("selection")
    hp.add_argument("--prior-weight", type=float, default=0.8)
    hp.add_argument("--temperature", type=float, default=1.0)
    hp.add_argument("--data-budget", type=float, default=0.10)
    hp.add_argument("--param-budget", type=float, default=0.05)
    hp.add_argument("--warm-fraction", type=float, default=0.05)
    hp.add_argument("--warm-epochs", type=int, default=1)
    hp.add_argument("--ft-lr", type=float, default=0.05)
    hp.add_argument("--ft-epochs", type=int, default=None)
    hp.add_argument("--batch-size", type=int, default=32)
    hp.add_argument("--order", default=DIAG, choices=[FIRST, DIAG])
    hp.add_argument("--diagnostics", default="",
                    help="comma list from: " + ",".join(DIAGNOSTIC_KINDS))


def config_from_args(args) -> RunConfig:
    if args.dataset_kind == "jsonl":
        if not (args.jsonl_train and args.jsonl_val):
            raise ValueError("jsonl datasets need --jsonl-train and --jsonl-val")
        dataset = {"kind": "jsonl", "train": str(args.jsonl_train),
                   "val": str(args.jsonl_val),
                   "anchor": str(args.jsonl_anchor) if args.jsonl_anchor else None}
    else:
        dataset = {
            "kind": args.dataset_kind,
            "train_size": args.train_size,
            "val_size": args.val_size,
            "anchor_size": args.anchor_size,
            "noise_fraction": args.noise_fraction,
            "num_features": args.num_features,
            "num_classes": args.num_classes,
            "vocab_size": args.vocab_size,
        }
    hidden = tuple(int(v) for v in args.hidden_dims.split(",") if v)
    diags = tuple(v for v in args.diagnostics.split(",") if v)
    return RunConfig(seed=args.seed, model_kind=args.model, hidden_dims=hidden,
                     embed_dim=args.embed_dim, dataset=dataset,
                     prior_weight=args.prior_weight, temperature=args.temperature,
                     data_budget=args.data_budget, param_budget=args.param_budget,
                     warm_fraction=args.warm_fraction, warm_epochs=args.warm_epochs,
                     ft_lr=args.ft_lr, ft_epochs=args.ft_epochs,
                     batch_size=args.batch_size, order=args.order, diagnostics=diags)


def cmd_run(args) -> int:
    config = config_from_args(args)
    artifacts = run_dualsft(config)
    files = report_mod.emit_report(artifacts, args.out)
    print(f"run complete: final validation loss "
          f"{artifacts.metrics['val_new_loss_final']:.6f}; wrote "
          f"{', '.join(files)} to {args.out}")
    return 0


def cmd_score(args) -> int:
    config = config_from_args(args)
    context = build_context(config)
    args.out.mkdir(parents=True, exist_ok=True)
    report_mod.write_manifest(args.out, config, context.split, {
        "theta_old": context.theta_old.fingerprint(),
        "theta_bar": context.theta_bar.fingerprint(),
    })
    report_mod.write_scores(args.out, context.param_scores, context.data_scores)
    print(f"scored {context.pool_size} pool examples and "
          f"{context.theta_old.dim} parameters into {args.out}")
    return 0


def cmd_select(args) -> int:
    config = config_from_args(args)
    context = build_context(config)
    args.out.mkdir(parents=True, exist_ok=True)
    report_mod.write_manifest(args.out, config, context.split, {
        "theta_old": context.theta_old.fingerprint(),
        "theta_bar": context.theta_bar.fingerprint(),
    })
    report_mod.write_scores(args.out, context.param_scores, context.data_scores)
    report_mod.write_masks(args.out, context)
    print(f"selected {context.data_budget_count} examples and "
          f"{context.param_budget_count} parameters into {args.out}")
    return 0


def cmd_finetune(args) -> int:
    config = config_from_args(args)
    with open(args.masks) as fh:
        masks = json.load(fh)
    from .pipeline import build_model

    model = build_model(config)
    split = make_split(config)
    theta_old = model.init_params(stage_rng(config.seed, 1))
    mask = np.zeros(theta_old.dim, dtype=bool)
    mask[np.asarray(masks["param_mask"], dtype=np.int64)] = True
    selected = [split.train[i] for i in masks["data_selected_train_indices"]]
    theta_star = finetune(model, theta_old, selected, mask, config,
                          stage_rng(config.seed, STAGE_FT))
    args.out.mkdir(parents=True, exist_ok=True)
    from .models import save_params

    save_params(theta_star, args.out / report_mod.FINAL_CHECKPOINT)
    print(f"fine-tuned on {len(selected)} examples; checkpoint written to "
          f"{args.out / report_mod.FINAL_CHECKPOINT}")
    return 0


def cmd_diagnose(args) -> int:
    config = config_from_args(args)
    result = diagnose(args.kind, config)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"diagnostic_{args.kind}.json"
    with open(path, "w") as fh:
        json.dump(report_mod._jsonable(result), fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(json.dumps(report_mod._jsonable(result), sort_keys=True, indent=2))
    return 0


def cmd_synth(args) -> int:
    config = config_from_args(args)
    split = make_split(config)
    args.out.mkdir(parents=True, exist_ok=True)
    data_mod.save_jsonl(split.train, args.out / "train.jsonl")
    data_mod.save_jsonl(split.val, args.out / "val.jsonl")
    data_mod.save_jsonl(split.anchor, args.out / "anchor.jsonl")
    with open(args.out / "meta.json", "w") as fh:
        json.dump(report_mod._jsonable({"meta": split.meta,
                                        "warm_indices": split.warm_indices}),
                  fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote train/val/anchor JSONL ({len(split.train)}/{len(split.val)}/"
          f"{len(split.anchor)} records) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualsft",
                                     description="Dual parameter/data selection "
                                                 "with shared-surrogate scoring.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in [("run", cmd_run), ("score", cmd_score), ("select", cmd_select),
                     ("finetune", cmd_finetune), ("synth", cmd_synth)]:
        p = sub.add_parser(name)
        _add_common(p)
        if name == "finetune":
            p.add_argument("--masks", type=Path, required=True,
                           help="masks.json from a previous select/run")
        p.set_defaults(fn=fn)
    p = sub.add_parser("diagnose")
    p.add_argument("kind", choices=DIAGNOSTIC_KINDS)
    _add_common(p)
    p.set_defaults(fn=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except StageError as exc:
        numeric = isinstance(exc.__cause__, NumericsError)
        print(f"error: {exc}", file=sys.stderr)
        return 3 if numeric else 2
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
