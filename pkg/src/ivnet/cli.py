"""Command-line interface.

Subcommands: gen, train, eval, ablate, viz, check.  Exit codes: 0 on
success, 1 on contract violation, 2 on numeric fault, 3 on I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .ablation import ablate, ablation_csv
from .config import load_scm_config, load_train_config
from .data import load_split, parse_manifest
from .errors import ContractError, DataFormatError, NumericFault
from .heatmap import export_attention
from .metrics import evaluate
from .scm import generate_dataset
from .training import load_checkpoint, train


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="ivnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic confounded dataset")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=None)

    tr = sub.add_parser("train", help="train a model from a config file")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--policy", choices=("u-ones", "u-zeros"), default=None)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--policy", choices=("u-ones", "u-zeros"), default="u-ones")

    ab = sub.add_parser("ablate", help="run the 8-configuration ablation grid")
    ab.add_argument("--config", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--seed", type=int, default=None)

    vz = sub.add_parser("viz", help="export a decoder attention heatmap")
    vz.add_argument("--checkpoint", required=True)
    vz.add_argument("--manifest", required=True)
    vz.add_argument("--index", type=int, default=0)
    vz.add_argument("--class-index", type=int, default=0)
    vz.add_argument("--out", required=True)

    ck = sub.add_parser("check", help="run the gradient and invariant suites")
    ck.add_argument("--quiet", action="store_true")
    return parser


def _cmd_gen(args) -> int:
    cfg = load_scm_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    summary = generate_dataset(cfg, args.out)
    for key in sorted(summary):
        print(f"{key}={summary[key]}")
    return 0


def _load_data(cfg):
    if not cfg.data.dir:
        raise ContractError("config is missing data.dir")
    train_split = load_split(
        Path(cfg.data.dir) / "manifest.txt", cfg.data.policy,
        cfg.data.resize_to, cfg.data.crop_to,
    )
    test_split = None
    if cfg.data.test_dir:
        test_split = load_split(
            Path(cfg.data.test_dir) / "manifest.txt", cfg.data.policy,
            cfg.data.resize_to, cfg.data.crop_to,
        )
    return train_split, test_split


def _cmd_train(args) -> int:
    cfg = load_train_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.policy is not None:
        cfg.data.policy = args.policy
    train_split, test_split = _load_data(cfg)
    _, metrics = train(cfg, train_split, test_split, out_dir=args.out)
    last = metrics.step_rows[-1] if metrics.step_rows else None
    if last is not None:
        print(f"trained {len(metrics.step_rows)} steps, final total loss {last.total:.6f}")
    if metrics.eval_rows:
        final = metrics.eval_rows[-1]
        print(f"final {final.split} mean AUC {final.mean_auc:.4f}")
    print(f"checkpoint and logs written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    split = load_split(args.manifest, args.policy)
    result = evaluate(model, split, "eval")
    names = parse_manifest(args.manifest).class_names
    for name, value in zip(names, result.per_class):
        print(f"{name}: {'skipped (single class)' if value is None else f'{value:.4f}'}")
    print(f"mean AUC: {result.mean_auc:.4f}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = load_train_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if not cfg.data.dir or not cfg.data.test_dir:
        raise ContractError("ablate needs data.dir and data.test_dir in the config")
    rows = ablate(cfg, cfg.data.dir, cfg.data.test_dir, out_dir=args.out)
    print(ablation_csv(rows), end="")
    return 0


def _cmd_viz(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    split = load_split(args.manifest)
    if not 0 <= args.index < len(split):
        raise ContractError(f"sample index {args.index} out of range [0, {len(split)})")
    heat = export_attention(
        model, split.images[args.index], split.tokens[args.index],
        args.class_index, args.out,
    )
    print(f"heatmap ({heat.shape[0]}x{heat.shape[1]}) written to {args.out}")
    return 0


def _cmd_check(args) -> int:
    from .selfcheck import run_all

    return 0 if run_all(verbose=not args.quiet) else 1


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "viz": _cmd_viz,
    "check": _cmd_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ivnet: error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except ContractError as exc:
        print(f"ivnet: contract violation: {exc}", file=sys.stderr)
        return 1
    except NumericFault as exc:
        print(f"ivnet: numeric fault: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, OSError) as exc:
        print(f"ivnet: i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
