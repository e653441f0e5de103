"""Command-line interface.

Exit codes: 0 success, 1 usage error (bad arguments, malformed config,
missing files), 2 runtime or numeric failure (aborted training, linear
algebra breakdown).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import harness as hn
from . import taskgen as tg


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="npl",
        description="Train and evaluate sequential neural-process models "
                    "on synthetic task streams.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="key=value config file")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="JSON-lines dataset")
    p.add_argument("--samples", type=int, default=10,
                   help="latent samples per sequence (default 10)")
    p.add_argument("--sequences", type=int, default=200,
                   help="sequences to score (default 200)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("generate-data", help="write a dataset file")
    p.add_argument("--regime", required=True)
    p.add_argument("--dim", required=True, choices=["1d", "2d"])
    p.add_argument("--count", required=True, type=int)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train a memory-ablated variant")
    p.add_argument("--config", required=True)
    p.add_argument("--variant", required=True,
                   choices=["no-tracking", "no-interaction"])

    p = sub.add_parser("plot", help="export plot CSVs and render figures")
    p.add_argument("--inputs", required=True, nargs="+",
                   help="metrics CSVs, one per model")
    p.add_argument("--out", required=True, help="output CSV path")
    return parser


def _load_train_config(path: str) -> hn.TrainConfig:
    config_path = Path(path)
    return hn.parse_train_config(config_path.read_text(encoding="utf-8"),
                                 base_dir=config_path.parent)


def _run_train(args) -> int:
    cfg = _load_train_config(args.config)
    hn.train(cfg)
    print(f"checkpoint: {cfg.checkpoint_path}")
    print(f"metrics: {cfg.metrics_path}")
    return 0


def _run_eval(args) -> int:
    result = hn.evaluate(args.checkpoint, args.data,
                         n_sequences=args.sequences,
                         n_samples=args.samples, seed=args.seed)
    print("task_step,nll,sem")
    for t, (nll, sem) in enumerate(zip(result.nll, result.sem), 1):
        print(f"{t},{nll!r},{sem!r}")
    return 0


def _run_generate(args) -> int:
    regime = tg.regime_for(args.regime, args.dim)
    if args.dim == "2d":
        sprites = tg.make_default_sprites()
        seqs = [tg.generate_2d_sequence(args.seed + i, regime, sprites)
                for i in range(args.count)]
    else:
        seqs = [tg.generate_1d_sequence(args.seed + i, regime)
                for i in range(args.count)]
    tg.write_sequences(args.out, seqs)
    print(f"wrote {len(seqs)} sequences to {args.out}")
    return 0


def _run_ablate(args) -> int:
    cfg = _load_train_config(args.config)
    variant = args.variant.replace("-", "_")
    hn.ablate(cfg, variant)
    ckpt, metrics = hn.ablation_paths(cfg, variant)
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {metrics}")
    return 0


def _run_plot(args) -> int:
    from . import figures

    task_csv, wall_csv = hn.export_plot_data(args.inputs, args.out)
    pngs = figures.render_report(task_csv, wall_csv)
    for path in (task_csv, wall_csv, *pngs):
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "train": _run_train,
    "eval": _run_eval,
    "generate-data": _run_generate,
    "ablate": _run_ablate,
    "plot": _run_plot,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
