"""Command-line entry point: synth | mask | train | sweep | gradcheck | embed.

Every config key (see ``--print-config``) is also a kebab-case flag, e.g.
``--missing-rate 0.5 --epochs-pretrain 50``. Flags override the config file,
which overrides the built-in defaults.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import KEYS, ConfigError, ExperimentConfig, default_config_text, load_config
from .data import load_dataset, save_dataset, synthesize

log = logging.getLogger("urrl_imvc")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key = value config file")
    group = parser.add_argument_group("config keys")
    for key in KEYS.values():
        group.add_argument("--" + key.name.replace("_", "-"), dest=f"key_{key.name}", metavar="V",
                           help=f"{key.doc} (default: {key.default!r})")


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for name in KEYS:
        raw = getattr(args, f"key_{name}", None)
        if raw is not None:
            cfg.set(name, raw, f"--{name.replace('_', '-')}: ")
    return cfg


def cmd_synth(args, cfg: ExperimentConfig) -> int:
    ds = synthesize(cfg.synthetic_spec())
    save_dataset(ds, args.out)
    log.info("wrote %s: N=%d V=%d dims=%s clusters=%d", args.out, ds.n_samples, ds.n_views, ds.dims, ds.n_clusters)
    return 0


def cmd_mask(args, cfg: ExperimentConfig) -> int:
    from .experiment import apply_protocol

    ds = apply_protocol(load_dataset(args.dataset), cfg, cfg["seed"], cfg["missing_rate"] or 0.0)
    save_dataset(ds, args.out)
    log.info("wrote %s with %d incomplete samples", args.out, int((ds.mask.sum(axis=1) < ds.n_views).sum()))
    return 0


def cmd_train(args, cfg: ExperimentConfig) -> int:
    from .experiment import train_experiment

    ds = load_dataset(args.dataset)
    art = train_experiment(ds, cfg, args.out)
    for row in art.report["runs"]:
        log.info("seed %s: %s", row["seed"], {m: round(row[m], 4) for m in ("acc", "nmi", "ari") if m in row})
    for metric, stats in art.report["summary"].items():
        print(f"{metric}: {stats['mean']:.4f} +- {stats['std']:.4f}")
    for note in art.report["notes"]:
        print(f"note: {note}")
    return 0


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    from .experiment import sweep_experiment

    ds = load_dataset(args.dataset)
    rows, flags = sweep_experiment(ds, cfg, args.out)
    for row in rows:
        if row["kind"] == "mean":
            print(f"m_r={row['missing_rate']:g}: acc={row['acc']:.4f} nmi={row['nmi']:.4f} ari={row['ari']:.4f}")
    for flag in flags:
        print(f"trend anomaly: {flag}")
    return 0


def cmd_gradcheck(args, cfg: ExperimentConfig) -> int:
    from .checks import gradient_suite

    rows = gradient_suite(cfg["seed"], args.max_entries)
    print(f"{'check':<10} {'max rel err':>12} {'threshold':>10}  result")
    for row in rows:
        print(f"{row.name:<10} {row.error:>12.3e} {row.threshold:>10.0e}  {'PASS' if row.passed else 'FAIL'}")
    return 0 if all(r.passed for r in rows) else 1


def cmd_embed(args, cfg: ExperimentConfig) -> int:
    from .experiment import atomic_write, embedding_bytes
    from .model import load_checkpoint
    from .train import predict

    ds = load_dataset(args.dataset)
    params, mcfg = load_checkpoint(args.checkpoint)
    if tuple(ds.dims) != mcfg.dims:
        raise ValueError(f"dataset dims {ds.dims} do not match checkpoint dims {list(mcfg.dims)}")
    labels, _, z = predict(ds, params, mcfg)
    out = Path(args.out)
    atomic_write(out / "embedding.bin", embedding_bytes(z))
    atomic_write(out / "labels.csv", "".join(f"{int(v)}\n" for v in labels))
    log.info("wrote %d x %d embedding to %s", z.shape[0], z.shape[1], out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="urrl-imvc", description=__doc__.splitlines()[0])
    parser.add_argument("--print-config", action="store_true", help="print every key with its default and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic labelled dataset")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(run=cmd_synth)

    p = sub.add_parser("mask", help="apply the missing-view protocol to a dataset")
    p.add_argument("dataset", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(run=cmd_mask)

    p = sub.add_parser("train", help="train once per seed and write checkpoints, losses and a report")
    p.add_argument("dataset", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("sweep", help="train over a grid of missing rates; writes CSV and SVG")
    p.add_argument("dataset", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(run=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference checks on built-in toy shapes")
    p.add_argument("--max-entries", type=int, default=None, help="probe at most this many entries per tensor")
    p.set_defaults(run=cmd_gradcheck)

    p = sub.add_parser("embed", help="dump clean embeddings and hard labels from a checkpoint")
    p.add_argument("dataset", type=Path)
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(run=cmd_embed)

    for p in sub.choices.values():
        _add_config_flags(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.print_config:
        sys.stdout.write(default_config_text())
        return 0
    if not args.command:
        parser.print_help()
        return 2
    try:
        cfg = _resolve(args)
        return args.run(args, cfg)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"urrl-imvc {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
