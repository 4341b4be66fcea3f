"""Command-line entry point: ``s3pt {train,eval,probe,export,vmf-dump}``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import get_type_hints

import numpy as np

from .config import SECTIONS, UNITS, ConfigError, RunConfig, _parse, load_config, save_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, help="run config file (section.key = value unit)")
    base = RunConfig()
    group = parser.add_argument_group("config overrides")
    for section in SECTIONS:
        sub = getattr(base, section)
        for f in fields(sub):
            key = f"{section}.{f.name}"
            unit = UNITS.get(key)
            group.add_argument(f"--{key}", dest=key, metavar="VALUE", help=f"override {key}" + (f" [{unit}]" if unit else ""))


def _resolve_config(args) -> RunConfig:
    try:
        cfg = load_config(args.config) if args.config else RunConfig.desk()
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    updates = {}
    for section in SECTIONS:
        hints = get_type_hints(type(getattr(cfg, section)))
        for name, hint in hints.items():
            value = getattr(args, f"{section}.{name}", None)
            if value is not None:
                updates[f"{section}.{name}"] = _parse(value, hint, f"{section}.{name}")
    return cfg.with_updates(**updates) if updates else cfg


def _run_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(cfg.train.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_network(args):
    from .train import load_state

    state = load_state(args.checkpoint)
    return state, state.pair.teacher


def cmd_train(args) -> int:
    from .train import load_state, train

    if args.resume:
        state = load_state(args.resume)
        cfg = state.cfg
    else:
        cfg = _resolve_config(args)
        state = None
    out = _run_dir(args, cfg)
    save_config(cfg, out / "config.txt")
    state = train(cfg, state, stop_at=args.stop_at, out_dir=out)
    last = state.rows[-1] if state.rows else {}
    print(f"trained to step {state.step}; last total loss {last.get('total', float('nan')):.4f}; outputs in {out}")
    return EXIT_OK


def _seed_range(start: int, count: int):
    return range(start, start + count)


def cmd_eval(args) -> int:
    from .evaluate import evaluate_clustering

    state, net = _load_network(args)
    report = evaluate_clustering(net, state.cfg, _seed_range(args.seed_start, args.scenes))
    summary = report.summary()
    summary["rare_recall"] = report.rare_recall
    out = _run_dir(args, state.cfg)
    (out / "metrics_clustering.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"NMI {report.nmi:.4f}  purity {report.purity:.4f}  ARI {report.ari:.4f}")
    return EXIT_OK


def cmd_probe(args) -> int:
    from .evaluate import linear_probe

    state, net = _load_network(args)
    result = linear_probe(
        net,
        state.cfg,
        _seed_range(args.train_start, args.train_scenes),
        _seed_range(args.test_start, args.test_scenes),
        steps=args.steps,
        lr=args.lr,
    )
    out = _run_dir(args, state.cfg)
    payload = {"miou": result.miou, "iou": {str(k): v for k, v in result.iou.items()}}
    (out / "metrics_probe.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"probe mIoU {result.miou:.4f}")
    return EXIT_OK


def cmd_export(args) -> int:
    from .evaluate import dense_features, export_cluster_stats, export_segment_map, full_view
    from .train import cluster_pair, derive_seed, prepare_pair

    state, net = _load_network(args)
    cfg = state.cfg
    sample = prepare_pair(cfg, args.scene_seed)
    feats = dense_features(net, [full_view(sample.pixels_a, cfg.encoder.patch_size), full_view(sample.pixels_b, cfg.encoder.patch_size)])
    assign = cluster_pair(cfg, sample, feats[0], feats[1], derive_seed(args.scene_seed, 99))
    grid = cfg.encoder.grid
    out = _run_dir(args, cfg)
    ext = "ppm" if args.color else "pgm"
    for view in ("A", "B"):
        labels = assign.view_labels(view).reshape(grid, grid)
        # one token becomes a patch_size square so the map lines up with the view
        labels = np.kron(labels, np.ones((cfg.encoder.patch_size,) * 2, dtype=labels.dtype))
        export_segment_map(labels, out / f"segments_{args.scene_seed}_{view}.{ext}", color=args.color)
    export_cluster_stats(assign, out / f"segments_{args.scene_seed}.txt")
    print(f"wrote segment maps for scene {args.scene_seed} to {out}")
    return EXIT_OK


def cmd_vmf_dump(args) -> int:
    from .vmf import log_vmf_normalizer_np

    kappas = np.logspace(np.log10(args.kappa_min), np.log10(args.kappa_max), args.num)
    rows = [(d, k, float(log_vmf_normalizer_np(k, d))) for d in args.dim for k in kappas]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(fh)
        writer.writerow(["dim", "kappa", "log_c"])
        for d, k, v in rows:
            writer.writerow([d, repr(float(k)), repr(v)])
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s3pt", description="Desk-scale self-supervised pre-training on synthetic scenes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config (or resume a checkpoint)")
    _add_config_flags(p)
    p.add_argument("--out", help="run directory (default: train.output_dir)")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")
    p.add_argument("--stop-at", type=int, help="stop early at this step")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="clustering metrics on held-out scenes")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--seed-start", type=int, default=20000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="frozen-backbone linear probe")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--train-scenes", type=int, default=100)
    p.add_argument("--train-start", type=int, default=10000)
    p.add_argument("--test-scenes", type=int, default=50)
    p.add_argument("--test-start", type=int, default=20000)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("export", help="write segment maps for one scene")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--scene-seed", type=int, default=20000)
    p.add_argument("--color", action="store_true", help="PPM through the fixed palette instead of PGM ids")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("vmf-dump", help="CSV of log C_D(kappa) over a log-spaced grid")
    p.add_argument("--dim", type=int, nargs="+", default=[64])
    p.add_argument("--kappa-min", type=float, default=1e-3)
    p.add_argument("--kappa-max", type=float, default=1e3)
    p.add_argument("--num", type=int, default=50)
    p.add_argument("--out")
    p.set_defaults(func=cmd_vmf_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
