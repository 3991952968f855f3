"""Command-line interface.

Subcommands: gen, train, eval, ablate, bench-scan, heatmap.  Exit codes:
0 ok, 2 configuration error, 3 numeric failure, 4 I/O error.

Artifacts embed the full config as INI text, so `train` and `eval` can run
from a dataset or checkpoint alone; an explicit --config always wins.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .benchmark import (ABLATION_HEADER, BENCH_HEADER, bench_scan,
                        heatmap_export, run_ablation)
from .bevseq import EgoPose
from .config import (AppConfig, default_config, dump_config, load_config,
                     parse_config)
from .errors import ConfigError, FormatError, NumericError
from .fusion import FUSION_MODES
from .scene import gen_dataset
from .tensorio import (load_checkpoint, load_dataset, save_checkpoint,
                       save_dataset, write_csv)
from .training import (LOSS_HEADER, DetectorModel, evaluate_model, fit,
                       load_state, state_dict, _detach)

TRAIN_FILE = "train.bevt"
EVAL_FILE = "eval.bevt"
EVAL_SEED_OFFSET = 1000003      # eval sequences draw from a shifted root seed


def _config_from(args, embedded_text: str = "") -> AppConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    if embedded_text:
        return parse_config(embedded_text)
    return default_config()


def _load_model(ckpt_path, config_path=None):
    params, text = load_checkpoint(ckpt_path)
    cfg = load_config(config_path) if config_path else parse_config(text)
    model = DetectorModel(cfg.fusion, cfg.head, seed=cfg.train.seed)
    load_state(model, params)
    return model, cfg


def cmd_gen(args) -> int:
    cfg = _config_from(args)
    os.makedirs(args.out, exist_ok=True)
    text = dump_config(cfg)
    train_seqs = gen_dataset(cfg.scene, cfg.data.train_sequences,
                             seed=cfg.scene.seed, workers=cfg.data.workers)
    eval_seqs = gen_dataset(cfg.scene, cfg.data.eval_sequences,
                            seed=cfg.scene.seed + EVAL_SEED_OFFSET,
                            workers=cfg.data.workers)
    train_path = os.path.join(args.out, TRAIN_FILE)
    eval_path = os.path.join(args.out, EVAL_FILE)
    save_dataset(train_path, train_seqs, cfg.scene.resolution, text)
    save_dataset(eval_path, eval_seqs, cfg.scene.resolution, text)
    print(f"wrote {len(train_seqs)} train sequences to {train_path}")
    print(f"wrote {len(eval_seqs)} eval sequences to {eval_path}")
    return 0


def cmd_train(args) -> int:
    train_path = os.path.join(args.data, TRAIN_FILE)
    sequences, embedded = load_dataset(train_path)
    cfg = _config_from(args, embedded)
    model = DetectorModel(cfg.fusion, cfg.head, seed=cfg.train.seed)
    rows = fit(model, sequences, cfg.train)
    loss_path = args.loss_csv or os.path.splitext(args.out)[0] + ".loss.csv"
    write_csv(loss_path, LOSS_HEADER, rows)
    save_checkpoint(args.out, state_dict(model), dump_config(cfg))
    last = rows[-1][2] if rows else float("nan")
    print(f"trained {len(rows)} steps; final loss {last:.6g}")
    print(f"checkpoint: {args.out}")
    print(f"loss curve: {loss_path}")
    return 0


def cmd_eval(args) -> int:
    model, _cfg = _load_model(args.ckpt, getattr(args, "config", None))
    sequences, _ = load_dataset(os.path.join(args.data, EVAL_FILE))
    report = evaluate_model(model, sequences)
    write_csv(args.report, ("metric", "value"), report.csv_rows())
    for line in report.summary_rows():
        print(line)
    print(f"eval runtime: {report.runtime_s:.3f} s over {report.num_frames} frames")
    print(f"report: {args.report}")
    return 0


def _parse_grid(spec: str):
    try:
        modes_part, dirs_part = spec.split(":")
        modes = [m.strip() for m in modes_part.split(",") if m.strip()]
        dirs = [int(d) for d in dirs_part.split(",") if d.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad ablation grid {spec!r}; expected "
                          f"'modeA,modeB:1,4'") from exc
    for m in modes:
        if m not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {m!r} in grid; "
                              f"expected one of {FUSION_MODES}")
    for d in dirs:
        if d not in (1, 4):
            raise ConfigError(f"directions must be 1 or 4, got {d}")
    if not modes or not dirs:
        raise ConfigError(f"empty ablation grid {spec!r}")
    return [(m, d) for m in modes for d in dirs]


def cmd_ablate(args) -> int:
    train_seqs, embedded = load_dataset(os.path.join(args.data, TRAIN_FILE))
    eval_seqs, _ = load_dataset(os.path.join(args.data, EVAL_FILE))
    cfg = _config_from(args, embedded)
    grid = _parse_grid(args.grid)
    rows = run_ablation(train_seqs, eval_seqs, cfg.fusion, cfg.head,
                        cfg.train, grid=grid)
    write_csv(args.out, ABLATION_HEADER, rows)
    for row in rows:
        print(f"{row[0]:>16} x{row[1]}  mAP {row[2]:.4f}  mAVE {row[6]:.4f}  "
              f"NDS {row[7]:.4f}")
    print(f"ablation table: {args.out}")
    return 0


def cmd_bench_scan(args) -> int:
    t_values = [int(t) for t in args.t.split(",") if t.strip()]
    result = bench_scan(t_values=t_values, repeats=args.repeats,
                        chunk=args.chunk)
    write_csv(args.csv, BENCH_HEADER, result.csv_rows())
    for mode, slope in result.slopes.items():
        print(f"{mode:>10} log-log slope: {slope:.3f}")
    print(f"timings: {args.csv}")
    return 0


def cmd_heatmap(args) -> int:
    model, _cfg = _load_model(args.ckpt, getattr(args, "config", None))
    data_path = os.path.join(args.data, EVAL_FILE)
    if not os.path.exists(data_path):
        data_path = os.path.join(args.data, TRAIN_FILE)
    sequences, _ = load_dataset(data_path)
    total = sum(len(s) for s in sequences)
    if not 0 <= args.frame < total:
        raise ConfigError(f"frame {args.frame} out of range; dataset has "
                          f"{total} frames")
    index = 0
    for seq in sequences:
        hist = None
        hist_pose = None
        for sample in seq:
            cur = sample.features
            if hist is None:
                hist_grid, delta = cur, EgoPose()
            else:
                hist_grid, delta = hist, sample.pose.relative_to(hist_pose)
            fused = model.fusion(cur, hist_grid, delta, train=False)
            hist = _detach(fused)
            hist_pose = sample.pose
            if index == args.frame:
                heatmap_export(hist, args.out)
                print(f"wrote heatmap of frame {args.frame} to {args.out}")
                return 0
            index += 1
    raise ConfigError(f"frame {args.frame} not found")   # unreachable


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevssm",
        description="Synthetic BEV temporal-fusion detection workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate train/eval datasets")
    p.add_argument("--config", help="INI config (defaults when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", help="INI config (dataset's embedded config "
                                    "when omitted)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv", help="loss curve path (default: next to "
                                      "the checkpoint)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="metrics CSV path")
    p.add_argument("--config", help="override the checkpoint's config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the fusion ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="comparison CSV path")
    p.add_argument("--grid", default="temporal_mamba,concat:1,4",
                   help="grid spec 'modeA,modeB:1,4'")
    p.add_argument("--config")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench-scan", help="time the scan routes")
    p.add_argument("--t", default="256,512,1024,2048,4096,8192",
                   help="comma-separated sequence lengths")
    p.add_argument("--csv", required=True, help="timings CSV path")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--chunk", type=int, default=64)
    p.set_defaults(func=cmd_bench_scan)

    p = sub.add_parser("heatmap", help="export a fused-frame heatmap")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--frame", type=int, required=True,
                   help="global frame index into the dataset")
    p.add_argument("--out", required=True, help="PGM path")
    p.add_argument("--config")
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
