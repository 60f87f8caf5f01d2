"""Command-line front end.

Subcommands: generate, train, train-pred, eval, rollout, bench, render.
Exit codes: 0 success, 1 usage error, 2 config validation error,
3 runtime failure. STATM_THREADS caps evaluation workers (default 1).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from statm import configio, render
from statm import container as C
from statm import datagen as D
from statm import statm as SM
from statm import train as TR
from statm.errors import ConfigurationError, ContractViolation


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="statm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset")
    g.add_argument("--spec", required=True, help="SceneSpec JSON file")
    g.add_argument("--out", required=True, help="output STVC path")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=256, help="number of videos")

    t = sub.add_parser("train", help="train perception + predictor jointly")
    t.add_argument("--config", required=True, help="RunConfig JSON file")
    t.add_argument("--data", required=True, help="training dataset STVC")
    t.add_argument("--out", required=True, help="checkpoint STVC path")
    t.add_argument("--log", required=True, help="metric CSV path")
    t.add_argument("--verbose", action="store_true")

    tp = sub.add_parser("train-pred", help="train the predictor on frozen slots")
    tp.add_argument("--config", required=True)
    tp.add_argument("--ckpt", required=True, help="perception checkpoint STVC")
    tp.add_argument("--data", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--log", required=True)
    tp.add_argument("--verbose", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--window", type=int, default=None,
                   help="test-time buffer view length (default: config)")
    e.add_argument("--offset", type=int, default=0,
                   help="first frame included in the metrics")

    r = sub.add_parser("rollout", help="autoregressive prediction")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--video", type=int, default=0, help="video index in the dataset")
    r.add_argument("--context", type=int, required=True)
    r.add_argument("--horizon", type=int, required=True)
    r.add_argument("--out", required=True)

    b = sub.add_parser("bench", help="attention cost accounting")
    b.add_argument("--topology", required=True, choices=["cs", "as", "full"])
    b.add_argument("--t-max", type=int, default=8)
    b.add_argument("--n-max", type=int, default=8)
    b.add_argument("--out", default=None, help="also write the CSV here")

    rd = sub.add_parser("render", help="write PPM/PGM images for masks and alphas")
    rd.add_argument("--masks", required=True, help="STVC with mask/alpha entries")
    rd.add_argument("--outdir", required=True)
    return p


def cmd_generate(args) -> int:
    spec = configio.load_scene_spec(args.spec)
    videos = D.generate_dataset(spec, args.count, args.seed)
    C.save_container(args.out, D.dataset_to_entries(videos))
    print(f"wrote {len(videos)} videos to {args.out}")
    return 0


def _load_dataset(path):
    return D.entries_to_dataset(C.load_container(path))


def cmd_train(args) -> int:
    cfg = configio.load_run_config(args.config)
    videos = _load_dataset(args.data)
    ckpt, _ = TR.train_perception(cfg, videos, log_path=args.log,
                                  verbose=args.verbose)
    TR.save_checkpoint(args.out, ckpt)
    print(f"wrote checkpoint to {args.out}")
    return 0


def cmd_train_pred(args) -> int:
    cfg = configio.load_run_config(args.config)
    base = TR.load_checkpoint(args.ckpt)
    videos = _load_dataset(args.data)
    ckpt, _ = TR.train_predictor(cfg, base, videos, log_path=args.log,
                                 verbose=args.verbose)
    TR.save_checkpoint(args.out, ckpt)
    print(f"wrote checkpoint to {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = TR.load_checkpoint(args.ckpt)
    videos = _load_dataset(args.data)
    m = TR.evaluate_checkpoint(ckpt, videos, window=args.window, offset=args.offset)
    print("fg_ari,miou,psnr,ssim")
    print(f"{m['fg_ari']:.6g},{m['miou']:.6g},{m['psnr']:.6g},{m['ssim']:.6g}")
    return 0


def cmd_rollout(args) -> int:
    ckpt = TR.load_checkpoint(args.ckpt)
    videos = _load_dataset(args.data)
    if not (0 <= args.video < len(videos)):
        raise ConfigurationError(
            f"--video {args.video} outside dataset of {len(videos)} videos")
    out = TR.rollout(ckpt, videos[args.video], args.context, args.horizon)
    entries = {
        "context_masks": out["context_masks"].astype(np.int32),
        "context_frames": out["context_frames"].astype(np.float32),
        "pred_slots": out["pred_slots"].astype(np.float32),
        "pred_frames": out["pred_frames"].astype(np.float32),
        "pred_alpha": out["pred_alpha"].astype(np.float32),
        "pred_masks": out["pred_masks"].astype(np.int32),
    }
    C.save_container(args.out, entries)
    print(f"wrote rollout ({args.horizon} steps) to {args.out}")
    return 0


def cmd_bench(args) -> int:
    rows = ["topology,t,n,tokens,pairs,counter,verify"]
    for t in range(1, args.t_max + 1):
        for n in range(1, args.n_max + 1):
            report = SM.count_cost(args.topology, t, n)
            counter = SM.measured_pairs(args.topology, t, n)
            ok = "ok" if counter == report.pair_computations else "mismatch"
            rows.append(f"{args.topology},{t},{n},{report.tokens},"
                        f"{report.pair_computations},{counter},{ok}")
    text = "\n".join(rows) + "\n"
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    if any(row.endswith("mismatch") for row in rows[1:]):
        raise ContractViolation("bench: counter disagrees with the closed form")
    return 0


def cmd_render(args) -> int:
    entries = C.load_container(args.masks)
    masks = entries.get("pred_masks", entries.get("masks"))
    if masks is None:
        raise ConfigurationError(
            f"{args.masks}: no 'masks' or 'pred_masks' entry to render")
    alpha = entries.get("pred_alpha", entries.get("alpha"))
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if masks.ndim == 2:
        masks = masks[None]
    for t in range(masks.shape[0]):
        render.write_ppm(outdir / f"mask_{t:03d}.ppm", render.mask_to_rgb(masks[t]))
    count = masks.shape[0]
    if alpha is not None:
        if alpha.ndim == 3:
            alpha = alpha[None]
        for t in range(alpha.shape[0]):
            for s in range(alpha.shape[1]):
                g = (np.clip(alpha[t, s], 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
                render.write_pgm(outdir / f"alpha_{t:03d}_slot{s:02d}.pgm", g)
    print(f"wrote {count} mask frames to {outdir}")
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "train-pred": cmd_train_pred,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "bench": cmd_bench,
    "render": cmd_render,
}


def run_cli(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigurationError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ContractViolation, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
