"""Command line entry point: ``evdeblur <synth|voxelize|train|infer|eval|info>``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .events_io import read_events, read_image, write_image
from .kunet import ModelConfig, count_parameters, init_params, params_from_state
from .metrics_eval import evaluate_dir, scores_to_csv
from .representations import scer, split_voxels, voxelize
from .synth import make_dataset
from .training import TrainConfig, build_configs, deblur, format_config, parse_config_text, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p):
    p.add_argument("--config", help="key = value config file")
    for cls in (ModelConfig, TrainConfig):
        for f in fields(cls):
            p.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", metavar="V")


def _configs(args):
    values = {}
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            values.update(parse_config_text(f.read()))
    for key, val in vars(args).items():
        if key.startswith("cfg_") and val is not None:
            values[key[4:]] = val
    return build_configs(values)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="evdeblur", description="Event-guided single-image deblurring toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--contrast", type=float, default=0.2)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--frames", type=int, default=9)
    p.add_argument("--max-speed", type=float, default=1.5)

    p = sub.add_parser("voxelize", help="convert an event file to a tensor file")
    p.add_argument("--events", required=True)
    p.add_argument("--bins", type=int, required=True)
    p.add_argument("--repr", choices=("voxel", "scer", "split"), default="voxel")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    _add_config_flags(p)

    p = sub.add_parser("infer", help="deblur one image with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--blur", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tta", action="store_true")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", help="write the CSV here instead of stdout")
    p.add_argument("--luma", action="store_true")

    p = sub.add_parser("info", help="print the parameter census and config")
    p.add_argument("--checkpoint")
    _add_config_flags(p)
    return parser


def cmd_synth(args):
    if args.scenes < 0:
        raise UsageError("--scenes must be >= 0")
    if args.contrast <= 0:
        raise UsageError("--contrast must be positive")
    manifest = make_dataset(args.scenes, args.out, args.seed, args.contrast,
                            (args.size, args.size), args.frames, args.max_speed)
    print(manifest)


def cmd_voxelize(args):
    if args.bins < 1:
        raise UsageError("--bins must be >= 1")
    if args.repr == "scer" and args.bins % 2:
        raise UsageError(f"--repr scer needs an even --bins, got {args.bins}")
    if args.repr == "split" and args.bins % 2:
        raise UsageError(f"--repr split needs an even --bins (M+1), got {args.bins}")
    stream = read_events(args.events)
    if args.repr == "voxel":
        tensors = {"voxel": voxelize(stream, args.bins)}
    elif args.repr == "scer":
        tensors = {"scer": scer(stream, args.bins)}
    else:
        sv = split_voxels(stream, args.bins - 1)
        tensors = {"split.forward": sv.forward, "split.backward": sv.backward}
    data = dc.save_tensors(tensors)
    Path(args.out).write_bytes(data)
    print(args.out)


def cmd_train(args):
    mcfg, tcfg = _configs(args)
    progress = None
    if not args.quiet:
        every = max(1, tcfg.iters // 20)

        def progress(row):
            if row[0] % every == 0 or row[0] == tcfg.iters:
                print(f"iter {row[0]:6d}  loss {row[1]:.5f}  lr {row[5]:.3g}  {row[6]:.1f}s",
                      flush=True)

    result = train(mcfg, tcfg, args.data, args.out, progress)
    print(result.checkpoint)


def _load_checkpoint(path):
    with open(path, "rb") as f:
        state = dc.load_tensors(f.read())
    return params_from_state(state)


def cmd_infer(args):
    params, mcfg = _load_checkpoint(args.checkpoint)
    blur = read_image(args.blur)
    events = read_events(args.events)
    if blur.channels != mcfg.image_channels:
        raise ValueError(f"model expects {mcfg.image_channels} channels, image has {blur.channels}")
    out = deblur(params, mcfg, blur, events, tta=args.tta)
    write_image(args.out, out)
    print(args.out)


def cmd_eval(args):
    rows, mean = evaluate_dir(args.pred, args.gt, luma=args.luma)
    text = scores_to_csv(rows, mean)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_info(args):
    if args.checkpoint:
        params, mcfg = _load_checkpoint(args.checkpoint)
        tcfg = TrainConfig()
    else:
        mcfg, tcfg = _configs(args)
        params = init_params(mcfg, tcfg.seed)
    print(f"parameters: {count_parameters(params)}")
    sys.stdout.write(format_config(mcfg, tcfg))


COMMANDS = {
    "synth": cmd_synth,
    "voxelize": cmd_voxelize,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "info": cmd_info,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        if args.command is None:
            raise UsageError("evdeblur: a subcommand is required")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
