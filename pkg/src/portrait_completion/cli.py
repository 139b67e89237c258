"""Command-line entry point: ``python -m portrait_completion <command> ...``.

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .blend import BlendProblem, poisson_blend
from .checkpoint import load_checkpoint, save_checkpoint
from .completion import train_completion
from .data import (
    compute_mean_pixel,
    generate_synthetic_figures,
    load_dataset,
    read_image,
    read_mask,
    write_dataset,
    write_image,
)
from .errors import ConvergenceError, PortraitError
from .face import train_face
from .metrics import evaluate
from .parsing import train_parsing
from .perception import PerceptionNet
from .pipeline import Checkpoints, RunConfig, extrapolate, run_inference

log = logging.getLogger("portrait_completion")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _training_data(args, cfg: RunConfig):
    """Dataset from --data (or the config's data.root) with the mean pixel measured on it."""
    data_cfg = cfg.data if not args.data else replace(cfg.data, root=args.data)
    samples = load_dataset(data_cfg)
    if not samples:
        raise PortraitError(f"no samples found under {data_cfg.root!r}")
    data_cfg = replace(data_cfg, image_size=samples[0].size, mean_pixel=compute_mean_pixel(samples))
    return samples, data_cfg


def _save_with_companions(ckpt, out):
    out = Path(out)
    save_checkpoint(ckpt, out)
    print(f"wrote {out}")
    for kind, comp in ckpt.companions.items():
        path = out.with_name(f"{out.stem}.{kind}{out.suffix or '.npz'}")
        save_checkpoint(comp, path)
        print(f"wrote {path}")


def cmd_gen_data(args):
    cfg = _config(args)
    samples = generate_synthetic_figures(args.count, cfg.seed, (args.size, args.size), cfg.data.num_classes)
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_train_parse(args):
    cfg = _config(args)
    samples, data_cfg = _training_data(args, cfg)
    ckpt = train_parsing(samples, cfg.parsing, {"lr": cfg.parse_lr}, cfg.epochs["parse"], cfg.seed, data_cfg,
                         augmentation=cfg.augmentation, max_steps=cfg.max_steps.get("parse"))
    _save_with_companions(ckpt, args.out)


def cmd_train_complete(args):
    cfg = _config(args)
    samples, data_cfg = _training_data(args, cfg)
    parsing = load_checkpoint(args.parsing, "parsing") if args.parsing else None
    gen_cfg = replace(cfg.generator, num_classes=data_cfg.num_classes)
    if args.extrapolate:
        gen_cfg = replace(gen_cfg, extrapolation_mode=True)
    ckpt = train_completion(samples, parsing, gen_cfg, cfg.perception, cfg.loss, cfg.epochs["complete"],
                            cfg.seed, data_cfg, lr=cfg.complete_lr, augmentation=cfg.augmentation,
                            max_steps=cfg.max_steps.get("complete"), extrap_direction=args.extrapolate or "down")
    _save_with_companions(ckpt, args.out)


def cmd_train_face(args):
    cfg = _config(args)
    samples, data_cfg = _training_data(args, cfg)
    generator = load_checkpoint(args.generator, "generator")
    face_cfg = replace(cfg.face, num_classes=data_cfg.num_classes)
    ckpt = train_face(samples, generator, face_cfg, cfg.perception, cfg.epochs["face"], cfg.seed, data_cfg,
                      lam=cfg.face_lambda, lr=cfg.complete_lr, augmentation=cfg.augmentation,
                      max_steps=cfg.max_steps.get("face"))
    _save_with_companions(ckpt, args.out)


def _checkpoints(args) -> Checkpoints:
    return Checkpoints.load(args.parsing, args.generator, args.face)


def cmd_infer(args):
    seed = 0 if args.seed is None else args.seed
    image = read_image(args.image)
    mask = read_mask(args.mask)
    trace = []
    out = run_inference(image, mask, _checkpoints(args), seed=seed, blend=not args.no_blend,
                        work_size=args.work_size, trace=trace)
    write_image(args.out, out)
    print(f"stages: {' -> '.join(trace)}")
    print(f"wrote {args.out}")


def cmd_extrapolate(args):
    seed = 0 if args.seed is None else args.seed
    image = read_image(args.image)
    out = extrapolate(image, args.direction, _checkpoints(args), seed=seed)
    write_image(args.out, out)
    print(f"wrote {args.out} ({out.shape[0]}x{out.shape[1]})")


def _pngs(directory):
    return {p.stem: p for p in sorted(Path(directory).glob("*.png"))}


def cmd_eval(args):
    outputs, targets, masks = _pngs(args.outputs), _pngs(args.targets), _pngs(args.masks)
    ids = sorted(set(outputs) & set(targets) & set(masks))
    if not ids:
        raise PortraitError("no sample id is present in all of outputs, targets and masks")
    cfg = _config(args)
    report = evaluate([read_image(outputs[i]) for i in ids], [read_image(targets[i]) for i in ids],
                      [read_mask(masks[i]) for i in ids], ids, PerceptionNet(cfg.perception),
                      with_fid=not args.no_fid)
    report.write(args.out)
    print(f"evaluated {report.count} samples; wrote {args.out}")


def cmd_blend(args):
    problem = BlendProblem(read_image(args.source), read_image(args.target), read_mask(args.mask).mask,
                           tol=args.tol, max_iter=args.max_iter)
    write_image(args.out, poisson_blend(problem))
    print(f"wrote {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="portrait_completion", description="Structure-guided portrait completion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help_, out_help="output path"):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help=out_help)
        p.set_defaults(fn=fn)
        return p

    p = command("gen-data", cmd_gen_data, "write a synthetic labelled dataset", "dataset directory")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--size", type=int, default=64)

    for name, fn, help_ in (("train-parse", cmd_train_parse, "train the parsing network"),
                            ("train-complete", cmd_train_complete, "train the completion network"),
                            ("train-face", cmd_train_face, "train the face refinement network")):
        p = command(name, fn, help_, "checkpoint path (.npz)")
        p.add_argument("--data", help="dataset directory (overrides data.root)")
        if name == "train-complete":
            p.add_argument("--parsing", help="condition on this parsing checkpoint instead of labels")
            p.add_argument("--extrapolate", choices=("down", "up"),
                           help="train for extrapolation in this direction")
        if name == "train-face":
            p.add_argument("--generator", required=True)

    for name, fn, help_ in (("infer", cmd_infer, "complete the masked region of an image"),
                            ("extrapolate", cmd_extrapolate, "extend an image downwards or upwards")):
        p = command(name, fn, help_, "output PNG")
        p.add_argument("--image", required=True)
        p.add_argument("--parsing", required=True)
        p.add_argument("--generator", required=True)
        p.add_argument("--face")
        if name == "infer":
            p.add_argument("--mask", required=True)
            p.add_argument("--no-blend", action="store_true")
            p.add_argument("--work-size", type=int, nargs=2, metavar=("H", "W"))
        else:
            p.add_argument("--direction", choices=("down", "up"), required=True)

    p = command("eval", cmd_eval, "score completed images", "report file (key=value lines)")
    p.add_argument("--outputs", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--no-fid", action="store_true")

    p = command("blend", cmd_blend, "Poisson-blend source into target inside mask", "output PNG")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=5000)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PortraitError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK
