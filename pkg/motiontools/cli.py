"""
Command Line Front End

Usage:
    motiontools gen-data --out DIR --videos N --frames T --size 64 --parts 3 --seed S
    motiontools train --data DIR --out DIR --epochs N --seed S --background {on,off}
        --pe {on,off} --layers L --attention {unified,split}
        --block-form {standard,paper-literal} [--print-params]
    motiontools reconstruct --ckpt F --video DIR --out DIR
    motiontools animate --ckpt F --source IMG --driving DIR --out DIR --mode relative
    motiontools eval --generated DIR --truth DIR [--gt-json F] --report out.json
    motiontools dump-attention --ckpt F --image IMG --out DIR
    motiontools dump-motion --ckpt F --image IMG --out out.json
    motiontools config
    motiontools params [--ckpt F | architecture flags]

Errors raised by the package are printed in red and end the process with
status 1.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from motiontools import data, evaluation
from motiontools.general import ConfigError, MotionToolsError, console, get_logger, report_value, setup_logging
from motiontools.model import (
    ModelConfig,
    count_parameters,
    default_config_dict,
    init_model,
    load_checkpoint,
)
from motiontools.trainer import TrainConfig, fit

logger = get_logger(__name__)

KEYPOINTS_FILE = "keypoints.json"


def _on_off(value):
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected 'on' or 'off', got {value!r}")
    return value == "on"


def _add_architecture_flags(parser):
    parser.add_argument("--config", type=Path, help="JSON file shaped like `motiontools config` output")
    parser.add_argument("--background", type=_on_off, help="background motion and mask losses (on/off)")
    parser.add_argument("--pe", type=_on_off, help="positional encoding of image tokens (on/off)")
    parser.add_argument("--layers", type=int, help="motion transformer layers")
    parser.add_argument("--attention", choices=("unified", "split"), help="attention mode")
    parser.add_argument("--block-form", choices=("standard", "paper-literal"), help="transformer block form")
    parser.add_argument("--image-size", type=int, help="frame side (default: taken from the data)")


def _read_config(path):
    if path is None:
        return default_config_dict()
    try:
        values = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    if not isinstance(values, dict) or "model" not in values:
        raise ConfigError(f"configuration {path} has no \"model\" section")
    return values


def model_config_from_args(args, image_size=None):
    """ModelConfig from ``--config`` (or the defaults) with flag overrides."""
    values = _read_config(args.config)["model"]
    config = ModelConfig.from_dict(values)
    encoder, transformer = config.encoder, config.transformer
    if args.pe is not None:
        encoder = replace(encoder, positional_encoding=args.pe)
    if args.layers is not None:
        transformer = replace(transformer, layers=args.layers)
    if args.attention is not None:
        transformer = replace(transformer, attention_mode=args.attention)
    if args.block_form is not None:
        transformer = replace(transformer, block_form=args.block_form)
    size = args.image_size or image_size or config.image_size
    background = config.background_enabled if args.background is None else args.background
    return replace(config, image_size=size, encoder=encoder, transformer=transformer, background_enabled=background)


def train_config_from_args(args):
    values = _read_config(args.config)
    config = TrainConfig.from_dict(values["train"]) if "train" in values else TrainConfig()
    overrides = {
        "epochs": args.epochs,
        "seed": args.seed,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
    }
    return replace(config, **{k: v for k, v in overrides.items() if v is not None})


def cmd_gen_data(args):
    spec = data.SceneSpec(size=args.size, frames=args.frames, num_parts=args.parts)
    dataset = data.generate_dataset(args.seed, args.videos, spec)
    root = data.write_video_folder(dataset, args.out)
    report_value("videos", len(dataset))
    report_value("written to", str(root))


def cmd_train(args):
    dataset = data.load_video_folder(args.data)
    model_config = model_config_from_args(args, image_size=dataset.frame_shape[-1])
    train_config = train_config_from_args(args)
    if args.print_params:
        report_value("parameters", count_parameters(init_model(model_config, seed=train_config.seed)))
    final = fit(dataset, train_config, model_config, args.out)
    report_value("checkpoint", str(final))


def _write_rendering(rendering, out_dir):
    out_dir = evaluation.write_frames(rendering.frames, out_dir)
    (out_dir / KEYPOINTS_FILE).write_text(json.dumps(rendering.keypoints.tolist()))
    report_value("frames", len(rendering.frames))
    report_value("written to", str(out_dir))


def cmd_reconstruct(args):
    model, _ = load_checkpoint(args.ckpt)
    video = data.load_video(args.video)
    _write_rendering(evaluation.reconstruct(model, video), args.out)


def cmd_animate(args):
    model, _ = load_checkpoint(args.ckpt)
    source = data.read_image(args.source)
    driving = data.load_video(args.driving)
    _write_rendering(evaluation.animate(model, source, driving, mode=args.mode), args.out)


def cmd_eval(args):
    generated = data.load_video(args.generated)
    truth = data.load_video(args.truth)
    gt = data.load_gt(args.gt_json) if args.gt_json is not None else truth.gt
    keypoints_path = Path(args.generated) / KEYPOINTS_FILE
    keypoints = np.asarray(json.loads(keypoints_path.read_text())) if keypoints_path.exists() else None
    report = evaluation.compute_metrics(generated.frames, truth.frames, keypoints, gt)
    report.per_video = [{"video": truth.name, "L1": report.l1, "AKD_px": report.akd_px,
                         "coverage_rate": report.coverage_rate, "AED_sub": report.aed_sub}]
    evaluation.write_report(report, args.report)
    report_value("L1", report.l1)
    report_value("AED_sub", report.aed_sub)
    if report.akd_px is not None:
        report_value("AKD_px", report.akd_px, "px")
        report_value("coverage_rate", report.coverage_rate)
    for note in report.notes:
        console.print(f"[yellow]{note}[/yellow]")
    report_value("report", str(args.report))


def cmd_dump_attention(args):
    model, _ = load_checkpoint(args.ckpt)
    written = evaluation.dump_attention(model, data.read_image(args.image), args.out)
    report_value("files", len(written))
    report_value("written to", str(args.out))


def cmd_dump_motion(args):
    model, _ = load_checkpoint(args.ckpt)
    written = evaluation.dump_motion(model, data.read_image(args.image), args.out)
    report_value("files", len(written))
    report_value("written to", str(written[0]))


def cmd_config(args):
    console.print_json(json.dumps(default_config_dict()))


def cmd_params(args):
    if args.ckpt is not None:
        model, _ = load_checkpoint(args.ckpt)
    else:
        model = init_model(model_config_from_args(args))
    report_value("parameters", count_parameters(model))


def build_parser():
    parser = argparse.ArgumentParser(prog="motiontools", description="Motion-transformer image animation")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("gen-data", help="write a synthetic moving-parts dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--videos", type=int, default=16)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--parts", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = commands.add_parser("train", help="train a model on a frame-folder dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--print-params", action="store_true")
    _add_architecture_flags(p)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("reconstruct", help="re-render a video from its first frame")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--video", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = commands.add_parser("animate", help="animate a source image with a driving video")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--driving", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=("relative", "absolute"), default="relative")
    p.set_defaults(func=cmd_animate)

    p = commands.add_parser("eval", help="score generated frames against the truth")
    p.add_argument("--generated", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--gt-json", type=Path)
    p.add_argument("--report", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("dump-attention", help="attention maps of every motion token")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_dump_attention)

    p = commands.add_parser("dump-motion", help="motion set, masks and occlusion of an image")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_dump_motion)

    p = commands.add_parser("config", help="print every default setting as JSON")
    p.set_defaults(func=cmd_config)

    p = commands.add_parser("params", help="count learnable parameters")
    p.add_argument("--ckpt", type=Path)
    _add_architecture_flags(p)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(logging.DEBUG if args.verbose else logging.INFO)
    logger.debug("arguments: %s", {k: v for k, v in vars(args).items() if k != "func"})
    try:
        args.func(args)
    except MotionToolsError as exc:
        console.print(f"[red]error:[/red] {exc}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
