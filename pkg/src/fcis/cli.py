"""Command-line entry point: ``fcis {synth,train,infer,eval}``.

Configuration keys are prefixed by section (``data.``, ``model.``,
``train.``, ``infer.``) and may come from a ``key = value`` file given by
``--config`` and from repeated ``--set key=value`` flags; later sources win.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np
from PIL import Image, ImageDraw

from . import config as cfgmod
from .backbone import Checkpoint, ModelConfig, load_checkpoint, save_checkpoint
from .evaluation import evaluate
from .pipeline import InferConfig, NumericError, TrainConfig, read_detections, run_inference, train, write_detections, write_loss_log
from .synth import DatasetConfig, from_uint8, generate_dataset, read_dataset, write_dataset

SECTIONS = {"data": DatasetConfig, "model": ModelConfig, "train": TrainConfig, "infer": InferConfig}
SEED_KEY = {"synth": "data", "train": "train"}

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _key_help() -> str:
    lines = ["configuration keys:"]
    for prefix, cls in SECTIONS.items():
        lines.append(f"  {prefix}.{{{','.join(cfgmod.field_names(cls))}}}")
    return "\n".join(lines)


def gather_config(args) -> dict:
    """Merge ``--config`` file and ``--set`` overrides into per-section dicts."""
    raw = {}
    if args.config:
        try:
            with open(args.config) as f:
                raw.update(cfgmod.parse_kv_text(f.read(), args.config))
        except OSError as e:
            raise UsageError(f"cannot read config {args.config}: {e.strerror}") from None
        except ValueError as e:
            raise UsageError(str(e)) from None
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    sections = {p: {} for p in SECTIONS}
    for key, value in raw.items():
        prefix, _, name = key.partition(".")
        if prefix not in SECTIONS or name not in cfgmod.field_names(SECTIONS[prefix]):
            raise UsageError(f"unknown config key {key!r}")
        sections[prefix][name] = value
    if args.seed is not None and args.command in SEED_KEY:
        sections[SEED_KEY[args.command]]["seed"] = str(args.seed)
    return sections


def build_section(sections: dict, prefix: str):
    try:
        return cfgmod.build(SECTIONS[prefix], sections[prefix])
    except (ValueError, TypeError) as e:
        raise UsageError(f"bad {prefix} config: {e}") from None


# ----------------------------------------------------------------------------
# commands


def cmd_synth(args, sections) -> int:
    dc = build_section(sections, "data")
    samples = generate_dataset(dc)
    try:
        write_dataset(args.out_dir, samples)
    except OSError as e:
        raise DataError(f"cannot write dataset to {args.out_dir}: {e.strerror}") from None
    n_inst = sum(len(s.labels) for s in samples)
    print(f"wrote {len(samples)} samples, {n_inst} instances to {args.out_dir}")
    return EXIT_OK


def cmd_train(args, sections) -> int:
    tc = build_section(sections, "train")
    dataset = _load_dataset(args.data_dir)
    resume = None
    if args.resume:
        resume = _load_ckpt(args.resume)
        mc = resume.config
        if sections["model"]:
            raise UsageError("model.* keys cannot be changed when resuming")
    else:
        mc = build_section(sections, "model")
    try:
        ckpt, rows = train(dataset, mc, tc, resume=resume, progress=args.progress)
    except ValueError as e:
        raise DataError(str(e)) from None
    save_checkpoint(args.out_ckpt, ckpt)
    log_path = args.log or os.path.splitext(args.out_ckpt)[0] + ".loss.csv"
    write_loss_log(log_path, rows, append=resume is not None and os.path.exists(log_path))
    print(f"trained to iteration {ckpt.iteration}; final loss {rows[-1][-1]:.4f}; checkpoint {args.out_ckpt}")
    return EXIT_OK


def _image_inputs(path):
    """Yield ``(image_id, image)`` for a dataset directory or a single PNG."""
    if os.path.isdir(path):
        for s in _load_dataset(path):
            yield s.sample_id, s.image
        return
    stem = os.path.basename(path).split(".")[0]
    image_id = int(stem) if stem.isdigit() else 0
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"))
    except OSError as e:
        raise DataError(f"{path}: unreadable image ({e})") from None
    yield image_id, from_uint8(rgb.transpose(2, 0, 1))


def cmd_infer(args, sections) -> int:
    ic = build_section(sections, "infer")
    ckpt = _load_ckpt(args.ckpt)
    results = {}
    for image_id, image in _image_inputs(args.input):
        if image.shape[1] % ckpt.config.stride or image.shape[2] % ckpt.config.stride:
            raise DataError(f"image {image_id}: size {image.shape[1]}x{image.shape[2]} not divisible by stride {ckpt.config.stride}")
        results[image_id] = run_inference(image, ckpt, ic)
        if args.overlay:
            os.makedirs(args.overlay, exist_ok=True)
            draw_overlay(image, results[image_id]).save(os.path.join(args.overlay, f"{image_id:05d}.overlay.png"))
    write_detections(args.out, results)
    print(f"wrote {sum(len(v) for v in results.values())} detections for {len(results)} images to {args.out}")
    return EXIT_OK


def cmd_eval(args, sections) -> int:
    try:
        dets = read_detections(args.detections)
    except OSError as e:
        raise DataError(f"cannot read {args.detections}: {e.strerror}") from None
    except ValueError as e:
        raise DataError(str(e)) from None
    gt = {s.sample_id: (s.masks, s.labels) for s in _load_dataset(args.data_dir)}
    try:
        result = evaluate(dets, gt)
    except KeyError as e:
        raise DataError(f"detections reference unknown image id {e.args[0]}") from None
    print(result.table())
    if args.csv:
        with open(args.csv, "w", newline="\n") as f:
            f.write(result.csv())
    return EXIT_OK


# ----------------------------------------------------------------------------
# helpers


OVERLAY_COLORS = [(230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48), (145, 30, 180)]


def draw_overlay(image, detections, alpha: float = 0.5) -> Image.Image:
    """Tint each detection's mask and outline its box."""
    rgb = np.clip(np.asarray(image).transpose(1, 2, 0) * 255.0, 0, 255).astype(np.float64)
    for i, d in enumerate(detections):
        color = np.array(OVERLAY_COLORS[i % len(OVERLAY_COLORS)], dtype=np.float64)
        rgb[d.mask] = (1 - alpha) * rgb[d.mask] + alpha * color
    out = Image.fromarray(np.round(rgb).astype(np.uint8))
    draw = ImageDraw.Draw(out)
    for i, d in enumerate(detections):
        x1, y1, x2, y2 = (float(v) for v in d.box)
        draw.rectangle([x1, y1, x2 - 1, y2 - 1], outline=OVERLAY_COLORS[i % len(OVERLAY_COLORS)])
    return out


def _load_dataset(path):
    try:
        return read_dataset(path)
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e.strerror or e}") from None
    except ValueError as e:
        raise DataError(str(e)) from None


def _load_ckpt(path) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e.strerror}") from None
    except (ValueError, KeyError) as e:
        raise DataError(str(e)) from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--seed", type=int, help="seed for synth (data.seed) or train (train.seed)")

    p = _Parser(prog="fcis", description="Fully convolutional instance segmentation on synthetic scenes.",
                epilog=_key_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("out_dir")

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("data_dir")
    s.add_argument("out_ckpt")
    s.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    s.add_argument("--log", metavar="CSV", help="loss log path (default: <out_ckpt stem>.loss.csv)")
    s.add_argument("--progress", type=int, default=0, metavar="N", help="log mean loss every N iterations")

    s = sub.add_parser("infer", parents=[common], help="run inference")
    s.add_argument("ckpt")
    s.add_argument("input", help="dataset directory or a single PNG image")
    s.add_argument("out", help="detections file")
    s.add_argument("--overlay", metavar="DIR", help="write one overlay PNG per image")

    s = sub.add_parser("eval", parents=[common], help="score a detections file")
    s.add_argument("detections")
    s.add_argument("data_dir")
    s.add_argument("--csv", metavar="PATH", help="also write category,threshold,ap")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = make_parser().parse_args(argv)
        sections = gather_config(args)
        return COMMANDS[args.command](args, sections)
    except UsageError as e:
        print(f"fcis: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"fcis: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"fcis: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
