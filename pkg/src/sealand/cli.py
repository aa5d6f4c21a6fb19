"""Command-line entry point.

Subcommands: synth (labeled image generator), train, predict, evaluate,
gradcheck (finite-difference audit of the whole model), rf (receptive
field report). Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .data import read_manifest, save_labeled, synth_generate, synth_header, write_manifest
from .metrics import evaluate_set
from .model import Model, ModelConfig, build, forward, receptive_field
from .tensor import Tensor, cross_entropy_loss, grad_check
from .tiling import binarize, predict_image
from .train import TrainConfig, load_checkpoint, train_loop, write_records

RF_COMPARISON_DEPTH7 = 4220  # widely quoted figure for the full-depth network


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map usage to 1
        raise UsageError(message)


# train settings: key -> (cast, desk preset value); model-side keys are
# resolved separately because ModelConfig and TrainConfig split them.
_MODEL_KEYS = {"depth": int, "wide": int, "narrow": int, "plus": None}
_TRAIN_KEYS = {
    "tile": int,
    "batch": int,
    "steps": int,
    "lr": float,
    "momentum": float,
    "seed": int,
    "samples_per_image": int,
    "eval_every": int,
    "checkpoint_every": int,
}
_FULL_SCALE_SETTINGS = {
    "depth": 7, "wide": 64, "narrow": 32, "plus": True,
    "tile": 640, "batch": 11, "steps": 10000, "lr": 0.1, "momentum": 0.9,
    "seed": 0, "samples_per_image": 20, "eval_every": 200, "checkpoint_every": 500,
}


def _desk_settings() -> dict:
    d = TrainConfig.desk()
    return {
        "depth": 4, "wide": 16, "narrow": 8,
        "tile": d.tile_size, "batch": d.batch_size, "steps": d.total_steps,
        "lr": d.base_lr, "samples_per_image": d.samples_per_image,
        "eval_every": d.eval_every, "checkpoint_every": d.checkpoint_every,
    }


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def _read_config_file(path) -> dict:
    """key=value lines; # starts a comment; keys match the train flags."""
    casts = dict(_TRAIN_KEYS)
    casts.update({"depth": int, "wide": int, "narrow": int, "plus": _parse_bool})
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in casts:
            raise UsageError(f"{path}:{lineno}: unknown setting {key!r}")
        try:
            out[key] = casts[key](value)
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {value!r}")
    return out


def resolve_train_settings(args):
    """Merge flags over config file over the desk preset over defaults."""
    settings = dict(_FULL_SCALE_SETTINGS)
    if args.desk:
        settings.update(_desk_settings())
    if args.config:
        settings.update(_read_config_file(args.config))
    for key in list(_MODEL_KEYS) + list(_TRAIN_KEYS):
        if key == "plus":
            continue
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if args.no_plus:
        settings["plus"] = False
    model_config = ModelConfig(
        depth=settings["depth"], wide=settings["wide"],
        narrow=settings["narrow"], plus=settings["plus"],
    )
    train_config = TrainConfig(
        total_steps=settings["steps"],
        batch_size=settings["batch"],
        tile_size=settings["tile"],
        base_lr=settings["lr"],
        momentum=settings["momentum"],
        seed=settings["seed"],
        eval_every=settings["eval_every"],
        checkpoint_every=settings["checkpoint_every"],
        samples_per_image=settings["samples_per_image"],
    )
    return model_config, train_config


def _check_plus_flag(args, model_config: ModelConfig, ckpt):
    if args.no_plus and model_config.plus:
        raise ValueError(
            f"checkpoint {ckpt} was trained with Plus connections; --no-plus contradicts it"
        )


def _tiling_params(args, train_config: TrainConfig):
    tile = args.tile if args.tile is not None else train_config.tile_size
    stride = args.stride if args.stride is not None else max(tile // 2, 1)
    sigma = args.sigma  # None means tile/6 downstream
    return tile, stride, sigma


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"# synth seed={args.seed} count={args.count} extent={args.extent} out={out}")
    pairs = []
    for i in range(args.count):
        img = synth_generate(args.seed + i, args.extent, args.extent)
        image_path = out / f"img_{i:03d}.png"
        mask_path = out / f"img_{i:03d}_mask.png"
        save_labeled(img, image_path, mask_path)
        pairs.append((image_path, mask_path))
    header = [f"seed={args.seed} count={args.count} extent={args.extent}"]
    header += synth_header()
    write_manifest(out / "manifest.tsv", pairs, header)
    print(f"wrote {args.count} labeled images and manifest.tsv under {out}")
    return 0


def cmd_train(args) -> int:
    model_config, train_config = resolve_train_settings(args)
    print(f"# {model_config}")
    print(f"# {train_config}")
    manifest = read_manifest(args.manifest)
    val = read_manifest(args.val_manifest) if args.val_manifest else None
    result = train_loop(
        model_config, train_config, manifest, args.out,
        val_manifest=val, resume=args.resume,
    )
    print(f"final loss {result['final_loss']:.6f}")
    print(f"checkpoint {result['checkpoint']}")
    print(f"log {result['log']}")
    return 0


def _load_for_inference(args):
    model, _, step, train_config = load_checkpoint(args.ckpt)
    _check_plus_flag(args, model.config, args.ckpt)
    tile, stride, sigma = _tiling_params(args, train_config)
    shown = tile / 6.0 if sigma is None else sigma
    print(
        f"# ckpt={args.ckpt} step={step} seed={train_config.seed} "
        f"tile={tile} stride={stride} sigma={shown:g}"
    )
    print(f"# {model.config}")
    return model, tile, stride, sigma, step


def cmd_predict(args) -> int:
    model, tile, stride, sigma, step = _load_for_inference(args)
    try:
        rgb = np.asarray(Image.open(args.image).convert("RGB"))
    except OSError as e:
        raise ValueError(f"cannot read image {args.image}: {e}")
    probs = predict_image(model, rgb, tile, stride, sigma)
    Image.fromarray(binarize(probs)).save(args.out)
    print(f"wrote mask {args.out}")
    if args.probs:
        meta = {
            "kind": "probability_map",
            "source_image": str(args.image),
            "checkpoint": str(args.ckpt),
            "step": step,
        }
        write_records(args.probs, meta, {"probs": probs})
        print(f"wrote probabilities {args.probs}")
    return 0


def cmd_evaluate(args) -> int:
    model, tile, stride, sigma, _ = _load_for_inference(args)
    manifest = read_manifest(args.manifest)

    def predict_fn(labeled):
        return binarize(predict_image(model, labeled.rgb, tile, stride, sigma))

    report = evaluate_set(predict_fn, manifest)
    text = report.table()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(f"wrote report {args.out}")
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n", encoding="utf-8")
        print(f"wrote report {args.json}")
    return 0


def cmd_gradcheck(args) -> int:
    config = ModelConfig(depth=args.depth, wide=args.wide, narrow=args.narrow)
    if args.size % (2 ** config.depth) != 0:
        raise ValueError(f"size {args.size} not divisible by 2^{config.depth}")
    model = build(config, seed=args.seed)
    names = list(model.params)
    rng = np.random.default_rng(args.seed + 1000)
    img = rng.standard_normal((1, config.in_channels, args.size, args.size)).astype(np.float32)
    tgt = rng.integers(0, 2, size=(1, args.size, args.size))

    def fn(*tensors):
        m = Model(config, dict(zip(names, tensors)))
        probs = forward(m, Tensor(img.astype(tensors[0].dtype)))
        return cross_entropy_loss(probs, tgt)

    print(
        f"# gradcheck depth={args.depth} size={args.size} wide={args.wide} "
        f"narrow={args.narrow} seed={args.seed} step={args.step:g}"
    )
    report = grad_check(fn, model.parameters(), h=args.step)
    print(f"checked {report.checked} coordinates, max relative error {report.max_rel_error:.3e}")
    if report.ok:
        print("PASS (tolerance 1e-4)")
        return 0
    for idx, coord, analytic, numeric, rel in report.failures[:5]:
        print(
            f"  tensor {idx} coordinate {coord}: analytic {analytic:.6g} "
            f"vs numeric {numeric:.6g} (relative error {rel:.3e})"
        )
    print("FAIL (tolerance 1e-4)")
    return 2


def cmd_rf(args) -> int:
    config = ModelConfig(depth=args.depth)
    value = receptive_field(config)
    print(f"# rf depth={args.depth}")
    print(f"receptive field at depth {args.depth}: {value} px")
    if args.tile is not None:
        print(f"innermost feature map for tile {args.tile}: {args.tile // 2 ** args.depth} px")
    compare = args.compare
    if compare is None and args.depth == 7:
        compare = RF_COMPARISON_DEPTH7
    if compare is not None:
        note = "MATCH" if value == compare else "MISMATCH"
        print(f"comparison value {compare}: {note} (computed {value})")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="sealand", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a labeled synthetic coastline set")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, required=True, help="number of images")
    p.add_argument("--extent", type=int, default=320, help="square image size")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="run directory for checkpoints and log")
    p.add_argument("--val-manifest", help="held-out manifest for periodic tile-level F1")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--desk", action="store_true", help="laptop-scale preset (depth 4, tile 64, batch 8, 2000 steps)")
    p.add_argument("--config", help="key=value settings file (flags still win)")
    p.add_argument("--depth", type=int)
    p.add_argument("--wide", type=int)
    p.add_argument("--narrow", type=int)
    p.add_argument("--no-plus", action="store_true", help="disable the additive shortcuts")
    p.add_argument("--tile", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--samples-per-image", type=int, dest="samples_per_image")
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="segment one image with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output mask PNG")
    p.add_argument("--probs", help="also dump the probability map (tensor records)")
    p.add_argument("--tile", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--no-plus", action="store_true")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("evaluate", help="score a checkpoint over a labeled manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="report text file")
    p.add_argument("--json", help="machine-readable report file")
    p.add_argument("--tile", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--no-plus", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference audit of model gradients")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--size", type=int, default=16, help="square input extent")
    p.add_argument("--wide", type=int, default=8)
    p.add_argument("--narrow", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5, help="finite-difference step")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("rf", help="report the analytic receptive field")
    p.add_argument("--depth", type=int, default=7)
    p.add_argument("--tile", type=int, help="also report the innermost feature extent")
    p.add_argument("--compare", type=int, help="value to verify against (default 4220 at depth 7)")
    p.set_defaults(fn=cmd_rf)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
