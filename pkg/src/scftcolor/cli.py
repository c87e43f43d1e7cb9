"""Command-line entry point.

Subcommands: train, colorize, evaluate, make-sketch, dump-sample.
Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

import argparse
import difflib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

log = logging.getLogger("scftcolor")

DEFAULT_SEED = 0
COMMANDS = ("train", "colorize", "evaluate", "make-sketch", "dump-sample")


class ValidationError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config plumbing


def _flag(name):
    return "--" + name.replace("_", "-")


def _add_config_flags(parser):
    """One flag per scalar TrainConfig / LossWeights field, defaulting to None
    so that unset flags fall through to the config file."""
    from .losses import LossWeights
    from .training import TrainConfig

    group = parser.add_argument_group("config overrides (flag > config file > default)")
    for f in fields(TrainConfig):
        if f.name in ("loss_weights", "xdog"):
            continue
        kind = {"float": float, "int": int, "str": str, "bool": _parse_bool}.get(
            getattr(f.type, "__name__", str(f.type)), str
        )
        if f.name == "vgg_weights":
            kind = str
        group.add_argument(_flag(f.name), dest=f.name, type=kind, default=None, help=f"TrainConfig.{f.name}")
    for f in fields(LossWeights):
        group.add_argument(_flag(f.name), dest=f.name, type=float, default=None, help=f"LossWeights.{f.name}")


def _parse_bool(text):
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def resolve_config(args):
    """Merge built-in defaults, the config file and CLI flags (in that order)."""
    import yaml

    from .losses import LossWeights
    from .training import TrainConfig

    data = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ValidationError(f"--config: file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ValidationError(f"--config: cannot parse {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ValidationError(f"--config: {path} must hold a mapping")
    weights = dict(data.pop("loss_weights", None) or {})
    for f in fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None and f.name not in ("loss_weights", "xdog"):
            data[f.name] = value
    for f in fields(LossWeights):
        value = getattr(args, f.name, None)
        if value is not None:
            weights[f.name] = value
    data["loss_weights"] = weights
    if "seed" not in data:
        data["seed"] = DEFAULT_SEED
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"--config: {exc}") from exc


# ---------------------------------------------------------------------------
# helpers


def _require_file(flag, path):
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{flag}: file not found: {p}")
    return p


def _require_dir(flag, path):
    p = Path(path)
    if not p.is_dir():
        raise ValidationError(f"{flag}: directory not found: {p}")
    return p


def _load_image(flag, path):
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return im.convert("RGB")
    except (OSError, UnidentifiedImageError) as exc:
        raise ValidationError(f"{flag}: cannot read image {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_sketch(args):
    from .data import list_images, load_rgb, sketch_to_uint8
    from .sketch import XDoGParams, extract_sketch

    src = _require_dir("--in", args.input)
    try:
        params = XDoGParams(
            pre_blur_sigma=args.pre_blur, sigma=args.sigma, k=args.k,
            tau=args.tau, epsilon=args.eps, phi=args.phi,
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    paths = list_images(src)
    if not paths:
        raise ValidationError(f"--in: no images in {src}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from PIL import Image

    for p in paths:
        sketch = extract_sketch(load_rgb(p) / 255.0, params)
        target = out / p.relative_to(src).with_suffix(".png")
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(sketch_to_uint8(sketch), mode="L").save(target)
    print(f"wrote {len(paths)} sketches to {out}")
    return 0


def cmd_dump_sample(args):
    from .data import SampleConfig, build_training_sample, sample_rng, save_png, sketch_to_uint8

    img_path = _require_file("--image", args.image)
    image = np.asarray(_load_image("--image", img_path), dtype=np.uint8)
    cfg = SampleConfig(image_size=args.size, zero_ref_prob=0.0)
    sample = build_training_sample(image, cfg, sample_rng(args.seed, 0, 0))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_png(sketch_to_uint8(sample.sketch), out / "sketch.png")
    save_png(sample.reference, out / "reference.png")
    save_png(sample.ground_truth, out / "ground_truth.png")
    (out / "correspondence.txt").write_text(sample.correspondence.to_text())
    print(f"wrote sample to {out}")
    return 0


def cmd_colorize(args):
    import torch

    from .data import save_png
    from .sketch import extract_sketch
    from .training import load_generator

    sketch_path = _require_file("--sketch", args.sketch)
    ref_path = _require_file("--reference", args.reference)
    ckpt = _require_file("--checkpoint", args.checkpoint)
    sketch_img = _load_image("--sketch", sketch_path)
    ref_img = _load_image("--reference", ref_path)
    if sketch_img.size != ref_img.size:
        raise ValidationError(
            f"size mismatch: --sketch {sketch_path} is {sketch_img.size[0]}x{sketch_img.size[1]}, "
            f"--reference {ref_path} is {ref_img.size[0]}x{ref_img.size[1]}"
        )
    w, h = sketch_img.size
    if w % 16 or h % 16:
        raise ValidationError(f"--sketch: size {w}x{h} must be divisible by 16")
    try:
        generator, cfg = load_generator(ckpt)
    except Exception as exc:
        raise ValidationError(f"--checkpoint: cannot load {ckpt}: {exc}") from exc
    if args.dump_attention and cfg.aggregation_mode != "scft":
        raise ValidationError(f"--dump-attention: checkpoint uses {cfg.aggregation_mode!r} aggregation, which has no attention")

    sk = np.asarray(sketch_img.convert("L"), dtype=np.float64) / 255.0
    if args.extract:
        sk = extract_sketch(np.asarray(sketch_img, dtype=np.float64) / 255.0)
    ref = np.asarray(ref_img, dtype=np.float64)
    sk_t = torch.from_numpy(sk * 2 - 1).float()[None, None]
    if args.zero_reference:
        ref_t = torch.zeros(1, 3, h, w)
    else:
        ref_t = torch.from_numpy(ref / 127.5 - 1).float().permute(2, 0, 1)[None]
    with torch.no_grad():
        out = generator(sk_t, ref_t)
    image = ((out.image[0].permute(1, 2, 0).numpy() + 1) * 127.5)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_png(image, out_path)
    if args.dump_attention:
        dump_attention(out.attention[0].numpy(), Path(args.dump_attention))
    print(f"wrote {out_path}")
    return 0


def dump_attention(attn, out_dir):
    """Write the hw x hw attention matrix and per-query heatmaps as 16-bit PNGs.

    Each image is scaled by its own maximum; ``scale.json`` records the
    factor so values can be recovered as ``png / 65535 * max``.
    """
    from PIL import Image

    out_dir.mkdir(parents=True, exist_ok=True)
    hw = attn.shape[0]
    side = int(round(np.sqrt(hw)))

    def to16(a):
        peak = float(a.max()) or 1.0
        return Image.fromarray(np.rint(a / peak * 65535).astype(np.uint16)), peak

    scales = {}
    img, scales["attention.png"] = to16(attn)
    img.save(out_dir / "attention.png")
    for i in range(hw):
        img, scales[f"query_{i:04d}.png"] = to16(attn[i].reshape(side, side))
        img.save(out_dir / f"query_{i:04d}.png")
    (out_dir / "scale.json").write_text(json.dumps(scales, indent=0))


def cmd_evaluate(args):

    from .data import load_rgb
    from .metrics import (
        ToyExtractor,
        TorchScriptExtractor,
        collect_fid_stats,
        fid,
        patch_squared_errors,
        psnr_from_mse,
        read_pair_records,
    )

    dir_a = _require_dir("--a", args.a)
    dir_b = _require_dir("--b", args.b)
    report = {"mode": args.mode}
    if args.mode == "scpsnr":
        if not args.pairs:
            raise ValidationError("--pairs is required for --mode scpsnr")
        pairs_path = _require_file("--pairs", args.pairs)
        if args.patch < 1:
            raise ValidationError("--patch must be >= 1")
        try:
            records = read_pair_records(pairs_path)
        except (ValueError, TypeError) as exc:
            raise ValidationError(f"--pairs: {exc}") from exc
        if not records:
            raise ValidationError(f"--pairs: no records in {pairs_path}")
        for rec in records:
            for flag, base, name in (("--a", dir_a, rec["src"]), ("--b", dir_b, rec["ref"])):
                if not (base / name).is_file():
                    raise ValidationError(f"{flag}: missing image {base / name}")
        per_pair, pooled = [], []
        for rec in records:
            sq = patch_squared_errors(load_rgb(dir_a / rec["src"]), load_rgb(dir_b / rec["ref"]),
                                      rec["pairs"], args.patch)
            pooled.append(sq)
            score = psnr_from_mse(float(sq.mean())) if sq.size else None
            per_pair.append({"src": rec["src"], "ref": rec["ref"], "sc_psnr": _finite_or_none(score)})
        allsq = np.concatenate(pooled)
        report.update(patch=args.patch, pairs=per_pair, aggregate=_finite_or_none(psnr_from_mse(float(allsq.mean()))))
    else:
        if args.extractor:
            extractor = TorchScriptExtractor(_require_file("--extractor", args.extractor))
        else:
            log.warning("no --extractor given; using the 64-d toy extractor (scores not comparable to published FID)")
            extractor = ToyExtractor()
        try:
            sa = collect_fid_stats(dir_a, extractor)
            sb = collect_fid_stats(dir_b, extractor)
        except ValueError as exc:
            raise ValidationError(str(exc)) from exc
        report.update(fid=fid(sa, sb), count_a=sa.count, count_b=sb.count, feature_dim=extractor.dim)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2))
    print(json.dumps({k: v for k, v in report.items() if k != "pairs"}))
    return 0


def _finite_or_none(value):
    # JSON has no infinity; identical windows (MSE 0) are reported as null
    return value if value is not None and np.isfinite(value) else None


def cmd_train(args):
    from .data import SampleSource, SketchCache, auto_split, load_manifest
    from .training import Trainer, run_training

    cfg = resolve_config(args)
    data = Path(args.data)
    if data.is_file():
        manifest = load_manifest(data)
    else:
        _require_dir("--data", data)
        manifest_file = data / "manifest.txt"
        manifest = load_manifest(manifest_file) if manifest_file.exists() else auto_split(data, cfg.seed)
    paths = manifest.paths("train")
    if not paths:
        raise ValidationError(f"--data: no training images in {data}")
    if args.resume:
        _require_file("--resume", args.resume)
    out = Path(args.out)
    trainer = Trainer.from_checkpoint(args.resume) if args.resume else Trainer(cfg)
    if args.resume:
        cfg = trainer.cfg
    cache = SketchCache()
    sketches = manifest.sketch_paths("train")
    source = SampleSource(paths, cfg.sample_config(), seed=cfg.seed, cache=cache, sketches=sketches)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    manifest.save(out / "manifest.txt")
    run_training(trainer, source, out, max_steps=args.max_steps,
                 callback=lambda t, r: log.info("step %d epoch %d rec %.4f total %.4f", t.step, t.epoch, r.rec, r.total))
    print(f"finished at epoch {trainer.epoch}, step {trainer.step}; checkpoints in {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = ArgumentParser(prog="scftcolor", description="Reference-based sketch colorization.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgumentParser)

    p = sub.add_parser("train", help="train a colorization model")
    p.add_argument("--config", help="YAML file whose keys mirror TrainConfig fields")
    p.add_argument("--data", required=True, help="image directory, a directory holding manifest.txt, or a manifest file")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many steps")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("colorize", help="colorize a sketch with a reference image")
    p.add_argument("--sketch", required=True, help="sketch PNG (or a color image with --extract)")
    p.add_argument("--reference", required=True, help="reference color image")
    p.add_argument("--checkpoint", required=True, help="training checkpoint")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--dump-attention", metavar="DIR", help="write 16-bit PNG attention heatmaps here")
    p.add_argument("--extract", action="store_true", help="run XDoG on --sketch first")
    p.add_argument("--zero-reference", action="store_true", help="ignore --reference content; feed zeros")
    p.set_defaults(func=cmd_colorize)

    p = sub.add_parser("evaluate", help="SC-PSNR or FID between two image directories")
    p.add_argument("--mode", choices=("scpsnr", "fid"), required=True, help="metric")
    p.add_argument("--a", required=True, help="first image directory (outputs)")
    p.add_argument("--b", required=True, help="second image directory (references / real images)")
    p.add_argument("--pairs", help="line-delimited keypoint pair records (scpsnr)")
    p.add_argument("--patch", type=int, default=8, help="patch size in pixels (scpsnr)")
    p.add_argument("--extractor", help="TorchScript feature extractor file (fid)")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("make-sketch", help="XDoG sketches for every image in a directory")
    p.add_argument("--in", dest="input", required=True, help="input image directory")
    p.add_argument("--out", required=True, help="output directory (8-bit grayscale PNG)")
    p.add_argument("--sigma", type=float, default=0.3, help="base Gaussian scale")
    p.add_argument("--k", type=float, default=4.5, help="ratio of the two Gaussian scales")
    p.add_argument("--tau", type=float, default=0.95, help="weight of the wider Gaussian")
    p.add_argument("--eps", type=float, default=0.0, help="threshold on the response")
    p.add_argument("--phi", type=float, default=1e9, help="soft-threshold sharpness")
    p.add_argument("--pre-blur", type=float, default=0.7, help="Gaussian pre-blur sigma")
    p.set_defaults(func=cmd_make_sketch)

    p = sub.add_parser("dump-sample", help="write one augmented-self training sample")
    p.add_argument("--image", required=True, help="source color image")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help="sample seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=int, default=256, help="crop size")
    p.set_defaults(func=cmd_dump_sample)
    return parser


def dispatch(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    first = next((a for a in argv if not a.startswith("-")), None)
    if first is not None and first not in COMMANDS:
        hint = difflib.get_close_matches(first, COMMANDS, n=1)
        suggestion = f"; did you mean {hint[0]!r}?" if hint else ""
        print(f"scftcolor: unknown command {first!r}{suggestion}", file=sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except ValidationError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help()
        return 1
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"scftcolor {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"scftcolor {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())
