"""Command-line entry point: ``facesynth <subcommand> ...``.

Failures print one JSON line ``{"code": ..., "message": ...}`` to stderr and
exit with status 1; usage errors exit with status 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .data import (DataError, SampleSet, category_names, generate_toy_dataset,
                   generate_toy_pose_dataset, load_sample, read_manifest, toy_domain)
from .domain import ConfigError, DomainSpec, read_config
from .networks import ParserSpec, load_generator, load_parser, save_parser
from .parsing import PARSER_OPTIMIZER, evaluate_parser, freeze, train_parser
from .trainer import MODES, TrainConfig, Trainer

logger = logging.getLogger("facesynth")

OUTPUT_ENV = "FACESYNTH_OUTPUT_DIR"
DOMAIN_FILE = "domain.yaml"


class CLIError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _out_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ENV, "runs")) / default_name


def _claim(path: Path, force: bool, is_dir: bool = True) -> Path:
    """Refuse to clobber existing outputs unless --force."""
    exists = path.exists() and (not path.is_dir() or any(path.iterdir()))
    if exists and not force:
        raise CLIError("OUTPUT_EXISTS", f"{path} already exists; pass --force to overwrite")
    if exists:
        shutil.rmtree(path) if path.is_dir() else path.unlink()
    (path if is_dir else path.parent).mkdir(parents=True, exist_ok=True)
    return path


def _need_ckpt(path) -> Path:
    p = Path(path)
    if not (p / ckpt.MANIFEST).exists():
        raise ckpt.CheckpointNotFound(f"no checkpoint at {p}")
    return p


def _domain_for(data: Path, config: dict | None = None) -> DomainSpec:
    if config and "attributes" in config:
        return DomainSpec.from_dict(config)
    f = data / DOMAIN_FILE if data.is_dir() else data.parent / DOMAIN_FILE
    if not f.exists():
        raise CLIError("CONFIG_INVALID", f"no attributes in config and no {DOMAIN_FILE} next to "
                                         f"{data}")
    return DomainSpec.load(f)


def _overrides(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def _sample_from_args(args, domain: DomainSpec, size: int):
    """A ConditionedSample from --data/--index or from --image with --side/--landmarks."""
    from .data import DatasetManifest, ManifestEntry, _parse_landmarks
    if args.data:
        manifest = read_manifest(args.data, args.split)
        if not 0 <= args.index < len(manifest):
            raise CLIError("INVALID_ARGUMENT", f"--index {args.index} outside [0, {len(manifest)})")
        entry = manifest.entries[args.index]
        # attribute labels are irrelevant for inference
        entry = ManifestEntry(entry.image, entry.landmarks, (), entry.mask, entry.side)
        return load_sample(manifest, entry, domain, (size, size))
    if not args.image:
        raise CLIError("INVALID_ARGUMENT", "give --image or --data")
    img = Path(args.image).resolve()
    lm = _parse_landmarks(args.landmarks or "", "--landmarks")
    side = str(Path(args.side).resolve()) if args.side else None
    manifest = DatasetManifest(img.parent, [], "cli")
    return load_sample(manifest, ManifestEntry(str(img), lm, (), None, side), domain, (size, size))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_make_toy_data(args) -> dict:
    out = _claim(_out_dir(args, "toy_data"), args.force)
    make = generate_toy_pose_dataset if args.pose else generate_toy_dataset
    train = make(args.n, args.categories, args.size, args.seed, out, "train")
    test = make(args.test_n or args.n, args.categories, args.size, args.seed + 1, out, "test")
    domain = toy_domain(args.categories, side_channels=3 if args.pose else 1)
    domain.save(out / DOMAIN_FILE)
    return {"out": str(out), "train": len(train), "test": len(test),
            "categories": category_names(args.categories)}


def cmd_train_parser(args) -> dict:
    cfg = read_config(args.config) if args.config else {}
    spec_d = dict(cfg.get("parser") or {})
    spec_d.update(_overrides(args, ["base_channels", "depth"]))
    spec = ParserSpec(**spec_d)
    steps = args.steps if args.steps is not None else int(cfg.get("parser_steps", 500))
    size = args.size if args.size is not None else int(cfg.get("image_size", 64))
    data = Path(args.data)
    domain = _domain_for(data, cfg)
    out = _claim(_out_dir(args, "parser"), args.force)
    samples = SampleSet(read_manifest(data, "train"), domain, (size, size))
    net, losses = train_parser(samples, spec, PARSER_OPTIMIZER, steps, args.seed)
    scores = evaluate_parser(net, samples)
    save_parser(out, net, args.seed, extra={"steps": steps, "final_loss": losses[-1]})
    return {"out": str(out), "train_pixel_accuracy": scores.overall}


TRAIN_FLAGS = ["image_size", "mode", "base_lr", "batch_size", "checkpoint_every", "lambda_bi",
               "lambda_cls", "lambda_id", "lambda_p", "lambda_gp", "d_steps_per_g",
               "decay_start_epoch", "total_epochs", "parser_steps"]


def cmd_train(args) -> dict:
    data = Path(args.data)
    file_cfg = read_config(args.config) if args.config else {}
    merged = _domain_for(data, file_cfg).to_dict()
    merged.update(file_cfg)
    merged.update(_overrides(args, TRAIN_FLAGS))
    config = TrainConfig.from_dict(merged)
    size = config.image_size
    samples = SampleSet(read_manifest(data, "train"), config.domain, (size, size), config.sigma)

    if args.resume:
        out = Path(args.out) if args.out else _out_dir(args, "train")
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = _claim(_out_dir(args, "train"), args.force)
    config.save(out / "config.yaml")

    parser = None
    if config.weights.lambda_p > 0:
        if args.parser:
            parser = freeze(load_parser(_need_ckpt(args.parser)))
        else:
            net, _ = train_parser(samples, config.parser, PARSER_OPTIMIZER,
                                  config.parser_steps, args.seed)
            save_parser(out / "parser", net, args.seed)
            parser = freeze(net)

    if args.resume:
        trainer = Trainer.resume(_need_ckpt(args.resume), samples, parser, out_dir=out)
    else:
        trainer = Trainer(config, samples, parser, seed=args.seed, out_dir=out)
    trainer.train(args.steps)
    r = trainer.report
    return {"out": str(out), "generator": str(out / "generator"), "g_steps": trainer.g_steps,
            "bidirectional_image": r.bidirectional_image, "cls_fake": r.cls_fake}


def _generator_size(ckpt_path: Path, override: int | None) -> int:
    if override:
        return override
    meta = ckpt.read_manifest(ckpt_path)
    cfg = meta.get("config") or {}
    return int(meta.get("image_size") or cfg.get("image_size") or 64)


def cmd_translate(args) -> dict:
    from .evaluation import translate
    path = _need_ckpt(args.ckpt)
    gen = load_generator(path)
    sample = _sample_from_args(args, gen.domain, _generator_size(path, args.size))
    out = _claim(_out_dir(args, "translate"), args.force)
    result = translate(gen, sample, args.target.split(";"), out, stem=args.stem)
    return {"out": [str(p) for p in result.paths]}


def cmd_pose_normalize(args) -> dict:
    from .data import _read_image
    from .evaluation import pose_normalize
    path = _need_ckpt(args.ckpt)
    gen = load_generator(path)
    size = _generator_size(path, args.size)
    c = gen.domain.image_channels
    synthetic = _read_image(Path(args.synthetic), c, (size, size))
    real = _read_image(Path(args.real), c, (size, size))
    out = Path(args.out) if args.out else _out_dir(args, "pose") / "refined.png"
    _claim(out, args.force, is_dir=False)
    pose_normalize(gen, synthetic, real, args.target.split(";"), out)
    return {"out": str(out)}


def cmd_augment_eval(args) -> dict:
    from .evaluation import AugmentationPlan, augment_and_classify
    path = _need_ckpt(args.ckpt)
    gen = load_generator(path)
    size = _generator_size(path, args.size)
    data = Path(args.data)
    train = SampleSet(read_manifest(data, args.train_split), gen.domain, (size, size))
    test = SampleSet(read_manifest(Path(args.test_data or data), args.test_split), gen.domain,
                     (size, size))
    if len(train) == 0:
        raise DataError("empty real training split")
    categories = gen.domain.groups[0] if gen.domain.groups else gen.domain.attribute_names
    per_cat = len(train) // len(categories)
    out = _claim(_out_dir(args, "augment"), args.force)
    plan = AugmentationPlan.geometric(per_cat, categories, args.factors,
                                      out if args.keep_images else None)
    rows = augment_and_classify(plan, gen, train, test, {"n_epochs": args.epochs}, args.seed,
                                args.repeats, out / "accuracy.csv")
    return {"out": str(out / "accuracy.csv"),
            "accuracy": {r.synthetic_count: round(r.accuracy_mean, 4) for r in rows}}


def cmd_viz_acts(args) -> dict:
    from .evaluation import visualize_activations
    path = _need_ckpt(args.ckpt)
    gen = load_generator(path)
    sample = _sample_from_args(args, gen.domain, _generator_size(path, args.size))
    out = _claim(_out_dir(args, "activations"), args.force)
    maps = visualize_activations(gen, sample.image, sample.side, args.layer, args.top_k, out)
    return {"out": [str(p) for p in maps.paths], "units": maps.units}


def cmd_plot_losses(args) -> dict:
    from .evaluation import plot_losses
    out = _claim(_out_dir(args, "plots"), args.force)
    cols = args.columns.split(",") if args.columns else None
    paths = plot_losses(args.log, out, cols)
    return {"out": {k: str(v) for k, v in paths.items()}}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, config: bool = False) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--out", help=f"output path (default: ${OUTPUT_ENV} or ./runs)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    if config:
        p.add_argument("--config", help="YAML configuration; flags override its values")


def _sample_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ckpt", required=True, help="generator or training-state checkpoint")
    p.add_argument("--image", help="input image file")
    p.add_argument("--side", help="side image file (companion view)")
    p.add_argument("--landmarks", help='landmarks as "row:col;row:col" for a heatmap side input')
    p.add_argument("--data", help="dataset directory or manifest CSV (alternative to --image)")
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--size", type=int, help="working resolution (default: from checkpoint)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="facesynth", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("make-toy-data", help="render a procedural toy face dataset")
    _common(p)
    p.add_argument("--n", type=int, default=16, help="training images")
    p.add_argument("--test-n", type=int, help="held-out images (default: same as --n)")
    p.add_argument("--categories", type=int, default=2)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--pose", action="store_true", help="paired clean/real views for pose mode")
    p.set_defaults(func=cmd_make_toy_data)

    p = sub.add_parser("train-parser", help="pretrain the face parser on labelled masks")
    _common(p, config=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--depth", type=int)
    p.set_defaults(func=cmd_train_parser)

    p = sub.add_parser("train", help="adversarial training of the translator")
    _common(p, config=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=2000, help="generator steps")
    p.add_argument("--parser", help="pretrained parser checkpoint")
    p.add_argument("--resume", help="training-state checkpoint to continue from")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--image-size", type=int)
    p.add_argument("--lr", dest="base_lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--d-steps-per-g", type=int)
    p.add_argument("--decay-start-epoch", type=int)
    p.add_argument("--total-epochs", type=int)
    p.add_argument("--parser-steps", type=int)
    for name in ("bi", "cls", "id", "p", "gp"):
        p.add_argument(f"--lambda-{name}", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="render an image under target attributes")
    _common(p)
    _sample_flags(p)
    p.add_argument("--target", required=True, help='target attribute name(s), ";"-separated')
    p.add_argument("--stem", default="translated")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("pose-normalize", help="refine a synthetic frontal face from a real view")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--synthetic", required=True)
    p.add_argument("--real", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--size", type=int)
    p.set_defaults(func=cmd_pose_normalize)

    p = sub.add_parser("augment-eval", help="classifier accuracy versus synthetic data volume")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--test-data")
    p.add_argument("--train-split", default="train")
    p.add_argument("--test-split", default="test")
    p.add_argument("--factors", type=float, nargs="+", default=[0, 1, 2, 4])
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--size", type=int)
    p.add_argument("--keep-images", action="store_true")
    p.set_defaults(func=cmd_augment_eval)

    p = sub.add_parser("viz-acts", help="overlay the strongest encoder activations")
    _common(p)
    _sample_flags(p)
    p.add_argument("--layer", type=int, default=4)
    p.add_argument("--top-k", type=int, default=4)
    p.set_defaults(func=cmd_viz_acts)

    p = sub.add_parser("plot-losses", help="one PNG per loss column")
    _common(p)
    p.add_argument("--log", required=True)
    p.add_argument("--columns", help="comma-separated columns (default: the critic panels)")
    p.set_defaults(func=cmd_plot_losses)
    return ap


def _error_code(exc: Exception) -> str:
    if isinstance(exc, CLIError):
        return exc.code
    if isinstance(exc, ckpt.CheckpointError):
        return exc.code
    if isinstance(exc, ConfigError):
        return "CONFIG_INVALID"
    if isinstance(exc, (DataError, FileNotFoundError)):
        return "DATA_INVALID"
    if isinstance(exc, ValueError):
        return "INVALID_ARGUMENT"
    return "INTERNAL"


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)   # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    _seed_everything(args.seed)
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON line
        if args.verbose:
            logger.exception("command failed")
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(json.dumps({"code": _error_code(exc), "message": msg}), file=sys.stderr)
        return 1
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
