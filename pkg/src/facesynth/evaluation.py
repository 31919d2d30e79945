"""Inference, augmentation-then-classify harness, activation maps and loss plots."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data import ConditionedSample, SampleSet, channel_stats
from .domain import DomainSpec, denormalize_image, encode_attributes, validate_attributes
from .estimators import ExpressionClassifier
from .networks import Generator, load_generator

logger = logging.getLogger(__name__)

FIG11_COLUMNS = ("cls_real", "d_loss_fake", "gradient_penalty", "d_loss_real")


def _generator(source) -> Generator:
    gen = source if isinstance(source, Generator) else load_generator(source)
    return gen.eval()


def target_vector(target, domain: DomainSpec) -> np.ndarray:
    """Attribute vector from a name, a list of names, or an explicit vector."""
    if isinstance(target, str):
        target = [target]
    arr = np.asarray(target)
    if arr.dtype.kind in "USO":
        y = encode_attributes([str(t) for t in arr], domain)
    else:
        y = arr.astype(np.float32)
    validate_attributes(y, domain)
    return y


def save_image(arr: np.ndarray, path: str | Path) -> Path:
    """Write a (C, H, W) array in [-1, 1] as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    px = denormalize_image(arr)
    px = px[0] if px.shape[0] == 1 else px.transpose(1, 2, 0)
    Image.fromarray(px).save(path, format="PNG")
    return path


@dataclass
class Translation:
    image: np.ndarray
    side: np.ndarray | None
    paths: list[Path] = field(default_factory=list)


@torch.no_grad()
def translate_batch(gen: Generator, x: np.ndarray, s: np.ndarray | None, y: np.ndarray):
    xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
    st = None if s is None else torch.from_numpy(np.ascontiguousarray(s, dtype=np.float32))
    out_x, out_s = gen(xt, st, torch.from_numpy(np.asarray(y, dtype=np.float32)))
    return out_x.numpy(), None if out_s is None else out_s.numpy()


def translate(checkpoint, sample: ConditionedSample, y_target, out_dir=None,
              stem: str = "translated") -> Translation:
    """Render ``sample`` under ``y_target``; writes PNGs when ``out_dir`` is given."""
    gen = _generator(checkpoint)
    y = target_vector(y_target, gen.domain)
    x_out, s_out = translate_batch(gen, sample.image[None],
                                   None if sample.side is None else sample.side[None], y[None])
    result = Translation(x_out[0], None if s_out is None else s_out[0])
    if out_dir is not None:
        result.paths.append(save_image(result.image, Path(out_dir) / f"{stem}.png"))
        if result.side is not None:
            result.paths.append(save_image(result.side, Path(out_dir) / f"{stem}_side.png"))
    return result


def pose_normalize(checkpoint, synthetic_frontal: np.ndarray, real_profile: np.ndarray,
                   y_target, out_path=None) -> np.ndarray:
    """Refine a simulated frontal face conditioned on an unlabeled real view."""
    gen = _generator(checkpoint)
    if synthetic_frontal.shape != real_profile.shape:
        raise ValueError(f"synthetic {synthetic_frontal.shape} and real {real_profile.shape} "
                         "images must have the same shape")
    y = target_vector(y_target, gen.domain)
    x_out, _ = translate_batch(gen, synthetic_frontal[None], real_profile[None], y[None])
    if out_path is not None:
        save_image(x_out[0], out_path)
    return x_out[0]


def realism_gap(images: np.ndarray, reference: np.ndarray) -> float:
    """L1 distance between per-channel (mean, std) statistics of two image sets."""
    return float(np.abs(channel_stats(images) - channel_stats(reference)).sum())


# ---------------------------------------------------------------------------
# augmentation harness
# ---------------------------------------------------------------------------

@dataclass
class AugmentationPlan:
    """Synthetic images per category for each row of the accuracy table."""

    per_category: list[int]
    categories: list[str]
    output_dir: Path | None = None

    def __post_init__(self):
        if any(c < 0 for c in self.per_category):
            raise ValueError("synthetic counts must be >= 0")

    @classmethod
    def geometric(cls, real_per_category: int, categories: Sequence[str],
                  factors: Sequence[int] = (0, 1, 2, 4), output_dir=None) -> "AugmentationPlan":
        return cls([int(f * real_per_category) for f in factors], list(categories), output_dir)


@dataclass
class AccuracyRow:
    synthetic_count: int
    accuracy_mean: float
    accuracy_std: float
    accuracies: list[float]


def category_labels(y: np.ndarray, categories: Sequence[str], domain: DomainSpec) -> np.ndarray:
    idx = [domain.index(c) for c in categories]
    return np.asarray(y)[:, idx].argmax(axis=1)


def synthesize(gen: Generator, pool: SampleSet, categories: Sequence[str], per_category: int,
               rng: np.random.Generator, batch_size: int = 16):
    """Translate random pool images into every category; returns (images, labels)."""
    if per_category == 0:
        c, h, w = pool[0].image.shape
        return np.zeros((0, c, h, w), np.float32), np.zeros(0, np.int64)
    images, labels = [], []
    for k, cat in enumerate(categories):
        src = rng.integers(0, len(pool), size=per_category)
        y = np.repeat(encode_attributes([cat], gen.domain)[None], per_category, axis=0)
        for i in range(0, per_category, batch_size):
            x, s, _ = pool.batch(src[i:i + batch_size])
            out, _ = translate_batch(gen, x, s, y[i:i + batch_size])
            images.append(out)
        labels.append(np.full(per_category, k))
    return np.concatenate(images), np.concatenate(labels)


def augment_and_classify(plan: AugmentationPlan, checkpoint, train: SampleSet, test: SampleSet,
                         classifier: dict | None = None, seed: int = 0,
                         n_repeats: int = 3, out_csv=None) -> list[AccuracyRow]:
    """Train a classifier on real plus synthetic images for each plan row.

    Synthetic sets are nested (smaller rows are prefixes of larger ones) so
    rows differ only in how much synthetic data is added.
    """
    if len(train) == 0:
        raise ValueError("empty real training split")
    if len(test) == 0:
        raise ValueError("empty real test split")
    gen = _generator(checkpoint)
    domain = gen.domain
    idx_all = list(range(len(train)))
    x_real, _, y_real = train.batch(idx_all)
    x_test, _, y_test = test.batch(range(len(test)))
    lab_real = category_labels(y_real, plan.categories, domain)
    lab_test = category_labels(y_test, plan.categories, domain)

    rng = np.random.default_rng(seed)
    biggest = max(plan.per_category) if plan.per_category else 0
    synth_x, synth_y = synthesize(gen, train, plan.categories, biggest, rng)
    if plan.output_dir is not None:
        _write_synthetic(plan.output_dir, synth_x, synth_y, plan.categories)
    # index of each synthetic image within its category, for nested prefixes
    rank = np.zeros(len(synth_y), dtype=np.int64)
    for k in range(len(plan.categories)):
        sel = np.flatnonzero(synth_y == k)
        rank[sel] = np.arange(len(sel))

    rows = []
    for count in plan.per_category:
        keep = rank < count
        X = np.concatenate([x_real, synth_x[keep]])
        Y = np.concatenate([lab_real, synth_y[keep]])
        accs = []
        for r in range(n_repeats):
            clf = ExpressionClassifier(**(classifier or {}), random_state=seed * 1000 + r)
            clf.fit(X, Y)
            accs.append(float((clf.predict(x_test) == lab_test).mean()))
        rows.append(AccuracyRow(int(keep.sum()), float(np.mean(accs)), float(np.std(accs)), accs))
        logger.info("synthetic=%d accuracy=%.3f±%.3f", rows[-1].synthetic_count,
                    rows[-1].accuracy_mean, rows[-1].accuracy_std)
    if out_csv is not None:
        write_accuracy_table(rows, out_csv)
    return rows


def _write_synthetic(out_dir, images, labels, categories):
    out = Path(out_dir)
    lines = ["image_path,landmarks,attributes,mask_path,side_path"]
    for i, (img, lab) in enumerate(zip(images, labels)):
        rel = f"synthetic/{i:05d}.png"
        save_image(img, out / rel)
        lines.append(f"{rel},,{categories[lab]},,")
    (out / "synthetic.csv").write_text("\n".join(lines) + "\n")


def write_accuracy_table(rows: Sequence[AccuracyRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["synthetic_count", "accuracy_mean", "accuracy_std", "accuracies"])
        for r in rows:
            w.writerow([r.synthetic_count, f"{r.accuracy_mean:.6f}", f"{r.accuracy_std:.6f}",
                        ";".join(f"{a:.6f}" for a in r.accuracies)])
    return path


def non_degrading(rows: Sequence[AccuracyRow], floor: float = 0.02) -> bool:
    """True when no row falls more than ``floor`` below any smaller-count row."""
    acc = [r.accuracy_mean for r in rows]
    return all(acc[j] >= acc[i] - floor for i in range(len(acc)) for j in range(i + 1, len(acc)))


# ---------------------------------------------------------------------------
# activation maps
# ---------------------------------------------------------------------------

@dataclass
class ActivationMaps:
    units: list[int]
    peak: list[float]
    maps: np.ndarray          # (k, H, W) raw activations upsampled to image size
    overlays: np.ndarray      # (k, H, W, 3) uint8
    paths: list[Path] = field(default_factory=list)


@torch.no_grad()
def visualize_activations(checkpoint, image: np.ndarray, side: np.ndarray | None = None,
                          layer_index: int = 4, top_k: int = 4, out_dir=None) -> ActivationMaps:
    """Highlight where the most strongly firing encoder units respond."""
    gen = _generator(checkpoint)
    n_layers = len(gen.encoder.layers)
    if not 0 <= layer_index < n_layers:
        raise ValueError(f"layer_index must be in [0, {n_layers}), got {layer_index}")
    x = torch.from_numpy(np.ascontiguousarray(image[None], dtype=np.float32))
    if gen.domain.side_channels:
        if side is None:
            raise ValueError("this generator needs a side image")
        x = torch.cat([x, torch.from_numpy(np.ascontiguousarray(side[None], dtype=np.float32))], 1)
    _, feats = gen.encoder(x, return_features=True)
    act = feats[layer_index][0]
    n_units = act.shape[0]
    if top_k > n_units:
        warnings.warn(f"top_k={top_k} exceeds {n_units} units in layer {layer_index}; clipping",
                      stacklevel=3)
        top_k = n_units
    peaks = act.flatten(1).max(dim=1).values
    order = torch.argsort(peaks, descending=True, stable=True)[:top_k]
    h, w = image.shape[-2:]
    maps = F.interpolate(act[order][None], size=(h, w), mode="bilinear",
                         align_corners=False)[0].numpy()
    base = denormalize_image(image).astype(np.float64)
    base = np.repeat(base, 3, axis=0) if base.shape[0] == 1 else base[:3]
    base = base.transpose(1, 2, 0)
    overlays = []
    for m in maps:
        span = m.max() - m.min()
        norm = (m - m.min()) / span if span > 1e-12 else np.zeros_like(m)
        hot = np.zeros_like(base)
        hot[..., 0] = 255.0
        alpha = 0.6 * norm[..., None]
        overlays.append(np.clip((1 - alpha) * base * (0.4 + 0.6 * norm[..., None])
                                + alpha * hot, 0, 255).astype(np.uint8))
    result = ActivationMaps([int(u) for u in order], [float(peaks[u]) for u in order], maps,
                            np.stack(overlays))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for u, ov in zip(result.units, result.overlays):
            p = out / f"layer{layer_index}_unit{u:04d}.png"
            Image.fromarray(ov).save(p, format="PNG")
            result.paths.append(p)
    return result


# ---------------------------------------------------------------------------
# loss curves
# ---------------------------------------------------------------------------

def read_loss_log(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"loss log not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        columns = reader.fieldnames or []
    if not rows:
        raise ValueError(f"loss log {path} has no rows")
    return {c: np.array([float(r[c]) if r[c] not in ("", None) else np.nan for r in rows])
            for c in columns}


def plot_losses(log_path, out_dir, columns: Sequence[str] | None = None) -> dict[str, Path]:
    """One PNG curve per requested column (default: the four critic curves)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = read_loss_log(log_path)
    columns = list(columns or FIG11_COLUMNS)
    missing = [c for c in columns if c not in data]
    if missing:
        raise ValueError(f"loss log lacks column(s): {', '.join(missing)}")
    x = data.get("step", np.arange(len(next(iter(data.values())))))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for c in columns:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(x, data[c], lw=0.8)
        ax.set_xlabel("generator step")
        ax.set_title(c)
        fig.tight_layout()
        paths[c] = out / f"{c}.png"
        fig.savefig(paths[c], dpi=100)
        plt.close(fig)
    return paths
