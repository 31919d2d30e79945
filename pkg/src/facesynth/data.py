"""Manifests, loading, landmark heatmaps, augmentation and toy data."""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

from .domain import DomainSpec, encode_attributes, normalize_image

MANIFEST_COLUMNS = ["image_path", "landmarks", "attributes", "mask_path", "side_path"]
N_PARSE_CLASSES = 4
BACKGROUND, SKIN, EYES, LIPS = range(N_PARSE_CLASSES)
DEFAULT_SIGMA_AT_128 = 2.0


class DataError(ValueError):
    """Problem with one manifest entry or data file."""


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    landmarks: tuple[tuple[float, float], ...] | None = None
    attributes: tuple[str, ...] = ()
    mask: str | None = None
    side: str | None = None


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    split: str = "train"

    def __len__(self):
        return len(self.entries)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


@dataclass
class ConditionedSample:
    image: np.ndarray                      # (C, h, w) in [-1, 1]
    side: np.ndarray | None                # (S, h, w) in [-1, 1]
    source_attributes: np.ndarray          # (n_y,) binary
    landmarks: np.ndarray | None = None    # (K, 2) row/col pixel coords
    mask: np.ndarray | None = None         # (h, w) class indices
    name: str = ""


# ---------------------------------------------------------------------------
# manifest io
# ---------------------------------------------------------------------------

def _parse_landmarks(text: str, where: str):
    text = (text or "").strip()
    if not text:
        return None
    pts = []
    for item in text.split(";"):
        try:
            r, c = item.split(":")
            pts.append((float(r), float(c)))
        except ValueError:
            raise DataError(f"{where}: malformed landmark {item!r} (expected row:col)") from None
    return tuple(pts)


def _format_landmarks(pts) -> str:
    if not pts:
        return ""
    return ";".join(f"{r:g}:{c:g}" for r, c in pts)


def read_manifest(path: str | Path, split: str | None = None) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / f"{split or 'train'}.csv"
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    entries = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "image_path" not in reader.fieldnames:
            raise DataError(f"{path}: missing 'image_path' column")
        for i, row in enumerate(reader):
            where = f"{path.name}:{i + 2} ({row.get('image_path')})"
            attrs = tuple(a for a in (row.get("attributes") or "").split(";") if a)
            entries.append(ManifestEntry(
                image=row["image_path"],
                landmarks=_parse_landmarks(row.get("landmarks", ""), where),
                attributes=attrs,
                mask=row.get("mask_path") or None,
                side=row.get("side_path") or None,
            ))
    return DatasetManifest(path.parent, entries, split or path.stem)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            w.writerow([e.image, _format_landmarks(e.landmarks), ";".join(e.attributes),
                        e.mask or "", e.side or ""])


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

def default_sigma(height: int) -> float:
    return DEFAULT_SIGMA_AT_128 * height / 128.0


def make_landmark_heatmap(landmarks, shape: tuple[int, int], sigma: float) -> np.ndarray:
    """Per-pixel max of isotropic Gaussians at the landmarks, mapped to [-1, 1].

    Returns an array of shape (1, h, w).
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    h, w = shape
    pts = np.asarray(landmarks if landmarks is not None else [], dtype=np.float64).reshape(-1, 2)
    for r, c in pts:
        if not (0 <= r < h and 0 <= c < w):
            raise DataError(f"landmark ({r}, {c}) outside image bounds {h}x{w}")
    heat = np.zeros((h, w), dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    for r, c in pts:
        g = np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2.0 * sigma ** 2))
        np.maximum(heat, g, out=heat)
    return (2.0 * heat - 1.0).astype(np.float32)[None]


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _read_image(path: Path, channels: int, size: tuple[int, int]) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L" if channels == 1 else "RGB")
            if im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return normalize_image(arr.transpose(2, 0, 1))


def _read_mask(path: Path, size: tuple[int, int]) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.NEAREST)
            return np.asarray(im, dtype=np.int64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc


def _image_size(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as im:
            return im.size[1], im.size[0]
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def scale_landmarks(pts, src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """Rescale pixel-centre coordinates between resolutions."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    out = np.empty_like(pts)
    for k in range(2):
        out[:, k] = (pts[:, k] + 0.5) * dst[k] / src[k] - 0.5
        out[:, k] = np.clip(out[:, k], 0, dst[k] - 1)
    return out


def load_sample(manifest: DatasetManifest, entry: ManifestEntry, spec: DomainSpec,
                target_size: tuple[int, int], sigma: float | None = None) -> ConditionedSample:
    h, w = target_size
    img_path = manifest.resolve(entry.image)
    if not img_path.exists():
        raise DataError(f"image file not found: {img_path}")
    try:
        y = encode_attributes(entry.attributes, spec)
    except ValueError as exc:
        raise DataError(f"{entry.image}: {exc}") from None
    src_hw = _image_size(img_path)
    image = _read_image(img_path, spec.image_channels, (h, w))
    landmarks = None
    if entry.landmarks is not None:
        raw = np.asarray(entry.landmarks, dtype=np.float64)
        if np.any(raw < 0) or np.any(raw[:, 0] >= src_hw[0]) or np.any(raw[:, 1] >= src_hw[1]):
            raise DataError(f"{entry.image}: landmark outside image bounds {src_hw}")
        landmarks = scale_landmarks(raw, src_hw, (h, w))
    side = None
    if spec.side_channels:
        if entry.side is not None:
            side = _read_image(manifest.resolve(entry.side), spec.side_channels, (h, w))
        elif landmarks is not None and spec.side_channels == 1:
            side = make_landmark_heatmap(landmarks, (h, w), sigma or default_sigma(h))
        else:
            raise DataError(f"{entry.image}: no side image or landmarks for side channel")
    mask = _read_mask(manifest.resolve(entry.mask), (h, w)) if entry.mask else None
    return ConditionedSample(image, side, y, landmarks, mask, entry.image)


def load_dataset(manifest: DatasetManifest, spec: DomainSpec, target_size=(128, 128),
                 sigma: float | None = None) -> Iterator[ConditionedSample]:
    """Lazily stream samples in manifest order."""
    h, w = target_size
    if h % 16 or w % 16:
        raise DataError(f"target size {target_size} must be divisible by 16")
    for entry in manifest.entries:
        yield load_sample(manifest, entry, spec, target_size, sigma)


# ---------------------------------------------------------------------------
# augmentation and target sampling
# ---------------------------------------------------------------------------

def augment_flip(sample: ConditionedSample, coin: bool) -> ConditionedSample:
    """Mirror image, side, mask and landmark columns together when ``coin``."""
    if not coin:
        return sample
    w = sample.image.shape[-1]
    landmarks = None
    if sample.landmarks is not None:
        landmarks = sample.landmarks.copy()
        landmarks[:, 1] = (w - 1) - landmarks[:, 1]
    return dataclasses.replace(
        sample,
        image=np.ascontiguousarray(sample.image[..., ::-1]),
        side=None if sample.side is None else np.ascontiguousarray(sample.side[..., ::-1]),
        mask=None if sample.mask is None else np.ascontiguousarray(sample.mask[..., ::-1]),
        landmarks=landmarks,
    )


def flip_coin(seed: int, epoch: int, index: int) -> bool:
    return bool(np.random.default_rng([seed, epoch, index]).random() < 0.5)


def sample_target_attributes(batch_source_y: Sequence, spec: DomainSpec,
                             rng: np.random.Generator) -> np.ndarray:
    """Uniform category per exclusive group; fair coin for ungrouped flags."""
    n = len(batch_source_y)
    out = np.zeros((n, spec.n_y), dtype=np.float32)
    grouped = [np.asarray([spec.index(a) for a in g]) for g in spec.groups]
    for idx in grouped:
        out[np.arange(n), idx[rng.integers(0, len(idx), size=n)]] = 1.0
    in_group = {int(i) for idx in grouped for i in idx}
    for i in range(spec.n_y):
        if i not in in_group:
            out[:, i] = rng.random(n) < 0.5
    return out


class SampleSet:
    """Indexed, cached view over a manifest used for batching."""

    def __init__(self, manifest: DatasetManifest, spec: DomainSpec, target_size=(128, 128),
                 sigma: float | None = None):
        self.manifest = manifest
        self.spec = spec
        self.target_size = tuple(target_size)
        self.sigma = sigma
        self._cache: dict[int, ConditionedSample] = {}
        if self.target_size[0] % 16 or self.target_size[1] % 16:
            raise DataError(f"target size {target_size} must be divisible by 16")

    @classmethod
    def from_samples(cls, samples: Sequence[ConditionedSample], spec: DomainSpec):
        obj = cls.__new__(cls)
        obj.manifest = None
        obj.spec = spec
        obj.target_size = tuple(samples[0].image.shape[-2:])
        obj.sigma = None
        obj._cache = dict(enumerate(samples))
        return obj

    def __len__(self):
        return len(self.manifest) if self.manifest is not None else len(self._cache)

    def __getitem__(self, i: int) -> ConditionedSample:
        if i not in self._cache:
            entry = self.manifest.entries[i]
            self._cache[i] = load_sample(self.manifest, entry, self.spec, self.target_size,
                                         self.sigma)
        return self._cache[i]

    def batch(self, indices: Iterable[int], flips: Iterable[bool] | None = None):
        """Stack samples into arrays ``(x, s, y)``; ``s`` is None without side input."""
        indices = list(indices)
        flips = list(flips) if flips is not None else [False] * len(indices)
        samples = [augment_flip(self[i], f) for i, f in zip(indices, flips)]
        x = np.stack([s.image for s in samples])
        side = np.stack([s.side for s in samples]) if samples[0].side is not None else None
        y = np.stack([s.source_attributes for s in samples])
        return x, side, y

    def masks(self, indices, flips=None) -> np.ndarray:
        indices = list(indices)
        flips = list(flips) if flips is not None else [False] * len(indices)
        out = []
        for i, f in zip(indices, flips):
            s = augment_flip(self[i], f)
            if s.mask is None:
                raise DataError(f"{s.name}: no parsing mask")
            out.append(s.mask)
        return np.stack(out)


# ---------------------------------------------------------------------------
# toy data
# ---------------------------------------------------------------------------

def category_names(n_categories: int) -> list[str]:
    if n_categories == 2:
        return ["sad", "happy"]
    if n_categories == 3:
        return ["sad", "neutral", "happy"]
    return [f"expr{i}" for i in range(n_categories)]


@dataclass
class ToyFace:
    rgb: np.ndarray          # (h, w, 3) uint8
    mask: np.ndarray         # (h, w) uint8
    landmarks: list[tuple[float, float]] = field(default_factory=list)


def _ellipse(rows, cols, cr, cc, rr, rc):
    return ((rows - cr) / rr) ** 2 + ((cols - cc) / rc) ** 2 <= 1.0


def render_toy_face(size: int, curvature: float, rng: np.random.Generator,
                    shift: float = 0.0, noise: float = 4.0, tint=(0.0, 0.0, 0.0)) -> ToyFace:
    """Procedural face: skin ellipse, two eyes and a mouth whose bend encodes expression.

    ``curvature`` in [-1, 1] (frown to smile); ``shift`` moves the face
    horizontally as a fraction of the size.
    """
    s = float(size)
    rows = np.arange(size, dtype=np.float64)[:, None] + 0.5
    cols = np.arange(size, dtype=np.float64)[None, :] + 0.5
    jitter = rng.uniform(-0.03, 0.03, size=2)
    cr, cc = s * (0.5 + jitter[0]), s * (0.5 + jitter[1] + shift)
    rr, rc = s * rng.uniform(0.36, 0.41), s * rng.uniform(0.28, 0.32)
    background = np.array([rng.uniform(50, 90), rng.uniform(80, 120), rng.uniform(70, 100)])
    skin = np.array([rng.uniform(170, 230), rng.uniform(120, 170), rng.uniform(90, 130)])

    mask = np.zeros((size, size), dtype=np.uint8)
    mask[_ellipse(rows, cols, cr, cc, rr, rc)] = SKIN

    eye_r = cr - 0.30 * rr
    eye_dc = 0.42 * rc
    eye_rr, eye_rc = s * 0.045, s * 0.07
    landmarks = []
    for sign in (-1, 1):
        ec = cc + sign * eye_dc
        mask[_ellipse(rows, cols, eye_r, ec, eye_rr, eye_rc)] = EYES
        landmarks.append((eye_r, ec))

    mouth_r = cr + 0.45 * rr
    half = 0.45 * rc
    bend = 0.10 * rr * curvature
    dx = (cols - cc) / half
    centre_line = mouth_r - bend * dx ** 2 + bend / 2.0
    thick = s * 0.03
    lips = (np.abs(dx) <= 1.0) & (np.abs(rows - centre_line) <= thick)
    mask[lips] = LIPS
    for sign in (-1, 1):
        landmarks.append((mouth_r - bend / 2.0, cc + sign * half))

    palette = {BACKGROUND: background, SKIN: skin, EYES: np.array([15.0, 15.0, 20.0]),
               LIPS: np.array([170.0, 30.0, 45.0])}
    rgb = np.zeros((size, size, 3), dtype=np.float64)
    for cls, colour in palette.items():
        rgb[mask == cls] = colour
    rgb += np.asarray(tint, dtype=np.float64)
    if noise > 0:
        rgb += rng.normal(0.0, noise, size=rgb.shape)
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    landmarks = [(float(np.clip(r - 0.5, 0, size - 1)), float(np.clip(c - 0.5, 0, size - 1)))
                 for r, c in landmarks]
    return ToyFace(rgb, mask, landmarks)


def _save_png(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def generate_toy_dataset(n_images: int, n_categories: int, size: int, seed: int,
                         out_dir: str | Path, split: str = "train",
                         noise: float = 4.0) -> DatasetManifest:
    """Render a balanced toy expression set with masks and landmarks.

    Writes ``<split>.csv`` plus PNG images and masks under ``out_dir``.
    """
    if n_categories < 1 or n_images < 1:
        raise ValueError("n_images and n_categories must be positive")
    out = Path(out_dir)
    names = category_names(n_categories)
    curvatures = np.linspace(-1.0, 1.0, n_categories) if n_categories > 1 else np.zeros(1)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_images):
        k = i % n_categories
        face = render_toy_face(size, float(curvatures[k]), rng, noise=noise)
        img_rel, mask_rel = f"{split}/images/{i:05d}.png", f"{split}/masks/{i:05d}.png"
        _save_png(face.rgb, out / img_rel)
        _save_png(face.mask, out / mask_rel)
        entries.append(ManifestEntry(img_rel, tuple(face.landmarks), (names[k],), mask_rel))
    manifest = DatasetManifest(out, entries, split)
    write_manifest(manifest, out / f"{split}.csv")
    return manifest


def toy_domain(n_categories: int, side_channels: int = 1) -> DomainSpec:
    names = category_names(n_categories)
    return DomainSpec(tuple(names), image_channels=3, side_channels=side_channels,
                      groups=(tuple(names),))


REAL_TINT = (25.0, 10.0, -20.0)
REAL_NOISE = 14.0


def generate_toy_pose_dataset(n_images: int, n_categories: int, size: int, seed: int,
                              out_dir: str | Path, split: str = "train",
                              max_shift: float = 0.0) -> DatasetManifest:
    """Clean frontal renders paired with tinted, noisy "real" views.

    The clean render is the image; the textured view of the same face is the
    side image. Only the clean render carries meaningful labels. A non-zero
    ``max_shift`` also displaces the real view horizontally (fraction of the
    size), which a single-image critic can use to tell the two apart.
    """
    out = Path(out_dir)
    names = category_names(n_categories)
    curvatures = np.linspace(-1.0, 1.0, n_categories) if n_categories > 1 else np.zeros(1)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_images):
        k = i % n_categories
        face_seed = int(rng.integers(2 ** 31))
        shift = float(rng.uniform(-max_shift, max_shift))
        synthetic = render_toy_face(size, float(curvatures[k]), np.random.default_rng(face_seed),
                                    noise=0.0)
        real = render_toy_face(size, float(curvatures[k]), np.random.default_rng(face_seed),
                               shift=shift, noise=REAL_NOISE, tint=REAL_TINT)
        img_rel, side_rel = f"{split}/synthetic/{i:05d}.png", f"{split}/real/{i:05d}.png"
        mask_rel = f"{split}/masks/{i:05d}.png"
        _save_png(synthetic.rgb, out / img_rel)
        _save_png(real.rgb, out / side_rel)
        _save_png(synthetic.mask, out / mask_rel)
        entries.append(ManifestEntry(img_rel, tuple(synthetic.landmarks), (names[k],),
                                     mask_rel, side_rel))
    manifest = DatasetManifest(out, entries, split)
    write_manifest(manifest, out / f"{split}.csv")
    return manifest


def channel_stats(images: np.ndarray) -> np.ndarray:
    """Per-channel mean and standard deviation over (B, C, H, W) → (2, C)."""
    images = np.asarray(images, dtype=np.float64)
    return np.stack([images.mean(axis=(0, 2, 3)), images.std(axis=(0, 2, 3))])

