"""Core value types, configuration and elementary conversions."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml


class ConfigError(ValueError):
    """Raised for invalid configuration values or files."""


@dataclass(frozen=True)
class DomainSpec:
    """Attribute vocabulary and channel layout of one translation problem.

    ``groups`` lists mutually exclusive attribute sets (e.g. one expression
    at a time); attributes outside every group are free binary flags.
    """

    attribute_names: tuple[str, ...]
    image_channels: int = 3
    side_channels: int = 1
    groups: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "attribute_names", tuple(self.attribute_names))
        object.__setattr__(self, "groups", tuple(tuple(g) for g in self.groups))
        if len(self.attribute_names) < 1:
            raise ConfigError("at least one attribute is required")
        if len(set(self.attribute_names)) != len(self.attribute_names):
            raise ConfigError("attribute names must be unique")
        if self.image_channels < 1:
            raise ConfigError(f"image_channels must be >= 1, got {self.image_channels}")
        if self.side_channels < 0:
            raise ConfigError(f"side_channels must be >= 0, got {self.side_channels}")
        seen: set[str] = set()
        for group in self.groups:
            if not group:
                raise ConfigError("empty attribute group")
            for name in group:
                if name not in self.attribute_names:
                    raise ConfigError(f"group member {name!r} is not an attribute")
                if name in seen:
                    raise ConfigError(f"attribute {name!r} appears in more than one group")
                seen.add(name)

    @property
    def n_y(self) -> int:
        return len(self.attribute_names)

    def index(self, name: str) -> int:
        try:
            return self.attribute_names.index(name)
        except ValueError:
            raise ConfigError(
                f"unknown attribute {name!r}; valid names: {', '.join(self.attribute_names)}"
            ) from None

    def group_indices(self) -> list[list[int]]:
        """Index lists of every exclusive group, then singleton lists for free flags."""
        grouped = [[self.index(n) for n in g] for g in self.groups]
        in_group = {i for g in grouped for i in g}
        free = [[i] for i in range(self.n_y) if i not in in_group]
        return grouped + free

    def to_dict(self) -> dict:
        return {
            "attributes": list(self.attribute_names),
            "groups": [list(g) for g in self.groups],
            "image_channels": self.image_channels,
            "side_channels": self.side_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        if "attributes" not in d:
            raise ConfigError("missing key 'attributes'")
        return cls(
            attribute_names=tuple(d["attributes"]),
            groups=tuple(tuple(g) for g in d.get("groups") or ()),
            image_channels=int(d.get("image_channels", 3)),
            side_channels=int(d.get("side_channels", 1)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path: str | Path) -> "DomainSpec":
        return cls.from_dict(read_config(path))


@dataclass(frozen=True)
class LossWeights:
    lambda_bi: float = 10.0
    lambda_cls: float = 1.0
    lambda_id: float = 10.0
    lambda_p: float = 10.0
    lambda_gp: float = 10.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be >= 0")


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    decay_start_epoch: int = 100
    total_epochs: int = 200
    d_steps_per_g: int = 5
    batch_size: int = 8

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.decay_start_epoch >= self.total_epochs:
            raise ConfigError("decay_start_epoch must be < total_epochs")
        if self.d_steps_per_g < 1:
            raise ConfigError("d_steps_per_g must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


# ---------------------------------------------------------------------------
# attribute vectors
# ---------------------------------------------------------------------------

def encode_attributes(names_on: Iterable[str], spec: DomainSpec) -> np.ndarray:
    y = np.zeros(spec.n_y, dtype=np.float32)
    for name in names_on:
        y[spec.index(name)] = 1.0
    return y


def decode_attributes(y: Sequence[float], spec: DomainSpec) -> list[str]:
    return [n for n, v in zip(spec.attribute_names, y) if v >= 0.5]


def validate_attributes(y: np.ndarray, spec: DomainSpec) -> None:
    """Check binary entries and exactly one active member per exclusive group."""
    y = np.asarray(y)
    if y.shape[-1] != spec.n_y:
        raise ConfigError(f"attribute vector length {y.shape[-1]} != n_y={spec.n_y}")
    if not np.all((y == 0) | (y == 1)):
        raise ConfigError("attribute vectors must be binary")
    for group in spec.groups:
        idx = [spec.index(n) for n in group]
        counts = y[..., idx].sum(axis=-1)
        if not np.all(counts == 1):
            raise ConfigError(f"group {list(group)} must have exactly one active attribute")


def replicate_attributes(y: Sequence[float], spatial: tuple[int, int]) -> np.ndarray:
    h, w = spatial
    if h <= 0 or w <= 0:
        raise ConfigError(f"spatial dims must be positive, got {spatial}")
    y = np.asarray(y, dtype=np.float32)
    return np.broadcast_to(y[:, None, None], (y.shape[0], h, w)).copy()


# ---------------------------------------------------------------------------
# pixel range
# ---------------------------------------------------------------------------

def normalize_image(pixels) -> np.ndarray:
    """Map 8-bit pixel values in [0, 255] to [-1, 1]."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError(
            f"pixel values must lie in [0, 255], got range [{arr.min()}, {arr.max()}]"
        )
    return (arr / 127.5 - 1.0).astype(np.float32)


def denormalize_image(data, as_uint8: bool = True) -> np.ndarray:
    arr = (np.asarray(data, dtype=np.float64) + 1.0) * 127.5
    if not as_uint8:
        return arr
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def read_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def dataclass_from_dict(cls, d: dict):
    """Build ``cls`` from the keys of ``d`` it knows, coercing scalar types."""
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        value = d[f.name]
        if isinstance(f.default, bool):
            value = bool(value)
        elif isinstance(f.default, int):
            value = int(value)
        elif isinstance(f.default, float):
            value = float(value)
        kwargs[f.name] = value
    return cls(**kwargs)
