"""Generator (encoder + sub-pixel decoder), patch critic and face parser."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .domain import ConfigError, DomainSpec

REDUCTION = 16


class ShapeError(ValueError):
    """Input tensor shape does not match the network contract."""


@dataclass(frozen=True)
class GeneratorSpec:
    base_channels: int = 64
    max_channels: int = 512
    latent_channels: int = 256
    n_downsample: int = 4
    n_residual: int = 6
    n_upsample: int = 4
    # "none" drops instance norm, which is undefined on the 1x1 latent of 16px inputs
    norm: str = "instance"

    def __post_init__(self):
        if self.norm not in ("instance", "none"):
            raise ConfigError(f"norm must be 'instance' or 'none', got {self.norm!r}")
        if self.n_downsample < 1:
            raise ConfigError("n_downsample must be >= 1")
        if 2 ** self.n_downsample != REDUCTION or self.n_upsample != self.n_downsample:
            raise ConfigError("encoder must reduce by exactly 16 and decoder must undo it")
        if min(self.base_channels, self.max_channels, self.latent_channels) < 1:
            raise ConfigError("channel counts must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorSpec:
    base_channels: int = 64
    max_channels: int = 2048
    n_layers: int = 6
    image_size: int = 128
    # 0 selects image_channels (+ side_channels in paired mode) from the domain.
    input_channels: int = 0

    def __post_init__(self):
        if self.n_layers < 3:
            raise ConfigError("discriminator needs n_layers >= 3")
        if self.image_size % (2 ** self.n_layers):
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2**n_layers={2 ** self.n_layers}"
            )

    @property
    def patch_size(self) -> int:
        return self.image_size // 2 ** self.n_layers

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ParserSpec:
    n_classes: int = 4
    base_channels: int = 16
    depth: int = 3

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("parser needs at least two classes")
        if self.depth < 1:
            raise ConfigError("parser depth must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _check_spatial(x: torch.Tensor, channels: int, what: str) -> None:
    if x.dim() != 4:
        raise ShapeError(f"{what}: expected (B, C, H, W), got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ShapeError(f"{what}: expected {channels} channels, got {x.shape[1]}")
    h, w = x.shape[-2:]
    if h % REDUCTION or w % REDUCTION:
        raise ShapeError(f"{what}: spatial dims {h}x{w} must be divisible by {REDUCTION}")


def _norm(channels: int, kind: str = "instance") -> nn.Module:
    if kind == "none":
        return nn.Identity()
    return nn.InstanceNorm2d(channels, affine=True, track_running_stats=False)


def _conv(cin, cout, k, stride=1):
    # replicate padding keeps constant inputs constant through the stack
    return nn.Conv2d(cin, cout, k, stride, padding=(k - 1) // 2 if stride == 1 else 1,
                     padding_mode="replicate")


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, norm: str = "instance"):
        super().__init__()
        self.main = nn.Sequential(
            _conv(channels, channels, 3), _norm(channels, norm), nn.ReLU(),
            _conv(channels, channels, 3), _norm(channels, norm),
        )

    def forward(self, x):
        return x + self.main(x)


class SubPixelUp(nn.Module):
    """x2 upsampling: conv to 4x channels, then channel-to-space shuffle."""

    def __init__(self, cin: int, cout: int, norm: str = "instance"):
        super().__init__()
        self.conv = _conv(cin, cout * 4, 3)
        self.shuffle = nn.PixelShuffle(2)
        self.norm = _norm(cout, norm)

    def forward(self, x):
        return F.relu(self.norm(self.shuffle(self.conv(x))))


class Encoder(nn.Module):
    def __init__(self, spec: GeneratorSpec, in_channels: int):
        super().__init__()
        self.in_channels = in_channels
        c = spec.base_channels
        layers = [nn.Sequential(_conv(in_channels, c, 7), _norm(c, spec.norm), nn.ReLU())]
        for i in range(spec.n_downsample):
            last = i == spec.n_downsample - 1
            cout = spec.latent_channels if last else min(c * 2, spec.max_channels)
            layers.append(nn.Sequential(nn.Conv2d(c, cout, 4, 2, 1, padding_mode="replicate"),
                                        _norm(cout, spec.norm), nn.ReLU()))
            c = cout
        self.layers = nn.ModuleList(layers)

    def forward(self, x, return_features: bool = False):
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return (x, feats) if return_features else x


class Decoder(nn.Module):
    def __init__(self, spec: GeneratorSpec, n_y: int, image_channels: int, side_channels: int):
        super().__init__()
        c = min(spec.base_channels * 2 ** (spec.n_downsample - 1), spec.max_channels)
        # no norm here: a spatially constant attribute map only shifts each channel's
        # mean, which instance norm would subtract away
        self.entry = nn.Sequential(_conv(spec.latent_channels + n_y, c, 3), nn.ReLU())
        self.residual = nn.Sequential(*[ResidualBlock(c, spec.norm)
                                        for _ in range(spec.n_residual)])
        ups = []
        for _ in range(spec.n_upsample):
            cout = max(c // 2, spec.base_channels)
            ups.append(SubPixelUp(c, cout, spec.norm))
            c = cout
        self.up = nn.Sequential(*ups)
        self.image_head = _conv(c, image_channels, 7)
        self.side_head = _conv(c, side_channels, 7) if side_channels > 0 else None

    def forward(self, z, y):
        y_map = y.view(y.shape[0], y.shape[1], 1, 1).expand(-1, -1, z.shape[2], z.shape[3])
        h = self.up(self.residual(self.entry(torch.cat([z, y_map], dim=1))))
        x_out = torch.tanh(self.image_head(h))
        s_out = torch.tanh(self.side_head(h)) if self.side_head is not None else None
        return x_out, s_out


class Generator(nn.Module):
    """Encoder-decoder translating (x, s) under target attributes y."""

    def __init__(self, spec: GeneratorSpec, domain: DomainSpec):
        super().__init__()
        self.spec = spec
        self.domain = domain
        self.encoder = Encoder(spec, domain.image_channels + domain.side_channels)
        self.decoder = Decoder(spec, domain.n_y, domain.image_channels, domain.side_channels)

    def encode(self, x, s=None):
        _check_spatial(x, self.domain.image_channels, "image")
        if self.domain.side_channels:
            if s is None:
                raise ShapeError("side image required: domain declares "
                                 f"{self.domain.side_channels} side channels")
            _check_spatial(s, self.domain.side_channels, "side image")
            if s.shape[0] != x.shape[0] or s.shape[-2:] != x.shape[-2:]:
                raise ShapeError(f"side shape {tuple(s.shape)} does not match image {tuple(x.shape)}")
            x = torch.cat([x, s], dim=1)
        elif s is not None:
            raise ShapeError("domain declares no side channels but a side image was given")
        return self.encoder(x)

    def decode(self, z, y):
        if z.dim() != 4 or z.shape[1] != self.spec.latent_channels:
            raise ShapeError(f"latent: expected (B, {self.spec.latent_channels}, h, w), "
                             f"got {tuple(z.shape)}")
        if y.dim() != 2 or y.shape[1] != self.domain.n_y or y.shape[0] != z.shape[0]:
            raise ShapeError(f"attributes: expected ({z.shape[0]}, {self.domain.n_y}), "
                             f"got {tuple(y.shape)}")
        return self.decoder(z, y.to(z.dtype))

    def forward(self, x, s, y):
        return self.decode(self.encode(x, s), y)


class Discriminator(nn.Module):
    """Patch critic with an auxiliary attribute classifier.

    Returns ``(src_map, cls_logits)``; ``src_map`` has no output nonlinearity.
    """

    def __init__(self, spec: DiscriminatorSpec, domain: DomainSpec, paired: bool = True):
        super().__init__()
        self.spec = spec
        self.domain = domain
        self.paired = paired and domain.side_channels > 0
        expected = domain.image_channels + (domain.side_channels if self.paired else 0)
        if spec.input_channels and spec.input_channels != expected:
            raise ConfigError(f"discriminator input_channels={spec.input_channels} "
                              f"inconsistent with domain ({expected})")
        self.in_channels = expected
        layers = []
        cin, c = expected, spec.base_channels
        for _ in range(spec.n_layers):
            layers += [nn.Conv2d(cin, c, 4, 2, 1), nn.LeakyReLU(0.01)]
            cin, c = c, min(c * 2, spec.max_channels)
        self.main = nn.Sequential(*layers)
        self.src = nn.Conv2d(cin, 1, 3, 1, 1, bias=False)
        self.cls = nn.Linear(cin * spec.patch_size ** 2, domain.n_y)

    def join(self, x, s=None):
        if self.paired:
            if s is None:
                raise ShapeError("paired discriminator needs a side image")
            return torch.cat([x, s], dim=1)
        return x

    def critic(self, v):
        """Forward on an already-joined input."""
        if v.dim() != 4 or v.shape[1] != self.in_channels:
            raise ShapeError(f"discriminator: expected {self.in_channels} channels, "
                             f"got shape {tuple(v.shape)}")
        if v.shape[-1] != self.spec.image_size or v.shape[-2] != self.spec.image_size:
            raise ShapeError(f"discriminator built for {self.spec.image_size}px input, "
                             f"got {v.shape[-2]}x{v.shape[-1]}")
        h = self.main(v)
        return self.src(h), self.cls(h.flatten(1))

    def forward(self, x, s=None):
        return self.critic(self.join(x, s))


class DepthwiseSeparable(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.depthwise = nn.Conv2d(cin, cin, 3, 1, 1, groups=cin, padding_mode="replicate")
        self.pointwise = nn.Conv2d(cin, cout, 1)
        self.norm = _norm(cout)

    def forward(self, x):
        return F.relu(self.norm(self.pointwise(self.depthwise(x))))


class ParserBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.body = nn.Sequential(DepthwiseSeparable(cin, cout), DepthwiseSeparable(cout, cout))

    def forward(self, x):
        return self.body(x)


class FaceParserNet(nn.Module):
    """U-Net of depthwise-separable blocks returning per-pixel class logits."""

    def __init__(self, spec: ParserSpec, in_channels: int = 3):
        super().__init__()
        self.spec = spec
        self.in_channels = in_channels
        c = spec.base_channels
        self.stem = nn.Conv2d(in_channels, c, 3, 1, 1, padding_mode="replicate")
        self.down = nn.ModuleList()
        chans = [c]
        for _ in range(spec.depth):
            self.down.append(ParserBlock(chans[-1], chans[-1] * 2))
            chans.append(chans[-1] * 2)
        self.up = nn.ModuleList()
        for i in range(spec.depth, 0, -1):
            self.up.append(ParserBlock(chans[i] + chans[i - 1], chans[i - 1]))
        self.head = nn.Conv2d(c, spec.n_classes, 1)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"parser: expected (B, {self.in_channels}, H, W), got {tuple(x.shape)}")
        if x.shape[-1] % 2 ** self.spec.depth or x.shape[-2] % 2 ** self.spec.depth:
            raise ShapeError(f"parser: spatial dims must be divisible by {2 ** self.spec.depth}")
        h = F.relu(self.stem(x))
        skips = [h]
        for block in self.down:
            h = block(F.max_pool2d(h, 2))
            skips.append(h)
        skips.pop()
        for block in self.up:
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1))
        return self.head(h)

    def log_posteriors(self, x):
        return F.log_softmax(self.forward(x), dim=1)

    def posteriors(self, x):
        return F.softmax(self.forward(x), dim=1)


def _seeded(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = build()
        init_weights(net)
    return net


def build_generator(spec: GeneratorSpec, domain: DomainSpec, seed: int = 0) -> Generator:
    return _seeded(seed, lambda: Generator(spec, domain))


def build_discriminator(spec: DiscriminatorSpec, domain: DomainSpec, seed: int = 0,
                        paired: bool = True) -> Discriminator:
    return _seeded(seed, lambda: Discriminator(spec, domain, paired=paired))


def build_parser(spec: ParserSpec, in_channels: int = 3, seed: int = 0) -> FaceParserNet:
    # default (fan-in scaled) init: N(0, 0.02) depthwise/pointwise pairs shrink
    # activations below the instance-norm epsilon
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return FaceParserNet(spec, in_channels)


def encode(gen: Generator, x, s=None):
    return gen.encode(x, s)


def decode(gen: Generator, z, y):
    return gen.decode(z, y)


def discriminate(disc: Discriminator, x, s=None):
    return disc(x, s)


def parse(parser: FaceParserNet, x):
    return parser.posteriors(x)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_generator(path, gen: Generator, seed: int | None = None, extra: dict | None = None):
    meta = {"kind": "generator", "domain": gen.domain.to_dict(),
            "generator_spec": gen.spec.to_dict(), "seed": seed, **(extra or {})}
    return ckpt.save_module(path, gen, meta)


def load_generator(path) -> Generator:
    arrays, meta = ckpt.load_arrays(path)
    if meta.get("kind") not in ("generator", "train_state"):
        raise ckpt.CheckpointError(f"{path} is not a generator checkpoint")
    domain = DomainSpec.from_dict(meta["domain"])
    gen = Generator(GeneratorSpec(**meta["generator_spec"]), domain)
    prefix = "generator." if meta["kind"] == "train_state" else ""
    ckpt.load_module_arrays(gen, arrays, prefix)
    return gen.eval()


def save_parser(path, parser: FaceParserNet, seed: int | None = None, extra: dict | None = None):
    meta = {"kind": "parser", "parser_spec": parser.spec.to_dict(),
            "in_channels": parser.in_channels, "seed": seed, **(extra or {})}
    return ckpt.save_module(path, parser, meta)


def load_parser(path) -> FaceParserNet:
    arrays, meta = ckpt.load_arrays(path)
    if meta.get("kind") != "parser":
        raise ckpt.CheckpointError(f"{path} is not a parser checkpoint")
    net = FaceParserNet(ParserSpec(**meta["parser_spec"]), meta.get("in_channels", 3))
    ckpt.load_module_arrays(net, arrays)
    return net.eval()
