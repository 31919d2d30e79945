"""Face-parser pretraining, evaluation and freezing."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import SampleSet, flip_coin
from .domain import OptimizerConfig
from .networks import FaceParserNet, ParserSpec, build_parser, load_parser

logger = logging.getLogger(__name__)

PARSER_OPTIMIZER = OptimizerConfig(base_lr=1e-3, beta1=0.9, beta2=0.999, batch_size=8)


@dataclass
class ParserScores:
    per_class: np.ndarray   # NaN for classes absent from the ground truth
    overall: float
    mean: float


def _mask_batch(samples: SampleSet, idx, flips, n_classes: int):
    x, _, _ = samples.batch(idx, flips)
    m = samples.masks(idx, flips)
    if m.min() < 0 or m.max() >= n_classes:
        raise ValueError(f"mask class index out of range [0, {n_classes}): "
                         f"found {int(m.min())}..{int(m.max())}")
    return torch.from_numpy(x), torch.from_numpy(m).long()


def train_parser(samples: SampleSet, spec: ParserSpec = ParserSpec(),
                 opt: OptimizerConfig = PARSER_OPTIMIZER, steps: int = 500, seed: int = 0,
                 net: FaceParserNet | None = None):
    """Minimise per-pixel cross-entropy on labelled masks.

    Returns ``(net, losses)`` with one loss value per step.
    """
    if len(samples) == 0:
        raise ValueError("empty mask dataset")
    if net is None:
        net = build_parser(spec, samples.spec.image_channels, seed)
    net.train()
    optim = torch.optim.Adam(net.parameters(), lr=opt.base_lr, betas=(opt.beta1, opt.beta2))
    rng = np.random.default_rng(seed)
    n = len(samples)
    bs = min(opt.batch_size, n)
    losses = []
    for step in range(steps):
        idx = rng.choice(n, size=bs, replace=False)
        flips = [flip_coin(seed, step, int(i)) for i in idx]
        x, m = _mask_batch(samples, idx, flips, spec.n_classes)
        loss = F.cross_entropy(net(x), m)
        optim.zero_grad()
        loss.backward()
        optim.step()
        losses.append(float(loss.detach()))
        if step % 100 == 0:
            logger.info("parser step %d loss %.4f", step, losses[-1])
    return net.eval(), losses


@torch.no_grad()
def predict_labels(net, x: torch.Tensor, batch_size: int = 16) -> np.ndarray:
    out = []
    for i in range(0, x.shape[0], batch_size):
        out.append(net(x[i:i + batch_size]).argmax(dim=1).numpy())
    return np.concatenate(out)


def score_labels(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> ParserScores:
    if truth.size == 0:
        raise ValueError("cannot score an empty dataset")
    per_class = np.full(n_classes, np.nan)
    for c in range(n_classes):
        sel = truth == c
        if sel.any():
            per_class[c] = float((pred[sel] == c).mean())
    return ParserScores(per_class, float((pred == truth).mean()), float(np.nanmean(per_class)))


def evaluate_parser(net, samples: SampleSet) -> ParserScores:
    if len(samples) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    n_classes = net.spec.n_classes
    idx = list(range(len(samples)))
    x, m = _mask_batch(samples, idx, None, n_classes)
    return score_labels(predict_labels(net, x), m.numpy(), n_classes)


class FrozenParser:
    """Read-only parser: gradients reach the input image, never the weights."""

    def __init__(self, net: FaceParserNet):
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self.net = net

    @property
    def spec(self) -> ParserSpec:
        return self.net.spec

    def to(self, dtype):
        self.net.to(dtype)
        return self

    def parameters(self):
        return self.net.parameters()

    def posteriors(self, x):
        return self.net.posteriors(x)

    def log_posteriors(self, x):
        return self.net.log_posteriors(x)

    __call__ = posteriors


def freeze(source: FaceParserNet | str | Path) -> FrozenParser:
    net = source if isinstance(source, FaceParserNet) else load_parser(source)
    return FrozenParser(net)
