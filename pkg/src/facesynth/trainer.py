"""Alternating critic / generator optimisation with resumable state."""
from __future__ import annotations

import contextlib
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import yaml

from . import checkpoint as ckpt
from . import losses as L
from .data import SampleSet, flip_coin, sample_target_attributes
from .domain import (ConfigError, DomainSpec, LossWeights, OptimizerConfig,
                     dataclass_from_dict, read_config)
from .networks import (DiscriminatorSpec, Discriminator, Generator, GeneratorSpec, ParserSpec,
                       build_discriminator, build_generator, save_generator)
from .parsing import FrozenParser

logger = logging.getLogger(__name__)

ATTRIBUTE_TRANSFER = "attribute_transfer"
POSE_NORMALIZATION = "pose_normalization"
MODES = (ATTRIBUTE_TRANSFER, POSE_NORMALIZATION)


@dataclass
class TrainConfig:
    domain: DomainSpec
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    parser: ParserSpec = field(default_factory=ParserSpec)
    image_size: int = 128
    mode: str = ATTRIBUTE_TRANSFER
    checkpoint_every: int = 1000
    sigma: float | None = None
    parser_steps: int = 500

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.image_size % 16:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 16")
        if self.discriminator.image_size != self.image_size:
            self.discriminator = dataclasses.replace(self.discriminator,
                                                     image_size=self.image_size)
        if self.mode == POSE_NORMALIZATION and self.domain.side_channels != self.domain.image_channels:
            raise ConfigError("pose normalization needs a side image with image_channels channels")

    def to_dict(self) -> dict:
        d = self.domain.to_dict()
        d.update(dataclasses.asdict(self.optimizer))
        d.update(dataclasses.asdict(self.weights))
        d.update(image_size=self.image_size, mode=self.mode,
                 checkpoint_every=self.checkpoint_every, sigma=self.sigma,
                 parser_steps=self.parser_steps,
                 generator=self.generator.to_dict(),
                 discriminator=self.discriminator.to_dict(),
                 parser=self.parser.to_dict())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = ({"attributes", "groups", "image_channels", "side_channels", "image_size", "mode",
                  "checkpoint_every", "sigma", "parser_steps", "generator", "discriminator",
                  "parser"}
                 | {f.name for f in dataclasses.fields(OptimizerConfig)}
                 | {f.name for f in dataclasses.fields(LossWeights)})
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(
            domain=DomainSpec.from_dict(d),
            generator=dataclass_from_dict(GeneratorSpec, d.get("generator") or {}),
            discriminator=dataclass_from_dict(DiscriminatorSpec, d.get("discriminator") or {}),
            optimizer=dataclass_from_dict(OptimizerConfig, d),
            weights=dataclass_from_dict(LossWeights, d),
            parser=dataclass_from_dict(ParserSpec, d.get("parser") or {}),
            image_size=int(d.get("image_size", 128)),
            mode=d.get("mode", ATTRIBUTE_TRANSFER),
            checkpoint_every=int(d.get("checkpoint_every", 1000)),
            sigma=None if d.get("sigma") is None else float(d["sigma"]),
            parser_steps=int(d.get("parser_steps", 500)),
        )

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "TrainConfig":
        d = read_config(path)
        d.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def lr_at(epoch: float, opt: OptimizerConfig) -> float:
    """Constant learning rate, then linear decay to zero at ``total_epochs``."""
    if epoch < opt.decay_start_epoch:
        return opt.base_lr
    frac = (opt.total_epochs - epoch) / (opt.total_epochs - opt.decay_start_epoch)
    return opt.base_lr * max(0.0, frac)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    x: torch.Tensor
    s: torch.Tensor | None
    y_source: torch.Tensor
    y_target: torch.Tensor


def _critic_inputs(disc: Discriminator, mode: str, batch: Batch, x_fake, s_fake):
    """(real, fake) joined critic inputs for the current mode."""
    if mode == POSE_NORMALIZATION:
        return batch.s, x_fake
    return disc.join(batch.x, batch.s), disc.join(x_fake, s_fake)


def discriminator_objective(gen: Generator, disc: Discriminator, batch: Batch,
                            weights: LossWeights, mode: str = ATTRIBUTE_TRANSFER,
                            epsilon: torch.Tensor | None = None, fakes=None):
    """Critic total loss and its components; generator outputs are not tracked."""
    if fakes is None:
        with torch.no_grad():
            fakes = gen(batch.x, batch.s, batch.y_target)
    x_fake, s_fake = fakes
    real, fake = _critic_inputs(disc, mode, batch, x_fake.detach(),
                                None if s_fake is None else s_fake.detach())
    d_real, _ = disc.critic(real)
    d_fake, _ = disc.critic(fake)
    if mode == POSE_NORMALIZATION:
        _, cls_logits = disc.critic(batch.x)
    else:
        _, cls_logits = disc.critic(real)
    if epsilon is None:
        raise ValueError("epsilon (per-sample interpolation weights) is required")
    gp = L.gradient_penalty(lambda v: disc.critic(v)[0], real, fake, epsilon=epsilon)
    critic_part = L.critic_loss(d_real, d_fake, gp, weights)
    cls_r = L.cls_real(cls_logits, batch.y_source)
    total = L.total_discriminator_loss(critic_part, cls_r, weights)
    parts = dict(gan_critic=d_fake.mean() - d_real.mean(), gradient_penalty=gp, cls_real=cls_r,
                 total_d=total, d_loss_real=-d_real.mean(), d_loss_fake=d_fake.mean())
    return total, parts


def generator_objective(gen: Generator, disc: Discriminator, parser: FrozenParser | None,
                        batch: Batch, weights: LossWeights, mode: str = ATTRIBUTE_TRANSFER):
    """Generator total loss: adversarial + bidirectional + cls + identity + parsing."""
    z = gen.encode(batch.x, batch.s)
    x_fake, s_fake = gen.decode(z, batch.y_target)
    if mode == POSE_NORMALIZATION:
        d_fake, cls_logits = disc.critic(x_fake)
    else:
        d_fake, cls_logits = disc.critic(disc.join(x_fake, s_fake))
    adv = L.generator_adversarial_loss(d_fake)
    cls_f = L.cls_fake(cls_logits, batch.y_target)
    ident = L.identity_loss(x_fake, batch.x)
    if parser is not None and weights.lambda_p > 0:
        with torch.no_grad():
            p_real = parser.posteriors(batch.x)
        log_p_fake = parser.log_posteriors(x_fake)
        parse = L.parsing_loss(p_real, log_p_fake.exp(), log_p_fake=log_p_fake)
    else:
        parse = torch.zeros((), dtype=x_fake.dtype)
    z_fake = gen.encode(x_fake, s_fake)
    x_hat, s_hat = gen.decode(z_fake, batch.y_source)
    bi_img, bi_lat = L.bidirectional_loss(batch.x, batch.s, x_hat, s_hat, z, z_fake)
    total = L.total_generator_loss(adv, bi_img + bi_lat, cls_f, ident, parse, weights)
    parts = dict(gan_generator=adv, cls_fake=cls_f, identity=ident, parsing=parse,
                 bidirectional_image=bi_img, bidirectional_latent=bi_lat, total_g=total)
    return total, parts


def _check_parts(parts: dict, report: L.LossReport) -> None:
    for name, value in parts.items():
        if not math.isfinite(float(value)):
            raise L.NonFiniteLossError(name, report)


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

class Trainer:
    """Owns networks, optimizers, data cursor and RNG for one training run."""

    def __init__(self, config: TrainConfig, samples: SampleSet, parser: FrozenParser | None = None,
                 seed: int = 0, out_dir: str | Path | None = None):
        self.config = config
        self.samples = samples
        self.parser = parser
        self.seed = int(seed)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if len(samples) == 0:
            raise ValueError("empty training set")
        if config.weights.lambda_p > 0 and parser is None:
            raise ConfigError("lambda_p > 0 requires a frozen parser")
        paired = config.mode == ATTRIBUTE_TRANSFER
        self.generator = build_generator(config.generator, config.domain, self.seed)
        self.discriminator = build_discriminator(config.discriminator, config.domain,
                                                 self.seed + 1, paired=paired)
        opt = config.optimizer
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=opt.base_lr,
                                      betas=(opt.beta1, opt.beta2))
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=opt.base_lr,
                                      betas=(opt.beta1, opt.beta2))
        self.rng = np.random.default_rng(self.seed)
        self.epoch = 0
        self.position = 0
        self.g_steps = 0
        self.d_steps = 0
        self.report = L.LossReport()
        self.log = L.LossLog(self.out_dir / "losses.csv" if self.out_dir else None)
        self._set_lr()

    # -- data ---------------------------------------------------------------
    def _permutation(self) -> np.ndarray:
        return np.random.default_rng([self.seed, self.epoch]).permutation(len(self.samples))

    def lr(self) -> float:
        return lr_at(self.epoch, self.config.optimizer)

    def _set_lr(self) -> None:
        for optim in (self.opt_g, self.opt_d):
            for group in optim.param_groups:
                group["lr"] = self.lr()

    def next_batch(self) -> Batch:
        n = len(self.samples)
        if self.position >= n:
            self.epoch += 1
            self.position = 0
            self._set_lr()
        bs = self.config.optimizer.batch_size
        idx = self._permutation()[self.position:self.position + bs]
        self.position += bs
        flips = [flip_coin(self.seed, self.epoch, int(i)) for i in idx]
        x, s, y = self.samples.batch(idx, flips)
        y_target = sample_target_attributes(y, self.config.domain, self.rng)
        return Batch(torch.from_numpy(x), None if s is None else torch.from_numpy(s),
                     torch.from_numpy(y), torch.from_numpy(y_target))

    # -- steps --------------------------------------------------------------
    def discriminator_step(self, batch: Batch) -> dict:
        eps = L.interpolation_weights(batch.x.shape[0], self.rng)
        self.generator.train()
        with self._snapshot_on_divergence():
            total, parts = discriminator_objective(self.generator, self.discriminator, batch,
                                                   self.config.weights, self.config.mode, eps)
            values = {k: float(v.detach()) for k, v in parts.items()}
            self.report.update(**values)
            _check_parts(values, self.report)
        self.opt_d.zero_grad(set_to_none=True)
        total.backward()
        self.opt_d.step()
        self.d_steps += 1
        return values

    def generator_step(self, batch: Batch) -> dict:
        self.discriminator.requires_grad_(False)
        try:
            with self._snapshot_on_divergence():
                total, parts = generator_objective(self.generator, self.discriminator,
                                                   self.parser, batch, self.config.weights,
                                                   self.config.mode)
                values = {k: float(v.detach()) for k, v in parts.items()}
                self.report.update(**values)
                _check_parts(values, self.report)
            self.opt_g.zero_grad(set_to_none=True)
            total.backward()
            self.opt_g.step()
        finally:
            self.discriminator.requires_grad_(True)
        self.g_steps += 1
        return values

    @contextlib.contextmanager
    def _snapshot_on_divergence(self):
        """Save a diagnostic state under ``out_dir/diverged`` before re-raising."""
        try:
            yield
        except L.NonFiniteLossError as exc:
            exc.report = self.report
            if self.out_dir is not None:
                self.save_state(self.out_dir / "diverged")
            raise

    def iteration(self) -> bool:
        """One critic step, plus a generator step every ``d_steps_per_g`` critic steps.

        Returns True when a generator step was taken.
        """
        batch = self.next_batch()
        self.discriminator_step(batch)
        if self.d_steps % self.config.optimizer.d_steps_per_g:
            return False
        self.generator_step(batch)
        self.log.append(self.g_steps, self.d_steps, self.epoch, self.lr(), self.report)
        every = self.config.checkpoint_every
        if self.out_dir is not None and every and self.g_steps % every == 0:
            self.save_state(self.out_dir / "checkpoints" / f"step_{self.g_steps:07d}")
        return True

    def train(self, generator_steps: int, callback: Callable[["Trainer"], None] | None = None):
        """Run until ``generator_steps`` generator updates have been made in total."""
        while self.g_steps < generator_steps:
            if self.iteration():
                if callback is not None:
                    callback(self)
                if self.g_steps % 100 == 0:
                    r = self.report
                    logger.info("step %d  D %.3f  G %.3f  bi %.4f  cls_f %.3f", self.g_steps,
                                r.total_d, r.total_g, r.bidirectional_image, r.cls_fake)
        if self.out_dir is not None:
            self.save_state(self.out_dir / "final")
            save_generator(self.out_dir / "generator", self.generator, self.seed,
                           extra={"mode": self.config.mode, "g_steps": self.g_steps,
                                  "image_size": self.config.image_size})
        return self

    # -- state --------------------------------------------------------------
    def _optimizer_arrays(self, name: str, optim, module) -> tuple[dict, list]:
        arrays, steps = {}, []
        for i, p in enumerate(module.parameters()):
            st = optim.state.get(p)
            if not st:
                steps.append(0)
                continue
            arrays[f"{name}.{i}.exp_avg"] = st["exp_avg"]
            arrays[f"{name}.{i}.exp_avg_sq"] = st["exp_avg_sq"]
            steps.append(int(st["step"]))
        return arrays, steps

    def save_state(self, path) -> Path:
        arrays = {}
        arrays.update(ckpt.module_arrays(self.generator, "generator."))
        arrays.update(ckpt.module_arrays(self.discriminator, "discriminator."))
        a_g, steps_g = self._optimizer_arrays("opt_g", self.opt_g, self.generator)
        a_d, steps_d = self._optimizer_arrays("opt_d", self.opt_d, self.discriminator)
        arrays.update(a_g)
        arrays.update(a_d)
        meta = {
            "kind": "train_state",
            "config": self.config.to_dict(),
            "domain": self.config.domain.to_dict(),
            "generator_spec": self.config.generator.to_dict(),
            "discriminator_spec": self.config.discriminator.to_dict(),
            "seed": self.seed,
            "epoch": self.epoch,
            "position": self.position,
            "g_steps": self.g_steps,
            "d_steps": self.d_steps,
            "opt_g_steps": steps_g,
            "opt_d_steps": steps_d,
            "rng_state": self.rng.bit_generator.state,
        }
        return ckpt.save_arrays(path, arrays, json.loads(json.dumps(meta)))

    def _restore_optimizer(self, name, optim, module, arrays, steps):
        optim.state.clear()
        for i, p in enumerate(module.parameters()):
            if steps[i] == 0:
                continue
            key = f"{name}.{i}"
            for part in ("exp_avg", "exp_avg_sq"):
                if f"{key}.{part}" not in arrays:
                    raise ckpt.CheckpointError(f"checkpoint is missing array '{key}.{part}'")
            optim.state[p] = {
                "step": torch.tensor(float(steps[i])),
                "exp_avg": torch.as_tensor(arrays[f"{key}.exp_avg"]).clone(),
                "exp_avg_sq": torch.as_tensor(arrays[f"{key}.exp_avg_sq"]).clone(),
            }

    def load_state(self, path) -> "Trainer":
        arrays, meta = ckpt.load_arrays(path)
        if meta.get("kind") != "train_state":
            raise ckpt.CheckpointError(f"{path} is not a training state")
        saved = TrainConfig.from_dict(meta["config"])
        if saved != self.config:
            diff = [k for k, v in saved.to_dict().items() if self.config.to_dict().get(k) != v]
            raise ckpt.CheckpointError(f"checkpoint config differs from current config in {diff}")
        ckpt.load_module_arrays(self.generator, arrays, "generator.")
        ckpt.load_module_arrays(self.discriminator, arrays, "discriminator.")
        self._restore_optimizer("opt_g", self.opt_g, self.generator, arrays, meta["opt_g_steps"])
        self._restore_optimizer("opt_d", self.opt_d, self.discriminator, arrays,
                                meta["opt_d_steps"])
        self.seed = int(meta["seed"])
        self.epoch = int(meta["epoch"])
        self.position = int(meta["position"])
        self.g_steps = int(meta["g_steps"])
        self.d_steps = int(meta["d_steps"])
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = meta["rng_state"]
        self._set_lr()
        return self

    @classmethod
    def resume(cls, path, samples: SampleSet, parser: FrozenParser | None = None,
               out_dir=None) -> "Trainer":
        meta = ckpt.read_manifest(path)
        config = TrainConfig.from_dict(meta["config"])
        trainer = cls(config, samples, parser, seed=int(meta["seed"]), out_dir=out_dir)
        return trainer.load_state(path)


def save_state(trainer: Trainer, path) -> Path:
    return trainer.save_state(path)


def load_state(trainer: Trainer, path) -> Trainer:
    return trainer.load_state(path)
