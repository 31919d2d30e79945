"""scikit-learn style wrappers around the translator, the parser and a small classifier."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import ConditionedSample, SampleSet
from .domain import DomainSpec, LossWeights, OptimizerConfig
from .networks import DiscriminatorSpec, GeneratorSpec, ParserSpec
from .parsing import FrozenParser, freeze, predict_labels, score_labels, train_parser
from .trainer import ATTRIBUTE_TRANSFER, TrainConfig, Trainer
from .validation import check_attribute_matrix, check_images, check_masks


def _as_tensor(X) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(X, dtype=np.float32))


class AttributeTranslator(BaseEstimator, TransformerMixin):
    """Multi-domain attribute translator trained adversarially.

    ``fit(X, y, side=None)`` trains the encoder-decoder generator on images
    ``X`` (N, C, H, W) with source attributes ``y``. ``transform(X, side,
    target=...)`` re-renders images under the requested target attributes.
    """

    def __init__(self, attribute_names=("sad", "happy"), groups="exclusive", side_channels=1,
                 image_size=64, base_channels=16, max_channels=128, latent_channels=64,
                 n_residual=6, disc_base_channels=16, disc_layers=4, lambda_bi=10.0,
                 lambda_cls=1.0, lambda_id=10.0, lambda_p=10.0, lambda_gp=10.0, lr=1e-4,
                 beta1=0.5, beta2=0.999, batch_size=8, d_steps_per_g=5, n_steps=2000,
                 mode=ATTRIBUTE_TRANSFER, parser=None, random_state=0, checkpoint_dir=None):
        self.attribute_names = attribute_names
        self.groups = groups
        self.side_channels = side_channels
        self.image_size = image_size
        self.base_channels = base_channels
        self.max_channels = max_channels
        self.latent_channels = latent_channels
        self.n_residual = n_residual
        self.disc_base_channels = disc_base_channels
        self.disc_layers = disc_layers
        self.lambda_bi = lambda_bi
        self.lambda_cls = lambda_cls
        self.lambda_id = lambda_id
        self.lambda_p = lambda_p
        self.lambda_gp = lambda_gp
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.batch_size = batch_size
        self.d_steps_per_g = d_steps_per_g
        self.n_steps = n_steps
        self.mode = mode
        self.parser = parser
        self.random_state = random_state
        self.checkpoint_dir = checkpoint_dir

    def _domain(self, n_channels: int) -> DomainSpec:
        names = tuple(self.attribute_names)
        if self.groups == "exclusive":
            groups = (names,)
        else:
            groups = tuple(tuple(g) for g in (self.groups or ()))
        return DomainSpec(names, n_channels, self.side_channels, groups)

    def _config(self, domain: DomainSpec) -> TrainConfig:
        return TrainConfig(
            domain=domain,
            generator=GeneratorSpec(self.base_channels, self.max_channels, self.latent_channels,
                                    n_residual=self.n_residual),
            discriminator=DiscriminatorSpec(self.disc_base_channels, n_layers=self.disc_layers,
                                            image_size=self.image_size),
            # constant rate: training length is given in generator steps here
            optimizer=OptimizerConfig(self.lr, self.beta1, self.beta2, decay_start_epoch=10 ** 8,
                                      total_epochs=10 ** 8 + 1, d_steps_per_g=self.d_steps_per_g,
                                      batch_size=self.batch_size),
            weights=LossWeights(self.lambda_bi, self.lambda_cls, self.lambda_id,
                                self.lambda_p if self.parser is not None else 0.0,
                                self.lambda_gp),
            image_size=self.image_size,
            mode=self.mode,
            checkpoint_every=0,
        )

    def fit(self, X, y, side=None):
        X = check_images(X)
        if X.shape[-1] != self.image_size or X.shape[-2] != self.image_size:
            raise ValueError(f"images must be {self.image_size}x{self.image_size}")
        domain = self._domain(X.shape[1])
        Y = check_attribute_matrix(y, domain, X.shape[0])
        S = check_images(side, self.side_channels, name="side") if self.side_channels else None
        if S is not None and S.shape[0] != X.shape[0]:
            raise ValueError("side and X have different lengths")
        samples = [ConditionedSample(X[i], None if S is None else S[i], Y[i])
                   for i in range(X.shape[0])]
        parser = self.parser
        if parser is not None and not isinstance(parser, FrozenParser):
            parser = freeze(parser.net_ if isinstance(parser, FaceParser) else parser)
        self.domain_ = domain
        self.config_ = self._config(domain)
        self.trainer_ = Trainer(self.config_, SampleSet.from_samples(samples, domain),
                                parser, seed=self.random_state, out_dir=self.checkpoint_dir)
        self.trainer_.train(self.n_steps)
        self.generator_ = self.trainer_.generator.eval()
        self.history_ = self.trainer_.log.rows
        return self

    def _targets(self, target, n: int) -> np.ndarray:
        if isinstance(target, str):
            target = [target] * n
        T = check_attribute_matrix(target, self.domain_)
        if T.shape[0] == 1 and n > 1:
            T = np.repeat(T, n, axis=0)
        if T.shape[0] != n:
            raise ValueError(f"got {T.shape[0]} targets for {n} images")
        return T

    @torch.no_grad()
    def transform(self, X, side=None, target=None, return_side=False):
        check_is_fitted(self, "generator_")
        X = check_images(X, self.domain_.image_channels)
        S = (check_images(side, self.domain_.side_channels, name="side")
             if self.domain_.side_channels else None)
        if target is None:
            raise ValueError("transform needs target attributes")
        T = self._targets(target, X.shape[0])
        x_out, s_out = self.generator_(_as_tensor(X), None if S is None else _as_tensor(S),
                                       _as_tensor(T))
        if return_side:
            return x_out.numpy(), None if s_out is None else s_out.numpy()
        return x_out.numpy()

    @torch.no_grad()
    def encode(self, X, side=None) -> np.ndarray:
        check_is_fitted(self, "generator_")
        X = check_images(X, self.domain_.image_channels)
        S = check_images(side, name="side") if self.domain_.side_channels else None
        return self.generator_.encode(_as_tensor(X), None if S is None else _as_tensor(S)).numpy()


class FaceParser(BaseEstimator):
    """Per-pixel face-component labeller (background, skin, eyes, lips)."""

    def __init__(self, n_classes=4, base_channels=8, depth=3, lr=1e-3, batch_size=8,
                 n_steps=500, random_state=0):
        self.n_classes = n_classes
        self.base_channels = base_channels
        self.depth = depth
        self.lr = lr
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.random_state = random_state

    def fit(self, X, masks):
        X = check_images(X, divisible_by=2 ** self.depth)
        M = check_masks(masks, self.n_classes, X.shape[:1] + X.shape[2:])
        spec = DomainSpec(("any",), X.shape[1], 0)
        samples = [ConditionedSample(X[i], None, np.zeros(1, np.float32), mask=M[i])
                   for i in range(X.shape[0])]
        opt = OptimizerConfig(self.lr, 0.9, 0.999, batch_size=self.batch_size)
        self.net_, self.loss_curve_ = train_parser(
            SampleSet.from_samples(samples, spec), ParserSpec(self.n_classes, self.base_channels,
                                                              self.depth),
            opt, self.n_steps, self.random_state)
        return self

    @torch.no_grad()
    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_images(X, divisible_by=2 ** self.depth)
        return self.net_.posteriors(_as_tensor(X)).numpy()

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_images(X, divisible_by=2 ** self.depth)
        return predict_labels(self.net_, _as_tensor(X))

    def score(self, X, masks) -> float:
        M = check_masks(masks, self.n_classes)
        return score_labels(self.predict(X), M, self.n_classes).overall

    def freeze(self) -> FrozenParser:
        check_is_fitted(self, "net_")
        return freeze(self.net_)


class _SmallConvNet(nn.Module):
    def __init__(self, in_channels: int, n_classes: int, width: int):
        super().__init__()
        chans = [in_channels, width, width * 2, width * 4, width * 4]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 3, 2, 1), nn.BatchNorm2d(cout), nn.ReLU()]
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(chans[-1], n_classes)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))


class ExpressionClassifier(BaseEstimator, ClassifierMixin):
    """Four-layer convolutional image classifier used by the augmentation harness."""

    def __init__(self, width=8, lr=3e-3, batch_size=16, n_epochs=30, random_state=0):
        self.width = width
        self.lr = lr
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X, divisible_by=0)
        y = np.asarray(y)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} images but {y.shape[0]} labels")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        rng = np.random.default_rng(self.random_state)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.random_state)
            self.net_ = _SmallConvNet(X.shape[1], len(self.classes_), self.width)
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.lr)
        Xt, yt = _as_tensor(X), torch.from_numpy(y_idx.astype(np.int64))
        self.net_.train()
        for _ in range(self.n_epochs):
            order = rng.permutation(len(yt))
            for i in range(0, len(order), self.batch_size):
                idx = torch.from_numpy(order[i:i + self.batch_size])
                if len(idx) < 2:
                    continue
                xb = Xt[idx]
                flip = torch.from_numpy(rng.random(len(idx)) < 0.5)
                xb = torch.where(flip.view(-1, 1, 1, 1), xb.flip(-1), xb)
                loss = F.cross_entropy(self.net_(xb), yt[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        self.net_.eval()
        return self

    @torch.no_grad()
    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_images(X, divisible_by=0)
        return F.softmax(self.net_(_as_tensor(X)), dim=1).numpy()

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
