import numpy as np
import pytest
import torch

from facesynth.data import ConditionedSample, SampleSet
from facesynth.domain import DomainSpec
from facesynth.losses import parsing_loss
from facesynth.networks import ParserSpec, build_parser, load_parser, save_parser
from facesynth.parsing import (FrozenParser, evaluate_parser, freeze, predict_labels,
                               score_labels, train_parser)

from helpers import window_violations

SPEC = ParserSpec(4, 8, 3)


def test_seeded_rerun_identical_curve(toy_samples):
    _, a = train_parser(toy_samples, SPEC, steps=5, seed=2)
    _, b = train_parser(toy_samples, SPEC, steps=5, seed=2)
    assert a == b and len(a) == 5


def test_zero_steps_checkpoint_loadable(toy_samples, tmp_path):
    net, losses = train_parser(toy_samples, SPEC, steps=0)
    assert losses == []
    save_parser(tmp_path / "p", net)
    post = load_parser(tmp_path / "p").posteriors(torch.from_numpy(toy_samples[0].image[None]))
    mean = post.mean(dim=(0, 2, 3))
    assert torch.all(mean > 0.05) and torch.all(mean < 0.5)


def test_out_of_range_mask_rejected():
    spec = DomainSpec(("x",), 3, 0)
    mask = np.full((16, 16), 4, dtype=np.int64)
    s = ConditionedSample(np.zeros((3, 16, 16), np.float32), None, np.zeros(1, np.float32),
                          mask=mask)
    with pytest.raises(ValueError, match="out of range"):
        train_parser(SampleSet.from_samples([s], spec), SPEC, steps=1)


def test_score_perfect_and_constant(toy_samples):
    truth = toy_samples.masks(range(len(toy_samples)))
    perfect = score_labels(truth, truth, 4)
    assert perfect.overall == 1.0 and np.all(perfect.per_class == 1.0)
    const = score_labels(np.zeros_like(truth), truth, 4)
    assert const.overall == pytest.approx((truth == 0).mean())
    assert const.per_class[0] == 1.0 and np.all(const.per_class[1:] == 0.0)


def test_empty_dataset_is_an_error():
    with pytest.raises(ValueError):
        score_labels(np.zeros(0), np.zeros(0), 4)
    with pytest.raises(ValueError):
        evaluate_parser(build_parser(SPEC), _empty_set())


def _empty_set():
    s = SampleSet.__new__(SampleSet)
    s.manifest, s._cache = None, {}
    return s


def test_freeze_blocks_parameter_gradients():
    net = build_parser(SPEC, seed=1)
    frozen = freeze(net)
    before = [p.clone() for p in frozen.parameters()]
    x = torch.rand(1, 3, 32, 32, requires_grad=True)
    loss = parsing_loss(frozen.posteriors(x.detach()), frozen.posteriors(x * 0.5))
    loss.backward()
    assert x.grad is not None and x.grad.abs().sum() > 0
    assert all(p.grad is None and not p.requires_grad for p in frozen.parameters())
    assert all(torch.equal(a, b) for a, b in zip(before, frozen.parameters()))


def test_two_freezes_identical(tmp_path):
    save_parser(tmp_path / "p", build_parser(SPEC, seed=3))
    a, b = freeze(tmp_path / "p"), freeze(tmp_path / "p")
    x = torch.rand(2, 3, 32, 32)
    assert torch.equal(a(x), b(x)) and torch.equal(a(x), a(x))
    assert isinstance(a, FrozenParser)


def test_predict_labels_shape():
    labels = predict_labels(build_parser(SPEC), torch.rand(3, 3, 16, 16), batch_size=2)
    assert labels.shape == (3, 16, 16) and labels.max() < 4


def test_cross_entropy_falls_over_windows(toy_samples):
    _, losses = train_parser(toy_samples, ParserSpec(4, 8, 3), steps=500, seed=0)
    bad, total = window_violations(losses)
    assert bad <= 0.05 * total
