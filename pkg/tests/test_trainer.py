import dataclasses
import hashlib
import json
import math

import numpy as np
import pytest
import torch

from facesynth import checkpoint as ckpt
from facesynth.domain import ConfigError, LossWeights, OptimizerConfig
from facesynth.losses import NonFiniteLossError
from facesynth.networks import load_generator
from facesynth.parsing import freeze, train_parser
from facesynth.trainer import (POSE_NORMALIZATION, TrainConfig, Trainer, lr_at, load_state,
                               save_state)

from conftest import TINY_P


def _snapshot(module):
    return [p.detach().clone() for p in module.parameters()]


def _same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_lr_schedule_examples():
    opt = OptimizerConfig()
    assert lr_at(50, opt) == 1e-4
    assert lr_at(150, opt) == pytest.approx(5e-5, abs=1e-15)
    assert lr_at(200, opt) == 0.0
    assert lr_at(250, opt) == 0.0


def test_lr_schedule_monotone_continuous():
    opt = OptimizerConfig()
    grid = np.linspace(0, 220, 2201)
    vals = np.array([lr_at(e, opt) for e in grid])
    assert np.all(np.diff(vals) <= 1e-18)
    assert np.max(np.abs(np.diff(vals))) <= 1e-4 / 100 * 0.1 + 1e-18


def test_update_isolation(tiny_config, toy_samples):
    parser = freeze(train_parser(toy_samples, TINY_P, steps=2)[0])
    cfg = dataclasses.replace(tiny_config, weights=LossWeights())
    tr = Trainer(cfg, toy_samples, parser, seed=0)
    batch = tr.next_batch()
    g0, d0, p0 = _snapshot(tr.generator), _snapshot(tr.discriminator), _snapshot(parser.net)
    tr.discriminator_step(batch)
    assert _same(g0, _snapshot(tr.generator))
    assert not _same(d0, _snapshot(tr.discriminator))
    d1 = _snapshot(tr.discriminator)
    tr.generator_step(batch)
    assert _same(d1, _snapshot(tr.discriminator))
    assert not _same(g0, _snapshot(tr.generator))
    tr.train(3)
    assert _same(p0, _snapshot(parser.net))


def test_discriminator_step_repeatable(tiny_config, toy_samples):
    deltas = []
    for _ in range(2):
        tr = Trainer(tiny_config, toy_samples, seed=1)
        d0 = _snapshot(tr.discriminator)
        tr.discriminator_step(tr.next_batch())
        deltas.append([b - a for a, b in zip(d0, _snapshot(tr.discriminator))])
    assert _same(*deltas)


def test_critic_loss_only_when_cls_weight_zero(tiny_config, toy_samples):
    cfg = dataclasses.replace(tiny_config, weights=LossWeights(lambda_cls=0, lambda_p=0))
    tr = Trainer(cfg, toy_samples, seed=0)
    v = tr.discriminator_step(tr.next_batch())
    assert v["total_d"] == pytest.approx(v["gan_critic"] + 10 * v["gradient_penalty"], rel=1e-6)


def test_step_ratio_and_log(tiny_config, toy_samples, tmp_path):
    tr = Trainer(tiny_config, toy_samples, seed=0, out_dir=tmp_path)
    tr.train(4)
    assert tr.d_steps == 5 * tr.g_steps == 20
    rows = tr.log.rows
    assert [r["step"] for r in rows] == [1, 2, 3, 4]
    assert [r["d_steps"] for r in rows] == [5, 10, 15, 20]
    header = (tmp_path / "losses.csv").read_text().splitlines()[0].split(",")
    for col in ("cls_real", "d_loss_fake", "gradient_penalty", "d_loss_real"):
        assert col in header
    w = tiny_config.weights
    g, d = tr.report.recompute_totals(w)
    assert abs(g - tr.report.total_g) < 1e-5 and abs(d - tr.report.total_d) < 1e-5
    assert load_generator(tmp_path / "generator") is not None


def test_epoch_advances_and_lr_applied(toy_samples, tiny_config):
    opt = dataclasses.replace(tiny_config.optimizer, decay_start_epoch=1, total_epochs=3)
    tr = Trainer(dataclasses.replace(tiny_config, optimizer=opt), toy_samples, seed=0)
    for _ in range(5):
        tr.iteration()
    assert tr.epoch == 1
    assert tr.opt_g.param_groups[0]["lr"] == pytest.approx(lr_at(1, opt))


def test_same_seed_same_losses(tiny_config, toy_samples):
    a = Trainer(tiny_config, toy_samples, seed=3).train(2).report
    b = Trainer(tiny_config, toy_samples, seed=3).train(2).report
    assert a.as_dict() == b.as_dict()


def test_resume_matches_uninterrupted(tiny_config, toy_samples, tmp_path):
    full = Trainer(tiny_config, toy_samples, seed=5).train(4)
    part = Trainer(tiny_config, toy_samples, seed=5).train(2)
    save_state(part, tmp_path / "s")
    resumed = Trainer.resume(tmp_path / "s", toy_samples)
    assert resumed.g_steps == 2 and resumed.d_steps == 10
    resumed.train(4)
    for a, b in zip(full.generator.parameters(), resumed.generator.parameters()):
        assert (a - b).abs().max() <= 1e-7
    for a, b in zip(full.discriminator.parameters(), resumed.discriminator.parameters()):
        assert (a - b).abs().max() <= 1e-7


def test_save_twice_identical_bytes(tiny_config, toy_samples, tmp_path):
    tr = Trainer(tiny_config, toy_samples, seed=0).train(1)
    tr.save_state(tmp_path / "a")
    tr.save_state(tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_corrupt_checkpoint_names_missing_array(tiny_config, toy_samples, tmp_path):
    tr = Trainer(tiny_config, toy_samples, seed=0).train(1)
    tr.save_state(tmp_path / "s")
    manifest = json.loads((tmp_path / "s" / ckpt.MANIFEST).read_text())
    victim = manifest["arrays"][3]
    (tmp_path / "s" / victim["file"]).unlink()
    with pytest.raises(ckpt.CheckpointError, match=victim["name"]):
        load_state(Trainer(tiny_config, toy_samples, seed=0), tmp_path / "s")
    (tmp_path / "s" / ckpt.MANIFEST).write_text("{not json")
    with pytest.raises(ckpt.CheckpointError):
        load_state(Trainer(tiny_config, toy_samples, seed=0), tmp_path / "s")


def test_resume_config_mismatch_rejected(tiny_config, toy_samples, tmp_path):
    Trainer(tiny_config, toy_samples, seed=0).save_state(tmp_path / "s")
    other = dataclasses.replace(tiny_config, weights=LossWeights(lambda_bi=5, lambda_p=0))
    with pytest.raises(ckpt.CheckpointError, match="lambda_bi"):
        Trainer(other, toy_samples, seed=0).load_state(tmp_path / "s")


def test_non_finite_loss_aborts_with_snapshot(tiny_config, toy_samples, tmp_path):
    tr = Trainer(tiny_config, toy_samples, seed=0, out_dir=tmp_path)
    with torch.no_grad():
        next(tr.discriminator.parameters()).fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as info:
        tr.discriminator_step(tr.next_batch())
    assert info.value.component in {"gan_critic", "gradient_penalty gradient", "cls_real",
                                    "total_d", "d_loss_real", "d_loss_fake", "gradient_penalty"}
    assert (tmp_path / "diverged" / ckpt.MANIFEST).exists()


def test_parser_required_when_weighted(tiny_config, toy_samples):
    with pytest.raises(ConfigError):
        Trainer(dataclasses.replace(tiny_config, weights=LossWeights()), toy_samples)


def test_config_file_round_trip(tiny_config, tmp_path):
    tiny_config.save(tmp_path / "c.yaml")
    again = TrainConfig.load(tmp_path / "c.yaml")
    assert again == tiny_config
    over = TrainConfig.load(tmp_path / "c.yaml", {"lambda_bi": 3.0, "base_lr": None})
    assert over.weights.lambda_bi == 3.0 and over.optimizer.base_lr == 1e-4
    (tmp_path / "bad.yaml").write_text("attributes: [a]\nwat: 1\n")
    with pytest.raises(ConfigError, match="wat"):
        TrainConfig.load(tmp_path / "bad.yaml")


def test_pose_mode_single_image_critic(tmp_path):
    from facesynth.data import SampleSet, generate_toy_pose_dataset, read_manifest, toy_domain
    from conftest import CONSTANT_LR, TINY_D, TINY_G
    generate_toy_pose_dataset(4, 2, 64, 0, tmp_path)
    spec = toy_domain(2, side_channels=3)
    samples = SampleSet(read_manifest(tmp_path), spec, (64, 64))
    cfg = TrainConfig(spec, TINY_G, TINY_D, CONSTANT_LR, LossWeights(lambda_p=0), TINY_P,
                      image_size=64, mode=POSE_NORMALIZATION, checkpoint_every=0)
    tr = Trainer(cfg, samples, seed=0).train(1)
    assert tr.discriminator.in_channels == 3 and not tr.discriminator.paired
    assert math.isfinite(tr.report.total_g)
    with pytest.raises(ConfigError):
        TrainConfig(toy_domain(2), mode=POSE_NORMALIZATION)
