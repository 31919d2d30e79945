import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from facesynth.data import SampleSet, generate_toy_dataset, read_manifest, toy_domain  # noqa: E402
from facesynth.domain import DomainSpec, LossWeights, OptimizerConfig  # noqa: E402
from facesynth.networks import DiscriminatorSpec, GeneratorSpec, ParserSpec  # noqa: E402
from facesynth.trainer import TrainConfig  # noqa: E402

TINY_G = GeneratorSpec(base_channels=8, max_channels=32, latent_channels=16, n_residual=1)
TINY_D = DiscriminatorSpec(base_channels=8, max_channels=64, n_layers=4, image_size=64)
TINY_P = ParserSpec(n_classes=4, base_channels=8, depth=3)
CONSTANT_LR = OptimizerConfig(decay_start_epoch=10 ** 6, total_epochs=10 ** 6 + 1, batch_size=4)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    generate_toy_dataset(16, 2, 64, 7, root, "train")
    generate_toy_dataset(16, 2, 64, 8, root, "test")
    return root


@pytest.fixture(scope="session")
def toy_spec():
    return toy_domain(2)


@pytest.fixture(scope="session")
def toy_samples(toy_dir, toy_spec):
    return SampleSet(read_manifest(toy_dir, "train"), toy_spec, (64, 64))


@pytest.fixture
def tiny_config(toy_spec):
    return TrainConfig(toy_spec, TINY_G, TINY_D, CONSTANT_LR,
                       LossWeights(lambda_p=0.0), TINY_P, image_size=64, checkpoint_every=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
