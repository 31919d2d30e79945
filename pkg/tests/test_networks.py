import numpy as np
import pytest
import torch

from facesynth import checkpoint as ckpt
from facesynth.domain import ConfigError, DomainSpec
from facesynth.networks import (DiscriminatorSpec, GeneratorSpec, ParserSpec, ShapeError,
                                build_discriminator, build_generator, build_parser, decode,
                                discriminate, encode, load_generator, load_parser, parse,
                                save_generator, save_parser)

from conftest import TINY_G

DOMAIN8 = DomainSpec(tuple(f"a{i}" for i in range(8)), 3, 1)
DOMAIN2 = DomainSpec(("sad", "happy"), 3, 1, groups=(("sad", "happy"),))


def _params(module):
    return [p.detach().clone() for p in module.parameters()]


def test_seeded_build_bitwise_identical():
    a = build_generator(GeneratorSpec(), DOMAIN8, seed=1)
    b = build_generator(GeneratorSpec(), DOMAIN8, seed=1)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    c = build_generator(GeneratorSpec(), DOMAIN8, seed=2)
    assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


def test_build_does_not_touch_global_rng():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    build_generator(TINY_G, DOMAIN2, seed=5)
    assert torch.equal(torch.rand(3), expected)


def test_default_layout():
    g = build_generator(GeneratorSpec(), DOMAIN8)
    convs = [m for m in g.encoder.modules() if isinstance(m, torch.nn.Conv2d)]
    assert len(convs) == 5
    assert convs[0].kernel_size == (7, 7) and convs[0].stride == (1, 1)
    assert all(c.stride == (2, 2) for c in convs[1:])
    assert len(g.decoder.residual) == 6 and len(g.decoder.up) == 4
    assert g.encoder.in_channels == 4
    assert g.decoder.entry[0].in_channels == 256 + 8
    assert not any(isinstance(m, torch.nn.ConvTranspose2d) for m in g.modules())


def test_init_statistics():
    g = build_generator(GeneratorSpec(), DOMAIN8)
    w = torch.cat([m.weight.flatten() for m in g.modules() if isinstance(m, torch.nn.Conv2d)])
    assert abs(w.mean().item()) < 1e-3
    assert abs(w.std().item() - 0.02) < 1e-3


@pytest.mark.parametrize("size", [64, 128])
def test_shape_suite(size):
    torch.manual_seed(0)
    g = build_generator(GeneratorSpec(), DOMAIN8).eval()
    d = build_discriminator(DiscriminatorSpec(image_size=size), DOMAIN8)
    p = build_parser(ParserSpec())
    x = torch.rand(2, 3, size, size) * 2 - 1
    s = torch.rand(2, 1, size, size) * 2 - 1
    y = torch.zeros(2, 8)
    y[:, 1] = 1
    with torch.no_grad():
        z = encode(g, x, s)
        assert z.shape == (2, 256, size // 16, size // 16)
        xo, so = decode(g, z, y)
        assert xo.shape == x.shape and so.shape == s.shape
        assert xo.abs().max() <= 1 and so.abs().max() <= 1
        src, cls = discriminate(d, x, s)
        assert src.shape == (2, 1, size // 64, size // 64)
        assert cls.shape == (2, 8)
        post = parse(p, x)
        assert post.shape == (2, 4, size, size)
        assert torch.allclose(post.sum(1), torch.ones(2, size, size), atol=1e-6)


def test_batch_doubling_doubles_outputs():
    d = build_discriminator(DiscriminatorSpec(16, 64, 4, 64), DOMAIN2)
    src, cls = d(torch.zeros(4, 3, 64, 64), torch.zeros(4, 1, 64, 64))
    assert src.shape[0] == 4 and cls.shape[0] == 4


def test_encode_is_deterministic_in_inference():
    g = build_generator(TINY_G, DOMAIN2).eval()
    x, s = torch.rand(1, 3, 64, 64), torch.rand(1, 1, 64, 64)
    with torch.no_grad():
        assert torch.equal(g.encode(x, s), g.encode(x, s))


def test_shape_errors_name_expected_and_actual():
    g = build_generator(TINY_G, DOMAIN2)
    with pytest.raises(ShapeError, match="127x128"):
        g.encode(torch.zeros(1, 3, 127, 128), torch.zeros(1, 1, 127, 128))
    with pytest.raises(ShapeError, match="expected 3 channels, got 4"):
        g.encode(torch.zeros(1, 4, 64, 64), torch.zeros(1, 1, 64, 64))
    with pytest.raises(ShapeError):
        g.encode(torch.zeros(1, 3, 64, 64))
    with pytest.raises(ShapeError):
        g.decode(torch.zeros(1, 16, 4, 4), torch.zeros(1, 3))
    with pytest.raises(ShapeError):
        g.decode(torch.zeros(1, 15, 4, 4), torch.zeros(1, 2))
    d = build_discriminator(DiscriminatorSpec(8, 64, 4, 64), DOMAIN2)
    with pytest.raises(ShapeError):
        d(torch.zeros(1, 3, 32, 32), torch.zeros(1, 1, 32, 32))


def test_inconsistent_channels_rejected():
    with pytest.raises(ConfigError):
        build_discriminator(DiscriminatorSpec(input_channels=3), DOMAIN8)
    with pytest.raises(ConfigError):
        GeneratorSpec(n_downsample=3, n_upsample=3)
    with pytest.raises(ConfigError):
        DiscriminatorSpec(n_layers=2)


def test_single_image_critic():
    d = build_discriminator(DiscriminatorSpec(8, 64, 4, 64), DOMAIN2, paired=False)
    assert d.in_channels == 3
    src, _ = d(torch.zeros(1, 3, 64, 64))
    assert src.shape == (1, 1, 4, 4)


def test_critic_is_local():
    d = build_discriminator(DiscriminatorSpec(8, 64, 3, 64), DOMAIN2, seed=3)
    x = torch.rand(1, 3, 64, 64)
    s = torch.rand(1, 1, 64, 64)
    x2 = x.clone()
    x2[..., :4, :4] += 1.0
    with torch.no_grad():
        a, _ = d(x, s)
        b, _ = d(x2, s)
    assert a.shape[-1] == 8
    assert not torch.equal(a[..., 0, 0], b[..., 0, 0])
    assert torch.equal(a[..., 4:, 4:], b[..., 4:, 4:])


def test_parser_zero_head_is_uniform():
    p = build_parser(ParserSpec())
    torch.nn.init.zeros_(p.head.weight)
    torch.nn.init.zeros_(p.head.bias)
    post = p.posteriors(torch.rand(1, 3, 32, 32))
    assert torch.allclose(post, torch.full_like(post, 0.25))


def test_generator_checkpoint_round_trip(tmp_path):
    g = build_generator(TINY_G, DOMAIN2, seed=4)
    save_generator(tmp_path / "g", g, seed=4)
    h = load_generator(tmp_path / "g")
    assert all(torch.equal(p, q) for p, q in zip(g.parameters(), h.parameters()))
    manifest = ckpt.read_manifest(tmp_path / "g")
    assert manifest["seed"] == 4
    first = manifest["arrays"][0]
    assert set(first) >= {"name", "shape", "offset", "file"}
    raw = np.fromfile(tmp_path / "g" / first["file"], dtype="<f4")
    assert raw.size == int(np.prod(first["shape"]))


def test_checkpoint_shape_validation(tmp_path):
    g = build_generator(TINY_G, DOMAIN2)
    save_generator(tmp_path / "g", g)
    m = ckpt.read_manifest(tmp_path / "g")
    m["arrays"][0]["shape"] = [1, 2, 3]
    (tmp_path / "g" / ckpt.MANIFEST).write_text(__import__("json").dumps(m))
    with pytest.raises(ckpt.CheckpointError):
        load_generator(tmp_path / "g")


def test_parser_checkpoint_round_trip(tmp_path):
    p = build_parser(ParserSpec(4, 8, 2), seed=1)
    save_parser(tmp_path / "p", p)
    q = load_parser(tmp_path / "p")
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(p(x), q(x))
    with pytest.raises(ckpt.CheckpointError):
        load_generator(tmp_path / "p")
    with pytest.raises(ckpt.CheckpointNotFound):
        load_parser(tmp_path / "nothing")


def test_attributes_reach_decoder_output_at_init():
    g = build_generator(TINY_G, DOMAIN2, seed=0).eval()
    z = torch.randn(2, 16, 4, 4, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        a, _ = g.decode(z, torch.tensor([[1.0, 0.0]] * 2))
        b, _ = g.decode(z, torch.tensor([[0.0, 1.0]] * 2))
    assert (a - b).abs().mean() > 1e-3
