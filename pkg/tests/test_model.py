import math

import numpy as np
import pytest
import torch

from oracles import central_difference_grads, mc_kl
from thermad.model import (
    DEFAULT_VARIANTS,
    LOG_SQRT_2PI,
    Architecture,
    CheckpointError,
    LatentGaussian,
    ModelVariant,
    build_model,
    gaussian_log_likelihood,
    kl_divergence,
    load_checkpoint,
    reconstruction_probability,
    reparameterize,
    save_checkpoint,
    step_losses,
    total_loss,
)

TINY = Architecture(frame_shape=(8, 8), channels=(2, 2, 2), hidden=4)
SMALL = Architecture(frame_shape=(16, 16), channels=(4, 4, 8), hidden=8)


def _batch(arch, b=2, t=4, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    h, w = arch.frame_shape
    return (
        torch.rand(b, t, h, w, generator=g, dtype=dtype),
        torch.rand(b, 2, h, w, generator=g, dtype=dtype),
        torch.rand(b, 8, generator=g, dtype=dtype),
    )


@pytest.mark.parametrize("name", list(DEFAULT_VARIANTS))
def test_shapes_and_heads(name):
    variant = DEFAULT_VARIANTS[name]
    model = build_model(variant, SMALL, seed=1)
    frames, cmap, cvec = _batch(SMALL, t=10, dtype=torch.float32)
    out = model(frames, cmap, cvec)
    assert out.latent.mean.shape == (2, 10, 8)
    assert (out.latent.log_variance is None) == (name == "AE")
    assert out.reconstruction.mean.shape == (2, 10, 16, 16)
    assert (out.reconstruction.log_variance is not None) == (name == "PCVAE")
    assert 0 <= out.reconstruction.mean.min() and out.reconstruction.mean.max() <= 1


def test_encode_is_pure_and_order_sensitive():
    model = build_model(DEFAULT_VARIANTS["CVAE"], SMALL, seed=2)
    frames, cmap, _ = _batch(SMALL, b=1, t=10, dtype=torch.float32)
    a = model.encode(frames, cmap)
    b = model.encode(frames.clone(), cmap.clone())
    assert torch.equal(a.mean, b.mean) and torch.equal(a.log_variance, b.log_variance)
    flipped = model.encode(frames.flip(1), cmap)
    assert not torch.allclose(flipped.mean.flip(1), a.mean)


def test_state_does_not_leak_between_windows():
    model = build_model(DEFAULT_VARIANTS["CVAE"], SMALL, seed=2)
    frames, cmap, _ = _batch(SMALL, b=2, t=10, dtype=torch.float32)
    joint = model.encode(frames, cmap).mean
    alone = model.encode(frames[1:], cmap[1:]).mean
    torch.testing.assert_close(joint[1:], alone)


def test_decode_is_pure():
    model = build_model(DEFAULT_VARIANTS["PCVAE"], SMALL, seed=3)
    z = torch.randn(2, 5, 8)
    cvec = torch.rand(2, 8)
    a, b = model.decode(z, cvec), model.decode(z, cvec)
    assert torch.equal(a.mean, b.mean) and torch.equal(a.log_variance, b.log_variance)


def test_frame_shape_mismatch():
    model = build_model(DEFAULT_VARIANTS["AE"], SMALL)
    frames, cmap, _ = _batch(TINY, dtype=torch.float32)
    with pytest.raises(ValueError):
        model.encode(frames, cmap)


def test_reparameterize_floor_and_ae():
    mean = torch.randn(3, 8, dtype=torch.float64)
    eps = torch.randn(3, 8, dtype=torch.float64)
    z = reparameterize(LatentGaussian(mean, torch.full_like(mean, -10.0)), eps)
    assert torch.all((z - mean).abs() <= 0.007 * eps.abs())
    assert reparameterize(LatentGaussian(mean, None), eps) is mean


def test_reparameterize_sample_mean():
    g = torch.Generator().manual_seed(0)
    mean = torch.tensor([0.5, -1.0], dtype=torch.float64)
    lv = torch.tensor([0.0, math.log(4.0)], dtype=torch.float64)
    eps = torch.randn(10_000, 2, generator=g, dtype=torch.float64)
    z = reparameterize(LatentGaussian(mean.expand(10_000, 2), lv.expand(10_000, 2)), eps)
    sigma = torch.exp(0.5 * lv)
    assert torch.all((z.mean(0) - mean).abs() < 4 * sigma / 100)


def test_kl_closed_form_values():
    zeros = torch.zeros(1, 8, dtype=torch.float64)
    assert kl_divergence(LatentGaussian(zeros, zeros)).item() == 0.0
    one = zeros.clone()
    one[0, 3] = 1.0
    assert kl_divergence(LatentGaussian(one, zeros)).item() == pytest.approx(0.5)
    assert kl_divergence(LatentGaussian(one, None)).item() == 0.0


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(11)
    for _ in range(5):
        mean = rng.normal(0, 1, 8)
        lv = rng.uniform(-2, 1, 8)
        closed = kl_divergence(LatentGaussian(torch.tensor(mean), torch.tensor(lv))).item()
        assert abs(closed - mc_kl(mean, lv, 100_000, rng)) < 0.01


def test_kl_non_negative():
    g = torch.Generator().manual_seed(5)
    mean = torch.randn(500, 8, generator=g, dtype=torch.float64) * 2
    lv = torch.randn(500, 8, generator=g, dtype=torch.float64) * 3
    assert torch.all(kl_divergence(LatentGaussian(mean, lv)) >= 0)


def test_gaussian_log_likelihood_values():
    x = torch.zeros(1, 2, 2, dtype=torch.float64)
    assert gaussian_log_likelihood(x, x, sigma=1.0).item() / 4 == pytest.approx(-0.918939, abs=1e-6)
    assert gaussian_log_likelihood(x, x + 1, sigma=1.0).item() / 4 == pytest.approx(-1.418939, abs=1e-6)
    assert gaussian_log_likelihood(x, x, sigma=0.01).item() / 4 == pytest.approx(3.686, abs=1e-3)
    lv = torch.full_like(x, math.log(0.01**2))
    assert gaussian_log_likelihood(x, x, log_variance=lv).item() == pytest.approx(
        gaussian_log_likelihood(x, x, sigma=0.01).item())
    with pytest.raises(ValueError):
        gaussian_log_likelihood(x, x, sigma=0.0)


def test_beta_loss_arithmetic():
    variant = ModelVariant("b", "BetaCVAE", 1e-4)
    x = torch.zeros(1, 1, 1, 2, dtype=torch.float64)
    x_hat = torch.tensor([[[[0.1, 0.1]]]], dtype=torch.float64)  # squared error 0.02
    zero = torch.zeros(1, 1, 8, dtype=torch.float64)
    from thermad.model import ForwardOutput, Reconstruction
    out = ForwardOutput(LatentGaussian(zero, zero), zero, Reconstruction(x_hat))
    assert total_loss(variant, x, out).item() == pytest.approx(100.0)
    ae_out = ForwardOutput(LatentGaussian(zero, None), zero, Reconstruction(x.clone()))
    assert total_loss(DEFAULT_VARIANTS["AE"], x, ae_out).item() == 0.0
    with pytest.raises(ValueError):
        total_loss(DEFAULT_VARIANTS["PCVAE"], x, out)


def _rel_err(a, b):
    a, b = torch.cat([t.flatten() for t in a]), torch.cat([t.flatten() for t in b])
    return ((a - b).abs() / torch.clamp(torch.maximum(a.abs(), b.abs()), min=1e-6)).max().item()


@pytest.mark.parametrize("name", ["CVAE", "0.01CVAE"])
def test_gradient_matches_finite_differences_quick(name):
    model = build_model(DEFAULT_VARIANTS[name], TINY, seed=4, dtype=torch.float64)
    frames, cmap, cvec = _batch(TINY, b=1, t=3)
    eps = torch.randn(1, 3, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    params = [model.seed_layer.weight, model.mean_head.weight]

    def loss():
        return total_loss(model.variant, frames, model(frames, cmap, cvec, eps=eps))

    model.zero_grad()
    loss().backward()
    assert _rel_err([p.grad for p in params], central_difference_grads(loss, params)) < 1e-3


def test_reconstruction_probability_single_sample_matches_direct():
    model = build_model(DEFAULT_VARIANTS["PCVAE"], TINY, seed=6, dtype=torch.float64)
    frames, cmap, cvec = _batch(TINY)
    rp = reconstruction_probability(model, frames, cmap, cvec, 1, torch.Generator().manual_seed(3))
    eps = torch.randn((2, 4, 8), generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    with torch.no_grad():
        rec = model(frames, cmap, cvec, eps=eps).reconstruction
    direct = gaussian_log_likelihood(frames, rec.mean, log_variance=rec.log_variance)
    torch.testing.assert_close(rp, direct)


def test_reconstruction_probability_variance_shrinks_with_samples():
    model = build_model(DEFAULT_VARIANTS["PCVAE"], TINY, seed=6, dtype=torch.float64)
    frames, cmap, cvec = _batch(TINY, b=1, t=2)
    g = torch.Generator().manual_seed(0)
    one = torch.stack([reconstruction_probability(model, frames, cmap, cvec, 1, g) for _ in range(40)])
    many = torch.stack([reconstruction_probability(model, frames, cmap, cvec, 100, g) for _ in range(40)])
    assert torch.all(many.var(0) < one.var(0))


def test_reconstruction_probability_bounds():
    model = build_model(DEFAULT_VARIANTS["PCVAE"], TINY, seed=7, dtype=torch.float64)
    with torch.no_grad():
        model.logvar_out.bias.fill_(50.0)  # drive the head into the upper clamp
    frames, cmap, cvec = _batch(TINY, b=1, t=2)
    n = frames.shape[-1] * frames.shape[-2]
    rp = reconstruction_probability(model, frames, cmap, cvec, 3)
    upper = n * (5.0 - LOG_SQRT_2PI)
    lower = n * (-(1.0**2) * math.exp(10) / 2 - 5.0 - LOG_SQRT_2PI)
    assert torch.all(rp <= upper) and torch.all(rp >= lower)


def test_reconstruction_probability_requires_variance_head():
    model = build_model(DEFAULT_VARIANTS["CVAE"], TINY)
    with pytest.raises(ValueError):
        reconstruction_probability(model, *_batch(TINY, dtype=torch.float32))


def test_step_losses_shape():
    model = build_model(DEFAULT_VARIANTS["PCVAE"], TINY, dtype=torch.float64)
    frames, cmap, cvec = _batch(TINY, b=3, t=5)
    assert step_losses(model.variant, frames, model(frames, cmap, cvec)).shape == (3, 5)


def test_checkpoint_round_trip(tmp_path):
    model = build_model(DEFAULT_VARIANTS["0.01CVAE"], SMALL, seed=9)
    save_checkpoint(model, tmp_path / "m.ckpt", {"best_epoch": 3})
    back, meta = load_checkpoint(tmp_path / "m.ckpt", DEFAULT_VARIANTS["0.01CVAE"], SMALL)
    for (k, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert a.dtype == b.dtype and torch.equal(a, b), k
    assert meta["variant"]["beta"] == 1e-4 and meta["extra"]["best_epoch"] == 3


def test_checkpoint_mismatches(tmp_path):
    model = build_model(DEFAULT_VARIANTS["CVAE"], SMALL)
    save_checkpoint(model, tmp_path / "m.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckpt", DEFAULT_VARIANTS["AE"])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckpt", expected_arch=Architecture((16, 16), (4, 4, 8), hidden=16))
    data = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")


def test_variant_rejects_nonpositive_beta():
    with pytest.raises(ValueError):
        ModelVariant("x", "BetaCVAE", 0.0)
