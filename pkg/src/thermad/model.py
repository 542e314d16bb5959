"""Conditional CNN-LSTM encoder-decoder in four flavours: AE, CVAE, 0.01CVAE, PCVAE.

Each time step's frame is stacked with the two-channel condition map, run
through a strided conv stack and fed to an LSTM whose state lives for one
window.  Linear heads give the per-step posterior; the decoder sees the
latent sample concatenated with the 8-entry condition vector.
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
CHECKPOINT_VERSION = 1

KINDS = ("AE", "CVAE", "BetaCVAE", "PCVAE")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelVariant:
    name: str
    kind: str
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind in ("CVAE", "BetaCVAE") and not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")

    @property
    def stochastic(self):
        return self.kind != "AE"

    @property
    def learns_noise(self):
        return self.kind == "PCVAE"


DEFAULT_VARIANTS = {
    "PCVAE": ModelVariant("PCVAE", "PCVAE"),
    "CVAE": ModelVariant("CVAE", "CVAE", 1.0),
    "0.01CVAE": ModelVariant("0.01CVAE", "BetaCVAE", 1e-4),
    "AE": ModelVariant("AE", "AE"),
}


@dataclass(frozen=True)
class Architecture:
    frame_shape: tuple = (32, 32)
    channels: tuple = (16, 32, 64)
    kernel: int = 3
    hidden: int = 128
    latent: int = 8
    condition_dim: int = 8
    condition_channels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "frame_shape", tuple(self.frame_shape))
        object.__setattr__(self, "channels", tuple(self.channels))
        scale = 2 ** len(self.channels)
        h, w = self.frame_shape
        if h % scale or w % scale:
            raise ValueError(f"frame shape {self.frame_shape} must be divisible by {scale}")

    @property
    def bottleneck(self):
        scale = 2 ** len(self.channels)
        return self.frame_shape[0] // scale, self.frame_shape[1] // scale


@dataclass
class LatentGaussian:
    mean: torch.Tensor  # (B, T, latent)
    log_variance: torch.Tensor | None  # None for AE


@dataclass
class Reconstruction:
    mean: torch.Tensor  # (B, T, H, W)
    log_variance: torch.Tensor | None = None


@dataclass
class ForwardOutput:
    latent: LatentGaussian
    z: torch.Tensor
    reconstruction: Reconstruction = field(repr=False)


class EncoderDecoder(nn.Module):
    def __init__(self, variant, arch=None):
        super().__init__()
        self.variant = variant
        self.arch = arch = arch or Architecture()
        pad = arch.kernel // 2

        layers, c_in = [], 1 + arch.condition_channels
        for c in arch.channels:
            layers += [nn.Conv2d(c_in, c, arch.kernel, stride=2, padding=pad), nn.ReLU()]
            c_in = c
        self.conv = nn.Sequential(*layers)
        bh, bw = arch.bottleneck
        n_feat = arch.channels[-1] * bh * bw
        self.lstm = nn.LSTM(n_feat, arch.hidden, batch_first=True)
        self.mean_head = nn.Linear(arch.hidden, arch.latent)
        self.logvar_head = nn.Linear(arch.hidden, arch.latent) if variant.stochastic else None

        self.seed_layer = nn.Linear(arch.latent + arch.condition_dim, n_feat)
        rev = arch.channels[::-1]
        up = []
        for c_a, c_b in zip(rev[:-1], rev[1:]):
            up += [nn.ReLU(), nn.ConvTranspose2d(c_a, c_b, arch.kernel, 2, pad, output_padding=1)]
        up.append(nn.ReLU())
        self.upsample = nn.Sequential(*up)
        self.mean_out = nn.ConvTranspose2d(rev[-1], 1, arch.kernel, 2, pad, output_padding=1)
        self.logvar_out = (
            nn.ConvTranspose2d(rev[-1], 1, arch.kernel, 2, pad, output_padding=1)
            if variant.learns_noise else None
        )

    def encode(self, frames, condition_map):
        """frames (B,T,H,W), condition_map (B,2,H,W) -> per-step LatentGaussian."""
        b, t, h, w = frames.shape
        if (h, w) != self.arch.frame_shape or condition_map.shape[-2:] != (h, w):
            raise ValueError(f"expected frames of {self.arch.frame_shape}, got {(h, w)}")
        cmap = condition_map[:, None].expand(b, t, *condition_map.shape[1:])
        x = torch.cat([frames[:, :, None], cmap], dim=2).reshape(b * t, -1, h, w)
        feats = self.conv(x).reshape(b, t, -1)
        hidden, _ = self.lstm(feats)
        mean = self.mean_head(hidden)
        logvar = None
        if self.logvar_head is not None:
            logvar = self.logvar_head(hidden).clamp(LOGVAR_MIN, LOGVAR_MAX)
        return LatentGaussian(mean, logvar)

    def decode(self, z, condition_vector):
        """z (B,T,latent), condition_vector (B,8) -> Reconstruction with (B,T,H,W) fields."""
        b, t, _ = z.shape
        cvec = condition_vector[:, None].expand(b, t, condition_vector.shape[-1])
        seed = self.seed_layer(torch.cat([z, cvec], dim=-1))
        bh, bw = self.arch.bottleneck
        trunk = self.upsample(seed.reshape(b * t, self.arch.channels[-1], bh, bw))
        h, w = self.arch.frame_shape
        mean = torch.sigmoid(self.mean_out(trunk)).reshape(b, t, h, w)
        logvar = None
        if self.logvar_out is not None:
            logvar = self.logvar_out(trunk).reshape(b, t, h, w).clamp(LOGVAR_MIN, LOGVAR_MAX)
        return Reconstruction(mean, logvar)

    def forward(self, frames, condition_map, condition_vector, eps=None, sample=True):
        """One pass; ``eps`` fixes the reparameterisation noise, ``sample=False`` uses z = mean."""
        latent = self.encode(frames, condition_map)
        if sample and self.variant.stochastic:
            if eps is None:
                eps = torch.randn_like(latent.mean)
            z = reparameterize(latent, eps)
        else:
            z = latent.mean
        return ForwardOutput(latent, z, self.decode(z, condition_vector))


def reparameterize(latent, eps):
    if latent.log_variance is None:
        return latent.mean
    return latent.mean + torch.exp(0.5 * latent.log_variance) * eps


def kl_divergence(latent):
    """KL(q || N(0, I)) summed over latent coordinates, one value per time step."""
    if latent.log_variance is None:
        return torch.zeros(latent.mean.shape[:-1], dtype=latent.mean.dtype)
    mu, lv = latent.mean, latent.log_variance
    return 0.5 * (mu**2 + torch.exp(lv) - 1.0 - lv).sum(-1)


def gaussian_log_likelihood(x, mean, sigma=None, log_variance=None):
    """Diagonal Gaussian log-density summed over the last two (pixel) axes.

    Pass either a constant ``sigma`` or a per-pixel ``log_variance``.
    """
    if log_variance is not None:
        log_sigma = 0.5 * log_variance
        inv_var = torch.exp(-log_variance)
    else:
        if sigma is None or not sigma > 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        log_sigma = math.log(sigma)
        inv_var = 1.0 / sigma**2
    per_pixel = -0.5 * (x - mean) ** 2 * inv_var - log_sigma - LOG_SQRT_2PI
    if not torch.is_tensor(per_pixel):
        per_pixel = torch.as_tensor(per_pixel)
    return per_pixel.sum((-2, -1))


def step_losses(variant, x, out):
    """Loss per window and time step, shape (B, T)."""
    rec = out.reconstruction
    if variant.learns_noise != (rec.log_variance is not None):
        raise ValueError(f"{variant.name}: output heads do not match the variant")
    sse = ((x - rec.mean) ** 2).sum((-2, -1))
    if variant.kind == "AE":
        return sse
    kl = kl_divergence(out.latent)
    if variant.kind == "PCVAE":
        return -gaussian_log_likelihood(x, rec.mean, log_variance=rec.log_variance) + kl
    return sse / (2.0 * variant.beta) + kl


def total_loss(variant, x, out):
    """Time-step mean of the per-step loss, averaged over the batch."""
    return step_losses(variant, x, out).mean()


@torch.no_grad()
def reconstruction_probability(model, frames, condition_map, condition_vector, n_samples=10, generator=None):
    """Monte-Carlo mean of log p(x|z) over ``n_samples`` posterior draws, shape (B, T)."""
    if not model.variant.learns_noise:
        raise ValueError(f"{model.variant.name} has no observation-variance head")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    latent = model.encode(frames, condition_map)
    acc = torch.zeros(frames.shape[:2], dtype=frames.dtype)
    for _ in range(n_samples):
        eps = torch.randn(latent.mean.shape, generator=generator, dtype=latent.mean.dtype)
        rec = model.decode(reparameterize(latent, eps), condition_vector)
        acc += gaussian_log_likelihood(frames, rec.mean, log_variance=rec.log_variance)
    return acc / n_samples


@torch.no_grad()
def reconstruct(model, frames, condition_map, condition_vector):
    """Deterministic reconstruction through the posterior mean."""
    return model(frames, condition_map, condition_vector, sample=False).reconstruction


def build_model(variant, arch=None, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return EncoderDecoder(variant, arch).to(dtype)


def save_checkpoint(model, path, extra=None):
    """npz container: a JSON ``__meta__`` entry plus one float array per parameter name."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "variant": asdict(model.variant),
        "architecture": asdict(model.arch),
        "extra": extra or {},
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path):
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            arrays = {k: data[k] for k in data.files if k != "__meta__"}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, EOFError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return meta, arrays


def load_checkpoint(path, expected_variant=None, expected_arch=None):
    meta, arrays = read_checkpoint(path)
    variant = ModelVariant(**meta["variant"])
    arch = Architecture(**meta["architecture"])
    if expected_variant is not None and variant != expected_variant:
        raise CheckpointError(f"{path}: checkpoint holds {variant}, requested {expected_variant}")
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointError(f"{path}: architecture {arch} differs from requested {expected_arch}")
    dtype = torch.from_numpy(next(iter(arrays.values()))).dtype if arrays else torch.float32
    model = EncoderDecoder(variant, arch).to(dtype)
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not fit the architecture ({exc})") from exc
    model.eval()
    return model, meta
