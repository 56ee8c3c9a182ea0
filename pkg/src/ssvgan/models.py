"""Generator and two-head discriminator for 32x32 single-blob video clips.

The discriminator is a 6-layer conv trunk: two spatio-temporal (3D) layers
with temporal stride 2, then the remaining time axis is folded into channels
and four 2D layers finish the job. Two linear heads share the trunk
features: a real/fake logit and an 11-way transformation classifier.
Every discriminator weight is spectrally normalized.

The generator mirrors the trunk: a learned 4x4 seed map is upsampled by
2D transposed convs to 32x32, then two 3D transposed convs grow the time
axis to 4 distinct frames which are repeated up to the requested length.
"""

from __future__ import annotations

import os
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, DataError, ShapeError
from .transforms import NUM_CLASSES

CHECKPOINT_VERSION = 1


def l2_normalize(vec: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return vec / vec.norm().clamp_min(eps)


def spectral_normalize(weight: torch.Tensor, u: torch.Tensor, v: torch.Tensor,
                       update: bool = True, steps: int = 1, eps: float = 1e-12):
    """Divide a weight by its power-iteration top-singular-value estimate.

    The weight is flattened to 2D (output dim x rest). With update=True the
    stored direction estimates are refined by `steps` power iterations
    (detached); otherwise they are used as-is. The estimate is floored at
    eps so an all-zero weight maps to an all-zero weight instead of NaN.

    Returns (normalized weight, u, v, sigma).
    """
    w2d = weight.reshape(weight.shape[0], -1)
    if update:
        with torch.no_grad():
            for _ in range(steps):
                v = l2_normalize(torch.mv(w2d.t(), u), eps)
                u = l2_normalize(torch.mv(w2d, v), eps)
    sigma = torch.dot(u, torch.mv(w2d, v)).clamp_min(eps)
    return weight / sigma, u, v, sigma


class SpectralNorm(nn.Module):
    """Wraps a conv/linear module, normalizing its weight before every call.

    In training mode each forward refines the singular-direction estimates
    by one power iteration; in eval mode the stored estimates are reused so
    repeated forwards are bit-identical.
    """

    def __init__(self, module: nn.Module, eps: float = 1e-12):
        super().__init__()
        if "weight" not in module._parameters:
            raise ConfigurationError(f"{type(module).__name__} has no weight parameter to normalize")
        weight = module._parameters["weight"]
        del module._parameters["weight"]
        self.module = module
        self.eps = eps
        self.weight = nn.Parameter(weight.detach().clone())
        height = self.weight.shape[0]
        width = self.weight.reshape(height, -1).shape[1]
        self.register_buffer("u", l2_normalize(torch.randn(height), eps))
        self.register_buffer("v", l2_normalize(torch.randn(width), eps))
        # burn in the direction estimates so eval-mode forwards are sane
        # even on a never-trained model
        _, u, v, _ = spectral_normalize(self.weight, self.u, self.v, update=True, steps=5, eps=eps)
        with torch.no_grad():
            self.u.copy_(u)
            self.v.copy_(v)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w_norm, u, v, _ = spectral_normalize(self.weight, self.u, self.v,
                                             update=self.training, eps=self.eps)
        if self.training:
            self.u.copy_(u)
            self.v.copy_(v)
        setattr(self.module, "weight", w_norm)
        return self.module(x)


def _sn_conv3d(c_in, c_out, kernel, stride, padding):
    return SpectralNorm(nn.Conv3d(c_in, c_out, kernel, stride=stride, padding=padding))


def _sn_conv2d(c_in, c_out, kernel, stride, padding):
    return SpectralNorm(nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=padding))


class DiscriminatorOutput(NamedTuple):
    features: torch.Tensor         # (N, feature_dim)
    adv_logit: torch.Tensor        # (N,)
    transform_logits: torch.Tensor  # (N, n_classes)


def _ceil_half(n: int) -> int:
    return (n + 1) // 2


class Discriminator(nn.Module):
    """6-layer spectrally normalized trunk with real/fake and transform heads."""

    WIDTHS = (32, 64, 128, 128, 256, 256)

    def __init__(self, frames: int = 16, channels: int = 1, side: int = 32,
                 n_classes: int = NUM_CLASSES):
        super().__init__()
        if frames < 4:
            raise ConfigurationError(f"discriminator needs frames >= 4, got {frames}")
        if side < 16:
            raise ConfigurationError(f"discriminator needs side >= 16, got {side}")
        self.frames = frames
        self.channels = channels
        self.side = side
        self.n_classes = n_classes
        w = self.WIDTHS

        # layers 1-2: 3D convs, stride 2 on every axis
        self.conv3d = nn.ModuleList([
            _sn_conv3d(channels, w[0], 3, (2, 2, 2), 1),
            _sn_conv3d(w[0], w[1], 3, (2, 2, 2), 1),
        ])
        t_after = _ceil_half(_ceil_half(frames))
        self.flat_channels = w[1] * t_after

        # layers 3-6: 2D convs once time is folded into channels
        self.conv2d = nn.ModuleList([
            _sn_conv2d(self.flat_channels, w[2], 3, 2, 1),
            _sn_conv2d(w[2], w[3], 3, 1, 1),
            _sn_conv2d(w[3], w[4], 3, 2, 1),
            _sn_conv2d(w[4], w[5], 3, 1, 1),
        ])
        s = _ceil_half(_ceil_half(side))  # after the 3D layers
        s = _ceil_half(_ceil_half(s))     # after the two strided 2D layers
        self.feature_dim = w[5] * s * s

        self.adv_head = SpectralNorm(nn.Linear(self.feature_dim, 1))
        self.transform_head = SpectralNorm(nn.Linear(self.feature_dim, n_classes))
        self.act = nn.LeakyReLU(0.2)

    def forward(self, clips: torch.Tensor) -> DiscriminatorOutput:
        if clips.dim() != 5:
            raise ShapeError(f"expected a (N, T, C, H, W) batch, got {tuple(clips.shape)}")
        n, t, c, h, w = clips.shape
        if (t, c, h, w) != (self.frames, self.channels, self.side, self.side):
            raise ShapeError(
                f"clip shape {(t, c, h, w)} does not match the model's "
                f"{(self.frames, self.channels, self.side, self.side)}"
            )
        x = clips.permute(0, 2, 1, 3, 4)  # (N, C, T, H, W)
        for layer in self.conv3d:
            x = self.act(layer(x))
        x = x.reshape(n, self.flat_channels, x.shape[-2], x.shape[-1])
        for layer in self.conv2d:
            x = self.act(layer(x))
        features = x.reshape(n, -1)
        adv = self.adv_head(features).squeeze(1)
        logits = self.transform_head(features)
        return DiscriminatorOutput(features, adv, logits)


class Generator(nn.Module):
    """Mirrored 6-layer transposed-conv generator producing (N, T, C, 32, 32).

    Widths follow the discriminator's in reverse at half scale: the
    generator runs at full spatial resolution, so matching them 1:1 costs
    roughly 20x the discriminator per clip for no measurable benefit to
    the frozen features this package is evaluated on.
    """

    WIDTHS = (128, 128, 64, 64, 32, 16)
    BASE_FRAMES = 4

    def __init__(self, z_dim: int = 128, frames: int = 16, channels: int = 1, side: int = 32):
        super().__init__()
        if side != 32:
            raise ConfigurationError(f"this generator renders 32x32 frames, got side={side}")
        if frames < self.BASE_FRAMES:
            raise ConfigurationError(f"generator needs frames >= {self.BASE_FRAMES}, got {frames}")
        self.z_dim = z_dim
        self.frames = frames
        self.channels = channels
        self.side = side
        w = self.WIDTHS

        self.fc = nn.Linear(z_dim, w[0] * 4 * 4)
        # layers 1-4: spatial upsampling 4 -> 32
        self.deconv2d = nn.ModuleList([
            nn.ConvTranspose2d(w[0], w[1], 4, stride=2, padding=1),   # 8x8
            nn.ConvTranspose2d(w[1], w[2], 4, stride=2, padding=1),   # 16x16
            nn.ConvTranspose2d(w[2], w[3], 4, stride=2, padding=1),   # 32x32
            nn.ConvTranspose2d(w[3], w[4], 3, stride=1, padding=1),   # 32x32
        ])
        # layers 5-6: temporal expansion 1 -> 2 -> 4
        self.deconv3d = nn.ModuleList([
            nn.ConvTranspose3d(w[4], w[5], (4, 3, 3), stride=(2, 1, 1), padding=1),
            nn.ConvTranspose3d(w[5], channels, (4, 3, 3), stride=(2, 1, 1), padding=1),
        ])
        self.act = nn.ReLU()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.z_dim:
            raise ShapeError(f"expected noise of shape (N, {self.z_dim}), got {tuple(z.shape)}")
        n = z.shape[0]
        x = self.act(self.fc(z)).reshape(n, self.WIDTHS[0], 4, 4)
        for layer in self.deconv2d:
            x = self.act(layer(x))
        x = x.unsqueeze(2)  # (N, C, 1, H, W)
        x = self.act(self.deconv3d[0](x))
        x = torch.tanh(self.deconv3d[1](x))  # (N, C, 4, H, W)
        x = x.permute(0, 2, 1, 3, 4)  # (N, 4, C, H, W)
        repeats = -(-self.frames // self.BASE_FRAMES)
        x = x.repeat_interleave(repeats, dim=1)[:, : self.frames]
        return x


class MiniDiscriminator(nn.Module):
    """2-layer version of the trunk for cheap end-to-end checks (8x8 frames)."""

    def __init__(self, frames: int = 4, channels: int = 1, side: int = 8,
                 n_classes: int = NUM_CLASSES):
        super().__init__()
        self.frames = frames
        self.channels = channels
        self.side = side
        self.n_classes = n_classes
        self.conv3d = _sn_conv3d(channels, 4, 3, (2, 2, 2), 1)
        t_after = _ceil_half(frames)
        self.flat_channels = 4 * t_after
        self.conv2d = _sn_conv2d(self.flat_channels, 8, 3, 2, 1)
        s = _ceil_half(_ceil_half(side))
        self.feature_dim = 8 * s * s
        self.adv_head = SpectralNorm(nn.Linear(self.feature_dim, 1))
        self.transform_head = SpectralNorm(nn.Linear(self.feature_dim, n_classes))
        self.act = nn.LeakyReLU(0.2)

    def forward(self, clips: torch.Tensor) -> DiscriminatorOutput:
        n = clips.shape[0]
        x = clips.permute(0, 2, 1, 3, 4)
        x = self.act(self.conv3d(x))
        x = x.reshape(n, self.flat_channels, x.shape[-2], x.shape[-1])
        x = self.act(self.conv2d(x))
        features = x.reshape(n, -1)
        return DiscriminatorOutput(features, self.adv_head(features).squeeze(1),
                                   self.transform_head(features))


class MiniGenerator(nn.Module):
    """Small mirrored generator producing (N, frames, C, 8, 8) clips."""

    def __init__(self, z_dim: int = 8, frames: int = 4, channels: int = 1):
        super().__init__()
        self.z_dim = z_dim
        self.frames = frames
        self.channels = channels
        self.fc = nn.Linear(z_dim, 8 * 2 * 2)
        self.up1 = nn.ConvTranspose2d(8, 4, 4, stride=2, padding=1)   # 4x4
        self.up2 = nn.ConvTranspose2d(4, 4, 4, stride=2, padding=1)   # 8x8
        self.up3 = nn.ConvTranspose3d(4, channels, (4, 3, 3), stride=(2, 1, 1), padding=1)
        self.act = nn.ReLU()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        n = z.shape[0]
        x = self.act(self.fc(z)).reshape(n, 8, 2, 2)
        x = self.act(self.up1(x))
        x = self.act(self.up2(x))
        x = torch.tanh(self.up3(x.unsqueeze(2)))  # (N, C, 2, 8, 8)
        x = x.permute(0, 2, 1, 3, 4)
        repeats = -(-self.frames // 2)
        return x.repeat_interleave(repeats, dim=1)[:, : self.frames]


def build_models(frames: int = 16, channels: int = 1, side: int = 32,
                 z_dim: int = 128, n_classes: int = NUM_CLASSES,
                 init_seed: int | None = None) -> tuple[Generator, Discriminator]:
    """Construct the pair with a fixed global-RNG seed for reproducible init."""
    if init_seed is not None:
        torch.manual_seed(init_seed)
    gen = Generator(z_dim=z_dim, frames=frames, channels=channels, side=side)
    disc = Discriminator(frames=frames, channels=channels, side=side, n_classes=n_classes)
    return gen, disc


def save_checkpoint(path, payload: dict) -> None:
    """Write a checkpoint atomically (tmp file + rename)."""
    payload = dict(payload)
    payload.setdefault("version", CHECKPOINT_VERSION)
    tmp = str(path) + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint {path} does not exist") from exc
    except Exception as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "discriminator" not in payload:
        raise DataError(f"checkpoint {path} has unexpected structure")
    return payload


def models_from_checkpoint(payload: dict) -> tuple[Generator, Discriminator]:
    cfg = payload.get("model", {})
    gen, disc = build_models(
        frames=cfg.get("frames", 16), channels=cfg.get("channels", 1),
        side=cfg.get("side", 32), z_dim=cfg.get("z_dim", 128),
        n_classes=cfg.get("n_classes", NUM_CLASSES), init_seed=0,
    )
    gen.load_state_dict(payload["generator"])
    disc.load_state_dict(payload["discriminator"])
    return gen, disc


def extract_features(checkpoint, clips: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Run clips through a checkpoint's frozen discriminator trunk.

    Args:
        checkpoint: a checkpoint path or an already-loaded payload dict.
        clips: float32 array of shape (N, T, C, H, W) in [-1, 1].

    Returns float32 features of shape (N, feature_dim).
    """
    payload = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    _, disc = models_from_checkpoint(payload)
    disc.eval()
    chunks = []
    with torch.inference_mode():
        for start in range(0, len(clips), batch_size):
            batch = torch.as_tensor(clips[start:start + batch_size])
            chunks.append(disc(batch).features.numpy().copy())
    return np.concatenate(chunks, axis=0) if chunks else np.empty((0, disc.feature_dim), dtype=np.float32)
