"""Backbone / head / denoiser interfaces and their desk-scale toy versions.

All toy networks use smooth activations (SiLU/GELU) and no batch statistics,
so they are deterministic in eval and train mode alike and pass
finite-difference gradient checks in double precision.
"""

from __future__ import annotations

import math
from typing import Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..schedule import NoiseSchedule

Timestep = Union[int, torch.Tensor]
Features = tuple[torch.Tensor, torch.Tensor]

TASKS = ("classification", "segmentation", "depth", "retrieval")


class Backbone(nn.Module):
    """Maps an image batch to ``(cls, tokens)``.

    ``cls`` has shape ``(N, feature_dim)``; ``tokens`` has shape
    ``(N, h_p * w_p, feature_dim)`` in row-major patch order.
    """

    feature_dim: int
    patch_grid: tuple[int, int]
    resolution: int

    def features(self, x: torch.Tensor) -> Features:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> Features:
        if x.ndim != 4 or x.shape[-2:] != (self.resolution, self.resolution):
            raise ValueError(
                f"expected (N, C, {self.resolution}, {self.resolution}) input, got {tuple(x.shape)}"
            )
        return self.features(x)


class TaskHead(nn.Module):
    task: str

    def predict(self, z: Features) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, z: Features) -> torch.Tensor:
        return self.predict(z)


class Denoiser(nn.Module):
    """One-shot denoiser ``d(x_t, t) -> x_0`` estimate."""

    def __init__(self, schedule: NoiseSchedule):
        super().__init__()
        self.schedule = schedule
        self.register_buffer(
            "alpha_bar", torch.tensor(schedule.alpha_bar, dtype=torch.float64), persistent=False
        )

    def _alpha_bar(self, t: Timestep, like: torch.Tensor) -> torch.Tensor:
        """Per-sample alpha_bar of shape (N, 1, 1, 1)."""
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            ab = self.alpha_bar.to(like.dtype)[t.long()]
        else:
            ab = self.alpha_bar.to(like.dtype)[self.schedule.check_timestep(int(t))]
            ab = ab.expand(like.shape[0])
        return ab.view(-1, 1, 1, 1)

    def denoise(self, x_t: torch.Tensor, t: Timestep) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x_t: torch.Tensor, t: Timestep) -> torch.Tensor:
        return self.denoise(x_t, t)


class ConvBackbone(Backbone):
    """Small strided conv net with a patch-token grid and a pooled cls embedding."""

    def __init__(self, resolution: int = 32, in_channels: int = 3, width: int = 16, feature_dim: int = 48):
        super().__init__()
        if resolution % 4:
            raise ValueError("resolution must be divisible by 4")
        self.resolution = resolution
        self.feature_dim = feature_dim
        self.patch_grid = (resolution // 4, resolution // 4)
        self.stem = nn.Conv2d(in_channels, width, 3, padding=1)
        self.down1 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(2 * width, feature_dim, 3, stride=2, padding=1)
        self.mix = nn.ModuleList(nn.Conv2d(feature_dim, feature_dim, 3, padding=1) for _ in range(3))
        self.norm = nn.LayerNorm(feature_dim)
        self.pool = nn.Conv2d(feature_dim, feature_dim, 3, stride=2, padding=1)
        pooled = feature_dim * (resolution // 8) ** 2
        self.cls_proj = nn.Sequential(
            nn.Linear(pooled, 2 * feature_dim), nn.GELU(), nn.Linear(2 * feature_dim, feature_dim)
        )

    def features(self, x: torch.Tensor) -> Features:
        h = (x - 0.5) / 0.25
        h = F.silu(self.stem(h))
        h = F.silu(self.down1(h))
        h = F.silu(self.down2(h))
        for conv in self.mix:
            h = h + F.silu(conv(h))
        tokens = self.norm(h.flatten(2).transpose(1, 2))
        cls = self.cls_proj(F.silu(self.pool(h)).flatten(1))
        return cls, tokens


class ClassificationHead(TaskHead):
    task = "classification"

    def __init__(self, feature_dim: int, num_classes: int):
        super().__init__()
        self.linear = nn.Linear(feature_dim, num_classes)

    def predict(self, z: Features) -> torch.Tensor:
        return self.linear(z[0])


class _TokenHead(TaskHead):
    def __init__(self, feature_dim: int, out_dim: int, patch_grid: tuple[int, int], resolution: int):
        super().__init__()
        self.linear = nn.Linear(feature_dim, out_dim)
        self.patch_grid = tuple(patch_grid)
        self.resolution = resolution

    def _upsampled(self, tokens: torch.Tensor) -> torch.Tensor:
        n = tokens.shape[0]
        out = self.linear(tokens).transpose(1, 2).reshape(n, -1, *self.patch_grid)
        return F.interpolate(out, size=(self.resolution, self.resolution), mode="bilinear", align_corners=False)


class SegmentationHead(_TokenHead):
    """Per-pixel logits over ``num_classes + 1`` labels (0 is background)."""

    task = "segmentation"

    def predict(self, z: Features) -> torch.Tensor:
        return self._upsampled(z[1])


class DepthHead(_TokenHead):
    task = "depth"

    def __init__(self, feature_dim: int, patch_grid: tuple[int, int], resolution: int):
        super().__init__(feature_dim, 1, patch_grid, resolution)

    def predict(self, z: Features) -> torch.Tensor:
        return F.softplus(self._upsampled(z[1])).squeeze(1)


class RetrievalHead(TaskHead):
    task = "retrieval"

    def predict(self, z: Features) -> torch.Tensor:
        return z[0]


def make_heads(backbone: Backbone, num_classes: int) -> nn.ModuleDict:
    d, grid, res = backbone.feature_dim, backbone.patch_grid, backbone.resolution
    return nn.ModuleDict(
        {
            "classification": ClassificationHead(d, num_classes),
            "segmentation": SegmentationHead(d, num_classes + 1, grid, res),
            "depth": DepthHead(d, grid, res),
            "retrieval": RetrievalHead(),
        }
    )


class _FiLMBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.film = nn.Linear(emb_dim, 2 * cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv1(x))
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        h = h * (1 + scale) + shift
        return self.skip(x) + self.conv2(F.silu(h))


class ToyDenoiser(Denoiser):
    """Two-level U-Net predicting ``x_0`` directly, with EDM-style preconditioning.

    The noisy input is first rescaled to ``x + delta`` by dividing out
    ``sqrt(alpha_bar)``. The output mixes a skip path and the network path
    with weights that make the untrained model the Gaussian posterior mean
    for data of mean ``data_mean`` and std ``data_std``.
    """

    def __init__(self, schedule: NoiseSchedule, channels: int = 3, width: int = 16,
                 data_mean: float = 0.5, data_std: float = 0.3):
        super().__init__(schedule)
        self.data_mean = data_mean
        self.data_std = data_std
        emb = 32
        self.width = width
        self.embed = nn.Sequential(nn.Linear(16, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.inp = nn.Conv2d(channels, width, 3, padding=1)
        self.enc1 = _FiLMBlock(width, width, emb)
        self.down = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.enc2 = _FiLMBlock(2 * width, 2 * width, emb)
        self.down2 = nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1)
        self.mid = _FiLMBlock(2 * width, 2 * width, emb)
        self.dec2 = _FiLMBlock(4 * width, 2 * width, emb)
        self.dec1 = _FiLMBlock(3 * width, width, emb)
        self.out = nn.Conv2d(width, channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def _noise_embedding(self, sigma: torch.Tensor) -> torch.Tensor:
        c = torch.log(sigma.clamp_min(1e-4)).view(-1, 1) / 4.0
        freqs = torch.arange(8, dtype=sigma.dtype, device=sigma.device).view(1, -1)
        ang = c * (2.0**freqs) * math.pi / 8
        return self.embed(torch.cat([torch.sin(ang), torch.cos(ang)], dim=1))

    def denoise(self, x_t: torch.Tensor, t: Timestep) -> torch.Tensor:
        ab = self._alpha_bar(t, x_t)
        sigma = torch.sqrt((1 - ab) / ab)
        x_in = x_t / torch.sqrt(ab) - self.data_mean
        sd2 = self.data_std**2
        c_skip = sd2 / (sigma**2 + sd2)
        c_out = sigma * self.data_std / torch.sqrt(sigma**2 + sd2)
        c_in = 1 / torch.sqrt(sigma**2 + sd2)

        emb = self._noise_embedding(sigma.flatten())
        h0 = self.inp(c_in * x_in)
        h1 = self.enc1(h0, emb)
        h2 = self.enc2(F.silu(self.down(h1)), emb)
        h3 = self.mid(F.silu(self.down2(h2)), emb)
        u2 = F.interpolate(h3, scale_factor=2, mode="nearest")
        u2 = self.dec2(torch.cat([u2, h2], dim=1), emb)
        u1 = F.interpolate(u2, scale_factor=2, mode="nearest")
        u1 = self.dec1(torch.cat([u1, h1], dim=1), emb)
        return self.data_mean + c_skip * x_in + c_out * self.out(F.silu(u1))


class EpsPredictionDenoiser(Denoiser):
    """Adapts a noise-prediction network ``eps(x_t, t)`` to one-shot ``x_0`` output."""

    def __init__(self, eps_model: nn.Module, schedule: NoiseSchedule):
        super().__init__(schedule)
        self.eps_model = eps_model

    def denoise(self, x_t: torch.Tensor, t: Timestep) -> torch.Tensor:
        ab = self._alpha_bar(t, x_t)
        eps = self.eps_model(x_t, t)
        return (x_t - torch.sqrt(1 - ab) * eps) / torch.sqrt(ab)


def analytic_denoise(
    x_t: torch.Tensor,
    t: int,
    prior_mean,
    prior_std: float,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Posterior mean of ``x_0`` given ``x_t`` under an isotropic Gaussian prior."""
    if prior_std <= 0:
        raise ValueError(f"prior_std must be positive, got {prior_std}")
    ab = schedule.alpha_bar[schedule.check_timestep(t)]
    sigma2 = (1.0 - ab) / ab
    if sigma2 == 0:
        return x_t / math.sqrt(ab)
    shrink = prior_std**2 / (prior_std**2 + sigma2)
    prior_mean = torch.as_tensor(prior_mean, dtype=x_t.dtype, device=x_t.device)
    return prior_mean + shrink * (x_t / math.sqrt(ab) - prior_mean)


class AnalyticDenoiser(Denoiser):
    """Bayes-optimal denoiser for data drawn from ``N(prior_mean, prior_std^2 I)``."""

    def __init__(self, schedule: NoiseSchedule, prior_mean: float = 0.5, prior_std: float = 0.3):
        super().__init__(schedule)
        if prior_std <= 0:
            raise ValueError(f"prior_std must be positive, got {prior_std}")
        self.prior_mean = prior_mean
        self.prior_std = prior_std

    def denoise(self, x_t: torch.Tensor, t: Timestep) -> torch.Tensor:
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            ab = self._alpha_bar(t, x_t)
            shrink = self.prior_std**2 / (self.prior_std**2 + (1 - ab) / ab)
            return self.prior_mean + shrink * (x_t / torch.sqrt(ab) - self.prior_mean)
        return analytic_denoise(x_t, int(t), self.prior_mean, self.prior_std, self.schedule)
