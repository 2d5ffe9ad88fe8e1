"""Generalised iterative sign-gradient attack with optional diffusion in the loop.

One engine covers PGD (no momentum, no input transform), MI-FGSM (unit
momentum decay) and SIA (unit momentum decay plus a random block-wise
input transform). With probability ``p_diffusion`` per iteration the
perturbed image is forward-noised to a sampled timestep and passed through
the denoiser before the model, and the gradient flows back through it.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F

from .schedule import NoiseKind, NoiseLevel, forward_noise, timestep_for_level

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 3 / 255
DEFAULT_ITERATIONS = 50
L1_EPS = 1e-12

SIA_KINDS = (
    "resize",
    "vertical_shift",
    "horizontal_shift",
    "vertical_flip",
    "horizontal_flip",
    "rotate180",
    "scale",
    "gaussian_noise",
    "dropout",
)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class SIAParams:
    blocks: int = 3
    per_block: bool = True
    max_shift: float = 0.2
    resize_range: tuple[float, float] = (0.7, 1.3)
    scale_range: tuple[float, float] = (0.7, 1.3)
    noise_std: float = 0.05
    dropout: float = 0.1


@dataclass(frozen=True)
class AttackConfig:
    method_name: str = "pgd"
    mu: float = 0.0
    iterations: int = DEFAULT_ITERATIONS
    step_size: float = DEFAULT_BUDGET / DEFAULT_ITERATIONS * 4
    budget: float = DEFAULT_BUDGET
    transform: str = "identity"
    p_diffusion: float = 0.0
    noise_level: NoiseLevel = field(default_factory=NoiseLevel)
    seed: int = 0
    sia: SIAParams = field(default_factory=SIAParams)
    # uniform start inside the box; for losses whose gradient vanishes at x_o
    random_start: bool = False

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if not 0 <= self.budget < 1:
            raise ValueError("budget must lie in [0, 1)")
        if self.step_size < 0 or self.step_size > self.budget:
            raise ValueError("step_size must lie in [0, budget]")
        if self.transform not in ("identity", "sia_block"):
            raise ValueError(f"unknown transform {self.transform!r}")
        if not 0 <= self.p_diffusion <= 1:
            raise ValueError("p_diffusion must lie in [0, 1]")
        if self.p_diffusion > 0 and self.noise_level.kind is NoiseKind.NONE:
            raise ValueError("p_diffusion > 0 needs a noise level")

    def replace(self, **changes) -> "AttackConfig":
        """Copy with changes; the step size follows budget/iterations unless given."""
        if ("budget" in changes or "iterations" in changes) and "step_size" not in changes:
            budget = changes.get("budget", self.budget)
            iters = changes.get("iterations", self.iterations)
            changes["step_size"] = default_step_size(budget, iters)
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["noise_level"] = self.noise_level.to_dict()
        d["sia"]["resize_range"] = list(self.sia.resize_range)
        d["sia"]["scale_range"] = list(self.sia.scale_range)
        return d


def default_step_size(budget: float, iterations: int) -> float:
    """``4 * budget / iterations``, capped at the budget for very short runs."""
    return min(budget / iterations * 4, budget)


_PRESETS = {
    "pgd": dict(mu=0.0, transform="identity"),
    "mifgsm": dict(mu=1.0, transform="identity"),
    "sia": dict(mu=1.0, transform="sia_block"),
}


def preset(name: str, **overrides) -> AttackConfig:
    """PGD / MI-FGSM / SIA with the shared defaults, then ``overrides``."""
    if name not in _PRESETS:
        raise ValueError(f"unknown attack preset {name!r}; choose from {sorted(_PRESETS)}")
    budget = overrides.pop("budget", DEFAULT_BUDGET)
    iterations = overrides.pop("iterations", DEFAULT_ITERATIONS)
    step = overrides.pop("step_size", None)
    if step is None:
        step = default_step_size(budget, iterations)
    return AttackConfig(
        method_name=name, budget=budget, iterations=iterations, step_size=step,
        **{**_PRESETS[name], **overrides},
    )


@dataclass
class AttackState:
    a: torch.Tensor
    g: torch.Tensor
    iteration: int = 0

    @classmethod
    def zeros_like(cls, x: torch.Tensor) -> "AttackState":
        return cls(torch.zeros_like(x), torch.zeros_like(x), 0)


def attack_step(state: AttackState, grad: torch.Tensor, cfg: AttackConfig, x_o: torch.Tensor) -> AttackState:
    """Momentum update with per-image l1 normalisation, sign step, then the two clips."""
    if grad.shape != state.a.shape:
        raise ValueError(f"gradient shape {tuple(grad.shape)} != perturbation shape {tuple(state.a.shape)}")
    norm = grad.abs().flatten(1).sum(1).clamp_min(L1_EPS).view(-1, *([1] * (grad.ndim - 1)))
    g = cfg.mu * state.g + grad / norm
    a = state.a + cfg.step_size * torch.sign(g)
    a = torch.clamp(a, -cfg.budget, cfg.budget)
    a = torch.minimum(torch.maximum(a, -x_o), 1 - x_o)
    return AttackState(a, g, state.iteration + 1)


def sample_sia_kinds(n: int, params: SIAParams, rng: torch.Generator) -> torch.Tensor:
    """Transform index per image and block, shape (n, blocks, blocks)."""
    if params.per_block:
        return torch.randint(0, len(SIA_KINDS), (n, params.blocks, params.blocks), generator=rng, device=rng.device)
    k = torch.randint(0, len(SIA_KINDS), (n, 1, 1), generator=rng, device=rng.device)
    return k.expand(n, params.blocks, params.blocks)


def _uniform(n: int, lo: float, hi: float, rng, like: torch.Tensor) -> torch.Tensor:
    return lo + (hi - lo) * torch.rand(n, generator=rng, dtype=like.dtype, device=like.device)


def _resize(b: torch.Tensor, rng, params: SIAParams) -> torch.Tensor:
    """Zoom each block about its centre by a random factor, keeping its size."""
    n, c, h, w = b.shape
    f = _uniform(n, *params.resize_range, rng, b)
    theta = torch.zeros(n, 2, 3, dtype=b.dtype, device=b.device)
    theta[:, 0, 0] = 1 / f
    theta[:, 1, 1] = 1 / f
    grid = F.affine_grid(theta, (n, c, h, w), align_corners=False)
    return F.grid_sample(b, grid, mode="bilinear", padding_mode="border", align_corners=False)


def _roll_rows(b: torch.Tensor, shifts: torch.Tensor, dim: int) -> torch.Tensor:
    size = b.shape[dim]
    idx = (torch.arange(size, device=b.device).view(1, -1) - shifts.view(-1, 1)) % size
    shape = [b.shape[0], 1, 1, 1]
    shape[dim] = size
    idx = idx.view(shape).expand_as(b)
    return torch.gather(b, dim, idx)


def _shift(b: torch.Tensor, rng, params: SIAParams, dim: int) -> torch.Tensor:
    size = b.shape[dim]
    max_px = max(1, int(params.max_shift * size))
    mag = torch.randint(1, max_px + 1, (b.shape[0],), generator=rng, device=b.device)
    sign = torch.randint(0, 2, (b.shape[0],), generator=rng, device=b.device) * 2 - 1
    return _roll_rows(b, mag * sign, dim)


def _apply_kind(kind: str, b: torch.Tensor, rng, params: SIAParams) -> torch.Tensor:
    n = b.shape[0]
    if kind == "resize":
        return _resize(b, rng, params)
    if kind == "vertical_shift":
        return _shift(b, rng, params, dim=2)
    if kind == "horizontal_shift":
        return _shift(b, rng, params, dim=3)
    if kind == "vertical_flip":
        return b.flip(2)
    if kind == "horizontal_flip":
        return b.flip(3)
    if kind == "rotate180":
        return b.flip(2, 3)
    if kind == "scale":
        return b * _uniform(n, *params.scale_range, rng, b).view(-1, 1, 1, 1)
    if kind == "gaussian_noise":
        return b + params.noise_std * torch.randn(b.shape, generator=rng, dtype=b.dtype, device=b.device)
    if kind == "dropout":
        keep = torch.rand(b.shape, generator=rng, dtype=b.dtype, device=b.device) >= params.dropout
        return b * keep
    raise ValueError(kind)


def _block_edges(size: int, blocks: int) -> list[int]:
    return [round(i * size / blocks) for i in range(blocks + 1)]


def sia_transform(x: torch.Tensor, rng: torch.Generator, params: SIAParams = SIAParams()) -> torch.Tensor:
    """Split each image into a block grid and transform every block independently."""
    if x.ndim != 4:
        raise ValueError("expected an (N, C, H, W) batch")
    n, _, h, w = x.shape
    kinds = sample_sia_kinds(n, params, rng)
    rows, cols = _block_edges(h, params.blocks), _block_edges(w, params.blocks)
    out_rows = []
    for i in range(params.blocks):
        out_cols = []
        for j in range(params.blocks):
            block = x[:, :, rows[i] : rows[i + 1], cols[j] : cols[j + 1]]
            new = block
            for k, kind in enumerate(SIA_KINDS):
                sel = torch.nonzero(kinds[:, i, j] == k).flatten()
                if sel.numel() == 0:
                    continue
                new = new.index_copy(0, sel, _apply_kind(kind, block[sel], rng, params))
            out_cols.append(new)
        out_rows.append(torch.cat(out_cols, dim=3))
    return torch.cat(out_rows, dim=2).clamp(0, 1)


def run_attack(
    x_o: torch.Tensor,
    c_o: torch.Tensor,
    backbone,
    head,
    task_loss: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    denoiser,
    cfg: AttackConfig,
    rng: torch.Generator | None = None,
    callback: Callable[[AttackState, torch.Tensor], None] | None = None,
) -> torch.Tensor:
    """Craft ``x_a`` within the l-inf ball of radius ``cfg.budget`` around ``x_o``.

    ``callback(state, loss)`` is invoked after every iteration, if given.
    """
    if rng is None:
        rng = torch.Generator(device=x_o.device).manual_seed(cfg.seed)
    x_o = x_o.detach()
    state = AttackState.zeros_like(x_o)
    if cfg.random_start:
        u = torch.rand(x_o.shape, generator=rng, dtype=x_o.dtype, device=rng.device).to(x_o.device)
        a = (2 * u - 1) * cfg.budget
        state.a = torch.minimum(torch.maximum(a, -x_o), 1 - x_o)
    for _ in range(cfg.iterations):
        a = state.a.detach().requires_grad_(True)
        x_a = x_o + a
        # one uniform draw per iteration keeps the stream aligned across p values
        if torch.rand((), generator=rng, device=rng.device).item() < cfg.p_diffusion:
            t = timestep_for_level(cfg.noise_level, rng)
            x_hat = denoiser(forward_noise(x_a, t, denoiser.schedule, rng), t)
        else:
            x_hat = x_a
        if cfg.transform == "sia_block":
            x_hat = sia_transform(x_hat, rng, cfg.sia)
        loss = task_loss(head(backbone(x_hat)), c_o)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite loss {loss.item()} at iteration {state.iteration} "
                f"(method={cfg.method_name}, p_diffusion={cfg.p_diffusion})"
            )
        (grad,) = torch.autograd.grad(loss, a, allow_unused=True)
        if grad is None:  # the chain ignored its input, e.g. a constant denoiser
            grad = torch.zeros_like(a)
        state = attack_step(AttackState(a.detach(), state.g, state.iteration), grad, cfg, x_o)
        if callback is not None:
            callback(state, loss.detach())
    x_adv = torch.clamp(x_o + state.a, 0, 1)
    # x_o + a is rounded to the working dtype, so allow a few ulps of slack
    slack = 4 * torch.finfo(x_o.dtype).eps
    assert (x_adv - x_o).abs().max().item() <= cfg.budget + slack, "budget violated"
    return x_adv.detach()
