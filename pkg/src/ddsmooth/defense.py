"""Denoised-smoothing inference: optional forward-noise + one-shot denoise, then predict."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import torch

from .schedule import NoiseKind, NoiseLevel, forward_noise, timestep_for_level

DISCRETE_TASKS = ("classification", "segmentation")


class DefenseMode(str, enum.Enum):
    NONE = "none"
    DENOISE = "denoise"


@dataclass(frozen=True)
class DefensePolicy:
    mode: DefenseMode = DefenseMode.NONE
    level: NoiseLevel = field(default_factory=NoiseLevel)
    samples: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", DefenseMode(self.mode))
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.mode is DefenseMode.DENOISE and self.level.kind is NoiseKind.NONE:
            raise ValueError("denoise mode needs a noise level")

    @property
    def name(self) -> str:
        return "none" if self.mode is DefenseMode.NONE else self.level.kind.value

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "level": self.level.to_dict(), "samples": self.samples, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DefensePolicy":
        return cls(
            DefenseMode(d.get("mode", "none")),
            NoiseLevel.from_dict(d.get("level", {"kind": "none"})),
            int(d.get("samples", 1)),
            int(d.get("seed", 0)),
        )


def purify(x: torch.Tensor, policy: DefensePolicy, denoiser, rng: torch.Generator) -> torch.Tensor:
    """The defended model input: ``x`` itself, or the denoised image clipped to [0, 1]."""
    if policy.mode is DefenseMode.NONE:
        return x
    t = timestep_for_level(policy.level, rng)
    x_t = forward_noise(x, t, denoiser.schedule, rng)
    return denoiser(x_t, t).clamp(0, 1)


@torch.no_grad()
def defend_then_predict(
    x: torch.Tensor,
    policy: DefensePolicy,
    denoiser,
    backbone,
    head,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Head output on the defended input.

    With ``samples > 1`` discrete tasks return per-class vote frequencies
    (their argmax is the majority vote) and continuous tasks the mean output.
    """
    if rng is None:
        rng = torch.Generator(device=x.device).manual_seed(policy.seed)
    if policy.mode is DefenseMode.NONE:
        return head(backbone(x))
    outs = [head(backbone(purify(x, policy, denoiser, rng))) for _ in range(policy.samples)]
    if policy.samples == 1:
        return outs[0]
    if head.task in DISCRETE_TASKS:
        k = outs[0].shape[1]
        votes = sum(torch.nn.functional.one_hot(o.argmax(1), k).movedim(-1, 1).to(o.dtype) for o in outs)
        return votes / policy.samples
    return torch.stack(outs).mean(0)
