"""Diffusion noise schedule, forward noising and named noise levels.

Convention: ``alpha_bar[t]`` is the cumulative signal fraction at timestep
``t``; the noise added to an image at that step has standard deviation
``sigma_t = sqrt((1 - alpha_bar[t]) / alpha_bar[t])`` and the noised sample
is ``sqrt(alpha_bar[t]) * (x + delta)``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch


class NoiseSchedule:
    """Monotone table of cumulative signal fractions indexed by timestep."""

    def __init__(self, alpha_bar, name: str = "custom"):
        alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        if alpha_bar.ndim != 1 or alpha_bar.size == 0:
            raise ValueError("alpha_bar must be a non-empty 1-d array")
        if np.any(alpha_bar <= 0) or np.any(alpha_bar > 1):
            raise ValueError("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(alpha_bar) > 0):
            raise ValueError("alpha_bar must be non-increasing in t")
        self.alpha_bar = alpha_bar
        self.alpha_bar.setflags(write=False)
        self.name = name

    def __len__(self) -> int:
        return self.alpha_bar.size

    def __repr__(self) -> str:
        return f"NoiseSchedule(name={self.name!r}, T_max={len(self)})"

    @property
    def t_max(self) -> int:
        return len(self)

    def check_timestep(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < len(self):
            raise IndexError(f"timestep {t} outside [0, {len(self) - 1}]")
        return t

    def sigma(self, t: int) -> float:
        return sigma_from_alpha(self.alpha_bar[self.check_timestep(t)])

    def sigmas(self) -> np.ndarray:
        return np.sqrt((1.0 - self.alpha_bar) / self.alpha_bar)

    def timestep_for_sigma(self, sigma: float) -> int:
        """Timestep whose noise std is closest to ``sigma``."""
        return int(np.argmin(np.abs(self.sigmas() - sigma)))

    def to_dict(self) -> dict:
        return {"name": self.name, "alpha_bar": self.alpha_bar.tolist()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(d["alpha_bar"], name=d.get("name", "custom"))

    @classmethod
    def load(cls, path) -> "NoiseSchedule":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, NoiseSchedule)
            and self.name == other.name
            and np.array_equal(self.alpha_bar, other.alpha_bar)
        )


def linear_schedule(
    t_max: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Standard DDPM linear-beta schedule."""
    betas = np.linspace(beta_start, beta_end, t_max, dtype=np.float64)
    return NoiseSchedule(np.cumprod(1.0 - betas), name=f"linear{t_max}")


def sigma_from_alpha(alpha_bar_t: float) -> float:
    alpha_bar_t = float(alpha_bar_t)
    if not 0.0 < alpha_bar_t <= 1.0:
        raise ValueError(f"alpha_bar_t must lie in (0, 1], got {alpha_bar_t}")
    return math.sqrt((1.0 - alpha_bar_t) / alpha_bar_t)


def forward_noise(
    x: torch.Tensor, t: int, schedule: NoiseSchedule, rng: torch.Generator
) -> torch.Tensor:
    """Noise ``x`` to timestep ``t``. The result is not clipped."""
    t = schedule.check_timestep(t)
    ab = schedule.alpha_bar[t]
    sigma = sigma_from_alpha(ab)
    if sigma == 0.0:
        return math.sqrt(ab) * x
    delta = torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)
    return math.sqrt(ab) * (x + sigma * delta)


class NoiseKind(str, enum.Enum):
    NONE = "none"
    LOW = "low"
    HIGH = "high"
    RANGE = "range"


@dataclass(frozen=True)
class NoiseLevel:
    kind: NoiseKind = NoiseKind.NONE
    t_min: int = 0
    t_max: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if self.kind is not NoiseKind.NONE and not 0 <= self.t_min <= self.t_max:
            raise ValueError(f"need 0 <= t_min <= t_max, got {self.t_min}, {self.t_max}")

    def validate(self, schedule: NoiseSchedule) -> None:
        if self.kind is not NoiseKind.NONE and self.t_max >= len(schedule):
            raise ValueError(f"t_max={self.t_max} beyond schedule length {len(schedule)}")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "t_min": self.t_min, "t_max": self.t_max}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseLevel":
        return cls(NoiseKind(d["kind"]), int(d.get("t_min", 0)), int(d.get("t_max", 0)))


# Reference timesteps on the 1000-step linear schedule, for models on [-1, 1] pixels.
LOW_T = 10
HIGH_T = 396


def named_level(
    kind: str | NoiseKind,
    schedule: NoiseSchedule | None = None,
    low_t: int = LOW_T,
    high_t: int = HIGH_T,
    reference: NoiseSchedule | None = None,
) -> NoiseLevel:
    """Map ``none``/``low``/``high``/``range`` onto timesteps of ``schedule``.

    ``low_t`` and ``high_t`` are expressed on ``reference`` (default: the
    1000-step linear schedule). When ``schedule`` differs from the reference
    the timesteps are transferred by matching sigma, not raw index.
    """
    kind = NoiseKind(kind)
    if kind is NoiseKind.NONE:
        return NoiseLevel(kind)
    if schedule is not None:
        reference = reference or linear_schedule()
        if schedule != reference:
            low_t = schedule.timestep_for_sigma(reference.sigma(low_t))
            high_t = schedule.timestep_for_sigma(reference.sigma(high_t))
    if kind is NoiseKind.LOW:
        return NoiseLevel(kind, low_t, low_t)
    if kind is NoiseKind.HIGH:
        return NoiseLevel(kind, high_t, high_t)
    return NoiseLevel(kind, low_t, high_t)


def timestep_for_level(level: NoiseLevel, rng: torch.Generator) -> int:
    """Uniform integer in ``[t_min, t_max]`` inclusive."""
    if level.kind is NoiseKind.NONE:
        raise ValueError("noise level 'none' has no timestep")
    if level.t_min == level.t_max:
        return level.t_min
    return int(torch.randint(level.t_min, level.t_max + 1, (1,), generator=rng, device=rng.device).item())
