"""Small shared builders for tests."""

import torch

from ddsmooth.models import ConvBackbone, ToyDenoiser, ToyStack, make_heads
from ddsmooth.runner.store import ExperimentRecord
from ddsmooth.schedule import linear_schedule


def tiny_stack(seed: int = 0) -> ToyStack:
    """An untrained, narrow stack; fast enough for grid plumbing tests."""
    torch.manual_seed(seed)
    bb = ConvBackbone(32, width=4, feature_dim=8)
    heads = make_heads(bb, 4)
    den = ToyDenoiser(linear_schedule(), width=4)
    for m in (bb, heads, den):
        m.eval()
        m.requires_grad_(False)
    return ToyStack(bb, heads, den, linear_schedule(), num_classes=4)


def tiny_config(models: str, **over) -> dict:
    cfg = {
        "dataset": {"n": 24, "resolution": 32, "num_classes": 4, "seed": 5},
        "models": models,
        "attack_defaults": {"budget": 8 / 255, "iterations": 2},
        "attacks": [
            {"method": "none"},
            {"method": "pgd", "noise_level": "none", "p_diffusion": 0.0},
            {"method": "pgd", "noise_level": "low", "p_diffusion": 1.0},
            {"method": "pgd", "noise_level": "high", "p_diffusion": 1.0},
        ],
        "defenses": [{"mode": "none"}, {"mode": "denoise", "level": "low"}, {"mode": "denoise", "level": "high"}],
        "tasks": ["classification"],
        "eval_size": 16,
        "seeds": {"attack": 0, "defense": 1},
    }
    cfg.update(over)
    return cfg


def record(attack: str, defense: str, metric: str, value: float, task: str = "classification") -> ExperimentRecord:
    """A record addressed by its labels, e.g. ``record("pgd/low/1.0", "high", "accuracy", 0.5)``."""
    if attack == "none":
        a = {"method": "none", "noise_level": "none", "p_diffusion": 0.0}
    else:
        m, lvl, p = attack.split("/")
        a = {"method": m, "noise_level": lvl, "p_diffusion": float(p)}
    d = {"mode": "none", "level": {"kind": "none", "t_min": 0, "t_max": 0}}
    if defense != "none":
        d = {"mode": "denoise", "level": {"kind": defense, "t_min": 10, "t_max": 10}}
    return ExperimentRecord("f" * 16, a, d, task, metric, value, 256, 0.0, "2026-01-01T00:00:00+00:00")
