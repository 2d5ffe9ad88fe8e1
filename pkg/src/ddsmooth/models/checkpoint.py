"""On-disk model checkpoints: ``metadata.json`` + ``weights.pt`` + ``schedule.json``."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch
import torch.nn as nn

from ..schedule import NoiseSchedule
from .nets import Backbone, ConvBackbone, Denoiser, ToyDenoiser, make_heads

FORMAT_VERSION = 1


class ToyStack:
    """Backbone, task heads and denoiser sharing one noise schedule."""

    def __init__(self, backbone: Backbone, heads: nn.ModuleDict, denoiser: Denoiser,
                 schedule: NoiseSchedule, num_classes: int, train_config: dict | None = None,
                 metadata: dict | None = None):
        self.backbone = backbone
        self.heads = heads
        self.denoiser = denoiser
        self.schedule = schedule
        self.num_classes = num_classes
        self.metadata = metadata or {
            "format_version": FORMAT_VERSION,
            "backbone": {
                "architecture": type(backbone).__name__,
                "resolution": backbone.resolution,
                "feature_dim": backbone.feature_dim,
                "width": backbone.stem.out_channels,
                "patch_grid": list(backbone.patch_grid),
            },
            "denoiser": {"architecture": type(denoiser).__name__, "width": getattr(denoiser, "width", None)},
            "num_classes": num_classes,
            "schedule": schedule.name,
            "train_config": train_config or {},
        }

    @property
    def device(self) -> torch.device:
        return next(self.backbone.parameters()).device

    def to(self, device) -> "ToyStack":
        for m in (self.backbone, self.heads, self.denoiser):
            m.to(device)
        return self

    def head(self, task: str):
        return self.heads[task]

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "backbone": self.backbone.state_dict(),
                "heads": self.heads.state_dict(),
                "denoiser": self.denoiser.state_dict(),
            },
            d / "weights.pt",
        )
        self.schedule.save(d / "schedule.json")
        (d / "metadata.json").write_text(json.dumps(self.metadata, indent=2, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory) -> "ToyStack":
        d = Path(directory)
        meta = json.loads((d / "metadata.json").read_text())
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {meta.get('format_version')!r}")
        schedule = NoiseSchedule.load(d / "schedule.json")
        b = meta["backbone"]
        backbone = ConvBackbone(b["resolution"], width=b["width"], feature_dim=b["feature_dim"])
        heads = make_heads(backbone, meta["num_classes"])
        denoiser = ToyDenoiser(schedule, width=meta["denoiser"]["width"])
        state = torch.load(d / "weights.pt", weights_only=True)
        backbone.load_state_dict(state["backbone"])
        heads.load_state_dict(state["heads"])
        denoiser.load_state_dict(state["denoiser"])
        for m in (backbone, heads, denoiser):
            m.eval()
            m.requires_grad_(False)
        return cls(backbone, heads, denoiser, schedule, meta["num_classes"], metadata=meta)


def checkpoint_digest(directory) -> str:
    """Content hash of a checkpoint directory (used in result fingerprints)."""
    h = hashlib.sha256()
    d = Path(directory)
    for name in ("metadata.json", "schedule.json", "weights.pt"):
        h.update(name.encode())
        h.update((d / name).read_bytes())
    return h.hexdigest()[:16]
