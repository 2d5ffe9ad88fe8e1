"""Training of the toy backbone, task heads and denoiser."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..schedule import NoiseSchedule, linear_schedule
from .data import TaskBatch, generate_toy_dataset, split_by_group
from .nets import ConvBackbone, ToyDenoiser, make_heads

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_samples: int = 8000
    resolution: int = 32
    num_classes: int = 4
    val_fraction: float = 0.2
    data_seed: int = 0
    seed: int = 0
    backbone_width: int = 16
    feature_dim: int = 48
    denoiser_width: int = 16
    batch_size: int = 64
    backbone_epochs: int = 10
    backbone_lr: float = 5e-3
    denoiser_steps: int = 2500
    denoiser_lr: float = 2e-3
    # denoiser training timesteps are drawn uniformly from [0, denoiser_t_max]
    denoiser_t_max: int = 600
    # backbone fine-tune where a fraction of each batch is replaced by denoised
    # renders at timesteps drawn from [0, finetune_t_max]; 0 epochs disables it
    finetune_epochs: int = 4
    finetune_lr: float = 1e-3
    finetune_fraction: float = 0.5
    finetune_t_max: int = 450
    min_val_accuracy: float = 0.6
    loss_weights: dict = field(
        default_factory=lambda: {"classification": 1.0, "segmentation": 1.0, "depth": 0.02, "retrieval": 0.2}
    )

    def to_dict(self) -> dict:
        return asdict(self)


def _gaussian_blur(x: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Per-sample separable blur; ``sigma`` of shape (N,), zero means no blur."""
    radius = 3
    offs = torch.arange(-radius, radius + 1, dtype=x.dtype)
    s = sigma.clamp_min(1e-3).view(-1, 1)
    k = torch.exp(-0.5 * (offs.view(1, -1) / s) ** 2)
    k = k / k.sum(dim=1, keepdim=True)
    n, c, h, w = x.shape
    xp = F.pad(x.reshape(1, n * c, h, w), (radius, radius, radius, radius), mode="reflect")
    kk = k.repeat_interleave(c, dim=0)
    xp = F.conv2d(xp, kk.view(n * c, 1, 1, -1), groups=n * c)
    xp = F.conv2d(xp, kk.view(n * c, 1, -1, 1), groups=n * c)
    return xp.view(n, c, h, w)


def augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Blur, additive noise and brightness/contrast jitter."""
    n = x.shape[0]
    blur = torch.rand(n, generator=gen) * 1.5 * (torch.rand(n, generator=gen) < 0.5)
    x = _gaussian_blur(x, blur)
    noise_std = 0.08 * torch.rand(n, 1, 1, 1, generator=gen)
    x = x + noise_std * torch.randn(x.shape, generator=gen)
    gain = 1 + 0.2 * (torch.rand(n, 1, 1, 1, generator=gen) - 0.5)
    bias = 0.1 * (torch.rand(n, 1, 1, 1, generator=gen) - 0.5)
    return (x * gain + bias).clamp(0, 1)


def supcon_loss(emb: torch.Tensor, groups: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    z = F.normalize(emb, dim=1)
    sim = z @ z.t() / temperature
    eye = torch.eye(len(z), dtype=torch.bool)
    sim = sim.masked_fill(eye, -1e9)
    pos = (groups[:, None] == groups[None, :]) & ~eye
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    has_pos = pos.any(dim=1)
    if not has_pos.any():
        return emb.sum() * 0
    per = (log_prob * pos).sum(1) / pos.sum(1).clamp_min(1)
    return -per[has_pos].mean()


def _group_batches(batch: TaskBatch, batch_size: int, gen: torch.Generator):
    """Shuffled minibatches built from pairs of group members for contrastive training."""
    groups = batch.groups
    uniq = torch.unique(groups)
    perm = uniq[torch.randperm(len(uniq), generator=gen)]
    order = torch.cat([torch.nonzero(groups == g).flatten() for g in perm])
    for i in range(0, len(order), batch_size):
        yield order[i : i + batch_size]


def multitask_loss(backbone, heads, x, b: TaskBatch, weights: dict) -> dict:
    z = backbone(x)
    losses = {
        "classification": F.cross_entropy(heads["classification"](z), b.labels),
        "segmentation": F.cross_entropy(heads["segmentation"](z), b.seg_masks),
        "depth": F.mse_loss(heads["depth"](z), b.depth_maps),
        "retrieval": supcon_loss(heads["retrieval"](z), b.groups),
    }
    losses["total"] = sum(weights[k] * losses[k] for k in weights)
    return losses


@torch.no_grad()
def classification_accuracy(backbone, head, images: torch.Tensor, labels: torch.Tensor, batch_size: int = 256) -> float:
    correct = 0
    for i in range(0, len(images), batch_size):
        logits = head(backbone(images[i : i + batch_size]))
        correct += (logits.argmax(1) == labels[i : i + batch_size]).sum().item()
    return correct / len(images)


def train_backbone(train: TaskBatch, val: TaskBatch, cfg: TrainConfig):
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        backbone = ConvBackbone(cfg.resolution, width=cfg.backbone_width, feature_dim=cfg.feature_dim)
        heads = make_heads(backbone, cfg.num_classes)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    params = list(backbone.parameters()) + list(heads.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.backbone_lr, weight_decay=1e-4)
    steps = cfg.backbone_epochs * math.ceil(len(train) / cfg.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.backbone_lr, total_steps=steps)
    for epoch in range(cfg.backbone_epochs):
        for idx in _group_batches(train, cfg.batch_size, gen):
            b = train.subset(idx)
            losses = multitask_loss(backbone, heads, augment(b.images, gen), b, cfg.loss_weights)
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            sched.step()
        acc = classification_accuracy(backbone, heads["classification"], val.images, val.labels)
        log.info("backbone epoch %d: loss %.4f val acc %.4f", epoch, losses["total"].item(), acc)
    backbone.eval()
    heads.eval()
    return backbone, heads, acc


def train_denoiser(train: TaskBatch, schedule: NoiseSchedule, cfg: TrainConfig) -> ToyDenoiser:
    """Regress ``x_0`` from ``x_t`` at uniformly drawn timesteps."""
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed + 2)
        denoiser = ToyDenoiser(schedule, width=cfg.denoiser_width)
    gen = torch.Generator().manual_seed(cfg.seed + 3)
    opt = torch.optim.AdamW(denoiser.parameters(), lr=cfg.denoiser_lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.denoiser_lr, total_steps=cfg.denoiser_steps)
    ab = torch.tensor(schedule.alpha_bar, dtype=torch.float32)
    t_hi = min(cfg.denoiser_t_max, len(schedule) - 1)
    for step in range(cfg.denoiser_steps):
        idx = torch.randint(0, len(train), (cfg.batch_size,), generator=gen)
        x0 = train.images[idx]
        t = torch.randint(0, t_hi + 1, (cfg.batch_size,), generator=gen)
        a = ab[t].view(-1, 1, 1, 1)
        sigma = torch.sqrt((1 - a) / a)
        x_t = torch.sqrt(a) * (x0 + sigma * torch.randn(x0.shape, generator=gen))
        loss = F.mse_loss(denoiser(x_t, t), x0)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 250 == 0:
            log.info("denoiser step %d: mse %.5f", step, loss.item())
    denoiser.eval()
    return denoiser


def finetune_on_denoised(backbone, heads, denoiser, train: TaskBatch, val: TaskBatch, cfg: TrainConfig) -> float:
    """Fine-tune backbone and heads on a mix of clean and denoised inputs."""
    backbone.requires_grad_(True)
    heads.requires_grad_(True)
    backbone.train()
    heads.train()
    gen = torch.Generator().manual_seed(cfg.seed + 11)
    params = list(backbone.parameters()) + list(heads.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.finetune_lr, weight_decay=1e-4)
    steps = cfg.finetune_epochs * math.ceil(len(train) / cfg.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.finetune_lr, total_steps=steps)
    ab = torch.tensor(denoiser.schedule.alpha_bar, dtype=torch.float32)
    t_hi = min(cfg.finetune_t_max, len(denoiser.schedule) - 1)
    acc = float("nan")
    for epoch in range(cfg.finetune_epochs):
        for idx in _group_batches(train, cfg.batch_size, gen):
            b = train.subset(idx)
            x = augment(b.images, gen)
            m = torch.rand(len(x), generator=gen) < cfg.finetune_fraction
            if m.any():
                with torch.no_grad():
                    t = torch.randint(0, t_hi + 1, (int(m.sum()),), generator=gen)
                    a = ab[t].view(-1, 1, 1, 1)
                    sigma = torch.sqrt((1 - a) / a)
                    x_t = torch.sqrt(a) * (x[m] + sigma * torch.randn(x[m].shape, generator=gen))
                    x = x.clone()
                    x[m] = denoiser(x_t, t).clamp(0, 1)
            losses = multitask_loss(backbone, heads, x, b, cfg.loss_weights)
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            sched.step()
        acc = classification_accuracy(backbone, heads["classification"], val.images, val.labels)
        log.info("finetune epoch %d: loss %.4f val acc %.4f", epoch, losses["total"].item(), acc)
    backbone.eval()
    heads.eval()
    return acc


@torch.no_grad()
def denoiser_mse(denoiser, images: torch.Tensor, t: int, gen: torch.Generator) -> float:
    from ..schedule import forward_noise

    x_t = forward_noise(images, t, denoiser.schedule, gen)
    return F.mse_loss(denoiser(x_t, t), images).item()


def build_datasets(cfg: TrainConfig) -> tuple[TaskBatch, TaskBatch]:
    samples = generate_toy_dataset(cfg.n_samples, cfg.resolution, cfg.num_classes, cfg.data_seed)
    train, val = split_by_group(samples, cfg.val_fraction, seed=cfg.data_seed)
    return TaskBatch.from_samples(train), TaskBatch.from_samples(val)


def train_toy_models(cfg: TrainConfig | None = None, schedule: NoiseSchedule | None = None, datasets=None):
    """Train backbone, heads and denoiser; returns ``(ToyStack, report)``."""
    from .checkpoint import ToyStack

    cfg = cfg or TrainConfig()
    schedule = schedule or linear_schedule()
    train, val = datasets or build_datasets(cfg)
    backbone, heads, acc = train_backbone(train, val, cfg)
    if acc < cfg.min_val_accuracy:
        raise TrainingDivergedError(f"val accuracy {acc:.3f} below {cfg.min_val_accuracy}")
    denoiser = train_denoiser(train, schedule, cfg)
    denoiser.requires_grad_(False)
    if cfg.finetune_epochs > 0:
        acc = finetune_on_denoised(backbone, heads, denoiser, train, val, cfg)
    for m in (backbone, heads, denoiser):
        m.requires_grad_(False)
    stack = ToyStack(backbone, heads, denoiser, schedule, num_classes=cfg.num_classes,
                     train_config=cfg.to_dict())
    report = {"val_accuracy": acc}
    stack.metadata["metrics"] = report
    return stack, report
