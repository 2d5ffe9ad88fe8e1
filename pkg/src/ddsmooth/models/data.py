"""Procedural multi-task toy scenes.

Every sample is a textured background carrying one large "dominant" shape
(which sets the class label) and, usually, a smaller distractor shape of a
different kind drawn behind it. From the same render we get a segmentation
mask, a depth map and a retrieval group (the scene template the sample was
jittered from).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

SHAPE_KINDS = ("circle", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar")


@dataclass
class ToySample:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    class_label: int
    seg_mask: np.ndarray  # (H, W) int64, 0 = background, k + 1 = shape kind k
    depth_map: np.ndarray  # (H, W) float32, nonnegative
    retrieval_group: int


def shape_mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Footprint of ``kind`` in normalised coordinates (unit radius)."""
    au, av = np.abs(u), np.abs(v)
    if kind == "circle":
        return u**2 + v**2 <= 1.0
    if kind == "square":
        return np.maximum(au, av) <= 0.8
    if kind == "triangle":
        return (v <= 0.75) & (au <= 0.6 * (v + 0.95))
    if kind == "cross":
        return ((au <= 0.3) & (av <= 0.95)) | ((av <= 0.3) & (au <= 0.95))
    if kind == "ring":
        r2 = u**2 + v**2
        return (r2 <= 1.0) & (r2 >= 0.3)
    if kind == "diamond":
        return au + av <= 1.0
    if kind == "hbar":
        return (au <= 1.0) & (av <= 0.35)
    if kind == "vbar":
        return (av <= 1.0) & (au <= 0.35)
    raise ValueError(f"unknown shape kind {kind!r}")


@dataclass
class _Template:
    cls: int
    color: np.ndarray
    bg_a: np.ndarray
    bg_b: np.ndarray
    stripe_freq: float
    stripe_phase: float
    center: np.ndarray
    radius: float
    distractor: int | None
    d_color: np.ndarray = field(default_factory=lambda: np.zeros(3))
    d_center: np.ndarray = field(default_factory=lambda: np.zeros(2))
    d_radius: float = 0.0


def _contrasting_color(rng: np.random.Generator, bg: np.ndarray) -> np.ndarray:
    while True:
        c = rng.uniform(0.0, 1.0, 3)
        if np.abs(c - bg).mean() >= 0.35:
            return c


def _make_template(rng: np.random.Generator, cls: int, num_classes: int) -> _Template:
    bg_a = rng.uniform(0.1, 0.9, 3)
    bg_b = np.clip(bg_a + rng.uniform(-0.15, 0.15, 3), 0.0, 1.0)
    radius = rng.uniform(0.24, 0.32)
    center = rng.uniform(0.5 - 0.16, 0.5 + 0.16, 2)
    distractor = None
    tpl = _Template(
        cls=cls,
        color=_contrasting_color(rng, bg_a),
        bg_a=bg_a,
        bg_b=bg_b,
        stripe_freq=rng.uniform(1.0, 4.0),
        stripe_phase=rng.uniform(0, 2 * np.pi),
        center=center,
        radius=radius,
        distractor=distractor,
    )
    if rng.uniform() < 0.7:
        others = [k for k in range(num_classes) if k != cls]
        tpl.distractor = int(rng.choice(others))
        tpl.d_color = _contrasting_color(rng, bg_a)
        tpl.d_radius = rng.uniform(0.10, 0.14)
        tpl.d_center = rng.uniform(0.15, 0.85, 2)
    return tpl


def _render(tpl: _Template, rng: np.random.Generator, res: int):
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    yy = (yy + 0.5) / res
    xx = (xx + 0.5) / res

    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * tpl.stripe_freq * (xx + yy) + tpl.stripe_phase)
    image = tpl.bg_a[:, None, None] * (1 - stripes) + tpl.bg_b[:, None, None] * stripes
    image = image + rng.normal(0.0, 0.02, image.shape)
    seg = np.zeros((res, res), dtype=np.int64)
    # far at the top of the frame, near at the bottom
    depth = 4.0 + 4.0 * (1.0 - yy)

    if tpl.distractor is not None:
        c = tpl.d_center + rng.uniform(-0.03, 0.03, 2)
        r = tpl.d_radius * rng.uniform(0.92, 1.08)
        m = shape_mask(SHAPE_KINDS[tpl.distractor], (xx - c[0]) / r, (yy - c[1]) / r)
        color = np.clip(tpl.d_color + rng.uniform(-0.05, 0.05, 3), 0, 1)
        image[:, m] = color[:, None]
        seg[m] = tpl.distractor + 1
        depth[m] = 0.5 / r

    c = tpl.center + rng.uniform(-0.04, 0.04, 2)
    r = tpl.radius * rng.uniform(0.92, 1.08)
    m = shape_mask(SHAPE_KINDS[tpl.cls], (xx - c[0]) / r, (yy - c[1]) / r)
    color = np.clip(tpl.color + rng.uniform(-0.05, 0.05, 3), 0, 1)
    image[:, m] = color[:, None]
    seg[m] = tpl.cls + 1
    depth[m] = 0.5 / r

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return image, seg, depth.astype(np.float32)


def generate_toy_dataset(
    n: int, resolution: int = 32, num_classes: int = 4, seed: int = 0, group_size: int = 4
) -> list[ToySample]:
    """Render ``n`` toy scenes; deterministic in ``seed``.

    Samples come in groups of ``group_size`` jittered renders of one template
    (the last group absorbs any remainder so that no group is a singleton).
    Template classes cycle through ``range(num_classes)`` so the class
    histogram is as flat as the group structure allows.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if resolution < 32:
        raise ValueError("resolution must be >= 32")
    if not 2 <= num_classes <= len(SHAPE_KINDS):
        raise ValueError(f"num_classes must lie in [2, {len(SHAPE_KINDS)}]")
    if group_size < 2:
        raise ValueError("group_size must be >= 2")

    rng = np.random.default_rng(seed)
    n_groups = max(1, n // group_size)
    group_of = np.minimum(np.arange(n) // group_size, n_groups - 1)
    classes = rng.permutation(np.arange(n_groups) % num_classes)
    templates = [_make_template(rng, int(classes[g]), num_classes) for g in range(n_groups)]

    samples = []
    for i in range(n):
        g = int(group_of[i])
        image, seg, depth = _render(templates[g], rng, resolution)
        samples.append(ToySample(image, templates[g].cls, seg, depth, g))
    order = rng.permutation(n)
    return [samples[i] for i in order]


def split_by_group(
    samples: list[ToySample], val_fraction: float, seed: int = 0
) -> tuple[list[ToySample], list[ToySample]]:
    """Split keeping every retrieval group whole."""
    groups = np.unique([s.retrieval_group for s in samples])
    rng = np.random.default_rng(seed)
    rng.shuffle(groups)
    n_val = int(round(val_fraction * len(groups)))
    val_groups = set(groups[:n_val].tolist())
    train = [s for s in samples if s.retrieval_group not in val_groups]
    val = [s for s in samples if s.retrieval_group in val_groups]
    return train, val


@dataclass
class TaskBatch:
    """Tensors for a batch of samples; the seam for non-toy datasets."""

    images: torch.Tensor  # (N, C, H, W)
    labels: torch.Tensor  # (N,)
    seg_masks: torch.Tensor  # (N, H, W)
    depth_maps: torch.Tensor  # (N, H, W)
    groups: torch.Tensor  # (N,)

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "TaskBatch":
        idx = torch.as_tensor(idx, dtype=torch.long, device=self.images.device)
        return TaskBatch(
            self.images[idx], self.labels[idx], self.seg_masks[idx],
            self.depth_maps[idx], self.groups[idx],
        )

    def to(self, device) -> "TaskBatch":
        return TaskBatch(*(t.to(device) for t in (self.images, self.labels, self.seg_masks, self.depth_maps, self.groups)))

    @classmethod
    def from_samples(cls, samples: list[ToySample]) -> "TaskBatch":
        return cls(
            images=torch.from_numpy(np.stack([s.image for s in samples])),
            labels=torch.tensor([s.class_label for s in samples], dtype=torch.long),
            seg_masks=torch.from_numpy(np.stack([s.seg_mask for s in samples])),
            depth_maps=torch.from_numpy(np.stack([s.depth_map for s in samples])),
            groups=torch.tensor([s.retrieval_group for s in samples], dtype=torch.long),
        )


def take_whole_groups(batch: TaskBatch, n: int) -> TaskBatch:
    """First ``n`` images of ``batch`` after sorting by group, groups kept whole.

    May return slightly fewer than ``n`` images to avoid orphaning a group
    member; always returns at least one full group.
    """
    groups = batch.groups.tolist()
    order = sorted(range(len(groups)), key=lambda i: (groups[i], i))
    chosen: list[int] = []
    for g in dict.fromkeys(groups[i] for i in order):
        members = [i for i in order if groups[i] == g]
        if chosen and len(chosen) + len(members) > n:
            break
        chosen.extend(members)
    return batch.subset(sorted(chosen))
