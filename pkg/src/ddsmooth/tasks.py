"""Attack losses and evaluation metrics for the four downstream tasks.

Attack losses follow a "larger = more damage" convention so the attack
engine always ascends. They return a sum over the batch so that each
image's gradient does not depend on the batch size.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

SIMPLEX_TOL = 1e-6


def _np(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        return a.detach().cpu().numpy()
    return np.asarray(a)


def margin_loss(probs, c_o):
    """``p(c_o) - max_{c != c_o} p(c)``; negative means misclassified.

    Accepts a single probability vector (returns a float) or a batch of
    shape ``(N, K)`` with ``c_o`` of shape ``(N,)`` (returns a tensor).
    """
    is_tensor = isinstance(probs, torch.Tensor)
    p = probs if is_tensor else torch.as_tensor(np.asarray(probs, dtype=np.float64))
    single = p.ndim == 1
    if single:
        p = p.unsqueeze(0)
    if p.shape[-1] < 2:
        raise ValueError("need at least two classes")
    if (p < -SIMPLEX_TOL).any() or ((p.sum(-1) - 1).abs() > SIMPLEX_TOL).any():
        raise ValueError("probs must lie on the probability simplex")
    c = torch.as_tensor(c_o, dtype=torch.long, device=p.device).reshape(-1)
    true = p.gather(1, c[:, None]).squeeze(1)
    others = p.scatter(1, c[:, None], float("-inf")).max(dim=1).values
    out = true - others
    if single:
        return out[0] if is_tensor else float(out[0])
    return out


def classification_loss(logits: torch.Tensor, c_o: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, c_o, reduction="sum")


def segmentation_loss(logits: torch.Tensor, mask_o: torch.Tensor) -> torch.Tensor:
    """Pixel-mean cross-entropy per image, summed over images."""
    per_pixel = F.cross_entropy(logits, mask_o, reduction="none")
    return per_pixel.flatten(1).mean(1).sum()


def depth_loss(depth: torch.Tensor, depth_o: torch.Tensor) -> torch.Tensor:
    """Per-image RMSE against the reference depth, summed over images."""
    mse = ((depth - depth_o) ** 2).flatten(1).mean(1)
    # sqrt has an infinite derivative at 0; the epsilon keeps step one finite
    return torch.sqrt(mse + 1e-12).sum()


def retrieval_loss(emb: torch.Tensor, emb_o: torch.Tensor) -> torch.Tensor:
    """Negative cosine similarity to the clean embedding, summed over images."""
    return -F.cosine_similarity(emb, emb_o, dim=1, eps=1e-12).sum()


def attack_losses() -> dict[str, Callable[[torch.Tensor, torch.Tensor], torch.Tensor]]:
    return {
        "classification": classification_loss,
        "segmentation": segmentation_loss,
        "depth": depth_loss,
        "retrieval": retrieval_loss,
    }


def attack_reference(task: str, prediction: torch.Tensor) -> torch.Tensor:
    """What the attacker moves away from: the clean model output (no labels needed)."""
    if task in ("classification", "segmentation"):
        return prediction.argmax(1)
    return prediction.detach()


def accuracy(preds, labels) -> float:
    preds, labels = _np(preds).ravel(), _np(labels).ravel()
    if preds.size == 0:
        raise ValueError("accuracy of an empty set")
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    return float(np.mean(preds == labels))


def confusion_matrix(pred_mask, gt_mask, num_classes: int) -> np.ndarray:
    pred, gt = _np(pred_mask).ravel().astype(np.int64), _np(gt_mask).ravel().astype(np.int64)
    return np.bincount(gt * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def miou(pred_mask, gt_mask, num_classes: int, include_background: bool = True) -> float:
    """Mean IoU over classes present in either mask, pooled over all pixels given.

    Label 0 is background; ``include_background=False`` drops it from the mean.
    """
    pred, gt = _np(pred_mask), _np(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.size and (max(pred.max(), gt.max()) >= num_classes or min(pred.min(), gt.min()) < 0):
        raise ValueError("mask values must lie in [0, num_classes)")
    cm = confusion_matrix(pred, gt, num_classes)
    inter = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - inter
    present = union > 0
    if not include_background:
        present[0] = False
    if not present.any():
        return 1.0
    return float(np.mean(inter[present] / union[present]))


def rmse_depth(pred, gt) -> float:
    pred, gt = _np(pred).astype(np.float64), _np(gt).astype(np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not (np.isfinite(pred).all() and np.isfinite(gt).all()):
        raise ValueError("depth maps must be finite")
    return float(np.sqrt(np.mean((pred - gt) ** 2)))


def average_precision(ranked_relevance: np.ndarray) -> float:
    rel = np.asarray(ranked_relevance, dtype=bool)
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return float(np.mean(hits[rel] / ranks))


def map_retrieval(query_embeddings, gallery_embeddings, query_groups, gallery_groups=None,
                  exclude_self: bool = False) -> float:
    """Mean average precision of a cosine-ranked gallery.

    ``exclude_self`` drops gallery item ``i`` from query ``i``'s ranking
    (queries and gallery are then the same images in the same order).
    Queries with no positive are skipped with a warning.
    """
    q = _np(query_embeddings).astype(np.float64)
    g = _np(gallery_embeddings).astype(np.float64)
    qg = _np(query_groups)
    gg = qg if gallery_groups is None else _np(gallery_groups)
    if len(q) == 0:
        raise ValueError("need at least one query")
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    gn = g / np.linalg.norm(g, axis=1, keepdims=True)
    sims = qn @ gn.T
    aps, skipped = [], 0
    for i in range(len(q)):
        keep = np.ones(len(g), dtype=bool)
        if exclude_self:
            keep[i] = False
        idx = np.flatnonzero(keep)
        order = idx[np.argsort(-sims[i, idx], kind="stable")]
        rel = gg[order] == qg[i]
        if not rel.any():
            skipped += 1
            continue
        aps.append(average_precision(rel))
    if skipped:
        warnings.warn(f"{skipped} queries without gallery positives were skipped")
    if not aps:
        raise ValueError("no query has a gallery positive")
    return float(np.mean(aps))


def cosine_similarity(a, b) -> float:
    """Mean row-wise cosine similarity; raises on a zero embedding."""
    a = _np(a).astype(np.float64).reshape(len(a), -1)
    b = _np(b).astype(np.float64).reshape(len(b), -1)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("zero-vector embedding; degenerate backbone")
    return float(np.mean(np.sum(a * b, axis=1) / (na * nb)))


@torch.no_grad()
def cls_cos_sim(backbone, x_o: torch.Tensor, x_a: torch.Tensor) -> float:
    if x_o.shape != x_a.shape:
        raise ValueError("x_o and x_a must have the same shape")
    return cosine_similarity(backbone(x_o)[0], backbone(x_a)[0])


def psnr(x_o, x_a) -> float:
    """``10 log10(1 / MSE)`` over the whole array, images in [0, 1]; inf if identical."""
    x_o, x_a = _np(x_o).astype(np.float64), _np(x_a).astype(np.float64)
    mse = np.mean((x_o - x_a) ** 2)
    if mse == 0:
        return math.inf
    return float(10 * np.log10(1.0 / mse))


@dataclass(frozen=True)
class TaskAdapter:
    task: str
    loss: Callable
    metric_name: str
    direction: str  # "higher_better" or "lower_better"


ADAPTERS = {
    "classification": TaskAdapter("classification", classification_loss, "accuracy", "higher_better"),
    "segmentation": TaskAdapter("segmentation", segmentation_loss, "miou", "higher_better"),
    "depth": TaskAdapter("depth", depth_loss, "rmse", "lower_better"),
    "retrieval": TaskAdapter("retrieval", retrieval_loss, "map", "higher_better"),
}

METRIC_DIRECTIONS = {a.metric_name: a.direction for a in ADAPTERS.values()}
METRIC_DIRECTIONS.update({"cls_cos_sim": "higher_better", "psnr": "higher_better"})
