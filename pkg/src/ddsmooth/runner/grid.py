"""The attack x defense x task evaluation grid."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import torch

from ..attacks import preset, run_attack
from ..defense import DefensePolicy, purify
from ..models import ToyStack, TaskBatch, checkpoint_digest, generate_toy_dataset, take_whole_groups
from ..schedule import NoiseKind, NoiseLevel, NoiseSchedule
from .. import tasks as T
from .config import AttackSpec, DefenseSpec, ExperimentConfig
from .store import ExperimentRecord, ResultsStore

log = logging.getLogger(__name__)

RANDOM_START_TASKS = ("depth", "retrieval")


def canonical_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def derive_seed(*parts) -> int:
    return int(canonical_hash(list(parts))[:12], 16)


@dataclass
class GridContext:
    """Everything a cell needs: models, eval data and clean references."""

    cfg: ExperimentConfig
    stack: ToyStack
    data: TaskBatch
    model_digest: str
    levels: dict
    clean: dict = field(default_factory=dict)

    @classmethod
    def build(cls, cfg: ExperimentConfig, stack: ToyStack | None = None) -> "GridContext":
        stack = stack or ToyStack.load(cfg.models)
        digest = checkpoint_digest(cfg.models) if Path(cfg.models, "weights.pt").exists() else "in-memory"
        ds = cfg.dataset
        if ds["resolution"] != stack.backbone.resolution or ds["num_classes"] != stack.num_classes:
            raise ValueError("dataset resolution/num_classes do not match the checkpoint")
        samples = generate_toy_dataset(ds["n"], ds["resolution"], ds["num_classes"], ds["seed"])
        data = take_whole_groups(TaskBatch.from_samples(samples), cfg.eval_size)
        data = data.to(stack.device)
        ctx = cls(cfg, stack, data, digest, resolve_levels(cfg, stack.schedule))
        ctx._clean_references()
        return ctx

    @torch.no_grad()
    def _clean_references(self):
        z = self.stack.backbone(self.data.images)
        self.clean["cls"] = z[0]
        for task in self.cfg.tasks:
            self.clean[task] = self.stack.head(task)(z)

    def level(self, name_or_level) -> NoiseLevel:
        if isinstance(name_or_level, NoiseLevel):
            kind = name_or_level.kind.value
            if kind in self.levels and name_or_level == self.cfg.level(kind):
                return self.levels[kind]
            return name_or_level
        return self.levels[name_or_level]

    def fingerprint(self, attack: AttackSpec, defense: DefenseSpec, task: str) -> str:
        return canonical_hash(
            {
                "dataset": self.cfg.dataset,
                "eval_size": self.cfg.eval_size,
                "models": self.model_digest,
                "levels": {k: v.to_dict() for k, v in self.levels.items()},
                "attack_seed": self.cfg.seeds["attack"],
                "attack": attack.to_dict(),
                "defense": defense.to_dict(),
                "task": task,
            }
        )[:16]


def resolve_levels(cfg: ExperimentConfig, model_schedule: NoiseSchedule) -> dict:
    """Named levels as timesteps of the model's schedule.

    Timesteps in the config refer to ``cfg.schedule`` when one is given;
    they are transferred onto a different model schedule by matching sigma.
    """
    levels = {k: cfg.level(k) for k in ("none", "low", "high", "range")}
    if cfg.schedule is None:
        ref = model_schedule
    else:
        ref = NoiseSchedule.load(cfg.schedule)
    if ref != model_schedule:
        lo = model_schedule.timestep_for_sigma(ref.sigma(cfg.noise_levels["low"]))
        hi = model_schedule.timestep_for_sigma(ref.sigma(cfg.noise_levels["high"]))
        levels = {
            "none": NoiseLevel(),
            "low": NoiseLevel(NoiseKind.LOW, lo, lo),
            "high": NoiseLevel(NoiseKind.HIGH, hi, hi),
            "range": NoiseLevel(NoiseKind.RANGE, lo, hi),
        }
    for lv in levels.values():
        lv.validate(model_schedule)
    return levels


def craft(ctx: GridContext, attack: AttackSpec, task: str) -> torch.Tensor:
    x_o = ctx.data.images
    if attack.method == "none":
        return x_o
    overrides = dict(
        budget=attack.budget,
        iterations=attack.iterations,
        p_diffusion=attack.p_diffusion,
        noise_level=ctx.level(attack.noise_level),
        seed=derive_seed(ctx.cfg.seeds["attack"], attack.to_dict(), task),
    )
    if attack.step_size is not None:
        overrides["step_size"] = attack.step_size
    # the clean output is a stationary point of the depth and retrieval losses
    overrides["random_start"] = task in RANDOM_START_TASKS
    cfg = preset(attack.method, **overrides)
    c_o = T.attack_reference(task, ctx.clean[task])
    s = ctx.stack
    return run_attack(x_o, c_o, s.backbone, s.head(task), T.ADAPTERS[task].loss, s.denoiser, cfg)


@torch.no_grad()
def evaluate(ctx: GridContext, x_a: torch.Tensor, attack: AttackSpec, defense: DefenseSpec, task: str) -> dict:
    """Task metric, cls cosine similarity and PSNR for one cell."""
    policy = DefensePolicy(defense.mode, ctx.level(defense.level), 1, defense.seed)
    rng = torch.Generator(device=x_a.device).manual_seed(derive_seed(defense.seed, attack.to_dict(), task, defense.to_dict()))
    x_in = purify(x_a, policy, ctx.stack.denoiser, rng)
    z = ctx.stack.backbone(x_in)
    pred = ctx.stack.head(task)(z)
    if defense.samples > 1:
        from ..defense import defend_then_predict

        pred = defend_then_predict(x_a, DefensePolicy(defense.mode, policy.level, defense.samples, defense.seed),
                                   ctx.stack.denoiser, ctx.stack.backbone, ctx.stack.head(task), rng)
    d = ctx.data
    if task == "classification":
        value = T.accuracy(pred.argmax(1), d.labels)
    elif task == "segmentation":
        value = T.miou(pred.argmax(1), d.seg_masks, ctx.stack.num_classes + 1)
    elif task == "depth":
        value = T.rmse_depth(pred, d.depth_maps)
    else:
        value = T.map_retrieval(pred, ctx.clean["cls"], d.groups, d.groups, exclude_self=True)
    out = {T.ADAPTERS[task].metric_name: value, "cls_cos_sim": T.cosine_similarity(ctx.clean["cls"], z[0])}
    if attack.method != "none":
        p = T.psnr(d.images, x_a)
        if math.isfinite(p):
            out["psnr"] = p
    return out


@dataclass
class GridSummary:
    computed: int = 0
    skipped: int = 0
    failures: list = field(default_factory=list)


def _unit(ctx: GridContext, store: ResultsStore, attack: AttackSpec, task: str, summary: GridSummary):
    # psnr is optional: it is undefined when the attack leaves the images unchanged
    metrics = (T.ADAPTERS[task].metric_name, "cls_cos_sim")
    todo = []
    for d in ctx.cfg.defenses:
        fp = ctx.fingerprint(attack, d, task)
        if all((fp, attack.label, d.label, task, m) in store for m in metrics):
            summary.skipped += 1
        else:
            todo.append((d, fp))
    if not todo:
        return []
    t0 = time.perf_counter()
    try:
        x_a = craft(ctx, attack, task)
    except Exception as e:  # noqa: BLE001 - a failed cell must not stop the grid
        log.exception("attack %s on %s failed", attack.label, task)
        summary.failures.extend((attack.label, d.label, task, repr(e)) for d, _ in todo)
        return []
    attack_time = time.perf_counter() - t0
    out = []
    for d, fp in todo:
        t1 = time.perf_counter()
        try:
            values = evaluate(ctx, x_a, attack, d, task)
        except Exception as e:  # noqa: BLE001
            log.exception("cell %s / %s / %s failed", attack.label, d.label, task)
            summary.failures.append((attack.label, d.label, task, repr(e)))
            continue
        wall = attack_time + time.perf_counter() - t1
        stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
        for m, v in values.items():
            if (fp, attack.label, d.label, task, m) in store:
                continue
            out.append(ExperimentRecord(fp, attack.to_dict(), d.to_dict(), task, m, float(v),
                                        len(ctx.data), round(wall, 3), stamp))
        summary.computed += 1
        log.info("cell %-18s | %-5s | %-14s %s", attack.label, d.label, task,
                 " ".join(f"{k}={v:.4f}" for k, v in values.items()))
    return out


def run_grid(cfg: ExperimentConfig, store_path=None, stack: ToyStack | None = None, workers: int = 1,
             summary: GridSummary | None = None) -> list[ExperimentRecord]:
    """Evaluate every grid cell not already in the store; returns all store records.

    Attacks are crafted once per (attack, task) and shared by the defenses.
    Results are appended in config order regardless of ``workers``.
    """
    store_path = Path(store_path or Path(cfg.output_dir) / "results.jsonl")
    store = ResultsStore(store_path)
    ctx = GridContext.build(cfg, stack)
    summary = summary if summary is not None else GridSummary()
    units = [(a, t) for a in cfg.attacks for t in cfg.tasks]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            for recs in pool.map(lambda u: _unit(ctx, store, u[0], u[1], summary), units):
                store.append(recs)
    else:
        for a, t in units:
            store.append(_unit(ctx, store, a, t, summary))
    if summary.failures:
        log.warning("%d cells failed: %s", len(summary.failures), summary.failures)
    return store.records
