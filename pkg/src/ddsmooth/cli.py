"""Command-line entry point: ``python -m ddsmooth <subcommand> ...``.

Exit codes: 0 success, 1 validation error (bad flags or config), 2 runtime
failure. Logs go to stderr; machine-readable output goes to files under
``--out`` or to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .runner.config import TOY_NOISE_LEVELS

log = logging.getLogger("ddsmooth")

DEVICE_ENV = "DDSMOOTH_DEVICE"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def resolve_device() -> torch.device:
    """``$DDSMOOTH_DEVICE`` (``cpu``, ``cuda``, ``cuda:N``), default automatic."""
    name = os.environ.get(DEVICE_ENV, "auto").strip().lower()
    if name in ("", "auto"):
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    try:
        dev = torch.device(name)
    except RuntimeError as e:
        raise UsageError(f"{DEVICE_ENV}={name!r}: {e}") from None
    if dev.type == "cuda" and not torch.cuda.is_available():
        raise UsageError(f"{DEVICE_ENV}={name!r} but CUDA is not available")
    return dev


def _save_dataset(path: Path, batch) -> None:
    batch = batch.to("cpu")
    np.savez_compressed(
        path, images=batch.images.numpy(), labels=batch.labels.numpy(), seg_masks=batch.seg_masks.numpy(),
        depth_maps=batch.depth_maps.numpy(), groups=batch.groups.numpy(),
    )


def _load_dataset(path: Path):
    from .models import TaskBatch

    if not path.is_file():
        raise UsageError(f"no dataset file at {path}")
    with np.load(path) as z:
        batch = TaskBatch(*(torch.from_numpy(z[k]) for k in ("images", "labels", "seg_masks", "depth_maps", "groups")))
    return batch.to(resolve_device())


def _load_stack(path: str):
    from .models import ToyStack

    if not Path(path, "metadata.json").is_file():
        raise UsageError(f"no model checkpoint at {path}")
    return ToyStack.load(path).to(resolve_device())


def _level(stack, name: str, args):
    from .schedule import named_level

    return named_level(name, stack.schedule, args.low_t, args.high_t)


def cmd_gen_data(args) -> int:
    from .models import TaskBatch, generate_toy_dataset

    try:
        samples = generate_toy_dataset(args.n, args.resolution, args.num_classes, args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_dataset(out / "dataset.npz", TaskBatch.from_samples(samples))
    log.info("wrote %d samples to %s", len(samples), out / "dataset.npz")
    return 0


def cmd_train(args) -> int:
    from .models import TrainConfig, train_toy_models

    cfg = TrainConfig(
        n_samples=args.n_samples, resolution=args.resolution, num_classes=args.num_classes,
        data_seed=args.seed, seed=args.seed, backbone_epochs=args.backbone_epochs,
        denoiser_steps=args.denoiser_steps, finetune_epochs=args.finetune_epochs,
    )
    stack, report = train_toy_models(cfg)
    stack.save(args.out)
    print(json.dumps(report))
    return 0


def cmd_attack(args) -> int:
    from .attacks import preset, run_attack
    from . import tasks as T

    if args.p_diffusion > 0 and args.noise_level == "none":
        raise UsageError("--p-diffusion > 0 needs --noise-level")
    stack = _load_stack(args.models)
    data = _load_dataset(Path(args.data))
    if args.limit:
        data = data.subset(range(min(args.limit, len(data))))
    try:
        cfg = preset(
            args.method, budget=args.budget, iterations=args.iterations, p_diffusion=args.p_diffusion,
            noise_level=_level(stack, args.noise_level, args), seed=args.seed,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    with torch.no_grad():
        c_o = T.attack_reference(args.task, stack.head(args.task)(stack.backbone(data.images)))
    x_a = run_attack(data.images, c_o, stack.backbone, stack.head(args.task), T.ADAPTERS[args.task].loss,
                     stack.denoiser, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    adv = data.subset(range(len(data)))
    adv.images = x_a
    _save_dataset(out / "adversarial.npz", adv)
    _save_dataset(out / "clean.npz", data)
    (out / "attack.json").write_text(json.dumps({**cfg.to_dict(), "task": args.task}, indent=2))
    print(json.dumps({"psnr": T.psnr(data.images, x_a), "linf": float((x_a - data.images).abs().max())}))
    return 0


def cmd_defend_eval(args) -> int:
    from .defense import DefensePolicy, purify
    from . import tasks as T

    stack = _load_stack(args.models)
    data = _load_dataset(Path(args.images))
    clean = _load_dataset(Path(args.clean)) if args.clean else data
    policy = DefensePolicy("none" if args.level == "none" else "denoise", _level(stack, args.level, args), 1, args.seed)
    rng = torch.Generator(device=data.images.device).manual_seed(args.seed)
    with torch.no_grad():
        x_in = purify(data.images, policy, stack.denoiser, rng)
        z = stack.backbone(x_in)
        z_clean = stack.backbone(clean.images)
        pred = stack.head(args.task)(z)
    if args.task == "classification":
        value = T.accuracy(pred.argmax(1), data.labels)
    elif args.task == "segmentation":
        value = T.miou(pred.argmax(1), data.seg_masks, stack.num_classes + 1)
    elif args.task == "depth":
        value = T.rmse_depth(pred, data.depth_maps)
    else:
        value = T.map_retrieval(pred, z_clean[0], data.groups, clean.groups, exclude_self=True)
    result = {
        "task": args.task, "defense": args.level, T.ADAPTERS[args.task].metric_name: value,
        "cls_cos_sim": T.cosine_similarity(z_clean[0], z[0]), "n_images": len(data),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(result, indent=2))
    print(json.dumps(result))
    return 0


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.eval_size is not None:
        cfg.eval_size = args.eval_size
    if args.tasks:
        cfg.tasks = args.tasks.split(",")
    if args.models:
        cfg.models = str(Path(args.models).resolve())
    cfg.output_dir = args.out
    return cfg


def cmd_grid(args) -> int:
    from .runner import ConfigError, GridSummary, load_config, run_grid, write_reports

    try:
        cfg = _apply_overrides(load_config(args.config, check_paths=args.models is None), args)
    except ConfigError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    summary = GridSummary()
    records = run_grid(cfg, out / "results.jsonl", workers=args.workers, summary=summary)
    write_reports(records, out)
    log.info("grid: %d cells computed, %d skipped, %d failed", summary.computed, summary.skipped,
             len(summary.failures))
    return 2 if summary.failures else 0


def cmd_report(args) -> int:
    from .runner import emit_report, load_records, write_reports

    if not Path(args.store).is_file():
        raise UsageError(f"no results store at {args.store}")
    records = load_records(args.store)
    if not records:
        raise UsageError("results store is empty")
    if args.out:
        write_reports(records, args.out)
    else:
        sys.stdout.write(emit_report(records, args.format))
    return 0


def cmd_check(args) -> int:
    from .runner import MissingCellError, check_directional_claims, load_records

    if not Path(args.store).is_file():
        raise UsageError(f"no results store at {args.store}")
    try:
        results = check_directional_claims(load_records(args.store))
    except MissingCellError as e:
        raise UsageError(str(e)) from None
    payload = [r.to_dict() for r in results]
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        Path(args.out, "claims.json").write_text(text)
    print(text)
    for r in results:
        log.info("%s %s %s", "PASS" if r.passed else "FAIL", r.claim_id, r.observed)
    return 0 if all(r.passed for r in results) else 2


def cmd_demo(args) -> int:
    from PIL import Image

    from .defense import DefensePolicy, purify
    from .models import TaskBatch, generate_toy_dataset

    stack = _load_stack(args.models)
    res = stack.backbone.resolution
    data = TaskBatch.from_samples(generate_toy_dataset(args.n, res, stack.num_classes, args.seed)).to(stack.device)
    rng = torch.Generator(device=stack.device).manual_seed(args.seed)
    rows, preds = [data.images], {"clean": None}
    with torch.no_grad():
        head = stack.head("classification")
        preds["clean"] = head(stack.backbone(data.images)).argmax(1).tolist()
        for name in ("low", "high"):
            x_hat = purify(data.images, DefensePolicy("denoise", _level(stack, name, args)), stack.denoiser, rng)
            rows.append(x_hat)
            preds[name] = head(stack.backbone(x_hat)).argmax(1).tolist()
    grid = torch.cat([torch.cat(list(r), dim=2) for r in rows], dim=1).cpu()
    img = (grid.permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).resize((img.shape[1] * 4, img.shape[0] * 4), Image.NEAREST).save(out / "demo.png")
    summary = {"labels": data.labels.tolist(), "predictions": preds,
               "rows": ["clean", "low-noise denoised", "high-noise denoised"]}
    (out / "demo.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ddsmooth", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--low-t", type=int, default=TOY_NOISE_LEVELS["low"], help="timestep of the named low level")
    p.add_argument("--high-t", type=int, default=TOY_NOISE_LEVELS["high"], help="timestep of the named high level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a toy dataset")
    g.add_argument("--n", type=int, default=512)
    g.add_argument("--resolution", type=int, default=32)
    g.add_argument("--num-classes", type=int, default=4)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the toy backbone, heads and denoiser")
    t.add_argument("--n-samples", type=int, default=8000)
    t.add_argument("--resolution", type=int, default=32)
    t.add_argument("--num-classes", type=int, default=4)
    t.add_argument("--backbone-epochs", type=int, default=10)
    t.add_argument("--denoiser-steps", type=int, default=2500)
    t.add_argument("--finetune-epochs", type=int, default=4, help="epochs on denoised inputs, 0 to skip")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="craft adversarial images for one attack spec")
    a.add_argument("--models", required=True)
    a.add_argument("--data", required=True, help="dataset.npz from gen-data")
    a.add_argument("--method", choices=["pgd", "mifgsm", "sia"], required=True)
    a.add_argument("--task", choices=["classification", "segmentation", "depth", "retrieval"],
                   default="classification")
    a.add_argument("--budget", type=float, default=3 / 255)
    a.add_argument("--iterations", type=int, default=50)
    a.add_argument("--noise-level", choices=["none", "low", "high", "range"], default="none")
    a.add_argument("--p-diffusion", type=float, default=0.0)
    a.add_argument("--limit", type=int, default=0, help="use only the first N images")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attack)

    d = sub.add_parser("defend-eval", help="evaluate one defense on saved images")
    d.add_argument("--models", required=True)
    d.add_argument("--images", required=True, help="adversarial.npz or dataset.npz")
    d.add_argument("--clean", help="clean reference images (default: --images)")
    d.add_argument("--level", choices=["none", "low", "high", "range"], default="none")
    d.add_argument("--task", choices=["classification", "segmentation", "depth", "retrieval"],
                   default="classification")
    d.add_argument("--seed", type=int, default=1)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_defend_eval)

    r = sub.add_parser("grid", help="run the attack x defense x task grid and write reports")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--models")
    r.add_argument("--seed", type=int)
    r.add_argument("--eval-size", type=int)
    r.add_argument("--tasks", help="comma-separated task list")
    r.add_argument("--workers", type=int, default=1)
    r.set_defaults(func=cmd_grid)

    rp = sub.add_parser("report", help="re-render reports from a results store")
    rp.add_argument("--store", required=True)
    rp.add_argument("--format", choices=["markdown", "latex", "csv"], default="markdown")
    rp.add_argument("--out", help="write report.md/.tex/.csv here instead of stdout")
    rp.set_defaults(func=cmd_report)

    c = sub.add_parser("check", help="evaluate the directional claims; exit 0 iff all pass")
    c.add_argument("--store", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_check)

    m = sub.add_parser("demo", help="save clean / denoised image pairs with predictions")
    m.add_argument("--models", required=True)
    m.add_argument("--n", type=int, default=8)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001
        log.exception("runtime failure")
        return 2


if __name__ == "__main__":
    sys.exit(main())
