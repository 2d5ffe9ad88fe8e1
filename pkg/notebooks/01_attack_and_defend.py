# %% [markdown]
# Attack a batch of toy scenes with PGD, then purify with low and high noise.

# %%
from pathlib import Path

import torch

from ddsmooth import tasks as T
from ddsmooth.attacks import preset, run_attack
from ddsmooth.defense import DefensePolicy, purify
from ddsmooth.models import TaskBatch, ToyStack, generate_toy_dataset, take_whole_groups
from ddsmooth.runner import TOY_NOISE_LEVELS
from ddsmooth.schedule import NoiseKind, NoiseLevel

stack = ToyStack.load(Path(__file__).resolve().parents[1] / ".toy_cache" / "toy")
data = take_whole_groups(TaskBatch.from_samples(generate_toy_dataset(512, seed=123)), 128)
bb, head = stack.backbone, stack.head("classification")
lo, hi = TOY_NOISE_LEVELS["low"], TOY_NOISE_LEVELS["high"]
LEVELS = {"low": NoiseLevel(NoiseKind.LOW, lo, lo), "high": NoiseLevel(NoiseKind.HIGH, hi, hi)}


def acc(x, level=None):
    if level is not None:
        x = purify(x, DefensePolicy("denoise", LEVELS[level]), stack.denoiser, torch.Generator().manual_seed(0))
    with torch.no_grad():
        return T.accuracy(head(bb(x)).argmax(1), data.labels)


# %%
with torch.no_grad():
    c_o = head(bb(data.images)).argmax(1)
attacks = {
    "pgd": preset("pgd", budget=8 / 255),
    "pgd through low noise": preset("pgd", budget=8 / 255, p_diffusion=1.0, noise_level=LEVELS["low"]),
    "pgd through high noise": preset("pgd", budget=8 / 255, p_diffusion=1.0, noise_level=LEVELS["high"]),
}
print(f"{'input':24s} {'none':>6s} {'low':>6s} {'high':>6s}")
print(f"{'clean':24s} {acc(data.images):6.3f} {acc(data.images, 'low'):6.3f} {acc(data.images, 'high'):6.3f}")
for name, cfg in attacks.items():
    x_a = run_attack(data.images, c_o, bb, head, T.classification_loss, stack.denoiser, cfg)
    print(f"{name:24s} {acc(x_a):6.3f} {acc(x_a, 'low'):6.3f} {acc(x_a, 'high'):6.3f}")
