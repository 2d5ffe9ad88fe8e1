"""Experiment configuration: JSON schema, parsing and validation.

Example::

    {
      "dataset": {"n": 2048, "resolution": 32, "num_classes": 4, "seed": 123},
      "models": "checkpoints/toy",
      "noise_levels": {"low": 10, "high": 396},
      "attack_defaults": {"budget": 0.0117647, "iterations": 50},
      "attacks": [{"method": "none"},
                  {"method": "pgd", "noise_level": "none", "p_diffusion": 0.0},
                  {"method": "pgd", "noise_level": "low", "p_diffusion": 1.0}],
      "defenses": [{"mode": "none"},
                   {"mode": "denoise", "level": "low"},
                   {"mode": "denoise", "level": "high"}],
      "tasks": ["classification"],
      "eval_size": 256,
      "seeds": {"attack": 0, "defense": 1},
      "output_dir": "out"
    }

A defense ``level`` may also be a full ``{"kind", "t_min", "t_max"}`` object.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..attacks import DEFAULT_BUDGET, DEFAULT_ITERATIONS
from ..models.nets import TASKS
from ..schedule import LOW_T, HIGH_T, NoiseKind, NoiseLevel

METHODS = ("none", "pgd", "mifgsm", "sia")
# levels for the toy stack, whose pixels live in [0, 1] rather than [-1, 1]:
# low keeps the sigma of the reference low level after rescaling, high is
# calibrated on the toy denoiser (see README)
TOY_NOISE_LEVELS = {"low": 4, "high": 300}
LEVEL_NAMES = ("none", "low", "high", "range")


class ConfigError(ValueError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


_TOP_KEYS = {
    "dataset": False, "models": True, "schedule": False, "noise_levels": False,
    "attack_defaults": False, "attacks": True, "defenses": True, "tasks": True,
    "eval_size": False, "seeds": True, "output_dir": False,
}
_DATASET_KEYS = {"n", "resolution", "num_classes", "seed"}
_ATTACK_KEYS = {"method", "noise_level", "p_diffusion", "budget", "iterations", "step_size"}
_ATTACK_DEFAULT_KEYS = {"budget", "iterations", "step_size"}
_DEFENSE_KEYS = {"mode", "level", "samples", "seed"}
_SEED_KEYS = {"attack", "defense"}


@dataclass(frozen=True)
class AttackSpec:
    method: str = "none"
    noise_level: str = "none"
    p_diffusion: float = 0.0
    budget: float = DEFAULT_BUDGET
    iterations: int = DEFAULT_ITERATIONS
    step_size: float | None = None

    @property
    def label(self) -> str:
        if self.method == "none":
            return "none"
        return f"{self.method}/{self.noise_level}/{self.p_diffusion:.1f}"

    def to_dict(self) -> dict:
        return {
            "method": self.method, "noise_level": self.noise_level, "p_diffusion": self.p_diffusion,
            "budget": self.budget, "iterations": self.iterations, "step_size": self.step_size,
        }


@dataclass(frozen=True)
class DefenseSpec:
    mode: str = "none"
    level: NoiseLevel = field(default_factory=NoiseLevel)
    samples: int = 1
    seed: int = 0

    @property
    def label(self) -> str:
        return "none" if self.mode == "none" else self.level.kind.value

    def to_dict(self) -> dict:
        return {"mode": self.mode, "level": self.level.to_dict(), "samples": self.samples, "seed": self.seed}


@dataclass
class ExperimentConfig:
    dataset: dict
    models: str
    attacks: list[AttackSpec]
    defenses: list[DefenseSpec]
    tasks: list[str]
    seeds: dict
    eval_size: int = 256
    noise_levels: dict = field(default_factory=lambda: {"low": LOW_T, "high": HIGH_T})
    schedule: str | None = None
    output_dir: str = "out"
    raw: dict = field(default_factory=dict, repr=False)

    def level(self, name: str) -> NoiseLevel:
        lo, hi = self.noise_levels["low"], self.noise_levels["high"]
        return {
            "none": NoiseLevel(),
            "low": NoiseLevel(NoiseKind.LOW, lo, lo),
            "high": NoiseLevel(NoiseKind.HIGH, hi, hi),
            "range": NoiseLevel(NoiseKind.RANGE, lo, hi),
        }[name]

    def cells(self):
        """Every (attack, defense, task) triple, in config order."""
        for a in self.attacks:
            for task in self.tasks:
                for d in self.defenses:
                    yield a, d, task

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """All seeds replaced by ``seed`` (defense seed offset so the two streams differ)."""
        cfg = copy.deepcopy(self)
        cfg.seeds = {"attack": seed, "defense": seed + 1}
        cfg.defenses = [DefenseSpec(d.mode, d.level, d.samples, seed + 1) for d in cfg.defenses]
        cfg.dataset = {**cfg.dataset, "seed": seed}
        return cfg


def _require_keys(d, allowed: set, where: str):
    if not isinstance(d, dict):
        raise ConfigError(where, "expected an object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}.{sorted(unknown)[0]}" if where else sorted(unknown)[0], "unknown key")


def _number(v, key: str, lo=None, hi=None, integer=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(key, f"expected a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(key, f"expected an integer, got {v!r}")
    if (lo is not None and v < lo) or (hi is not None and v > hi):
        raise ConfigError(key, f"value {v} outside [{lo}, {hi}]")
    return int(v) if integer else float(v)


def _parse_level(v, cfg_levels: dict, key: str) -> NoiseLevel:
    if isinstance(v, str):
        if v not in LEVEL_NAMES:
            raise ConfigError(key, f"unknown noise level {v!r}")
        lo, hi = cfg_levels["low"], cfg_levels["high"]
        return {
            "none": NoiseLevel(),
            "low": NoiseLevel(NoiseKind.LOW, lo, lo),
            "high": NoiseLevel(NoiseKind.HIGH, hi, hi),
            "range": NoiseLevel(NoiseKind.RANGE, lo, hi),
        }[v]
    _require_keys(v, {"kind", "t_min", "t_max"}, key)
    try:
        return NoiseLevel.from_dict(v)
    except (KeyError, ValueError) as e:
        raise ConfigError(key, str(e)) from None


def parse_config(raw: dict, base_dir: Path | None = None, check_paths: bool = True) -> ExperimentConfig:
    _require_keys(raw, set(_TOP_KEYS), "")
    for k, required in _TOP_KEYS.items():
        if required and k not in raw:
            raise ConfigError(k, "missing required key")
    base_dir = base_dir or Path.cwd()

    seeds = raw["seeds"]
    _require_keys(seeds, _SEED_KEYS, "seeds")
    for k in _SEED_KEYS:
        if k not in seeds:
            raise ConfigError(f"seeds.{k}", "missing seed")
        _number(seeds[k], f"seeds.{k}", lo=0, integer=True)

    dataset = raw.get("dataset", {})
    _require_keys(dataset, _DATASET_KEYS, "dataset")
    if dataset and "seed" not in dataset:
        raise ConfigError("dataset.seed", "missing seed")
    dataset = {"n": 2048, "resolution": 32, "num_classes": 4, **dataset}
    _number(dataset["n"], "dataset.n", lo=1, integer=True)

    noise_levels = raw.get("noise_levels", {"low": LOW_T, "high": HIGH_T})
    _require_keys(noise_levels, {"low", "high"}, "noise_levels")
    noise_levels = {"low": LOW_T, "high": HIGH_T, **noise_levels}
    for k in ("low", "high"):
        _number(noise_levels[k], f"noise_levels.{k}", lo=0, integer=True)
    if noise_levels["low"] > noise_levels["high"]:
        raise ConfigError("noise_levels", "low must not exceed high")

    defaults = raw.get("attack_defaults", {})
    _require_keys(defaults, _ATTACK_DEFAULT_KEYS, "attack_defaults")

    attacks = []
    if not isinstance(raw["attacks"], list) or not raw["attacks"]:
        raise ConfigError("attacks", "expected a non-empty list")
    for i, a in enumerate(raw["attacks"]):
        key = f"attacks[{i}]"
        _require_keys(a, _ATTACK_KEYS, key)
        merged = {**defaults, **a}
        method = merged.get("method")
        if method not in METHODS:
            raise ConfigError(f"{key}.method", f"unknown method {method!r}")
        level = merged.get("noise_level", "none")
        if level not in LEVEL_NAMES:
            raise ConfigError(f"{key}.noise_level", f"unknown noise level {level!r}")
        p = _number(merged.get("p_diffusion", 0.0), f"{key}.p_diffusion", lo=0.0, hi=1.0)
        if p > 0 and level == "none":
            raise ConfigError(f"{key}.noise_level", "p_diffusion > 0 needs a noise level")
        budget = _number(merged.get("budget", DEFAULT_BUDGET), f"{key}.budget", lo=0.0, hi=1.0)
        iters = _number(merged.get("iterations", DEFAULT_ITERATIONS), f"{key}.iterations", lo=1, integer=True)
        step = merged.get("step_size")
        if step is not None:
            step = _number(step, f"{key}.step_size", lo=0.0, hi=budget)
        if method == "none":
            attacks.append(AttackSpec())
        else:
            attacks.append(AttackSpec(method, level, p, budget, iters, step))

    defenses = []
    if not isinstance(raw["defenses"], list) or not raw["defenses"]:
        raise ConfigError("defenses", "expected a non-empty list")
    for i, d in enumerate(raw["defenses"]):
        key = f"defenses[{i}]"
        _require_keys(d, _DEFENSE_KEYS, key)
        mode = d.get("mode", "none")
        if mode not in ("none", "denoise"):
            raise ConfigError(f"{key}.mode", f"unknown defense mode {mode!r}")
        samples = _number(d.get("samples", 1), f"{key}.samples", lo=1, integer=True)
        dseed = _number(d.get("seed", seeds["defense"]), f"{key}.seed", lo=0, integer=True)
        if mode == "none":
            defenses.append(DefenseSpec("none", NoiseLevel(), samples, dseed))
        else:
            if "level" not in d:
                raise ConfigError(f"{key}.level", "denoise mode needs a level")
            level = _parse_level(d["level"], noise_levels, f"{key}.level")
            if level.kind is NoiseKind.NONE:
                raise ConfigError(f"{key}.level", "denoise mode needs a level other than none")
            defenses.append(DefenseSpec("denoise", level, samples, dseed))

    tasks = raw["tasks"]
    if not isinstance(tasks, list) or not tasks:
        raise ConfigError("tasks", "expected a non-empty list")
    for t in tasks:
        if t not in TASKS:
            raise ConfigError("tasks", f"unknown task {t!r}")

    eval_size = _number(raw.get("eval_size", 256), "eval_size", lo=2, integer=True)

    models = raw["models"]
    if not isinstance(models, str):
        raise ConfigError("models", "expected a path string")
    models_path = (base_dir / models).resolve()
    schedule = raw.get("schedule")
    if check_paths:
        if not (models_path / "metadata.json").is_file():
            raise ConfigError("models", f"no checkpoint at {models_path}")
        if schedule is not None and not (base_dir / schedule).is_file():
            raise ConfigError("schedule", f"no schedule file at {base_dir / schedule}")
    if schedule is not None:
        schedule = str((base_dir / schedule).resolve())

    return ExperimentConfig(
        dataset=dataset,
        models=str(models_path),
        attacks=attacks,
        defenses=defenses,
        tasks=list(tasks),
        seeds={k: int(seeds[k]) for k in _SEED_KEYS},
        eval_size=eval_size,
        noise_levels=noise_levels,
        schedule=schedule,
        output_dir=str(raw.get("output_dir", "out")),
        raw=raw,
    )


def load_config(path, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("<file>", f"no config file at {path}")
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("<file>", f"JSON parse error at line {e.lineno}, column {e.colno}: {e.msg}") from None
    return parse_config(raw, base_dir=path.parent, check_paths=check_paths)


def full_attack_rows(budget: float = DEFAULT_BUDGET, iterations: int = DEFAULT_ITERATIONS) -> list[dict]:
    """Attack rows of the full grid: the clean row then 7 rows per method."""
    rows = [{"method": "none"}]
    for m in ("pgd", "mifgsm", "sia"):
        rows.append({"method": m, "noise_level": "none", "p_diffusion": 0.0})
        for level in ("low", "high", "range"):
            for p in (0.5, 1.0):
                rows.append({"method": m, "noise_level": level, "p_diffusion": p})
    for r in rows[1:]:
        r.update(budget=budget, iterations=iterations)
    return rows


def default_defenses() -> list[dict]:
    return [{"mode": "none"}, {"mode": "denoise", "level": "low"}, {"mode": "denoise", "level": "high"}]
