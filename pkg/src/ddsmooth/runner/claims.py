"""Directional checks of the security/utility findings on a results grid."""

from __future__ import annotations

from dataclasses import dataclass

from .store import ExperimentRecord, attack_label, defense_label

CLEAN = "none"
PGD = "pgd/none/0.0"
PGD_LOW_ADAPTIVE = "pgd/low/1.0"
PGD_HIGH_ADAPTIVE = "pgd/high/1.0"

# thresholds: accuracy points are absolute, ratios are relative to clean accuracy
COLLAPSE_RATIO = 0.10
HIGH_NOISE_MIN_DROP = 0.05
LOW_NOISE_MAX_DROP = 0.03
PROTECTION_RATIO = 0.50
ADAPTIVE_LOW_RATIO = 0.25
SELF_DESTRUCT_RATIO = 0.80


class MissingCellError(KeyError):
    def __init__(self, attack: str, defense: str, task: str, metric: str):
        super().__init__(f"missing grid cell attack={attack} defense={defense} task={task} metric={metric}")
        self.coordinates = (attack, defense, task, metric)


@dataclass(frozen=True)
class ClaimResult:
    claim_id: str
    passed: bool
    observed: dict
    description: str

    def to_dict(self) -> dict:
        return {"claim": self.claim_id, "passed": self.passed, "observed": self.observed,
                "description": self.description}


class _Lookup:
    def __init__(self, records):
        self.cells = {}
        for r in records:
            self.cells[(attack_label(r.attack), defense_label(r.defense), r.task, r.metric)] = r.value

    def __call__(self, attack, defense, metric="accuracy", task="classification") -> float:
        try:
            return self.cells[(attack, defense, task, metric)]
        except KeyError:
            raise MissingCellError(attack, defense, task, metric) from None


def check_directional_claims(records: list[ExperimentRecord], task: str = "classification") -> list[ClaimResult]:
    """Evaluate the directional claims; raises ``MissingCellError`` on incomplete grids."""
    v = _Lookup(records)
    acc = lambda a, d: v(a, d, "accuracy", task)  # noqa: E731
    cos = lambda a, d: v(a, d, "cls_cos_sim", task)  # noqa: E731

    clean = acc(CLEAN, "none")
    out = []

    attacked = acc(PGD, "none")
    out.append(ClaimResult(
        "attack_collapse", attacked <= COLLAPSE_RATIO * clean,
        {"clean": clean, "pgd": attacked},
        f"non-adaptive PGD leaves at most {COLLAPSE_RATIO:.0%} of clean accuracy",
    ))

    high = acc(CLEAN, "high")
    low = acc(CLEAN, "low")
    out.append(ClaimResult(
        "utility_cost_high_noise", clean - high >= HIGH_NOISE_MIN_DROP,
        {"clean": clean, "clean_high_defense": high},
        f"high-noise denoising costs at least {100 * HIGH_NOISE_MIN_DROP:.0f} accuracy points on clean inputs",
    ))
    out.append(ClaimResult(
        "low_noise_preserves_utility", abs(clean - low) <= LOW_NOISE_MAX_DROP,
        {"clean": clean, "clean_low_defense": low},
        f"low-noise denoising stays within {100 * LOW_NOISE_MAX_DROP:.0f} accuracy points of clean",
    ))

    protected = acc(PGD, "high")
    out.append(ClaimResult(
        "high_noise_protection", protected >= PROTECTION_RATIO * clean,
        {"clean": clean, "pgd_high_defense": protected},
        f"high-noise defense recovers at least {PROTECTION_RATIO:.0%} of clean accuracy against PGD",
    ))

    adaptive = acc(PGD_LOW_ADAPTIVE, "low")
    out.append(ClaimResult(
        "adaptive_attack_defeats_low_noise", adaptive <= ADAPTIVE_LOW_RATIO * clean,
        {"clean": clean, "adaptive_low_vs_low_defense": adaptive},
        f"attacking through low-noise denoising leaves at most {ADAPTIVE_LOW_RATIO:.0%} of clean accuracy",
    ))

    self_destruct = acc(PGD_HIGH_ADAPTIVE, "none")
    out.append(ClaimResult(
        "high_noise_attack_self_destructs", self_destruct >= SELF_DESTRUCT_RATIO * clean,
        {"clean": clean, "adaptive_high_vs_no_defense": self_destruct},
        f"attacking through high-noise denoising keeps at least {SELF_DESTRUCT_RATIO:.0%} of clean accuracy",
    ))

    c_att, c_high, c_low = cos(PGD, "none"), cos(CLEAN, "high"), cos(CLEAN, "low")
    out.append(ClaimResult(
        "cls_cos_sim_ordering", c_att < c_high < c_low,
        {"attacked": c_att, "clean_high_defense": c_high, "clean_low_defense": c_low},
        "cos(clean, attacked) < cos(clean, high-noise denoised) < cos(clean, low-noise denoised)",
    ))
    return out
