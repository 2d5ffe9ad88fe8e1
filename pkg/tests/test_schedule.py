import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from scipy import stats

from ddsmooth.schedule import (
    NoiseKind,
    NoiseLevel,
    NoiseSchedule,
    forward_noise,
    linear_schedule,
    named_level,
    sigma_from_alpha,
    timestep_for_level,
)


@pytest.fixture(scope="module")
def sched():
    return linear_schedule()


@pytest.mark.parametrize("alpha, sigma", [(1.0, 0.0), (0.5, 1.0), (0.2, 2.0)])
def test_sigma_examples(alpha, sigma):
    assert sigma_from_alpha(alpha) == pytest.approx(sigma, abs=1e-15)


@pytest.mark.parametrize("alpha", [0.0, -0.1, 1.0000001, 2.0])
def test_sigma_domain(alpha):
    with pytest.raises(ValueError):
        sigma_from_alpha(alpha)


def test_sigma_closed_form_grid():
    alphas = np.linspace(1e-3, 1.0, 1000)
    got = np.array([sigma_from_alpha(a) for a in alphas])
    assert np.max(np.abs(got**2 - (1 - alphas) / alphas)) < 1e-12


@given(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0))
def test_sigma_strictly_decreasing(a, b):
    if a < b:
        assert sigma_from_alpha(a) > sigma_from_alpha(b)


def test_linear_schedule_invariants(sched):
    ab = sched.alpha_bar
    assert len(sched) == 1000
    assert np.all(np.diff(ab) <= 0)
    assert np.all((ab > 0) & (ab <= 1))
    assert sched.sigma(0) < 0.02


def test_schedule_rejects_bad_tables():
    with pytest.raises(ValueError):
        NoiseSchedule([0.9, 0.95])
    with pytest.raises(ValueError):
        NoiseSchedule([1.0, 0.0])


def test_schedule_json_round_trip(tmp_path, sched):
    sched.save(tmp_path / "s.json")
    back = NoiseSchedule.load(tmp_path / "s.json")
    assert back == sched
    assert back.name == "linear1000"


def test_forward_noise_zero_sigma_is_scaling():
    s = NoiseSchedule([1.0, 0.81], name="tiny")
    x = torch.rand(2, 3, 4, 4)
    out = forward_noise(x, 0, s, torch.Generator().manual_seed(0))
    assert torch.equal(out, x)
    # zero-noise round trip at a scaled step
    s2 = NoiseSchedule([0.81, 0.81], name="flat")
    s2_sigma0 = NoiseSchedule([1.0], name="one")
    back = forward_noise(x, 0, s2_sigma0, torch.Generator()) / math.sqrt(s2_sigma0.alpha_bar[0])
    assert torch.allclose(back, x, atol=1e-6)
    assert s2.sigma(0) > 0


def test_forward_noise_is_unclipped_and_deterministic(sched):
    x = torch.rand(4, 3, 8, 8)
    a = forward_noise(x, 396, sched, torch.Generator().manual_seed(5))
    b = forward_noise(x, 396, sched, torch.Generator().manual_seed(5))
    assert torch.equal(a, b)
    assert a.min() < 0 or a.max() > 1


def test_forward_noise_index_error(sched):
    with pytest.raises(IndexError):
        forward_noise(torch.zeros(1, 1, 2, 2), 1000, sched, torch.Generator())
    with pytest.raises(IndexError):
        forward_noise(torch.zeros(1, 1, 2, 2), -1, sched, torch.Generator())


@pytest.mark.parametrize("t", [10, 100, 396])
def test_forward_noise_moments_on_zeros(sched, t):
    n = 100_000
    out = forward_noise(torch.zeros(n, dtype=torch.float64), t, sched, torch.Generator().manual_seed(t))
    expected_std = math.sqrt(sched.alpha_bar[t]) * sched.sigma(t)
    assert abs(out.mean().item()) < 0.01 * expected_std
    assert out.std().item() == pytest.approx(expected_std, rel=0.01)


@pytest.mark.parametrize("t", [10, 396])
def test_forward_noise_expectation(sched, t):
    x = torch.tensor([0.0, 0.25, 0.5, 1.0], dtype=torch.float64)
    draws = forward_noise(x.expand(100_000, 4), t, sched, torch.Generator().manual_seed(1))
    assert torch.allclose(draws.mean(0), math.sqrt(sched.alpha_bar[t]) * x, atol=0.01)


def test_timestep_for_level_fixed():
    g = torch.Generator().manual_seed(0)
    assert timestep_for_level(NoiseLevel(NoiseKind.LOW, 10, 10), g) == 10
    assert timestep_for_level(NoiseLevel(NoiseKind.HIGH, 396, 396), g) == 396


def test_timestep_for_level_none_is_an_error():
    with pytest.raises(ValueError):
        timestep_for_level(NoiseLevel(), torch.Generator())


def test_timestep_for_level_uniform():
    level = NoiseLevel(NoiseKind.RANGE, 10, 396)
    g = torch.Generator().manual_seed(3)
    draws = np.array([timestep_for_level(level, g) for _ in range(387 * 60)])
    assert draws.min() >= 10 and draws.max() <= 396
    counts = np.bincount(draws - 10, minlength=387)
    assert stats.chisquare(counts).pvalue > 0.01


def test_noise_level_validation():
    with pytest.raises(ValueError):
        NoiseLevel(NoiseKind.RANGE, 20, 10)
    with pytest.raises(ValueError):
        NoiseLevel(NoiseKind.LOW, 5, 2000).validate(linear_schedule())


def test_named_levels_on_reference_schedule(sched):
    assert named_level("low", sched) == NoiseLevel(NoiseKind.LOW, 10, 10)
    assert named_level("high", sched) == NoiseLevel(NoiseKind.HIGH, 396, 396)
    assert named_level("range", sched) == NoiseLevel(NoiseKind.RANGE, 10, 396)
    assert named_level("none").kind is NoiseKind.NONE


def test_named_levels_transfer_by_sigma(sched):
    short = linear_schedule(t_max=200, beta_end=0.1)
    lvl = named_level("high", short)
    assert lvl.t_min != 396
    assert short.sigma(lvl.t_min) == pytest.approx(sched.sigma(396), rel=0.05)
