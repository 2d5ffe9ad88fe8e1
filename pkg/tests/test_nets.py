import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from ddsmooth import tasks as T
from ddsmooth.models import (
    AnalyticDenoiser,
    ConvBackbone,
    EpsPredictionDenoiser,
    ToyDenoiser,
    analytic_denoise,
    features,
    make_heads,
)
from ddsmooth.schedule import linear_schedule

from gradcheck import directional_errors

SCHED = linear_schedule()


@pytest.fixture(scope="module")
def net64():
    torch.manual_seed(0)
    bb = ConvBackbone(32, width=8, feature_dim=16).double()
    heads = make_heads(bb, 4).double()
    return bb, heads


def test_feature_shapes_and_batch_consistency(net64):
    bb, _ = net64
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    cls, tokens = features(bb, torch.cat([x, x]))
    assert cls.shape == (2, 16) and tokens.shape == (2, 64, 16)
    assert torch.equal(cls[0], cls[1]) and torch.equal(tokens[0], tokens[1])
    assert T.cosine_similarity(cls[:1], cls[1:]) == pytest.approx(1.0)


def test_backbone_rejects_wrong_shape(net64):
    with pytest.raises(ValueError):
        net64[0](torch.rand(1, 3, 16, 16, dtype=torch.float64))


def test_head_output_contracts(net64):
    bb, heads = net64
    z = bb(torch.rand(2, 3, 32, 32, dtype=torch.float64))
    assert heads["classification"](z).shape == (2, 4)
    assert heads["segmentation"](z).shape == (2, 5, 32, 32)
    depth = heads["depth"](z)
    assert depth.shape == (2, 32, 32) and (depth >= 0).all()
    assert heads["retrieval"](z).shape == (2, 16)


def test_backbone_gradcheck(net64):
    bb, _ = net64
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    assert max(directional_errors(lambda v: bb(v)[0].sum(), x)) <= 1e-4
    assert max(directional_errors(lambda v: bb(v)[1].square().mean(), x, seed=1)) <= 1e-4


@pytest.mark.parametrize("task", ["classification", "segmentation", "depth", "retrieval"])
def test_attack_loss_gradcheck(net64, task):
    bb, heads = net64
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    with torch.no_grad():
        ref = T.attack_reference(task, heads[task](bb(x)))
    x_start = (x + 0.02 * torch.randn_like(x)).clamp(0, 1)
    loss = T.attack_losses()[task]
    assert max(directional_errors(lambda v: loss(heads[task](bb(v)), ref), x_start)) <= 1e-4


def test_denoiser_gradcheck():
    torch.manual_seed(1)
    den = ToyDenoiser(SCHED, width=8).double()
    torch.nn.init.normal_(den.out.weight, std=0.1)
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    for t in (10, 396):
        assert max(directional_errors(lambda v: den(v, t).square().sum(), x)) <= 1e-4


def test_untrained_toy_denoiser_is_the_gaussian_posterior_mean():
    den = ToyDenoiser(SCHED, width=8, data_mean=0.5, data_std=0.3)
    x = torch.randn(2, 3, 8, 8)
    for t in (0, 10, 396, 999):
        want = analytic_denoise(x, t, 0.5, 0.3, SCHED)
        assert torch.allclose(den(x, t), want, atol=1e-5)


def test_denoiser_accepts_per_sample_timesteps():
    den = AnalyticDenoiser(SCHED)
    x = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    both = den(x, torch.tensor([10, 396]))
    assert torch.allclose(both[0], den(x[:1], 10)[0])
    assert torch.allclose(both[1], den(x[1:], 396)[0])


def test_analytic_limits():
    x = torch.randn(3, 2, 2, dtype=torch.float64)
    flat = linear_schedule(t_max=3, beta_start=0.0, beta_end=0.1)
    assert flat.sigma(0) == 0
    assert torch.equal(analytic_denoise(x, 0, 0.5, 0.3, flat), x / math.sqrt(flat.alpha_bar[0]))
    assert torch.allclose(analytic_denoise(x, 500, 0.5, 1e-9, SCHED), torch.full_like(x, 0.5))
    with pytest.raises(ValueError):
        analytic_denoise(x, 10, 0.5, 0.0, SCHED)
    with pytest.raises(ValueError):
        AnalyticDenoiser(SCHED, prior_std=-1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 999), st.floats(0.05, 2.0), st.floats(-1.0, 2.0), st.integers(0, 2**16))
def test_analytic_shrinkage(t, prior_std, prior_mean, seed):
    x_t = torch.randn(8, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * 3
    out = analytic_denoise(x_t, t, prior_mean, prior_std, SCHED)
    scaled = x_t / math.sqrt(SCHED.alpha_bar[t])
    assert (out - prior_mean).norm() <= (scaled - prior_mean).norm() + 1e-12


def test_eps_wrapper_inverts_forward_noise():
    x0 = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(x0)
    t = 200
    ab = SCHED.alpha_bar[t]
    x_t = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps

    class Oracle(torch.nn.Module):
        def forward(self, x, t):
            return eps

    assert torch.allclose(EpsPredictionDenoiser(Oracle(), SCHED)(x_t, t), x0)
