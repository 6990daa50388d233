import math

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from igd.gac import SIGMA_FLOOR, GaussianDescriptor, estimate_descriptor, gac_loss, normality_prob
from oracles import finite_diff_grad


def _desc(mu, sigma):
    return GaussianDescriptor(torch.tensor(mu, dtype=torch.float64), sigma, 1)


def test_two_point_descriptor():
    d = estimate_descriptor([(0.0, 0.0), (2.0, 0.0)])
    assert d.mu.tolist() == [1.0, 0.0]
    assert d.sigma == pytest.approx(1.0)
    assert d.n_samples == 2


def test_identical_latents_hit_the_floor():
    d = estimate_descriptor(torch.ones(5, 3))
    assert d.sigma == SIGMA_FLOOR


def test_monte_carlo_sigma_of_unit_isotropic_source():
    rng = np.random.default_rng(0)
    d = estimate_descriptor(torch.from_numpy(rng.standard_normal((10000, 2))))
    assert abs(d.sigma - math.sqrt(2)) < 0.05


def test_descriptor_errors_and_roundtrip():
    with pytest.raises(ValueError):
        estimate_descriptor([])
    with pytest.raises(ValueError):
        estimate_descriptor([(0.0, 1.0), (1.0,)])
    with pytest.raises(ValueError):
        GaussianDescriptor(torch.zeros(2), 0.0, 1)
    d = estimate_descriptor(torch.randn(20, 4))
    back = GaussianDescriptor.from_dict(d.to_dict())
    assert torch.equal(back.mu, d.mu) and back.sigma == d.sigma and back.n_samples == 20
    bad = d.to_dict()
    bad["Z"] = 5
    with pytest.raises(ValueError):
        GaussianDescriptor.from_dict(bad)


def test_no_gradient_through_estimate():
    z = torch.randn(8, 3, requires_grad=True)
    d = estimate_descriptor(z)
    assert not d.mu.requires_grad


@pytest.mark.parametrize("k, expect", [(0.0, 1.0), (1.0, math.exp(-1)), (2.0, math.exp(-4))])
def test_normality_prob_analytic(k, expect):
    d = _desc([1.0, -2.0, 0.5], 0.7)
    direction = torch.tensor([3.0, 4.0, 0.0], dtype=torch.float64) / 5
    z = d.mu + k * d.sigma * direction
    assert normality_prob(z, d).item() == pytest.approx(expect, rel=1e-12)
    assert gac_loss(z, d).item() == pytest.approx(1 - expect, rel=1e-12, abs=1e-15)


def test_batch_mean_and_reduction():
    d = _desc([0.0, 0.0], 1.0)
    assert gac_loss(torch.zeros(2, 2, dtype=torch.float64), d).item() == 0.0
    z = torch.tensor([[0.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    per = gac_loss(z, d, reduction="none")
    assert per.tolist() == pytest.approx([0.0, 1 - math.exp(-1)])
    assert gac_loss(z, d).item() == pytest.approx(per.mean().item())
    assert gac_loss(z[1], d).dim() == 0
    with pytest.raises(ValueError, match="dimension"):
        gac_loss(torch.zeros(3), d)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(0.01, 5.0), st.floats(0.1, 3.0))
def test_monotone_in_distance_and_sigma(r, dr, sigma):
    d = _desc([0.0, 0.0], sigma)
    near = gac_loss(torch.tensor([r, 0.0], dtype=torch.float64), d).item()
    # 1 - exp(-t) rounds to exactly 1.0 in float64 once t > ~37
    assume(near < 1.0)
    far = gac_loss(torch.tensor([r + dr, 0.0], dtype=torch.float64), d).item()
    assert far > near or far == 1.0
    if r > 0:
        wider = gac_loss(torch.tensor([r, 0.0], dtype=torch.float64), _desc([0.0, 0.0], sigma * 1.5)).item()
        if near > 0:
            assert wider < near


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_estimate_is_permutation_invariant(seed):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(17, 4, generator=g, dtype=torch.float64)
    perm = torch.randperm(17, generator=g)
    a, b = estimate_descriptor(z), estimate_descriptor(z[perm])
    assert torch.allclose(a.mu, b.mu, atol=1e-6)
    assert a.sigma == pytest.approx(b.sigma, rel=1e-12)


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    d = GaussianDescriptor(torch.randn(8, dtype=torch.float64), 1.3, 1)
    z = (d.mu + 0.8 * torch.randn(5, 8, dtype=torch.float64)).requires_grad_(True)
    gac_loss(z, d).backward()
    numeric = finite_diff_grad(lambda t: gac_loss(t, d), z.detach().clone(), h=1e-5)
    rel = np.linalg.norm(z.grad.reshape(-1).numpy() - numeric) / np.linalg.norm(numeric)
    assert rel < 1e-5
