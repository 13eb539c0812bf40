from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import kstwo

from attrcert.geometry import (BallSpec, CertificateInfeasible, sample_uniform_ball,
                               sample_uniform_ball_batch, substream, volume_ratio_vU)


def mc_ratio(d: int, r: float, eps: float, n: int, seed: int) -> tuple[float, float]:
    """Symmetric-difference ratio by box rejection: points uniform in B(0, r)
    that fall outside B(eps e1, r), times two. Returns (estimate, standard error)."""
    rng = np.random.default_rng(seed)
    pts = np.empty((0, d))
    while pts.shape[0] < n:
        cand = rng.uniform(-r, r, size=(2 * n, d))
        pts = np.concatenate([pts, cand[np.einsum("ij,ij->i", cand, cand) <= r * r]])
    pts = pts[:n]
    shifted = pts.copy()
    shifted[:, 0] -= eps
    p = float(np.mean(np.einsum("ij,ij->i", shifted, shifted) > r * r))
    return 2.0 * p, 2.0 * math.sqrt(p * (1.0 - p) / n)


def test_ball_spec_validation():
    with pytest.raises(ValueError):
        BallSpec(0, 1.0)
    with pytest.raises(ValueError):
        BallSpec(3, 0.0)


@pytest.mark.parametrize("d", [1, 2, 5, 64, 784])
def test_ratio_endpoints(d):
    ball = BallSpec(d, 0.7)
    assert volume_ratio_vU(ball, 0.0).vU_over_vS == 0.0
    assert volume_ratio_vU(ball, 1.4).vU_over_vS == pytest.approx(2.0, abs=1e-15)


def test_ratio_infeasible_beyond_diameter():
    with pytest.raises(CertificateInfeasible):
        volume_ratio_vU(BallSpec(3, 1.0), 2.0000001)


def test_ratio_d1_closed_form_grid():
    for r in (0.3, 1.0, 2.5):
        for eps in np.linspace(0.0, 2 * r, 50):
            assert volume_ratio_vU(BallSpec(1, r), eps).vU_over_vS == pytest.approx(eps / r, abs=1e-9)


def test_ratio_d2_lens_area():
    # two unit disks at distance s overlap in 2 acos(s/2) - (s/2) sqrt(4 - s^2)
    s = 0.5
    lens = 2.0 * math.acos(s / 2) - (s / 2) * math.sqrt(4 - s * s)
    expected = 2.0 * (1.0 - lens / math.pi)
    assert volume_ratio_vU(BallSpec(2, 1.0), s).vU_over_vS == pytest.approx(expected, abs=1e-13)


@pytest.mark.parametrize("d, r, eps", [(2, 1.0, 0.5), (3, 1.0, 0.5), (2, 0.5, 0.9), (3, 2.0, 0.2)])
def test_ratio_matches_monte_carlo(d, r, eps):
    est, se = mc_ratio(d, r, eps, 200_000, seed=d * 1000 + int(eps * 100))
    assert abs(volume_ratio_vU(BallSpec(d, r), eps).vU_over_vS - est) <= 3 * se


def test_cap_height():
    assert volume_ratio_vU(BallSpec(4, 1.0), 0.5).cap_height == pytest.approx(0.75)


@settings(max_examples=200, deadline=None)
@given(d=st.integers(1, 2000), r=st.floats(0.01, 10.0), f1=st.floats(0, 1), f2=st.floats(0, 1))
def test_ratio_monotone_in_eps(d, r, f1, f2):
    lo, hi = sorted((f1, f2))
    ball = BallSpec(d, r)
    assert volume_ratio_vU(ball, 2 * r * lo).vU_over_vS <= volume_ratio_vU(ball, 2 * r * hi).vU_over_vS + 1e-15


@settings(max_examples=200, deadline=None)
@given(d=st.integers(1, 2000), r=st.floats(0.01, 10.0), f=st.floats(0, 1))
def test_ratio_scale_invariant(d, r, f):
    a = volume_ratio_vU(BallSpec(d, r), 2 * r * f).vU_over_vS
    b = volume_ratio_vU(BallSpec(d, 1.0), 2 * f).vU_over_vS
    assert a == pytest.approx(b, abs=1e-12)


def test_ratio_small_eps_keeps_relative_accuracy():
    # for tiny eps the ratio is ~ eps * 2 Gamma(d/2+1) / (sqrt(pi) r Gamma((d+1)/2))
    d, r, eps = 64, 1.0, 1e-9
    lead = 2 * eps * math.exp(math.lgamma(d / 2 + 1) - math.lgamma((d + 1) / 2)) / (math.sqrt(math.pi) * r)
    assert volume_ratio_vU(BallSpec(d, r), eps).vU_over_vS == pytest.approx(lead, rel=1e-6)


@pytest.mark.parametrize("d, r", [(1, 1.0), (5, 2.0), (64, 0.5)])
def test_sampler_radial_law(d, r):
    n = 100_000
    pts = sample_uniform_ball_batch(BallSpec(d, r), n, substream(11, d))
    s = np.sort(np.linalg.norm(pts, axis=1) / r)
    assert s.max() <= 1.0
    cdf = s ** d
    i = np.arange(1, n + 1)
    stat = max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n))
    assert stat < kstwo.ppf(0.99, n)


def test_sampler_support_and_determinism():
    ball = BallSpec(10, 0.3)
    a = sample_uniform_ball_batch(ball, 1000, substream(5, 1))
    b = sample_uniform_ball_batch(ball, 1000, substream(5, 1))
    assert np.array_equal(a, b)
    assert np.all(np.linalg.norm(a, axis=1) <= 0.3 * (1 + 1e-15))
    c = sample_uniform_ball_batch(ball, 1000, substream(5, 2))
    assert not np.array_equal(a, c)
    one = sample_uniform_ball(ball, substream(5, 3))
    assert one.shape == (10,) and np.linalg.norm(one) <= 0.3 * (1 + 1e-15)


def test_sampler_directions_isotropic():
    pts = sample_uniform_ball_batch(BallSpec(3, 1.0), 60_000, substream(2))
    assert np.all(np.abs(pts.mean(axis=0)) < 0.01)
