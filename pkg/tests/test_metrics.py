import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from jco_mvton.errors import ContractError
from jco_mvton.metrics import feature_stats, frechet_distance, psnr, ssim, ssim_map, toy_frechet


def window_ssim(a, b, c1=1e-4, c2=9e-4):
    """SSIM of a single window, written out term by term."""
    ma, mb = a.mean(), b.mean()
    va = ((a - ma) ** 2).mean()
    vb = ((b - mb) ** 2).mean()
    cov = ((a - ma) * (b - mb)).mean()
    return (2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2))


def test_ssim_single_window_matches_formula(rng):
    a, b = rng.random((2, 1, 8, 8))
    assert abs(ssim(a, b) - window_ssim(a[0], b[0])) < 1e-12


def test_ssim_map_matches_loop(rng):
    a, b = rng.random((2, 3, 10, 9))
    m = ssim_map(a, b, window=4)
    assert m.shape == (3, 7, 6)
    for c, y, x in [(0, 0, 0), (1, 3, 5), (2, 6, 2)]:
        assert abs(m[c, y, x] - window_ssim(a[c, y:y + 4, x:x + 4], b[c, y:y + 4, x:x + 4])) < 1e-12


def test_ssim_identity_and_symmetry(rng):
    a, b = rng.random((2, 3, 12, 12))
    assert ssim(a, a) == 1.0
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-15
    assert ssim(a, b) < 0.5


def test_psnr():
    a = np.zeros((3, 4, 4))
    assert psnr(a, a) == math.inf
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-9
    with pytest.raises(ContractError):
        psnr(a, np.zeros((3, 4, 5)))


def frechet_oracle(mu_a, sa, mu_b, sb):
    covmean = scipy.linalg.sqrtm(sa @ sb).real
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(sa + sb - 2 * covmean))


@given(st.integers(1, 6), st.integers(0, 10**6))
def test_frechet_matches_scipy_sqrtm(n, seed):
    rng = np.random.default_rng(seed)
    xa, xb = rng.standard_normal((2, n, n + 3))
    sa, sb = xa @ xa.T / n + 0.1 * np.eye(n), xb @ xb.T / n + 0.1 * np.eye(n)
    mu_a, mu_b = rng.standard_normal((2, n))
    got = frechet_distance(mu_a, sa, mu_b, sb)
    assert abs(got - frechet_oracle(mu_a, sa, mu_b, sb)) < 1e-8 * max(1.0, got)


def test_frechet_scalar_case():
    # (1 - 3)^2 + 4 + 9 - 2 * sqrt(36)
    assert abs(frechet_distance(1.0, 4.0, 3.0, 9.0) - 5.0) < 1e-12


def test_toy_frechet_identical_sets(rng):
    imgs = [rng.random((3, 16, 12)) for _ in range(6)]
    assert toy_frechet(imgs, imgs) <= 1e-6
    other = [np.clip(i + rng.normal(0, 0.3, i.shape), 0, 1) for i in imgs]
    assert toy_frechet(imgs, other) > 1e-3


def test_feature_stats_needs_two_images(rng):
    with pytest.raises(ContractError):
        feature_stats([rng.random((3, 8, 8))])
