"""Image quality metrics: windowed SSIM, PSNR and a toy Frechet distance."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError

SSIM_WINDOW = 8
FEATURE_DIM = 8
FEATURE_SEED = 20240611
FEATURE_PATCH = 4


def _as_image(x) -> np.ndarray:
    # contiguous copy: identical inputs must reduce in identical order
    x = np.array(x, dtype=np.float64, order="C")
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ContractError(f"expected (C, H, W) image, got shape {x.shape}")
    return x


def ssim_map(a, b, window: int = SSIM_WINDOW, data_range: float = 1.0) -> np.ndarray:
    """SSIM for every stride-1 uniform window, shape (C, H-w+1, W-w+1).

    Window statistics use population (1/N) moments.
    """
    a, b = _as_image(a), _as_image(b)
    if a.shape != b.shape:
        raise ContractError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    w = min(window, a.shape[1], a.shape[2])
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    wa = sliding_window_view(a, (w, w), axis=(1, 2))
    wb = sliding_window_view(b, (w, w), axis=(1, 2))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-1, -2))
    var_b = (db * db).mean(axis=(-1, -2))
    cov = (da * db).mean(axis=(-1, -2))
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over uniform windows and channels, dynamic range 1."""
    return float(np.mean(ssim_map(a, b, window)))


def psnr(a, b) -> float:
    """``10 log10(1 / mse)`` in dB; identical inputs give ``math.inf``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


# ----------------------------------------------------------------------------
# toy Frechet distance


def handcrafted_features(img, patch: int = FEATURE_PATCH) -> np.ndarray:
    """Per-patch mean, variance and gradient energy, per channel, flattened."""
    img = _as_image(img)
    c, h, w = img.shape
    gh, gw = h // patch, w // patch
    if gh == 0 or gw == 0:
        raise ContractError(f"image {h}x{w} smaller than feature patch {patch}")
    crop = img[:, : gh * patch, : gw * patch]
    blocks = crop.reshape(c, gh, patch, gw, patch).transpose(0, 1, 3, 2, 4)
    mean = blocks.mean(axis=(-1, -2))
    var = blocks.var(axis=(-1, -2))
    dy = np.diff(blocks, axis=-2) ** 2
    dx = np.diff(blocks, axis=-1) ** 2
    energy = dy.mean(axis=(-1, -2)) + dx.mean(axis=(-1, -2))
    return np.concatenate([mean.ravel(), var.ravel(), energy.ravel()])


def _projection(n_in: int) -> np.ndarray:
    rng = np.random.default_rng(FEATURE_SEED)
    return rng.standard_normal((FEATURE_DIM, n_in)) / np.sqrt(n_in)


def feature_stats(images) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of projected handcrafted features over a set."""
    images = list(images)
    if len(images) < 2:
        raise ContractError(f"need at least 2 images for feature statistics, got {len(images)}")
    feats = np.stack([handcrafted_features(im) for im in images])
    proj = feats @ _projection(feats.shape[1]).T
    mu = proj.mean(axis=0)
    sigma = np.cov(proj, rowvar=False)
    return mu, (sigma + sigma.T) / 2


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu_a, sigma_a, mu_b, sigma_b) -> float:
    """Squared Frechet distance between two Gaussians.

    ``Tr((Sa Sb)^(1/2))`` is taken as ``Tr((Sa^(1/2) Sb Sa^(1/2))^(1/2))``,
    which has the same eigenvalues and stays symmetric.  Scalars work as
    the 1-D case.
    """
    mu_a, mu_b = np.atleast_1d(mu_a).astype(float), np.atleast_1d(mu_b).astype(float)
    sa, sb = np.atleast_2d(sigma_a).astype(float), np.atleast_2d(sigma_b).astype(float)
    if mu_a.shape != mu_b.shape or sa.shape != sb.shape or sa.shape != (len(mu_a), len(mu_a)):
        raise ContractError("inconsistent Gaussian statistics")
    root_a = _psd_sqrt(sa)
    cross = _psd_sqrt(root_a @ sb @ root_a)
    diff = mu_a - mu_b
    d2 = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * np.trace(cross))
    return max(d2, 0.0)


def toy_frechet(set_a, set_b) -> float:
    mu_a, sa = feature_stats(set_a)
    mu_b, sb = feature_stats(set_b)
    return frechet_distance(mu_a, sa, mu_b, sb)
