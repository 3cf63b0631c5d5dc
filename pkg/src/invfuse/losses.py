"""Unsupervised losses for training the fusion flow.

Everything here is built from taped primitives, so each loss is a scalar
Tensor that backpropagates into the network parameters:

  * fusion loss      -- the fused image must resemble both sources:
                        lambda * [(1-SSIM(x1,y)) + (1-SSIM(x2,y))]
                        + (1-lambda) * [mse(y,x1) + mse(y,x2)]
  * latent loss      -- the latent batch must match the prior: a biased
                        (V-statistic) MMD with inverse multiquadratic kernels,
                        or a plain mean squared distance for constant priors
  * decomposition    -- sources reconstructed from (y, fresh z) must match
                        the originals; same lambda-weighted shape as fusion
  * total            -- alpha * (fusion + latent) + (1-alpha) * decomposition

The squared-norm image terms are realized as per-pixel means so loss
magnitudes are comparable across image sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError

IMQ_SCALES = (0.2, 1.0, 5.0)


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ConfigError(f"SSIM window must be odd and >= 3, got {self.window}")
        if self.sigma <= 0:
            raise ConfigError(f"SSIM sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class LossWeights:
    """ssim_weight trades structure against pixel fidelity inside the fusion
    and decomposition losses; fusion_weight trades the forward objectives
    (fusion + latent) against the decomposition objective."""

    ssim_weight: float = 0.8
    fusion_weight: float = 0.5

    def __post_init__(self):
        for name in ("ssim_weight", "fusion_weight"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")


def _gaussian_taps(size, sigma):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def gaussian_window(size, sigma):
    """Normalized 2-d Gaussian window, peak at the center tap."""
    g = _gaussian_taps(size, sigma)
    return np.outer(g, g)


def effective_window(config, height, width):
    """Shrink the window to the largest odd size that fits small images."""
    w = min(config.window, height, width)
    if w % 2 == 0:
        w -= 1
    if w < 1:
        raise ShapeError(f"image {height}x{width} too small for any SSIM window")
    return w


def _image_batch(x):
    t = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    if t.data.ndim == 2:
        t = ad.reshape(t, (1, 1) + t.data.shape)
    if t.data.ndim != 4 or t.shape[1] != 1:
        raise ShapeError(f"expected HxW or Bx1xHxW image, got shape {t.shape}")
    return t


def q_ssim(a, b, config=SsimConfig()):
    """Mean SSIM between two image batches, differentiable.

    Gaussian-weighted local statistics over the valid region only (no
    padding), using the standard luminance/contrast/structure product.
    """
    a, b = _image_batch(a), _image_batch(b)
    if a.shape != b.shape:
        raise ShapeError(f"q_ssim: shapes {a.shape} and {b.shape} differ")
    size = effective_window(config, a.shape[2], a.shape[3])
    # The window is an outer product, so filter with its 1-d taps twice
    # (columns then rows): same result, K+K multiplies per pixel instead
    # of K*K.
    taps = _gaussian_taps(size, config.sigma)
    win_col = ad.Tensor(taps.reshape(1, 1, size, 1))
    win_row = ad.Tensor(taps.reshape(1, 1, 1, size))
    c1 = (config.k1 * config.dynamic_range) ** 2
    c2 = (config.k2 * config.dynamic_range) ** 2

    def blur(t):
        return ad.conv2d(ad.conv2d(t, win_col, padding=0), win_row, padding=0)

    mu_a = blur(a)
    mu_b = blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b

    num = (2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return (num / den).mean()


def mean_squared_error(a, b):
    a, b = _image_batch(a), _image_batch(b)
    diff = a - b
    return (diff * diff).mean()


@dataclass
class WeightedLossParts:
    total: ad.Tensor
    ssim: ad.Tensor
    l2: ad.Tensor


def _similarity_pair_loss(target1, target2, image1, image2, weights, ssim_config):
    l_ssim = (1.0 - q_ssim(target1, image1, ssim_config)) \
        + (1.0 - q_ssim(target2, image2, ssim_config))
    l_l2 = mean_squared_error(image1, target1) + mean_squared_error(image2, target2)
    lam = weights.ssim_weight
    total = ad.scalar_mul(l_ssim, lam) + ad.scalar_mul(l_l2, 1.0 - lam)
    return WeightedLossParts(total=total, ssim=l_ssim, l2=l_l2)


def fusion_loss(x1, x2, fused, weights, ssim_config=SsimConfig()):
    """The fused image is pulled toward both sources at once."""
    return _similarity_pair_loss(x1, x2, fused, fused, weights, ssim_config)


def decomposition_loss(x1, x2, rec1, rec2, weights, ssim_config=SsimConfig()):
    """Reconstructions from (fused, fresh latent) are pulled toward the sources."""
    return _similarity_pair_loss(x1, x2, rec1, rec2, weights, ssim_config)


def mmd_latent(z_batch, prior_batch, scales=IMQ_SCALES):
    """Biased (V-statistic) squared MMD with inverse multiquadratic kernels.

    k_c(a, b) = c / (c + ||a - b||^2 / d)  summed over the given scales.
    Both arguments are Bxd / Mxd row batches; distances are normalized by the
    dimension d so the scales are resolution-independent.
    """
    z = z_batch if isinstance(z_batch, ad.Tensor) else ad.Tensor(z_batch)
    p = prior_batch if isinstance(prior_batch, ad.Tensor) else ad.Tensor(prior_batch)
    if z.data.ndim != 2 or p.data.ndim != 2:
        raise ShapeError(f"mmd_latent: need 2-d batches, got {z.shape} and {p.shape}")
    if z.shape[1] != p.shape[1]:
        raise ShapeError(f"mmd_latent: dimension mismatch {z.shape[1]} != {p.shape[1]}")
    if z.shape[0] < 2 or p.shape[0] < 2:
        raise ShapeError("mmd_latent: batches must hold at least 2 samples")
    d = float(z.shape[1])
    dzz = ad.pairwise_sqdist(z, z) / d
    dpp = ad.pairwise_sqdist(p, p) / d
    dzp = ad.pairwise_sqdist(z, p) / d
    total = None
    for c in scales:
        c = float(c)
        term = (c / (dzz + c)).mean() + (c / (dpp + c)).mean() \
            - 2.0 * (c / (dzp + c)).mean()
        total = term if total is None else total + term
    # the V-statistic is nonnegative for positive-definite kernels; clip the
    # tail of float rounding so callers can rely on >= 0
    return ad.relu(total)


def latent_loss(z_batch, spec, prior_batch=None, scales=IMQ_SCALES):
    """Prior-matching loss: MMD against sampled priors, or mean squared
    distance to the constant for degenerate (zeros/ones) priors."""
    z = z_batch if isinstance(z_batch, ad.Tensor) else ad.Tensor(z_batch)
    if spec.is_constant:
        diff = z - float(spec.constant_value)
        return (diff * diff).mean()
    if prior_batch is None:
        raise ShapeError(f"latent_loss: kind {spec.kind!r} needs a prior batch")
    return mmd_latent(z, prior_batch, scales)


def total_loss(fusion, latent, decomposition, weights):
    """alpha * (fusion + latent) + (1 - alpha) * decomposition, on the tape."""
    alpha = weights.fusion_weight
    return ad.scalar_mul(fusion + latent, alpha) \
        + ad.scalar_mul(decomposition, 1.0 - alpha)
