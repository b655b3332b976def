"""Photometric and depth objectives with analytic gradients.

The photometric target is E = (1 - lam) * L1 + lam * (1 - SSIM) with the
standard 11x11 sigma=1.5 Gaussian-window SSIM (C1 = 0.01^2, C2 = 0.03^2 on
[0, 1] images, zero-padded filtering, averaged per channel).

Depth supervision compares disparities (inverse depths), which keeps distant
regions from dominating, with a linearly decaying weight that reaches zero
halfway through training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
DISPARITY_EPS = 1e-4

_window = np.exp(-((np.arange(11) - 5.0) ** 2) / (2.0 * 1.5**2))
_window /= _window.sum()


def _filter(img):
    """Separable zero-padded Gaussian filtering over the two leading axes."""
    out = correlate1d(img, _window, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _window, axis=1, mode="constant", cval=0.0)


@dataclass
class LossReport:
    l1: float
    ssim: float
    photometric: float
    depth_loss: float
    total: float
    lambda_: float
    depth_weight: float = 0.0


def ssim(img1, img2):
    """Mean SSIM of two (H, W, C) images plus its gradient w.r.t. img1."""
    mu1, mu2 = _filter(img1), _filter(img2)
    v1, v2, v12 = _filter(img1 * img1), _filter(img2 * img2), _filter(img1 * img2)
    sigma1 = v1 - mu1 * mu1
    sigma2 = v2 - mu2 * mu2
    sigma12 = v12 - mu1 * mu2

    A1 = 2.0 * mu1 * mu2 + SSIM_C1
    A2 = 2.0 * sigma12 + SSIM_C2
    B1 = mu1 * mu1 + mu2 * mu2 + SSIM_C1
    B2 = sigma1 + sigma2 + SSIM_C2
    ssim_map = (A1 * A2) / (B1 * B2)
    value = float(ssim_map.mean())

    g_map = np.full_like(ssim_map, 1.0 / ssim_map.size)
    d_dA1 = g_map * A2 / (B1 * B2)
    d_dA2 = g_map * A1 / (B1 * B2)
    d_dB1 = -g_map * A1 * A2 / (B1 * B1 * B2)
    d_dB2 = -g_map * A1 * A2 / (B1 * B2 * B2)

    g_mu1 = 2.0 * mu2 * (d_dA1 - d_dA2) + 2.0 * mu1 * (d_dB1 - d_dB2)
    g_v1 = d_dB2
    g_v12 = 2.0 * d_dA2
    # the filter is symmetric and zero-padded, so its transpose is itself
    grad = _filter(g_mu1) + _filter(g_v1) * 2.0 * img1 + _filter(g_v12) * img2
    return value, grad


def photometric(rendered, gt, lam: float = 0.2):
    """E_photo = (1 - lam) L1 + lam (1 - SSIM); returns (report, dE/drendered)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {gt.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")

    diff = rendered - gt
    l1 = float(np.abs(diff).mean())
    grad_l1 = np.sign(diff) / diff.size

    ssim_val, grad_ssim = ssim(rendered, gt)
    e_photo = (1.0 - lam) * l1 + lam * (1.0 - ssim_val)
    grad = (1.0 - lam) * grad_l1 - lam * grad_ssim
    report = LossReport(l1=l1, ssim=ssim_val, photometric=e_photo,
                        depth_loss=0.0, total=e_photo, lambda_=lam)
    return report, grad


def disparity_loss(rendered_depth, prior_depth, valid_mask, weight: float):
    """Weighted mean |1/d_r - 1/d_p| over valid pixels; depths are clamped
    at DISPARITY_EPS before inversion. Returns (loss, dloss/drendered)."""
    rendered_depth = np.asarray(rendered_depth, dtype=np.float64)
    prior_depth = np.asarray(prior_depth, dtype=np.float64)
    grad = np.zeros_like(rendered_depth)
    valid = np.asarray(valid_mask, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid == 0 or weight == 0.0:
        return 0.0, grad

    d_r = np.maximum(rendered_depth, DISPARITY_EPS)
    d_p = np.maximum(prior_depth, DISPARITY_EPS)
    diff = 1.0 / d_r - 1.0 / d_p
    loss = weight * float(np.abs(diff)[valid].mean())
    g = weight * np.sign(diff) * (-1.0 / (d_r * d_r)) / n_valid
    g[rendered_depth < DISPARITY_EPS] = 0.0
    grad[valid] = g[valid]
    return loss, grad


def depth_weight_schedule(iteration: int, max_iter: int, w0: float = 0.1) -> float:
    """Linear decay from w0 to zero at max_iter / 2, clamped afterwards."""
    decay_end = max_iter / 2.0
    if decay_end <= 0:
        return 0.0
    return w0 * max(0.0, 1.0 - iteration / decay_end)


def psnr(img, ref) -> float:
    """PSNR in dB on [0, 1]-clamped images, capped at 99."""
    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    b = np.clip(np.asarray(ref, dtype=np.float64), 0.0, 1.0)
    mse = float(((a - b) ** 2).mean())
    if mse <= 0.0:
        return 99.0
    return min(99.0, -10.0 * np.log10(mse))
