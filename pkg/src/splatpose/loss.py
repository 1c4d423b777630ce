"""Photometric loss: masked L1 mixed with structural dissimilarity.

loss = lambda * L1 + (1 - lambda) * (1 - SSIM)

SSIM uses the standard 11x11 Gaussian window (sigma 1.5, truncate 3.5,
population covariances, C1 = 0.01^2, C2 = 0.03^2 at data range 1) computed
per channel. Window centers within 5 pixels of the border are discarded, so
pixels are only scored where their full window fits inside the image. The
returned gradient is analytic: three extra Gaussian convolutions per channel
instead of any numerical differentiation.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import EmptyMask, ShapeMismatch

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_PAD = 5  # radius of the 11x11 window
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _blur(img):
    """Gaussian smoothing over the two leading (spatial) axes only.

    Channels ride along as a skipped axis, so filtering a stacked (H, W, C)
    array reproduces per-channel 2D filtering bit for bit.
    """
    if img.ndim == 2:
        return gaussian_filter(img, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE)
    return gaussian_filter(
        img, sigma=(SSIM_SIGMA, SSIM_SIGMA, 0.0), truncate=SSIM_TRUNCATE
    )


def _ssim_map(x, y):
    """SSIM map plus the per-window terms the gradient needs."""
    ux = _blur(x)
    uy = _blur(y)
    uxx = _blur(x * x)
    uyy = _blur(y * y)
    uxy = _blur(x * y)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    a1 = 2.0 * ux * uy + SSIM_C1
    a2 = 2.0 * vxy + SSIM_C2
    b1 = ux * ux + uy * uy + SSIM_C1
    b2 = vx + vy + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    return s, (ux, uy, a1, a2, b1, b2)


def _ssim_gradient(x, y, terms, weights):
    """Gradient of sum_p weights_p * S_p with respect to x.

    Derivation: x reaches S_p through the windowed moments ux, uxx, uxy, so
    dS_p/dx_r = G_{r-p} (U_p + 2 x_r V_p + y_r W_p) with per-window factors
    U, V, W; the sum over p of each factor times the Gaussian kernel is one
    convolution because the kernel is symmetric.
    """
    ux, uy, a1, a2, b1, b2 = terms
    s_over = a1 * a2 / (b1 * b2)
    u = (
        2.0 * uy * (a2 - a1) / (b1 * b2)
        - 2.0 * ux * s_over / b1
        + 2.0 * ux * s_over / b2
    )
    v = -s_over / b2
    w = 2.0 * a1 / (b1 * b2)
    return (
        _blur(weights * u)
        + 2.0 * x * _blur(weights * v)
        + y * _blur(weights * w)
    )


def ssim(img_a, img_b) -> float:
    """Mean SSIM over channels, full image, border-cropped window centers."""
    a = np.asarray(img_a, dtype=float)
    b = np.asarray(img_b, dtype=float)
    if a.shape != b.shape or a.ndim != 3:
        raise ShapeMismatch(f"image shapes disagree: {a.shape} vs {b.shape}")
    pad = SSIM_PAD
    s, _ = _ssim_map(a, b)
    return float(s[pad:-pad, pad:-pad].mean())


def image_loss(i_in, i_pred, mask, lam: float):
    """Masked photometric loss and its analytic gradient w.r.t. i_pred.

    L1 is the mean absolute error over masked pixel-channel entries. The
    SSIM term averages the per-window SSIM map over masked window centers
    whose 11x11 support fits inside the image. lam = 1 skips the SSIM
    computation entirely.
    """
    i_in = np.asarray(i_in, dtype=float)
    i_pred = np.asarray(i_pred, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if i_in.shape != i_pred.shape or i_in.ndim != 3 or i_in.shape[2] != 3:
        raise ShapeMismatch(
            f"image shapes disagree: {i_in.shape} vs {i_pred.shape}"
        )
    if mask.shape != i_in.shape[:2]:
        raise ShapeMismatch(
            f"mask shape {mask.shape} does not match images {i_in.shape[:2]}"
        )
    if not (0.0 <= lam <= 1.0):
        raise ValueError("lambda must lie in [0, 1]")
    n_mask = int(mask.sum())
    if n_mask == 0:
        raise EmptyMask("mask selects no pixels")

    residual = i_pred - i_in
    m3 = mask[:, :, None]
    l1 = float(np.abs(residual[mask]).mean())
    grad = lam * np.where(m3, np.sign(residual), 0.0) / (3.0 * n_mask)

    if lam == 1.0:
        return l1, grad

    h, w = mask.shape
    pad = SSIM_PAD
    interior = np.zeros_like(mask)
    if h > 2 * pad and w > 2 * pad:
        interior[pad:-pad, pad:-pad] = mask[pad:-pad, pad:-pad]
    n_interior = int(interior.sum())
    if n_interior == 0:
        raise EmptyMask(
            "mask has no pixels whose full SSIM window fits in the image"
        )
    weights = interior / n_interior

    s, terms = _ssim_map(i_pred, i_in)
    mssim = float((weights[:, :, None] * s).sum()) / 3.0
    # DSSIM = 1 - mean_ch sum_p W_p S_p: the S gradient enters negated.
    grad -= ((1.0 - lam) / 3.0) * _ssim_gradient(
        i_pred, i_in, terms, weights[:, :, None]
    )

    loss = lam * l1 + (1.0 - lam) * (1.0 - mssim)
    return loss, grad
