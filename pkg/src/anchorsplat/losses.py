"""Image and feature losses as differentiable ops, plus evaluation metrics."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from . import diffcore as dc

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
COS_EPS = 1e-8


def _check(a, b, what):
    if a.shape != b.shape:
        raise dc.DimensionError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(img, win):
    """Separable zero-padded 'same' filter over the two spatial axes."""
    out = correlate1d(img, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, win, axis=1, mode="constant", cval=0.0)


def ssim_map(x, y, win=None, data_range=1.0):
    win = gaussian_window() if win is None else win
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _blur(x, win), _blur(y, win)
    sxx = _blur(x * x, win) - mx * mx
    syy = _blur(y * y, win) - my * my
    sxy = _blur(x * y, win) - mx * my
    a1, a2 = 2 * mx * my + c1, 2 * sxy + c2
    b1, b2 = mx * mx + my * my + c1, sxx + syy + c2
    return (a1 * a2) / (b1 * b2), (mx, my, a1, a2, b1, b2)


def ssim(x, y):
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check(x, y, "ssim")
    return float(ssim_map(x, y)[0].mean())


def ssim_loss(pred, gt):
    """1 - SSIM(pred, gt) with the gradient flowing into ``pred`` (H, W, C)."""
    x = pred.data.astype(np.float64)
    y = np.asarray(gt, dtype=np.float64)
    _check(x, y, "ssim_loss")
    win = gaussian_window()
    smap, (mx, my, a1, a2, b1, b2) = ssim_map(x, y, win)
    n = smap.size

    def bw(g):
        # dS/dx = blur(dm) + 2 x blur(dxx) + y blur(dxy) with per-statistic adjoints
        g = -np.asarray(g).item() / n
        d = b1 * b2
        d_mx = g * (2 * my * a2 / d - 2 * mx * smap / b1)
        d_sxx = g * (-smap / b2)
        d_sxy = g * (2 * a1 / d)
        # sxx = E[x^2] - mx^2 and sxy = E[xy] - mx my feed back into mx
        d_mx = d_mx - 2 * mx * d_sxx - my * d_sxy
        gx = _blur(d_mx, win) + 2 * x * _blur(d_sxx, win) + y * _blur(d_sxy, win)
        return (gx.astype(pred.data.dtype),)

    return dc.custom(np.asarray(1.0 - smap.mean(), dtype=pred.data.dtype), (pred,), bw, name="ssim")


def l1_loss(pred, gt):
    gt = np.asarray(gt, dtype=pred.data.dtype)
    _check(pred.data, gt, "l1_loss")
    diff = pred.data - gt
    n = diff.size
    return dc.custom(np.abs(diff).mean(dtype=pred.data.dtype), (pred,),
                     lambda g: (np.sign(diff) * (g / n),), name="l1")


def scale_volume_loss(scales, mask):
    """Mean over masked Gaussians of the product of their three scale axes."""
    s = scales.data
    mask = np.asarray(mask, dtype=bool)
    k = int(mask.sum())
    vol = s.prod(axis=1)
    val = vol[mask].sum() / k if k else 0.0

    def bw(g):
        out = np.zeros_like(s)
        if k:
            out[mask] = (g / k) * np.stack([s[mask, 1] * s[mask, 2], s[mask, 0] * s[mask, 2],
                                            s[mask, 0] * s[mask, 1]], axis=1)
        return (out,)

    return dc.custom(np.asarray(val, dtype=s.dtype), (scales,), bw, name="scale_reg")


def feature_loss_terms(pred, gt):
    """(mean squared l2, mean cosine distance) for rows of features."""
    diff = pred - gt
    l2 = (diff * diff).sum(axis=1)
    pn = np.linalg.norm(pred, axis=1)
    gn = np.linalg.norm(gt, axis=1)
    cos = (pred * gt).sum(axis=1) / np.maximum(pn * gn, COS_EPS)
    return l2.mean(), (1.0 - cos).mean()


def feature_loss(pred, gt):
    """l2 + cosine term for one model; ``pred`` is (P, D), ``gt`` an array (P, D)."""
    f = pred.data
    gt = np.asarray(gt, dtype=f.dtype)
    _check(f, gt, "feature_loss")
    p = len(f)
    l2, cosd = feature_loss_terms(f, gt)
    pn = np.linalg.norm(f, axis=1)
    gn = np.linalg.norm(gt, axis=1)
    big = pn * gn > COS_EPS
    den = np.where(big, pn * gn, COS_EPS)
    dot = (f * gt).sum(axis=1)

    def bw(g):
        g = np.asarray(g).item() / p
        d_l2 = 2 * (f - gt)
        safe = np.where(pn > 0, pn, 1.0)
        # the clamped denominator is constant below the threshold
        d_cos = gt / den[:, None] - np.where(big, dot / den**2 * gn / safe, 0.0)[:, None] * f
        return ((g * (d_l2 - d_cos)).astype(f.dtype),)

    return dc.custom(np.asarray(l2 + cosd, dtype=f.dtype), (pred,), bw, name="feature")


def psnr(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check(pred, gt, "psnr")
    mse = ((pred - gt) ** 2).mean()
    if mse < 1e-10:
        return 99.0
    return float(-10.0 * np.log10(mse))


def feature_metrics(pred, gt):
    """(mean cosine distance, mean l2 distance) over pixels; inputs (..., D)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check(pred, gt, "feature_metrics")
    p = pred.reshape(-1, pred.shape[-1])
    q = gt.reshape(-1, gt.shape[-1])
    cos = (p * q).sum(axis=1) / np.maximum(np.linalg.norm(p, axis=1) * np.linalg.norm(q, axis=1), COS_EPS)
    return float((1.0 - cos).mean()), float(np.linalg.norm(p - q, axis=1).mean())
