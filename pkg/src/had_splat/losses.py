"""Photometric losses with analytic image gradients, plus evaluation metrics.

Images are (H, W, 3) float arrays in [0, 1]. Masks are (H, W) booleans where
True marks a hallucinated pixel that must not supervise the model.
"""
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ContractError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
INPUT_LOSS_WEIGHTS = (0.8, 0.2)  # (L1, D-SSIM)
NOVEL_LOSS_WEIGHTS = (1.0, 1.0)
PSNR_CAP = 99.0


@dataclass
class LossValue:
    value: float
    grad_image: np.ndarray

    def __add__(self, other):
        return LossValue(self.value + other.value, self.grad_image + other.grad_image)

    def scaled(self, w):
        return LossValue(w * self.value, w * self.grad_image)


def _gauss_1d():
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


_WIN = _gauss_1d()
_R = SSIM_WINDOW // 2


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")


def _check_mask(mask, a):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:2]:
        raise ContractError(f"mask shape {mask.shape} does not match image {a.shape[:2]}")
    return mask


def _filter_valid(x):
    """Separable Gaussian filter keeping only windows fully inside the image."""
    y = correlate1d(x, _WIN, axis=0, mode="constant")
    y = correlate1d(y, _WIN, axis=1, mode="constant")
    return y[_R:-_R, _R:-_R]


def _filter_valid_adjoint(g, shape):
    full = np.zeros(shape)
    full[_R:-_R, _R:-_R] = g
    y = correlate1d(full, _WIN, axis=0, mode="constant")
    return correlate1d(y, _WIN, axis=1, mode="constant")


def _ssim_terms(a, b):
    mu_a, mu_b = _filter_valid(a), _filter_valid(b)
    e_aa, e_bb, e_ab = _filter_valid(a * a), _filter_valid(b * b), _filter_valid(a * b)
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * (e_ab - mu_a * mu_b) + SSIM_C2
    B1 = mu_a**2 + mu_b**2 + SSIM_C1
    B2 = (e_aa - mu_a**2) + (e_bb - mu_b**2) + SSIM_C2
    return mu_a, mu_b, A1, A2, B1, B2


def ssim_map(a, b):
    """Per-window, per-channel SSIM over 'valid' 11x11 windows."""
    _check_pair(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ContractError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    _, _, A1, A2, B1, B2 = _ssim_terms(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return (A1 * A2) / (B1 * B2)


def ssim(a, b):
    return float(np.mean(ssim_map(a, b)))


def _ssim_grad_a(a, b, dS):
    """Gradient of sum(dS * SSIM_map) with respect to ``a``."""
    mu_a, mu_b, A1, A2, B1, B2 = _ssim_terms(a, b)
    S = (A1 * A2) / (B1 * B2)
    den = B1 * B2
    d_mu_a = dS * (2 * mu_b * (A2 - A1) - 2 * S * mu_a * (B2 - B1)) / den
    d_e_aa = dS * (-S / B2)
    d_e_ab = dS * (2 * A1 / den)
    return (_filter_valid_adjoint(d_mu_a, a.shape)
            + 2 * a * _filter_valid_adjoint(d_e_aa, a.shape)
            + b * _filter_valid_adjoint(d_e_ab, a.shape))


def _window_weights(mask):
    """1 for valid windows whose 11x11 support holds no masked pixel."""
    m = mask.astype(np.float64)
    box = np.ones(SSIM_WINDOW)
    y = correlate1d(correlate1d(m, box, axis=0, mode="constant"), box, axis=1, mode="constant")
    return (y[_R:-_R, _R:-_R] == 0).astype(np.float64)


def l1_loss(a, b, mask=None):
    """Mean |a - b| over channels of unmasked pixels; 0 when every pixel is masked."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    mask = _check_mask(mask, a)
    diff = a - b
    if mask is None:
        count = diff.size
        keep = np.ones(a.shape[:2], dtype=bool)
    else:
        keep = ~mask
        count = int(keep.sum()) * a.shape[2]
    if count == 0:
        return LossValue(0.0, np.zeros_like(a))
    k3 = keep[..., None]
    value = float(np.sum(np.abs(diff) * k3) / count)
    grad = np.sign(diff) * k3 / count
    return LossValue(value, grad)


def d_ssim_loss(a, b, mask=None, masking="zero"):
    """(1 - mean SSIM) / 2 with gradient w.r.t. ``a``.

    masking="zero" multiplies both operands by the inverted mask before SSIM;
    masking="exclude" averages only windows that contain no masked pixel.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ContractError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    mask = _check_mask(mask, a)
    h, w = a.shape[0] - 2 * _R, a.shape[1] - 2 * _R
    if mask is None or masking == "zero":
        keep = None if mask is None else (~mask)[..., None].astype(np.float64)
        aa = a if keep is None else a * keep
        bb = b if keep is None else b * keep
        S = ssim_map(aa, bb)
        dS = np.full_like(S, -0.5 / S.size)
        grad = _ssim_grad_a(aa, bb, dS)
        if keep is not None:
            grad = grad * keep
        return LossValue(float(0.5 * (1.0 - S.mean())), grad)
    if masking != "exclude":
        raise ContractError(f"unknown masking mode {masking!r}")
    wts = _window_weights(mask)[..., None] * np.ones((h, w, a.shape[2]))
    total = wts.sum()
    if total == 0:
        return LossValue(0.0, np.zeros_like(a))
    S = ssim_map(a, b)
    dS = -0.5 * wts / total
    return LossValue(float(0.5 * (1.0 - np.sum(wts * S) / total)), _ssim_grad_a(a, b, dS))


def input_view_loss(rendered, gt, weights=INPUT_LOSS_WEIGHTS):
    w1, w2 = weights
    return l1_loss(rendered, gt).scaled(w1) + d_ssim_loss(rendered, gt).scaled(w2)


def novel_view_loss(rendered, aug, mask, weights=NOVEL_LOSS_WEIGHTS, masking="zero"):
    """Masked L1 + masked D-SSIM; masked pixels receive no gradient."""
    w1, w2 = weights
    return (l1_loss(rendered, aug, mask).scaled(w1)
            + d_ssim_loss(rendered, aug, mask, masking=masking).scaled(w2))


def psnr(a, b):
    """PSNR in dB for unit dynamic range, capped at PSNR_CAP (also used for MSE = 0)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def score_map_mae(predicted, gt):
    predicted = np.asarray(predicted, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if predicted.shape != gt.shape:
        raise ContractError(f"score map shapes differ: {predicted.shape} vs {gt.shape}")
    return float(np.mean(np.abs(predicted - gt)))
