"""Fitting losses and image metrics.

Each loss returns ``(value, gradient_wrt_prediction)``. Images are float
arrays of shape ``(H, W, C)``; masks and alphas may be ``(H, W)`` or
``(H, W, 1)``.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import CountMismatch, InvalidConfig, ShapeMismatch

SSIM_RADIUS = 5
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
BCE_EPS = 1e-6
PSNR_CAP = 99.0


@dataclass(frozen=True)
class LossWeights:
    l1: float = 0.8
    ssim: float = 0.2
    mask: float = 0.02

    def __post_init__(self):
        if min(self.l1, self.ssim, self.mask) < 0:
            raise InvalidConfig("loss weights must be non-negative")

    def scaled(self, k):
        return LossWeights(self.l1 * k, self.ssim * k, self.mask * k)


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {gt.shape}")
    return pred, gt


def l1_loss(pred, gt):
    pred, gt = _check(pred, gt)
    diff = pred - gt
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


@lru_cache(maxsize=32)
def _filter_matrix(n, radius=SSIM_RADIUS, sigma=SSIM_SIGMA):
    """Dense ``n x n`` matrix applying the normalized Gaussian window along one axis.

    Borders reflect symmetrically (``d c b a | a b c d``), so the matrix is the
    exact linear operator and its transpose is the adjoint used for gradients.
    """
    offsets = np.arange(-radius, radius + 1)
    w = np.exp(-offsets ** 2 / (2 * sigma ** 2))
    w /= w.sum()
    idx = np.arange(n)[:, None] + offsets[None, :]
    period = 2 * n
    idx = np.mod(idx, period)
    idx = np.where(idx >= n, period - 1 - idx, idx)
    A = np.zeros((n, n))
    np.add.at(A, (np.repeat(np.arange(n), len(offsets)), idx.ravel()), np.tile(w, n))
    A.setflags(write=False)
    return A


def _blur(x, A, B):
    # x: (H, W, C) -> A @ x[..., c] @ B.T per channel
    return np.einsum("ij,jkc,lk->ilc", A, x, B, optimize=True)


def _blur_adjoint(x, A, B):
    return np.einsum("ji,jkc,kl->ilc", A, x, B, optimize=True)


def _ssim_terms(x, y):
    A = _filter_matrix(x.shape[0])
    B = _filter_matrix(x.shape[1])
    mx, my = _blur(x, A, B), _blur(y, A, B)
    exx, eyy, exy = _blur(x * x, A, B), _blur(y * y, A, B), _blur(x * y, A, B)
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * (exy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2
    return A, B, mx, my, a1, a2, b1, b2


def _as3(img):
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def ssim(pred, gt):
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5)."""
    pred, gt = _check(pred, gt)
    *_, a1, a2, b1, b2 = _ssim_terms(_as3(pred), _as3(gt))
    return float((a1 * a2 / (b1 * b2)).mean())


def ssim_loss(pred, gt):
    """``1 - SSIM`` and its exact gradient wrt ``pred``."""
    pred, gt = _check(pred, gt)
    shape = pred.shape
    x, y = _as3(pred), _as3(gt)
    A, B, mx, my, a1, a2, b1, b2 = _ssim_terms(x, y)
    s = a1 * a2 / (b1 * b2)
    n = s.size
    g = -1.0 / n
    d_mx = g * (2 * my * (a2 - a1) / (b1 * b2) - 2 * mx * s * (1 / b1 - 1 / b2))
    d_exx = g * (-s / b2)
    d_exy = g * (2 * a1 / (b1 * b2))
    grad = _blur_adjoint(d_mx, A, B) + 2 * x * _blur_adjoint(d_exx, A, B) \
        + y * _blur_adjoint(d_exy, A, B)
    return float(1.0 - s.mean()), grad.reshape(shape)


def mask_loss(pred_alpha, gt_mask):
    """Mean binary cross-entropy with alpha clamped into ``[eps, 1 - eps]``."""
    a, m = _check(pred_alpha, gt_mask)
    ac = np.clip(a, BCE_EPS, 1 - BCE_EPS)
    loss = -(m * np.log(ac) + (1 - m) * np.log(1 - ac)).mean()
    grad = (-(m / ac) + (1 - m) / (1 - ac)) / a.size
    grad = np.where((a > BCE_EPS) & (a < 1 - BCE_EPS), grad, 0.0)
    return float(loss), grad


def weighted_total(l1, ssim_term, mask_term, weights):
    """``l1 * L1 + ssim * L_ssim + mask * L_mask`` for one view."""
    return weights.l1 * l1 + weights.ssim * ssim_term + weights.mask * mask_term


def composite_loss(renders, targets, weights=LossWeights()):
    """Weighted L1 + SSIM + mask loss averaged over ``N`` views.

    ``renders`` is a sequence of ``(image, alpha)`` and ``targets`` of
    ``(image, mask)``. Returns ``(loss, grads, terms)`` where ``grads`` holds
    ``(d_image, d_alpha)`` per view and ``terms`` the unweighted per-view
    averages of each loss.
    """
    if len(renders) != len(targets):
        raise CountMismatch(f"{len(renders)} renders vs {len(targets)} targets")
    if not renders:
        raise CountMismatch("need at least one view")
    n = len(renders)
    total = 0.0
    grads = []
    terms = {"l1": 0.0, "ssim": 0.0, "mask": 0.0}
    for (img, alpha), (gt, mask) in zip(renders, targets):
        alpha = np.asarray(alpha, dtype=np.float64).reshape(np.shape(mask))
        l1, g1 = l1_loss(img, gt)
        ls, gs = ssim_loss(img, gt)
        lm, gm = mask_loss(alpha, mask)
        total += weighted_total(l1, ls, lm, weights)
        grads.append(((weights.l1 * g1 + weights.ssim * gs) / n, weights.mask * gm / n))
        terms["l1"] += l1 / n
        terms["ssim"] += ls / n
        terms["mask"] += lm / n
    return total / n, grads, terms


def psnr(pred, gt, peak=1.0):
    pred, gt = _check(pred, gt)
    mse = float(((pred - gt) ** 2).mean())
    if mse < 1e-12:
        return PSNR_CAP
    return float(10.0 * np.log10(peak ** 2 / mse))
