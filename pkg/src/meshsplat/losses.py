"""Loss terms, regularizers and image metrics for the three fitting stages."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import DimensionMismatch, ImageTooSmall, MissingTerm, TooFewGaussians
from .geometry import DTYPE, GaussianSet

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP_DB = 100.0

# keeps the Sobel magnitude differentiable at zero gradient
_SOBEL_EPS = 1e-6
# keeps neighborhood std differentiable when a neighborhood is constant
_STD_EPS = 1e-12

# loss terms entering the weighted total of each stage
STAGE_TERMS = {
    1: ("l2", "ssim", "sobel", "knn"),
    2: ("l2", "ssim", "tv"),
    3: ("l2", "ssim", "sobel", "knn", "opacity", "dice"),
}


def _check_images(pred: Tensor, gt: Tensor) -> None:
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"image shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")


def l2_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean squared error over all pixels and channels."""
    _check_images(pred, gt)
    return ((pred - gt) ** 2).mean()


def _gaussian_window(size: int, sigma: float) -> Tensor:
    coords = torch.arange(size, dtype=DTYPE) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] @ g[None, :]


def ssim_map(pred: Tensor, gt: Tensor, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> Tensor:
    """Per-pixel, per-channel SSIM with a Gaussian window and replicate padding.

    Replicate padding keeps window statistics exact on constant images, which
    pins the zero-variance closed form, and admits images smaller than the
    window (down to window//2 + 1 pixels per side).
    """
    _check_images(pred, gt)
    h, w = pred.shape[0], pred.shape[1]
    pad = window // 2
    if min(h, w) < pad + 1:
        raise ImageTooSmall(f"image {h}x{w} too small for SSIM window {window}")

    coords = torch.arange(window, dtype=DTYPE) - (window - 1) / 2.0
    g1 = torch.exp(-(coords**2) / (2 * sigma**2))
    g1 = g1 / g1.sum()

    # one separable blur over the 5 stacked moment images
    stack = torch.stack([pred, gt, pred * pred, gt * gt, pred * gt])    # (5, H, W, 3)
    x = stack.permute(0, 3, 1, 2).reshape(1, 15, h, w)
    x = F.pad(x, (pad, pad, pad, pad), mode="replicate")
    x = F.conv2d(x, g1.reshape(1, 1, window, 1).expand(15, 1, window, 1), groups=15)
    x = F.conv2d(x, g1.reshape(1, 1, 1, window).expand(15, 1, 1, window), groups=15)
    blurred = x.reshape(5, 3, h, w).permute(0, 2, 3, 1)

    mu_p, mu_g = blurred[0], blurred[1]
    var_p = blurred[2] - mu_p**2
    var_g = blurred[3] - mu_g**2
    cov = blurred[4] - mu_p * mu_g
    num = (2 * mu_p * mu_g + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_p**2 + mu_g**2 + SSIM_C1) * (var_p + var_g + SSIM_C2)
    return num / den


def ssim_metric(pred: Tensor, gt: Tensor) -> Tensor:
    return ssim_map(pred, gt).mean()


def ssim_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """1 - mean SSIM."""
    return 1.0 - ssim_metric(pred, gt)


_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=DTYPE)


def sobel_magnitude(img: Tensor) -> Tensor:
    """Gradient magnitude of the grayscale image under 3x3 Sobel kernels."""
    gray = img.mean(dim=2) if img.ndim == 3 else img
    x = gray[None, None]
    x = F.pad(x, (1, 1, 1, 1), mode="replicate")
    gx = F.conv2d(x, _SOBEL_X[None, None])
    gy = F.conv2d(x, _SOBEL_X.T[None, None])
    return torch.sqrt(gx[0, 0] ** 2 + gy[0, 0] ** 2 + _SOBEL_EPS)


def sobel_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """L2 between Sobel gradient magnitudes; grayscale is the channel mean."""
    _check_images(pred, gt)
    return ((sobel_magnitude(pred) - sobel_magnitude(gt)) ** 2).mean()


def knn_neighbor_indices(rest_centers: Tensor, k: int) -> Tensor:
    """Indices (N, k) of the k nearest Gaussians by rest-pose world center."""
    n = rest_centers.shape[0]
    if n < k + 1:
        raise TooFewGaussians(f"need at least {k + 1} Gaussians, have {n}")
    with torch.no_grad():
        dist = torch.cdist(rest_centers, rest_centers)
        dist.fill_diagonal_(float("inf"))
        return dist.topk(k, largest=False).indices


def gaussian_properties(gaussians: GaussianSet, frame_scales: Tensor) -> Tensor:
    """Per-Gaussian property rows for KNN regularization.

    Columns: world offset magnitude, exp(log_scale) (3), color (3), opacity.
    """
    offset_mag = frame_scales[gaussians.parent] * torch.sqrt((gaussians.mu**2).sum(-1) + _STD_EPS)
    return torch.cat(
        [
            offset_mag[:, None],
            torch.exp(gaussians.log_scale),
            gaussians.color,
            gaussians.opacity[:, None],
        ],
        dim=1,
    )


def knn_regularizer(
    gaussians: GaussianSet,
    k: int,
    rest_centers: Tensor,
    frame_scales: Tensor,
    neighbor_idx: Tensor | None = None,
) -> Tensor:
    """Mean over Gaussians of the summed property std in each neighborhood.

    The neighborhood of a Gaussian is itself plus its k nearest neighbors by
    rest-pose world center; std is the population (ddof 0) value.
    """
    if neighbor_idx is None:
        neighbor_idx = knn_neighbor_indices(rest_centers, k)
    props = gaussian_properties(gaussians, frame_scales)
    n = props.shape[0]
    hood = torch.cat([torch.arange(n)[:, None], neighbor_idx], dim=1)   # (N, k+1)
    vals = props[hood]                                                  # (N, k+1, 8)
    var = vals.var(dim=1, unbiased=False)
    std = torch.sqrt(var + _STD_EPS)
    return std.sum(dim=1).mean()


def tv_regularizer(texels: Tensor) -> Tensor:
    """Mean squared forward difference over texel channels, no wraparound."""
    dh = texels[:, 1:, :] - texels[:, :-1, :]
    dv = texels[1:, :, :] - texels[:-1, :, :]
    return ((dh**2).sum() + (dv**2).sum()) / texels.numel()


def opacity_regularizer(gaussians: GaussianSet) -> Tensor:
    """Sum of squared opacities (a sum, not a mean, so it scales with count)."""
    return (gaussians.opacity**2).sum()


def dice_loss(sil_gt: Tensor, depth: Tensor, alpha: Tensor, eps: float = 1e-6) -> Tensor:
    """Dice loss between the GT silhouette and the soft predicted silhouette.

    The prediction is the soft union of binarized mesh depth (finite -> 1)
    and the Gaussian alpha map; only the alpha path is differentiable.
    """
    if sil_gt.shape != depth.shape or depth.shape != alpha.shape:
        raise DimensionMismatch("silhouette, depth and alpha shapes differ")
    if not bool(((sil_gt == 0) | (sil_gt == 1)).all()):
        raise ValueError("ground-truth silhouette must be binary")
    covered = torch.isfinite(depth).to(alpha.dtype)
    pred = 1.0 - (1.0 - covered) * (1.0 - alpha)
    inter = (pred * sil_gt).sum()
    return 1.0 - (2.0 * inter + eps) / (pred.sum() + sil_gt.sum() + eps)


def psnr(pred: Tensor, gt: Tensor) -> float:
    """PSNR in dB on the [0, 1] range, capped at 100 dB for near-exact pairs."""
    _check_images(pred, gt)
    mse = float(((pred - gt) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


@dataclass
class LossReport:
    """Per-term scalar values and the weighted total for one iteration."""

    stage: int
    terms: dict[str, float]
    total: float
    iteration: int = -1

    def as_log_entry(self) -> dict:
        entry = {"iter": self.iteration, "stage": self.stage}
        entry.update({k: self.terms[k] for k in sorted(self.terms)})
        entry["total"] = self.total
        return entry


def weighted_total(terms: dict[str, Tensor], lambdas: dict[str, float], stage: int) -> Tensor:
    """Stage-specific weighted sum; ``l2`` has implicit weight 1."""
    if stage not in STAGE_TERMS:
        raise ValueError(f"unknown stage {stage}")
    total = None
    for name in STAGE_TERMS[stage]:
        if name not in terms:
            raise MissingTerm(f"stage {stage} requires loss term '{name}'")
        weight = 1.0 if name == "l2" else lambdas[name]
        contrib = terms[name] * weight
        total = contrib if total is None else total + contrib
    return total


def make_report(terms: dict[str, Tensor], lambdas: dict[str, float], stage: int, iteration: int = -1) -> LossReport:
    total = weighted_total(terms, lambdas, stage)
    return LossReport(
        stage=stage,
        terms={k: float(v.detach()) for k, v in terms.items()},
        total=float(total.detach()),
        iteration=iteration,
    )
