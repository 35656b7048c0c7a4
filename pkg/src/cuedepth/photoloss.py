"""Self-supervised photometric and smoothness losses.

The training signal compares the target frame with source frames warped into
the target view. Per pixel, the best-matching source is kept (minimum
reprojection), pixels whose raw sources already match better than any warp are
masked out (auto-mask), and an edge-aware smoothness prior regularizes the
disparity. Everything is averaged over four disparity scales, each upsampled
to the input resolution before warping.
"""

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

import torch
import torch.nn.functional as F

from cuedepth.camgeom import PoseSE3, warp
from cuedepth.config import LossConfig
from cuedepth.networks import disparity_to_depth

if TYPE_CHECKING:
    from cuedepth.kittidata import FrameSample


def ssim_loss(a: torch.Tensor, b: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    """Per-pixel structural dissimilarity ``(1 - SSIM) / 2``, averaged over channels.

    Uses reflection padding and a square average-pooling window.

    Args:
        a (torch.Tensor): Image of shape (B, C, H, W) in [0, 1].
        b (torch.Tensor): Image with the same shape as ``a``.
        cfg (LossConfig | None): Window and stabilization constants.

    Raises:
        ValueError: If the shapes differ.

    Returns:
        torch.Tensor: Dissimilarity map (B, 1, H, W) with values in [0, 1].
    """
    if a.shape != b.shape:
        raise ValueError(f"SSIM inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}.")
    cfg = cfg or LossConfig()
    pad = cfg.ssim_window // 2
    a = F.pad(a, [pad] * 4, mode="reflect")
    b = F.pad(b, [pad] * 4, mode="reflect")

    def pool(x):
        return F.avg_pool2d(x, cfg.ssim_window, stride=1)

    mu_a = pool(a)
    mu_b = pool(b)
    sigma_a = pool(a * a) - mu_a**2
    sigma_b = pool(b * b) - mu_b**2
    sigma_ab = pool(a * b) - mu_a * mu_b

    numerator = (2 * mu_a * mu_b + cfg.ssim_c1) * (2 * sigma_ab + cfg.ssim_c2)
    denominator = (mu_a**2 + mu_b**2 + cfg.ssim_c1) * (sigma_a + sigma_b + cfg.ssim_c2)
    return torch.clamp((1 - numerator / denominator) / 2, 0, 1).mean(1, keepdim=True)


def photometric_error(
    target: torch.Tensor, warped: torch.Tensor, cfg: LossConfig | None = None
) -> torch.Tensor:
    """Blend of SSIM dissimilarity and mean absolute difference.

    Returns:
        torch.Tensor: Per-pixel error (B, 1, H, W), ``alpha * ssim + (1 - alpha) * l1``.
    """
    cfg = cfg or LossConfig()
    l1 = (target - warped).abs().mean(1, keepdim=True)
    return cfg.alpha * ssim_loss(target, warped, cfg) + (1 - cfg.alpha) * l1


def min_reprojection(errors: Sequence[torch.Tensor]) -> torch.Tensor:
    """Per-pixel minimum over source errors.

    Raises:
        ValueError: If no errors are given or their shapes differ.
    """
    if len(errors) == 0:
        raise ValueError("min_reprojection needs at least one source error.")
    if any(e.shape != errors[0].shape for e in errors):
        raise ValueError("All source errors must share a shape.")
    return torch.cat(list(errors), 1).min(1, keepdim=True).values


def _mask_from_errors(
    warped_errors: Sequence[torch.Tensor], identity_errors: Sequence[torch.Tensor]
) -> torch.Tensor:
    # strict inequality: ties count as static
    best_warped = min_reprojection(warped_errors)
    best_identity = min_reprojection(identity_errors)
    return (best_warped < best_identity).to(best_warped.dtype)


def auto_mask(
    target: torch.Tensor,
    sources: Sequence[torch.Tensor],
    warped: Sequence[torch.Tensor],
    cfg: LossConfig | None = None,
) -> torch.Tensor:
    """Binary mask keeping pixels where warping beats the unwarped sources.

    Pixels that look the same in the raw source as in the target (static camera,
    objects moving with the camera, textureless regions) get 0.

    Args:
        target (torch.Tensor): Target image (B, 3, H, W).
        sources (Sequence[torch.Tensor]): Unwarped source images.
        warped (Sequence[torch.Tensor]): Sources warped into the target view.
        cfg (LossConfig | None): Photometric constants.

    Raises:
        ValueError: If either sequence is empty.

    Returns:
        torch.Tensor: Mask (B, 1, H, W) with values in {0, 1}.
    """
    if not sources or not warped:
        raise ValueError("auto_mask needs at least one source and one warped source.")
    cfg = cfg or LossConfig()
    return _mask_from_errors(
        [photometric_error(target, w, cfg) for w in warped],
        [photometric_error(target, s, cfg) for s in sources],
    )


def _mean_or_zero(x: torch.Tensor) -> torch.Tensor:
    if x.numel() == 0:
        return x.sum()
    return x.mean()


def smoothness_loss(disp: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Edge-aware first-order smoothness of mean-normalized disparity.

    Args:
        disp (torch.Tensor): Disparity (B, 1, H, W).
        image (torch.Tensor): Color image (B, 3, H, W) at the disparity's resolution.

    Raises:
        ValueError: If a disparity map has non-positive mean.

    Returns:
        torch.Tensor: Scalar loss, invariant to rescaling the disparity.
    """
    mean = disp.mean((2, 3), keepdim=True)
    if not bool((mean > 0).all()):
        raise ValueError("Disparity must have a positive mean for smoothness normalization.")
    disp = disp / mean

    grad_disp_x = (disp[..., :, :-1] - disp[..., :, 1:]).abs()
    grad_disp_y = (disp[..., :-1, :] - disp[..., 1:, :]).abs()
    grad_img_x = (image[..., :, :-1] - image[..., :, 1:]).abs().mean(1, keepdim=True)
    grad_img_y = (image[..., :-1, :] - image[..., 1:, :]).abs().mean(1, keepdim=True)

    return _mean_or_zero(grad_disp_x * torch.exp(-grad_img_x)) + _mean_or_zero(
        grad_disp_y * torch.exp(-grad_img_y)
    )


@dataclass
class LossBreakdown:
    """Total loss and its per-scale components.

    Attributes:
        total (torch.Tensor): Scalar training loss.
        photometric (list[torch.Tensor]): Masked minimum-reprojection term per scale.
        smoothness (list[torch.Tensor]): Smoothness term per scale (unweighted).
        mask_fraction (list[float]): Fraction of pixels kept by the auto-mask per scale.
        gamma (float): Smoothness weight used to combine the terms.
    """

    total: torch.Tensor
    photometric: list[torch.Tensor] = field(default_factory=list)
    smoothness: list[torch.Tensor] = field(default_factory=list)
    mask_fraction: list[float] = field(default_factory=list)
    gamma: float = 1e-3

    def recomposed(self) -> torch.Tensor:
        """Recombines the stored components, equal to ``total``."""
        terms = [p + self.gamma * s for p, s in zip(self.photometric, self.smoothness)]
        return torch.stack(terms).mean()

    def to_record(self) -> dict:
        """Plain-float summary for the run log."""
        return {
            "loss": float(self.total.detach()),
            "photometric": [float(p.detach()) for p in self.photometric],
            "smoothness": [float(s.detach()) for s in self.smoothness],
            "mask_fraction": list(self.mask_fraction),
        }


def total_loss(
    disparities: Sequence[torch.Tensor],
    sample: "FrameSample",
    poses: Mapping[str, PoseSE3],
    cfg: LossConfig | None = None,
    min_depth: float = 0.1,
    max_depth: float = 100.0,
) -> LossBreakdown:
    """Multi-scale self-supervised loss of one (batched) sample.

    Every disparity scale is upsampled to the input resolution, converted to
    depth and used to warp each source named in ``poses``. Warped errors of
    out-of-view pixels do not take part in the minimum; pixels no source sees are
    left out of the average.

    Args:
        disparities (Sequence[torch.Tensor]): One (B, 1, H/2^s, W/2^s) map per scale.
        sample (FrameSample): Batched sample; its raw ``target`` and ``sources`` are compared.
        poses (Mapping[str, PoseSE3]): Target-to-source transform per source role.
        cfg (LossConfig | None): Loss weights.
        min_depth (float): Depth at disparity 1.
        max_depth (float): Depth at disparity 0.

    Raises:
        ValueError: If the number of scales is wrong or a pose names a missing source.

    Returns:
        LossBreakdown: Total loss and its components.
    """
    cfg = cfg or LossConfig()
    if len(disparities) != cfg.num_scales:
        raise ValueError(f"Expected {cfg.num_scales} disparity scales, got {len(disparities)}.")
    if not poses:
        raise ValueError("total_loss needs at least one source pose.")
    missing = sorted(set(poses) - set(sample.sources))
    if missing:
        raise ValueError(f"No source image for role(s): {', '.join(missing)}.")

    target = sample.target
    height, width = target.shape[-2:]
    intrinsics = sample.intrinsics[..., 0, :, :]
    roles = sorted(poses)
    sources = [sample.sources[role] for role in roles]
    identity_errors = [photometric_error(target, s, cfg) for s in sources]

    photometric, smoothness, fractions = [], [], []
    for scale, disp in enumerate(disparities):
        full = disp
        if disp.shape[-2:] != (height, width):
            full = F.interpolate(disp, size=(height, width), mode="bilinear", align_corners=False)
        depth = disparity_to_depth(full, min_depth, max_depth)

        errors, masked = [], []
        for role, source in zip(roles, sources):
            warped, valid = warp(source, depth, intrinsics, poses[role])
            error = photometric_error(target, warped, cfg)
            errors.append(error)
            masked.append(torch.where(valid, error, torch.full_like(error, float("inf"))))

        reprojection = min_reprojection(masked)
        seen = torch.isfinite(reprojection)
        reprojection = torch.where(seen, reprojection, torch.zeros_like(reprojection))
        if cfg.automask:
            mask = _mask_from_errors(errors, identity_errors)
        else:
            mask = torch.ones_like(reprojection)
        weight = mask * seen
        photometric.append((weight * reprojection).sum() / seen.sum().clamp(min=1))
        fractions.append(float(mask.mean()))

        color = F.avg_pool2d(target, 2**scale) if scale else target
        smoothness.append(smoothness_loss(disp, color))

    terms = [p + cfg.gamma * s for p, s in zip(photometric, smoothness)]
    return LossBreakdown(torch.stack(terms).mean(), photometric, smoothness, fractions, cfg.gamma)
