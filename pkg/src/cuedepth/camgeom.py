"""Differentiable pinhole camera geometry.

Implements the view-synthesis chain used by the self-supervised losses:
backprojecting a target depth map, moving the points with a relative pose,
projecting them into the source camera and bilinearly sampling the source
image at the resulting coordinates.

Pixel ``(i, j)`` sits at the continuous coordinate ``(x=j, y=i)``. All functions
are pure and work in any floating dtype, so they can be checked in float64.

Example:
    >>> K = Intrinsics(fx=50.0, fy=50.0, cx=31.5, cy=31.5, width=64, height=64)
    >>> T = PoseSE3.identity(batch=1)
    >>> warped, valid = warp(source, depth, K, T)
"""

from dataclasses import dataclass, replace
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import numpy as np
import torch
import torch.nn.functional as F

_SERIES_ANGLE = 1e-3
# projections this close outside the image still count as in bounds
_BORDER_SLACK = 1e-3


def _skew(vector: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(vector[..., 0])
    x, y, z = vector.unbind(-1)
    return torch.stack(
        [
            torch.stack([zero, -z, y], -1),
            torch.stack([z, zero, -x], -1),
            torch.stack([-y, x, zero], -1),
        ],
        -2,
    )


def axisangle_to_matrix(rotation: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula for axis-angle vectors of shape (..., 3).

    Below a rotation angle of 1e-3 the trigonometric coefficients are replaced by
    their Taylor series, which keeps the map smooth and the gradient finite at zero.

    Args:
        rotation (torch.Tensor): Axis-angle vectors, norm equal to the angle in radians.

    Returns:
        torch.Tensor: Rotation matrices of shape (..., 3, 3).
    """
    theta2 = (rotation * rotation).sum(-1)[..., None, None]
    small = theta2 < _SERIES_ANGLE**2
    safe_theta2 = torch.where(small, torch.ones_like(theta2), theta2)
    safe_theta = safe_theta2.sqrt()

    a = torch.where(
        small, 1 - theta2 / 6 + theta2**2 / 120, torch.sin(safe_theta) / safe_theta
    )
    b = torch.where(
        small,
        0.5 - theta2 / 24 + theta2**2 / 720,
        2 * torch.sin(safe_theta / 2) ** 2 / safe_theta2,
    )
    k = _skew(rotation)
    eye = torch.eye(3, dtype=rotation.dtype, device=rotation.device).expand_as(k)
    return eye + a * k + b * (k @ k)


def _matrix_to_quaternion(matrix: torch.Tensor) -> torch.Tensor:
    m00, m01, m02, m10, m11, m12, m20, m21, m22 = matrix.flatten(-2).unbind(-1)
    q_abs = torch.sqrt(
        torch.clamp(
            torch.stack(
                [
                    1 + m00 + m11 + m22,
                    1 + m00 - m11 - m22,
                    1 - m00 + m11 - m22,
                    1 - m00 - m11 + m22,
                ],
                -1,
            ),
            min=0,
        )
    )
    candidates = torch.stack(
        [
            torch.stack([q_abs[..., 0] ** 2, m21 - m12, m02 - m20, m10 - m01], -1),
            torch.stack([m21 - m12, q_abs[..., 1] ** 2, m10 + m01, m02 + m20], -1),
            torch.stack([m02 - m20, m10 + m01, q_abs[..., 2] ** 2, m12 + m21], -1),
            torch.stack([m10 - m01, m20 + m02, m21 + m12, q_abs[..., 3] ** 2], -1),
        ],
        -2,
    )
    candidates = candidates / (2 * q_abs[..., None].clamp(min=0.1))
    best = q_abs.argmax(-1)
    quat = torch.gather(
        candidates, -2, best[..., None, None].expand(*best.shape, 1, 4)
    ).squeeze(-2)
    # (w, x, y, z) with w >= 0
    return torch.where(quat[..., :1] < 0, -quat, quat)


def matrix_to_axisangle(matrix: torch.Tensor) -> torch.Tensor:
    """Inverse of `axisangle_to_matrix` for angles in [0, pi].

    Args:
        matrix (torch.Tensor): Rotation matrices of shape (..., 3, 3).

    Returns:
        torch.Tensor: Axis-angle vectors of shape (..., 3).
    """
    quat = _matrix_to_quaternion(matrix)
    w, xyz = quat[..., :1], quat[..., 1:]
    sin_half = xyz.norm(dim=-1, keepdim=True)
    small = sin_half < 1e-6
    safe = torch.where(small, torch.ones_like(sin_half), sin_half)
    angle = 2 * torch.atan2(sin_half, w)
    scale = torch.where(small, 2 / w.clamp(min=1e-12), angle / safe)
    return xyz * scale


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform mapping target-camera points into source-camera points.

    Attributes:
        rotation (torch.Tensor): Axis-angle rotation, shape (..., 3).
        translation (torch.Tensor): Translation, shape (..., 3).
    """

    rotation: torch.Tensor
    translation: torch.Tensor

    def __post_init__(self):
        if self.rotation.shape[-1] != 3 or self.translation.shape[-1] != 3:
            raise ValueError("rotation and translation must both end in a dimension of 3.")
        if self.rotation.shape != self.translation.shape:
            raise ValueError(
                f"rotation {tuple(self.rotation.shape)} and translation "
                f"{tuple(self.translation.shape)} must share a shape."
            )

    @classmethod
    def identity(
        cls,
        batch: int | None = None,
        dtype: torch.dtype = torch.float32,
        device: torch.device | str | None = None,
    ) -> Self:
        shape = (3,) if batch is None else (batch, 3)
        zeros = torch.zeros(shape, dtype=dtype, device=device)
        return cls(zeros, zeros.clone())

    @classmethod
    def from_vector(cls, vector: torch.Tensor) -> Self:
        """Splits a (..., 6) vector ordered as (rotation, translation)."""
        if vector.shape[-1] != 6:
            raise ValueError(f"Pose vectors need 6 entries, got {vector.shape[-1]}.")
        return cls(vector[..., :3], vector[..., 3:])

    @classmethod
    def from_matrix(cls, matrix: torch.Tensor) -> Self:
        """Builds a pose from homogeneous matrices of shape (..., 4, 4)."""
        return cls(matrix_to_axisangle(matrix[..., :3, :3]), matrix[..., :3, 3])

    def as_vector(self) -> torch.Tensor:
        return torch.cat([self.rotation, self.translation], -1)

    def rotation_matrix(self) -> torch.Tensor:
        return axisangle_to_matrix(self.rotation)

    def matrix(self) -> torch.Tensor:
        """Homogeneous matrices of shape (..., 4, 4)."""
        top = torch.cat([self.rotation_matrix(), self.translation[..., None]], -1)
        bottom = torch.zeros_like(top[..., :1, :])
        bottom[..., 0, 3] = 1
        return torch.cat([top, bottom], -2)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        return pose_compose(self, other)

    def inverse(self) -> "PoseSE3":
        return pose_invert(self)

    def to(self, *args, **kwargs) -> "PoseSE3":
        return PoseSE3(self.rotation.to(*args, **kwargs), self.translation.to(*args, **kwargs))

    def detach(self) -> "PoseSE3":
        return PoseSE3(self.rotation.detach(), self.translation.detach())


def pose_compose(first: PoseSE3, second: PoseSE3) -> PoseSE3:
    """Composition ``first . second``: apply ``second``, then ``first``.

    Args:
        first (PoseSE3): Outer transform.
        second (PoseSE3): Inner transform.

    Returns:
        PoseSE3: The composed transform.
    """
    r_first = first.rotation_matrix()
    r_second = second.rotation_matrix()
    rotation = r_first @ r_second
    translation = (r_first @ second.translation[..., None])[..., 0] + first.translation
    rotation, translation = torch.broadcast_tensors(matrix_to_axisangle(rotation), translation)
    return PoseSE3(rotation, translation)


def pose_invert(pose: PoseSE3) -> PoseSE3:
    """Inverse transform, ``R^T`` and ``-R^T t``."""
    rotation_t = pose.rotation_matrix().transpose(-1, -2)
    translation = -(rotation_t @ pose.translation[..., None])[..., 0]
    return PoseSE3(-pose.rotation, translation)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics of an image of a given size.

    Attributes:
        fx (float): Horizontal focal length in pixels.
        fy (float): Vertical focal length in pixels.
        cx (float): Principal point column.
        cy (float): Principal point row.
        width (int): Image width in pixels.
        height (int): Image height in pixels.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("Focal lengths must be positive.")
        if not 0 <= self.cx < self.width or not 0 <= self.cy < self.height:
            raise ValueError(
                f"Principal point ({self.cx}, {self.cy}) lies outside the "
                f"{self.width}x{self.height} image."
            )

    @classmethod
    def from_matrix(cls, matrix, width: int, height: int) -> Self:
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(
            float(matrix[0, 0]),
            float(matrix[1, 1]),
            float(matrix[0, 2]),
            float(matrix[1, 2]),
            int(width),
            int(height),
        )

    def matrix(
        self, dtype: torch.dtype = torch.float64, device: torch.device | str | None = None
    ) -> torch.Tensor:
        return torch.tensor(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=dtype,
            device=device,
        )

    def scaled(self, level: int) -> Self:
        """Intrinsics of pyramid level ``level``, all entries divided by ``2**level``.

        Raises:
            ValueError: If the image size is not divisible by ``2**level``.
        """
        factor = 2**level
        if self.width % factor or self.height % factor:
            raise ValueError(
                f"A {self.width}x{self.height} image has no exact pyramid level {level}."
            )
        return replace(
            self,
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
            width=self.width // factor,
            height=self.height // factor,
        )

    def resized(self, height: int, width: int) -> Self:
        """Intrinsics after resizing the image to ``height`` x ``width``."""
        sx = width / self.width
        sy = height / self.height
        return Intrinsics(
            self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height
        )

    def pyramid(self, num_scales: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Stacked (num_scales, 3, 3) matrices, level 0 first."""
        return torch.stack([self.scaled(level).matrix(dtype) for level in range(num_scales)])


@dataclass
class DepthMap:
    """Strictly positive depths with an optional validity mask.

    Accepts numpy arrays or tensors; only the masked depths are checked.
    """

    values: np.ndarray | torch.Tensor
    valid: np.ndarray | torch.Tensor | None = None

    def __post_init__(self):
        if self.valid is None:
            self.valid = (
                torch.ones_like(self.values, dtype=torch.bool)
                if isinstance(self.values, torch.Tensor)
                else np.ones(np.shape(self.values), dtype=bool)
            )
        if tuple(self.valid.shape) != tuple(self.values.shape):
            raise ValueError("Depth values and validity mask must share a shape.")
        checked = self.values[self.valid]
        if not bool((checked > 0).all()) or not bool((checked == checked).all()):
            raise ValueError("Valid depths must be strictly positive and finite.")


@dataclass(frozen=True)
class SampleGrid:
    """Continuous source coordinates of every target pixel.

    Attributes:
        coords (torch.Tensor): (B, H, W, 2) pixel coordinates ordered (x, y).
        in_bounds (torch.Tensor): (B, H, W) flags, False when the point is behind the camera or off-image.
    """

    coords: torch.Tensor
    in_bounds: torch.Tensor


def _intrinsics_matrix(intrinsics, batch: int, dtype, device) -> torch.Tensor:
    if isinstance(intrinsics, Intrinsics):
        matrix = intrinsics.matrix(dtype, device)
    else:
        matrix = intrinsics.to(dtype=dtype, device=device)
    if matrix.shape[-2:] != (3, 3):
        raise ValueError(f"Intrinsics must be 3x3, got {tuple(matrix.shape)}.")
    return matrix.expand(batch, 3, 3)


def pixel_grid(
    height: int, width: int, dtype: torch.dtype = torch.float32, device=None
) -> torch.Tensor:
    """Homogeneous pixel coordinates ``(x, y, 1)`` of shape (3, H*W), row-major."""
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([xs.reshape(-1), ys.reshape(-1), torch.ones_like(xs).reshape(-1)])


def reproject(
    depth: torch.Tensor, intrinsics: Intrinsics | torch.Tensor, pose: PoseSE3
) -> SampleGrid:
    """Projects every target pixel into the source camera.

    Computes ``K (R D K^-1 p + t)`` for all pixels at once and divides by the
    transformed depth.

    Args:
        depth (torch.Tensor): Target depth of shape (B, 1, H, W), strictly positive.
        intrinsics (Intrinsics | torch.Tensor): Intrinsics matching the depth resolution, or (B, 3, 3) / (3, 3) matrices.
        pose (PoseSE3): Target-to-source transform, batch (B, 3) or unbatched (3,).

    Raises:
        ValueError: If the depth has the wrong layout or is not strictly positive,
            or if the intrinsics describe another resolution.

    Returns:
        SampleGrid: Source coordinates and in-bounds flags.
    """
    if depth.dim() != 4 or depth.shape[1] != 1:
        raise ValueError(f"Depth must have shape (B, 1, H, W), got {tuple(depth.shape)}.")
    if not bool((depth > 0).all()):
        raise ValueError("Depth must be strictly positive.")
    batch, _, height, width = depth.shape
    if isinstance(intrinsics, Intrinsics) and (intrinsics.height, intrinsics.width) != (
        height,
        width,
    ):
        raise ValueError(
            f"Intrinsics describe {intrinsics.height}x{intrinsics.width}, depth is {height}x{width}."
        )

    K = _intrinsics_matrix(intrinsics, batch, depth.dtype, depth.device)
    rotation = pose.rotation_matrix().to(depth.dtype).expand(batch, 3, 3)
    translation = pose.translation.to(depth.dtype).expand(batch, 3)

    pixels = pixel_grid(height, width, depth.dtype, depth.device)
    cam_points = (torch.linalg.inv(K) @ pixels) * depth.reshape(batch, 1, -1)
    points = rotation @ cam_points + translation[..., None]
    projected = K @ points

    z = projected[:, 2]
    in_front = z > 0
    safe_z = torch.where(in_front, z, torch.ones_like(z))
    x = projected[:, 0] / safe_z
    y = projected[:, 1] / safe_z
    lo, hi_x, hi_y = -_BORDER_SLACK, width - 1 + _BORDER_SLACK, height - 1 + _BORDER_SLACK
    in_bounds = in_front & (x >= lo) & (x <= hi_x) & (y >= lo) & (y <= hi_y)
    return SampleGrid(
        torch.stack([x, y], -1).reshape(batch, height, width, 2),
        in_bounds.reshape(batch, height, width),
    )


def bilinear_sample(image: torch.Tensor, grid: SampleGrid) -> tuple[torch.Tensor, torch.Tensor]:
    """Samples ``image`` at continuous pixel coordinates.

    Coordinates outside the image are clamped to the border; the second return
    value tells which samples came from inside.

    Args:
        image (torch.Tensor): Source image (B, C, H, W) with H, W >= 2.
        grid (SampleGrid): Sample positions, batch matching ``image``.

    Raises:
        ValueError: If the image is smaller than 2x2 or batch sizes differ.

    Returns:
        tuple[torch.Tensor, torch.Tensor]: (B, C, H', W') samples and (B, 1, H', W') validity.
    """
    batch, _, height, width = image.shape
    if height < 2 or width < 2:
        raise ValueError("Bilinear sampling needs an image of at least 2x2 pixels.")
    if grid.coords.shape[0] != batch:
        raise ValueError("Image and sampling grid must share the batch size.")
    x, y = grid.coords.unbind(-1)
    normalized = torch.stack([2 * x / (width - 1) - 1, 2 * y / (height - 1) - 1], -1)
    sampled = F.grid_sample(
        image, normalized, mode="bilinear", padding_mode="border", align_corners=True
    )
    return sampled, grid.in_bounds[:, None]


def warp(
    source: torch.Tensor,
    depth: torch.Tensor,
    intrinsics: Intrinsics | torch.Tensor,
    pose: PoseSE3,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Synthesizes the target view from ``source`` given target depth and pose.

    Args:
        source (torch.Tensor): Source image (B, C, H, W).
        depth (torch.Tensor): Target depth (B, 1, H, W).
        intrinsics (Intrinsics | torch.Tensor): Shared camera intrinsics.
        pose (PoseSE3): Target-to-source transform.

    Returns:
        tuple[torch.Tensor, torch.Tensor]: Warped image and its (B, 1, H, W) validity mask.
    """
    return bilinear_sample(source, reproject(depth, intrinsics, pose))
