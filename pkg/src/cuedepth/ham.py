"""High-dimensional attention with a Gaussian similarity kernel.

Keys, queries and values are produced by 3x3 convolution blocks; the affinity of
positions ``i`` and ``j`` is ``exp(-||k_i - q_j||^2 / (2 delta^2))``, which the
Taylor expansion of the exponential shows to be an inner product in an
infinite-dimensional feature space. The aggregated values are scaled by a
learnable ``beta`` (initialized at 0) and added back to the input.

The module scores every pair of positions, so it is only applied to the
deepest, lowest-resolution feature maps.
"""

from math import factorial

import numpy as np
import torch
from torch import nn


MAX_POSITIONS = 4096


def gaussian_similarity(
    keys: torch.Tensor, queries: torch.Tensor, delta: float = 0.5
) -> torch.Tensor:
    """Gaussian affinity between every key position and every query position.

    The squared distance is computed from direct differences, which keeps the
    diagonal of ``gaussian_similarity(x, x)`` exactly 1.

    Args:
        keys (torch.Tensor): Keys (B, C, H, W) or (C, H, W).
        queries (torch.Tensor): Queries with the same shape as ``keys``.
        delta (float): Kernel bandwidth.

    Raises:
        ValueError: If the shapes differ or ``delta`` is not positive.

    Returns:
        torch.Tensor: Affinities (B, N, N) or (N, N), ``N = H * W``, entry ``[i, j]`` pairing key ``i`` with query ``j``.
    """
    if keys.shape != queries.shape:
        raise ValueError(
            f"Keys {tuple(keys.shape)} and queries {tuple(queries.shape)} differ in shape."
        )
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}.")
    unbatched = keys.dim() == 3
    if unbatched:
        keys, queries = keys[None], queries[None]
    batch, channels = keys.shape[:2]
    k = keys.reshape(batch, channels, -1)
    q = queries.reshape(batch, channels, -1)
    diff = k.unsqueeze(3) - q.unsqueeze(2)
    similarity = torch.exp(-(diff * diff).sum(1) / (2 * delta**2))
    return similarity[0] if unbatched else similarity


def ham_aggregate(
    x: torch.Tensor, values: torch.Tensor, similarity: torch.Tensor, beta: torch.Tensor | float
) -> torch.Tensor:
    """Residual aggregation ``beta * (V s^T) + x``.

    Args:
        x (torch.Tensor): Module input (B, C, H, W).
        values (torch.Tensor): Values with the same shape as ``x``.
        similarity (torch.Tensor): Affinities (B, N, N) from `gaussian_similarity`.
        beta (torch.Tensor | float): Output scale.

    Returns:
        torch.Tensor: Output with the shape of ``x``.
    """
    batch, channels, height, width = x.shape
    v = values.reshape(batch, channels, -1)
    out = torch.bmm(v, similarity.transpose(1, 2)).reshape(batch, channels, height, width)
    return beta * out + x


def _conv_block(channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(channels, channels, 3, padding=1, bias=False),
        nn.BatchNorm2d(channels),
        nn.ReLU(inplace=True),
    )


class HighDimensionalAttention(nn.Module):
    """Residual attention over all spatial positions of a feature map.

    Args:
        channels (int): Channels of the input feature map.
        delta (float): Bandwidth of the Gaussian similarity.
        max_positions (int): Largest ``H * W`` accepted.
    """

    def __init__(self, channels: int, delta: float = 0.5, max_positions: int = MAX_POSITIONS):
        super().__init__()
        if delta <= 0:
            raise ValueError(f"delta must be positive, got {delta}.")
        self.delta = delta
        self.max_positions = max_positions
        self.key = _conv_block(channels)
        self.query = _conv_block(channels)
        self.value = _conv_block(channels)
        self.beta = nn.Parameter(torch.zeros(1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        positions = x.shape[-2] * x.shape[-1]
        if positions > self.max_positions:
            raise ValueError(
                f"Attention over {positions} positions exceeds the limit of {self.max_positions}."
            )
        similarity = gaussian_similarity(self.key(x), self.query(x), self.delta)
        return ham_aggregate(x, self.value(x), similarity, self.beta)


def taylor_feature_map(theta, delta: float = 0.5, order: int = 12) -> np.ndarray:
    """Truncated explicit feature map of the one-dimensional Gaussian kernel.

    Entry ``m`` is ``theta^m exp(-theta^2 / (2 delta^2)) / (delta^m sqrt(m!))``,
    so the inner product of two maps approximates ``exp(-(a - b)^2 / (2 delta^2))``.

    Args:
        theta: Scalar or array of inputs.
        delta (float): Kernel bandwidth.
        order (int): Highest power kept.

    Returns:
        np.ndarray: Features with a trailing axis of length ``order + 1``.
    """
    theta = np.asarray(theta, dtype=np.float64)[..., None]
    m = np.arange(order + 1)
    norms = np.sqrt(np.array([factorial(k) for k in m], dtype=np.float64))
    return theta**m * np.exp(-(theta**2) / (2 * delta**2)) / (delta**m * norms)


def taylor_kernel(a, b, delta: float = 0.5, order: int = 12) -> float:
    """Gaussian kernel of two vectors through the truncated feature map.

    The multivariate kernel factors over channels, so the result is the product
    of per-channel inner products. Both arguments are first shifted by their
    midpoint; the kernel is translation invariant and the centred inputs have
    magnitude ``|a - b| / 2`` per channel, so the truncation error depends on the
    distance between the arguments and not on their norms. For
    ``||a - b|| <= 2 delta`` each per-channel series argument is at most one and
    the order-12 error stays below 1e-6.

    Args:
        a: Scalar or C-vector.
        b: Scalar or C-vector with the shape of ``a``.
        delta (float): Kernel bandwidth.
        order (int): Truncation order.

    Raises:
        ValueError: If the arguments differ in shape.

    Returns:
        float: Approximation of ``exp(-||a - b||^2 / (2 delta^2))``.
    """
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError("Kernel arguments must share a shape.")
    midpoint = (a + b) / 2
    phi_a = taylor_feature_map(a - midpoint, delta, order)
    phi_b = taylor_feature_map(b - midpoint, delta, order)
    return float(np.prod((phi_a * phi_b).sum(-1)))


def taylor_similarity(keys, queries, delta: float = 0.5, order: int = 12) -> np.ndarray:
    """Truncated-feature counterpart of `gaussian_similarity` for (C, H, W) arrays.

    One feature map is shared by all positions, so keys and queries are centred
    on the per-channel midpoint of their joint range. Accuracy then follows the
    spread of the descriptors rather than their offset from zero.

    Returns:
        np.ndarray: (N, N) affinities.
    """
    keys = np.asarray(keys, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    channels = keys.shape[0]
    keys = keys.reshape(channels, -1)
    queries = queries.reshape(channels, -1)
    joint = np.concatenate([keys, queries], axis=1)
    anchor = (joint.min(axis=1, keepdims=True) + joint.max(axis=1, keepdims=True)) / 2
    phi_k = taylor_feature_map(keys - anchor, delta, order)
    phi_q = taylor_feature_map(queries - anchor, delta, order)
    # (C, N, M) x (C, N', M) -> per-channel (N, N'), multiplied over channels
    per_channel = np.einsum("cim,cjm->cij", phi_k, phi_q)
    return np.prod(per_channel, axis=0)
