"""Depth and odometry evaluation.

Depth predictions are compared with ground truth through the seven standard
error and accuracy measures after per-frame median scaling and depth capping.
Odometry is scored by the absolute trajectory error of 5-frame snippets, each
built from four frame-to-frame transforms and aligned to ground truth by a
single scale factor.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from cuedepth.camgeom import DepthMap, PoseSE3
from cuedepth.kittidata import FrameSample
from cuedepth.networks import JointDepthNet, disparity_to_depth
from cuedepth.synthdata import write_raw_array

logger = logging.getLogger(__name__)

EIGEN_CROP = (0.40810811, 0.99189189, 0.03594771, 0.96405229)
METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")


@dataclass
class MetricsReport:
    """Depth error and accuracy measures.

    Attributes:
        abs_rel (float): Mean absolute relative error.
        sq_rel (float): Mean squared relative error.
        rmse (float): Root mean squared error.
        rmse_log (float): Root mean squared log error.
        delta1 (float): Fraction with ``max(p/g, g/p) < 1.25``.
        delta2 (float): Same with ``1.25**2``.
        delta3 (float): Same with ``1.25**3``.
        num_pixels (int): Pixels taking part.
        scale_applied (float): Median-scaling factor (median over frames for aggregates).
    """

    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    num_pixels: int
    scale_applied: float = 1.0

    def __getitem__(self, key: str):
        return getattr(self, key)

    def to_dict(self) -> dict:
        return asdict(self)

    def row(self) -> str:
        """Single-line table of the seven measures."""
        return " | ".join(f"{name}: {self[name]:.4f}" for name in METRIC_NAMES)


def _values(depth) -> np.ndarray:
    if isinstance(depth, DepthMap):
        depth = depth.values
    if isinstance(depth, torch.Tensor):
        depth = depth.detach().cpu().numpy()
    return np.asarray(depth, dtype=np.float64)


def _mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask.detach().cpu() if isinstance(mask, torch.Tensor) else mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"Mask shape {mask.shape} differs from depth shape {shape}.")
    return mask


def median_scale(pred, gt, mask=None) -> tuple[np.ndarray, float]:
    """Aligns a prediction to ground truth by the ratio of their medians.

    Args:
        pred: Predicted depth (array, tensor or DepthMap).
        gt: Ground-truth depth with the shape of ``pred``.
        mask: Pixels used for the medians; all when None.

    Raises:
        ValueError: If the shapes differ or the mask is empty.

    Returns:
        tuple[np.ndarray, float]: ``pred * scale`` and ``scale = median(gt) / median(pred)``.
    """
    pred, gt = _values(pred), _values(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"Prediction {pred.shape} and ground truth {gt.shape} differ in shape.")
    mask = _mask(mask, gt.shape)
    if not mask.any():
        raise ValueError("Median scaling needs a non-empty mask.")
    scale = float(np.median(gt[mask]) / np.median(pred[mask]))
    return pred * scale, scale


def depth_metrics(pred, gt, mask=None, cap: float = 80.0, min_depth: float = 1e-3) -> MetricsReport:
    """Seven standard depth measures over valid, capped pixels.

    The prediction is clamped to ``[min_depth, cap]``; pixels take part when the
    mask holds, ground truth is positive and does not exceed ``cap``.

    Args:
        pred: Predicted depth.
        gt: Ground-truth depth, zero where unknown.
        mask: Extra pixel selection, e.g. the Eigen crop.
        cap (float): Depth ceiling.
        min_depth (float): Lower clamp of the prediction.

    Raises:
        ValueError: If shapes differ, ``cap`` is not positive or no pixel is valid.

    Returns:
        MetricsReport: The measures.
    """
    pred, gt = _values(pred), _values(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"Prediction {pred.shape} and ground truth {gt.shape} differ in shape.")
    if not cap > 0:
        raise ValueError(f"cap must be positive, got {cap}.")
    valid = _mask(mask, gt.shape) & (gt > 0) & (gt <= cap)
    if not valid.any():
        raise ValueError("No valid ground-truth pixel to evaluate.")
    g = gt[valid]
    p = np.clip(pred[valid], min_depth, cap)

    thresh = np.maximum(g / p, p / g)
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        sq_rel=float(np.mean((p - g) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float((thresh < 1.25).mean()),
        delta2=float((thresh < 1.25**2).mean()),
        delta3=float((thresh < 1.25**3).mean()),
        num_pixels=int(valid.sum()),
    )


def eigen_crop_mask(height: int, width: int) -> np.ndarray:
    """Boolean mask of the standard KITTI evaluation crop."""
    top, bottom, left, right = EIGEN_CROP
    mask = np.zeros((height, width), dtype=bool)
    mask[int(top * height) : int(bottom * height), int(left * width) : int(right * width)] = True
    return mask


def _as_matrices(transforms) -> np.ndarray:
    if isinstance(transforms, PoseSE3):
        return transforms.matrix().detach().double().cpu().numpy()
    if isinstance(transforms, torch.Tensor):
        return transforms.detach().double().cpu().numpy()
    if len(transforms) and isinstance(transforms[0], PoseSE3):
        return np.stack([t.matrix().detach().double().cpu().numpy() for t in transforms])
    return np.asarray(transforms, dtype=np.float64)


def snippet_trajectory(transforms) -> np.ndarray:
    """Positions of the five frames of a snippet, the first at the origin.

    ``transforms[k]`` is the pose of frame ``k + 1`` in the coordinates of frame ``k``.

    Returns:
        np.ndarray: (5, 3) camera positions.
    """
    matrices = _as_matrices(transforms)
    if matrices.shape != (4, 4, 4):
        raise ValueError(f"A snippet needs four 4x4 transforms, got shape {matrices.shape}.")
    pose = np.eye(4)
    positions = [pose[:3, 3].copy()]
    for matrix in matrices:
        pose = pose @ matrix
        positions.append(pose[:3, 3].copy())
    return np.stack(positions)


def snippet_ate(pred, gt) -> float:
    """Scale-aligned RMS position error of one snippet."""
    pred_xyz = snippet_trajectory(pred)
    gt_xyz = snippet_trajectory(gt)
    denominator = np.sum(pred_xyz**2)
    scale = np.sum(gt_xyz * pred_xyz) / denominator if denominator > 0 else 1.0
    error = gt_xyz - scale * pred_xyz
    return float(np.sqrt(np.mean(np.sum(error**2, axis=1))))


def ate_5frame(pred: Sequence, gt: Sequence) -> tuple[float, float]:
    """Mean and standard deviation of the snippet ATE.

    Args:
        pred (Sequence): Predicted snippets, each four frame-to-frame transforms
            (PoseSE3 list, (4, 4, 4) array or batched PoseSE3).
        gt (Sequence): Ground-truth snippets in the same form.

    Raises:
        ValueError: If the snippet counts differ or a snippet is malformed.

    Returns:
        tuple[float, float]: Mean and population standard deviation over snippets.
    """
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predicted snippets against {len(gt)} ground-truth snippets.")
    if not len(pred):
        raise ValueError("ATE needs at least one snippet.")
    errors = np.array([snippet_ate(p, g) for p, g in zip(pred, gt)])
    return float(errors.mean()), float(errors.std())


def snippets_from_sequence(transforms, length: int = 5) -> list[np.ndarray]:
    """Cuts a frame-to-frame pose sequence into overlapping snippets.

    Args:
        transforms: (N, 4, 4) matrices, or PoseSE3 items, in temporal order.
        length (int): Frames per snippet.

    Returns:
        list[np.ndarray]: One (length - 1, 4, 4) stack per starting frame.
    """
    matrices = _as_matrices(transforms)
    steps = length - 1
    return [matrices[i : i + steps] for i in range(len(matrices) - steps + 1)]


def score_frame(
    pred,
    gt,
    *,
    cap: float = 80.0,
    min_depth: float = 1e-3,
    eigen_crop: bool = False,
    median_scaling: bool = True,
) -> tuple[np.ndarray, MetricsReport]:
    """Scores one depth prediction against its ground truth.

    The median ratio and the measures share one mask: positive ground truth no
    deeper than ``cap``, optionally restricted to the KITTI evaluation crop.

    Returns:
        tuple[np.ndarray, MetricsReport]: The (scaled) prediction and its report.
    """
    pred, gt = _values(pred), _values(gt)
    mask = (gt > 0) & (gt <= cap)
    if eigen_crop:
        mask &= eigen_crop_mask(*gt.shape)
    scale = 1.0
    if median_scaling:
        pred, scale = median_scale(pred, gt, mask)
    report = depth_metrics(pred, gt, mask, cap=cap, min_depth=min_depth)
    report.scale_applied = scale
    return pred, report


@torch.no_grad()
def evaluate_model(
    model: JointDepthNet,
    samples: Iterable[FrameSample],
    *,
    cap: float = 80.0,
    min_depth: float = 1e-3,
    eigen_crop: bool = False,
    median_scaling: bool = True,
    dump_dir: str | Path | None = None,
    device: str | torch.device = "cpu",
) -> tuple[MetricsReport, list[dict]]:
    """Scores a model's depth on samples that carry ground truth.

    Each frame's scale-0 disparity is resized to the ground-truth resolution,
    converted to depth, optionally median-scaled, then scored. The aggregate
    is the mean of the per-frame measures.

    Args:
        model (JointDepthNet): Trained model.
        samples (Iterable[FrameSample]): Unbatched samples with ``depth_gt``.
        cap (float): Depth ceiling.
        min_depth (float): Lower clamp of the prediction.
        eigen_crop (bool): Restrict to the KITTI evaluation crop.
        median_scaling (bool): Align each frame by its median ratio.
        dump_dir (str | Path | None): Folder receiving ``<frame>.depth`` raw predictions.
        device (str | torch.device): Inference device.

    Raises:
        ValueError: If a sample has no ground truth.

    Returns:
        tuple[MetricsReport, list[dict]]: Aggregate report and one record per frame.
    """
    model.eval()
    cfg = model.cfg
    records, reports, ratios = [], [], []
    for sample in tqdm(samples, desc="evaluate", leave=False):
        if sample.depth_gt is None:
            raise ValueError(f"Sample {sample.frame_id} carries no ground-truth depth.")
        batch = FrameSample.collate([sample]).to(device)
        prev = batch.sources.get("prev")
        disp = model.predict_disparity(batch.target, prev)[0]
        gt = sample.depth_gt[0].double().numpy()
        disp = F.interpolate(disp, size=gt.shape, mode="bilinear", align_corners=False)
        pred = disparity_to_depth(disp.clamp(0, 1), cfg.min_depth, cfg.max_depth)[0, 0].double().cpu().numpy()

        pred, report = score_frame(
            pred, gt, cap=cap, min_depth=min_depth, eigen_crop=eigen_crop, median_scaling=median_scaling
        )
        reports.append(report)
        ratios.append(report.scale_applied)
        records.append({"frame_id": str(sample.frame_id), **report.to_dict()})
        if dump_dir is not None:
            name = str(sample.frame_id).replace("/", "_").replace(" ", "_")
            write_raw_array(Path(dump_dir) / f"{name}.depth", pred.astype(np.float32))

    if not reports:
        raise ValueError("No samples to evaluate.")
    if median_scaling:
        logger.info("Scaling ratios | median: %.3f | std: %.3f", np.median(ratios), np.std(np.asarray(ratios) / np.median(ratios)))
    aggregate = MetricsReport(
        **{name: float(np.mean([r[name] for r in reports])) for name in METRIC_NAMES},
        num_pixels=int(sum(r.num_pixels for r in reports)),
        scale_applied=float(np.median(ratios)),
    )
    return aggregate, records


@torch.no_grad()
def evaluate_odometry(
    model: JointDepthNet,
    samples: Iterable[FrameSample],
    *,
    device: str | torch.device = "cpu",
) -> tuple[float, float]:
    """Scores the pose network by the snippet ATE over a frame sequence.

    Sample ``k`` holds frame ``k + 1`` as target and frame ``k`` as ``prev``, so
    the predicted target-to-previous transforms chain into the trajectory.
    Overlapping 5-frame snippets are compared with the matching ground-truth
    snippets.

    Args:
        model (JointDepthNet): Trained model.
        samples (Iterable[FrameSample]): Unbatched consecutive samples with ``pose_gt["prev"]``.
        device (str | torch.device): Inference device.

    Raises:
        ValueError: If a sample lacks a previous frame or its ground-truth pose,
            or the sequence is shorter than one snippet.

    Returns:
        tuple[float, float]: Mean and standard deviation of the snippet ATE.
    """
    model.eval()
    predicted, reference = [], []
    for sample in tqdm(samples, desc="odometry", leave=False):
        if "prev" not in sample.sources or "prev" not in sample.pose_gt:
            raise ValueError(f"Sample {sample.frame_id} needs a previous frame and its ground-truth pose.")
        output = model(FrameSample.collate([sample]).to(device))
        predicted.append(output.poses["prev"].matrix()[0].double().cpu().numpy())
        reference.append(PoseSE3.from_vector(sample.pose_gt["prev"].double()).matrix().numpy())
    if len(predicted) < 4:
        raise ValueError(f"{len(predicted)} transforms cannot fill a 5-frame snippet.")
    mean, std = ate_5frame(
        snippets_from_sequence(np.stack(predicted)),
        snippets_from_sequence(np.stack(reference)),
    )
    logger.info("Snippet ATE | mean: %.4f | std: %.4f | snippets: %d", mean, std, len(predicted) - 3)
    return mean, std


def write_report(path: str | Path, report: MetricsReport, records: Sequence[dict] = ()) -> Path:
    """Writes the aggregate report and per-frame records as one JSON document."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"report": report.to_dict(), "frames": list(records)}, indent=2))
    return path
