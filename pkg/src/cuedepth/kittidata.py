"""KITTI-raw ingestion, frame triplets and training augmentation.

The expected layout is the one of the KITTI raw recordings::

    root/
      2011_09_26/
        calib_cam_to_cam.txt
        2011_09_26_drive_0001_sync/
          image_02/data/0000000000.png   # left colour camera
          image_03/data/0000000000.png   # right colour camera

Frames are identified by ``(sequence, frame, side)`` where ``sequence`` is the
``date/drive`` path, matching the split files of the Eigen protocol.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from PIL import Image
from torch.utils.data import Dataset
from tqdm import tqdm

from cuedepth.camgeom import Intrinsics

logger = logging.getLogger(__name__)

SIDE_FOLDERS = {"l": "image_02", "r": "image_03"}
CALIB_KEYS = {"l": "P_rect_02", "r": "P_rect_03"}
CALIB_FILE = "calib_cam_to_cam.txt"
STATIC_THRESHOLD = 0.01


@dataclass(frozen=True, order=True)
class FrameId:
    """Identifier of one KITTI frame.

    Attributes:
        sequence (str): ``date/drive`` folder, e.g. ``2011_09_26/2011_09_26_drive_0001_sync``.
        frame (int): Frame index inside the drive.
        side (str): ``"l"`` (image_02) or ``"r"`` (image_03).
    """

    sequence: str
    frame: int
    side: str = "l"

    def __post_init__(self):
        if self.side not in SIDE_FOLDERS:
            raise ValueError(f"side must be 'l' or 'r', got '{self.side}'.")

    def __str__(self) -> str:
        return f"{self.sequence} {self.frame} {self.side}"

    @classmethod
    def parse(cls, line: str) -> Self:
        """Parses a split-file line ``"<sequence> <frame> [<side>]"``."""
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ValueError(f"Malformed frame id: '{line.strip()}'.")
        return cls(parts[0], int(parts[1]), parts[2] if len(parts) == 3 else "l")

    @property
    def stem(self) -> str:
        """File-name friendly form, used for ground-truth and dump files."""
        return f"{self.sequence.replace('/', '_')}_{self.frame:010d}_{self.side}"

    @property
    def date(self) -> str:
        return self.sequence.split("/")[0]

    def shifted(self, offset: int = 0, side: str | None = None) -> "FrameId":
        return FrameId(self.sequence, self.frame + offset, side or self.side)

    def image_path(self, root: str | Path) -> Path:
        return Path(root) / self.sequence / SIDE_FOLDERS[self.side] / "data" / f"{self.frame:010d}.png"


@dataclass
class FrameSample:
    """Target frame, its source frames and camera data.

    Unbatched samples hold (3, H, W) images and (S, 3, 3) intrinsics; `collate`
    adds a leading batch axis everywhere. ``target`` and ``sources`` keep the raw
    appearance used by the loss, ``target_aug`` and ``sources_aug`` are what the
    network sees.

    Attributes:
        target (torch.Tensor): Target image.
        sources (dict[str, torch.Tensor]): Source images keyed by role (prev, next, stereo).
        intrinsics (torch.Tensor): One intrinsics matrix per pyramid scale.
        frame_id (str | list[str]): Identifier(s) of the target frame.
        target_aug (torch.Tensor | None): Network copy of the target, defaults to ``target``.
        sources_aug (dict[str, torch.Tensor] | None): Network copies of the sources.
        depth_gt (torch.Tensor | None): Ground-truth depth, zero where unknown.
        pose_gt (dict[str, torch.Tensor]): Ground-truth target-to-source pose vectors per role.
        stereo_pose (torch.Tensor | None): Fixed target-to-stereo pose vector.
    """

    target: torch.Tensor
    sources: dict[str, torch.Tensor]
    intrinsics: torch.Tensor
    frame_id: str | list[str] = ""
    target_aug: torch.Tensor | None = None
    sources_aug: dict[str, torch.Tensor] | None = None
    depth_gt: torch.Tensor | None = None
    pose_gt: dict[str, torch.Tensor] = field(default_factory=dict)
    stereo_pose: torch.Tensor | None = None

    def __post_init__(self):
        if self.target_aug is None:
            self.target_aug = self.target
        if self.sources_aug is None:
            self.sources_aug = dict(self.sources)
        for role, image in self.sources.items():
            if image.shape != self.target.shape:
                raise ValueError(
                    f"Source '{role}' has shape {tuple(image.shape)}, target {tuple(self.target.shape)}."
                )
        if set(self.sources_aug) != set(self.sources):
            raise ValueError("Augmented sources must cover the same roles as the raw sources.")
        if self.intrinsics.shape[-2:] != (3, 3):
            raise ValueError("Intrinsics must be stacked 3x3 matrices.")
        width = self.target.shape[-1]
        if not bool(((self.intrinsics[..., 0, 0, 2] >= 0) & (self.intrinsics[..., 0, 0, 2] < width)).all()):
            raise ValueError("Principal point lies outside the image.")

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.target.shape[-2:])

    def camera(self) -> Intrinsics:
        """Scale-0 intrinsics of an unbatched sample."""
        height, width = self.resolution
        return Intrinsics.from_matrix(self.intrinsics[0].double().numpy(), width, height)

    @staticmethod
    def collate(samples: Sequence["FrameSample"]) -> "FrameSample":
        """Stacks unbatched samples into a batch.

        Raises:
            ValueError: If the samples carry different source roles.
        """
        first = samples[0]
        roles = set(first.sources)
        if any(set(s.sources) != roles for s in samples):
            raise ValueError("All samples of a batch must carry the same source roles.")

        def stack(values):
            return torch.stack(list(values))

        depth_gt = None
        if all(s.depth_gt is not None for s in samples):
            shapes = {tuple(s.depth_gt.shape) for s in samples}
            if len(shapes) == 1:
                depth_gt = stack(s.depth_gt for s in samples)
        pose_roles = set.intersection(*(set(s.pose_gt) for s in samples))
        stereo = None
        if all(s.stereo_pose is not None for s in samples):
            stereo = stack(s.stereo_pose for s in samples)
        return FrameSample(
            target=stack(s.target for s in samples),
            sources={r: stack(s.sources[r] for s in samples) for r in first.sources},
            intrinsics=stack(s.intrinsics for s in samples),
            frame_id=[str(s.frame_id) for s in samples],
            target_aug=stack(s.target_aug for s in samples),
            sources_aug={r: stack(s.sources_aug[r] for s in samples) for r in first.sources},
            depth_gt=depth_gt,
            pose_gt={r: stack(s.pose_gt[r] for s in samples) for r in sorted(pose_roles)},
            stereo_pose=stereo,
        )

    def to(self, device=None, dtype: torch.dtype | None = None) -> "FrameSample":
        """Moves every tensor; ``dtype`` applies to floating tensors only."""

        def move(x):
            if x is None:
                return None
            return x.to(device=device, dtype=dtype if x.is_floating_point() else None)

        return replace(
            self,
            target=move(self.target),
            sources={r: move(v) for r, v in self.sources.items()},
            intrinsics=move(self.intrinsics),
            target_aug=move(self.target_aug),
            sources_aug={r: move(v) for r, v in self.sources_aug.items()},
            depth_gt=move(self.depth_gt),
            pose_gt={r: move(v) for r, v in self.pose_gt.items()},
            stereo_pose=move(self.stereo_pose),
        )


@dataclass
class SplitIndex:
    """Ordered frame ids of the train, validation and test splits.

    Raises:
        ValueError: If a test id also appears in train or validation.
    """

    train: list[FrameId] = field(default_factory=list)
    val: list[FrameId] = field(default_factory=list)
    test: list[FrameId] = field(default_factory=list)

    def __post_init__(self):
        test = set(self.test)
        if test & (set(self.train) | set(self.val)):
            raise ValueError("Test frames must not appear in the train or validation split.")

    def __len__(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)


def read_split_file(path: str | Path) -> list[FrameId]:
    """Reads newline-delimited frame ids, skipping blank lines.

    Raises:
        FileNotFoundError: If the file does not exist.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Split file not found: {path}")
    return [FrameId.parse(line) for line in path.read_text().splitlines() if line.strip()]


def read_calibration(date_dir: str | Path) -> dict:
    """Parses the rectified projection matrices of one recording day.

    Args:
        date_dir (str | Path): Folder holding ``calib_cam_to_cam.txt``.

    Raises:
        FileNotFoundError: If the calibration file is missing.
        ValueError: If a rectified projection matrix is absent.

    Returns:
        dict: ``K_l`` and ``K_r`` (3x3 arrays), ``baseline`` in metres and ``size`` as (width, height).
    """
    path = Path(date_dir) / CALIB_FILE
    if not path.is_file():
        raise FileNotFoundError(f"Calibration file not found: {path}")
    entries = {}
    for line in path.read_text().splitlines():
        key, _, value = line.partition(":")
        entries[key.strip()] = value.strip()

    projections = {}
    for side, key in CALIB_KEYS.items():
        if key not in entries:
            raise ValueError(f"{path} has no '{key}' entry.")
        projections[side] = np.array(entries[key].split(), dtype=np.float64).reshape(3, 4)

    size = None
    if "S_rect_02" in entries:
        width, height = (int(round(float(v))) for v in entries["S_rect_02"].split())
        size = (width, height)
    # P_rect_03[0, 3] = -fx * baseline relative to camera 02
    baseline = (projections["l"][0, 3] - projections["r"][0, 3]) / projections["r"][0, 0]
    return {
        "K_l": projections["l"][:, :3],
        "K_r": projections["r"][:, :3],
        "baseline": float(baseline),
        "size": size,
    }


def _load_image(path: Path) -> Image.Image:
    with Image.open(path) as image:
        return image.convert("RGB")


def _frame_difference(first: Path, second: Path) -> float:
    def grey(path):
        with Image.open(path) as image:
            return np.asarray(image.convert("L").reduce(4), dtype=np.float64) / 255.0

    return float(np.abs(grey(first) - grey(second)).mean())


def index_sequences(
    root_dir: str | Path,
    split_file: str | Path | None = None,
    *,
    static_threshold: float = STATIC_THRESHOLD,
    val_stride: int = 20,
    sides: tuple[str, ...] = ("l",),
) -> SplitIndex:
    """Enumerates usable targets of a KITTI-raw tree and splits them.

    A target is usable when both temporal neighbours exist. Test ids come from
    ``split_file`` (those present on disk); every sequence containing a test id
    is withheld from train and validation. Remaining targets whose mean absolute
    difference to the previous frame falls below ``static_threshold`` are
    dropped, and every ``val_stride``-th survivor goes to validation.

    Args:
        root_dir (str | Path): KITTI-raw root.
        split_file (str | Path | None): Test ids, one per line.
        static_threshold (float): Static-camera threshold on [0, 1] images.
        val_stride (int): Validation sampling stride.
        sides (tuple[str, ...]): Camera sides enumerated as targets.

    Raises:
        FileNotFoundError: If a recording day lacks its calibration file.

    Returns:
        SplitIndex: The three ordered splits.
    """
    root = Path(root_dir)
    test = []
    if split_file is not None:
        test = [fid for fid in read_split_file(split_file) if fid.image_path(root).is_file()]
    test_sequences = {fid.sequence for fid in test}

    candidates = []
    for date_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        drives = sorted(p for p in date_dir.iterdir() if p.is_dir())
        if not drives:
            continue
        read_calibration(date_dir)
        for drive in drives:
            sequence = f"{date_dir.name}/{drive.name}"
            if sequence in test_sequences:
                continue
            for side in sides:
                folder = drive / SIDE_FOLDERS[side] / "data"
                frames = {int(p.stem) for p in folder.glob("*.png")}
                candidates += [
                    FrameId(sequence, f, side)
                    for f in sorted(frames)
                    if f - 1 in frames and f + 1 in frames
                ]

    usable = []
    for fid in tqdm(candidates, desc="static filter", disable=not candidates):
        previous = fid.shifted(-1).image_path(root)
        if _frame_difference(fid.image_path(root), previous) < static_threshold:
            continue
        usable.append(fid)
    logger.info(
        "Indexed %d candidate targets, %d kept after static filtering.", len(candidates), len(usable)
    )

    val = usable[::val_stride] if val_stride else []
    val_set = set(val)
    train = [fid for fid in usable if fid not in val_set]
    return SplitIndex(train=train, val=val, test=test)


def _to_tensor(image: Image.Image) -> torch.Tensor:
    array = np.asarray(image, dtype=np.float32) / 255.0
    return torch.from_numpy(array).permute(2, 0, 1).contiguous()


def stereo_pose_vector(baseline: float, side: str) -> torch.Tensor:
    """Target-to-stereo transform of the rectified rig as a 6-vector."""
    tx = -baseline if side == "l" else baseline
    return torch.tensor([0.0, 0.0, 0.0, tx, 0.0, 0.0])


def load_sample(
    entry: FrameId,
    root: str | Path,
    resolution: tuple[int, int],
    *,
    roles: tuple[str, ...] = ("prev", "next"),
    num_scales: int = 4,
    is_train: bool = True,
    gt_dir: str | Path | None = None,
    calibration: dict | None = None,
) -> FrameSample:
    """Reads a target frame with its sources and resized intrinsics.

    At evaluation a missing temporal neighbour is replaced by a copy of the
    target. Images are resized with Lanczos filtering and scaled to [0, 1].

    Args:
        entry (FrameId): Target frame.
        root (str | Path): KITTI-raw root.
        resolution (tuple[int, int]): Output (height, width).
        roles (tuple[str, ...]): Source roles to load.
        num_scales (int): Pyramid levels of the intrinsics.
        is_train (bool): Training mode; missing neighbours are an error.
        gt_dir (str | Path | None): Folder of ``<stem>.depth`` ground-truth files.
        calibration (dict | None): Pre-parsed `read_calibration` output of the entry's day.

    Raises:
        FileNotFoundError: If a required image, calibration or ground-truth file is missing.
        OSError: If an image cannot be decoded.

    Returns:
        FrameSample: The unbatched sample.
    """
    root = Path(root)
    height, width = resolution
    calibration = calibration or read_calibration(root / entry.date)

    def read(fid: FrameId) -> tuple[torch.Tensor, tuple[int, int]]:
        path = fid.image_path(root)
        if not path.is_file():
            raise FileNotFoundError(f"Image not found: {path}")
        image = _load_image(path)
        native = image.size
        return _to_tensor(image.resize((width, height), Image.Resampling.LANCZOS)), native

    target, (native_w, native_h) = read(entry)
    sources = {}
    for role in roles:
        if role == "stereo":
            sources[role], _ = read(entry.shifted(side="r" if entry.side == "l" else "l"))
            continue
        neighbour = entry.shifted(-1 if role == "prev" else 1)
        if not is_train and not neighbour.image_path(root).is_file():
            sources[role] = target.clone()
        else:
            sources[role], _ = read(neighbour)

    camera = Intrinsics.from_matrix(calibration[f"K_{entry.side}"], native_w, native_h)
    camera = camera.resized(height, width)

    depth_gt = None
    if gt_dir is not None:
        from cuedepth.synthdata import read_raw_array

        depth_gt = torch.from_numpy(
            read_raw_array(Path(gt_dir) / f"{entry.stem}.depth").astype(np.float32)
        )[None]

    return FrameSample(
        target=target,
        sources=sources,
        intrinsics=camera.pyramid(num_scales),
        frame_id=str(entry),
        depth_gt=depth_gt,
        stereo_pose=stereo_pose_vector(calibration["baseline"], entry.side)
        if "stereo" in roles
        else None,
    )


def _rebuild(sample: FrameSample, camera: Intrinsics, images, images_aug, **changes) -> FrameSample:
    roles = list(sample.sources)
    return replace(
        sample,
        target=images[0],
        sources=dict(zip(roles, images[1:])),
        target_aug=images_aug[0],
        sources_aug=dict(zip(roles, images_aug[1:])),
        intrinsics=camera.pyramid(sample.intrinsics.shape[0], sample.intrinsics.dtype),
        **changes,
    )


def _images(sample: FrameSample) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    roles = list(sample.sources)
    return (
        [sample.target] + [sample.sources[r] for r in roles],
        [sample.target_aug] + [sample.sources_aug[r] for r in roles],
    )


def hflip(sample: FrameSample) -> FrameSample:
    """Mirrors an unbatched sample horizontally.

    The principal point becomes ``width - 1 - cx``, the stereo baseline changes
    sign and ground-truth poses are mirrored (``ry``, ``rz`` and ``tx`` negated).
    """
    camera = sample.camera()
    camera = replace(camera, cx=camera.width - 1 - camera.cx)
    images, images_aug = _images(sample)
    mirror = torch.tensor([1.0, -1.0, -1.0, -1.0, 1.0, 1.0])
    stereo = None if sample.stereo_pose is None else sample.stereo_pose * mirror.to(sample.stereo_pose)
    return _rebuild(
        sample,
        camera,
        [TF.hflip(x) for x in images],
        [TF.hflip(x) for x in images_aug],
        depth_gt=None if sample.depth_gt is None else TF.hflip(sample.depth_gt),
        pose_gt={r: v * mirror.to(v) for r, v in sample.pose_gt.items()},
        stereo_pose=stereo,
    )


def resize_crop(sample: FrameSample, scale: float, offset: tuple[float, float]) -> FrameSample:
    """Upscales an unbatched sample by ``scale`` and crops back to its size.

    Args:
        sample (FrameSample): Sample to transform.
        scale (float): Zoom factor, at least 1.
        offset (tuple[float, float]): Crop origin as fractions in [0, 1] of the free margin (x, y).

    Returns:
        FrameSample: Sample of unchanged resolution with adjusted intrinsics.
    """
    if scale < 1:
        raise ValueError(f"Resize-crop scale must be at least 1, got {scale}.")
    height, width = sample.resolution
    new_h, new_w = int(round(height * scale)), int(round(width * scale))
    ox = int(round(offset[0] * (new_w - width)))
    oy = int(round(offset[1] * (new_h - height)))
    sx, sy = new_w / width, new_h / height

    def apply(x, mode="bilinear"):
        kwargs = {"align_corners": False} if mode == "bilinear" else {}
        resized = F.interpolate(x[None], size=(new_h, new_w), mode=mode, **kwargs)[0]
        return resized[..., oy : oy + height, ox : ox + width].clamp(min=0)

    camera = sample.camera()
    camera = Intrinsics(
        camera.fx * sx,
        camera.fy * sy,
        (camera.cx + 0.5) * sx - 0.5 - ox,
        (camera.cy + 0.5) * sy - 0.5 - oy,
        width,
        height,
    )
    images, images_aug = _images(sample)
    return _rebuild(
        sample,
        camera,
        [apply(x).clamp(max=1) for x in images],
        [apply(x).clamp(max=1) for x in images_aug],
        depth_gt=None if sample.depth_gt is None else apply(sample.depth_gt, "nearest"),
    )


def color_jitter(
    sample: FrameSample, brightness: float, contrast: float, saturation: float, hue: float
) -> FrameSample:
    """Applies one set of jitter factors to the network copies of every frame."""

    def jitter(x):
        x = TF.adjust_brightness(x, brightness)
        x = TF.adjust_contrast(x, contrast)
        x = TF.adjust_saturation(x, saturation)
        return TF.adjust_hue(x, hue)

    images, images_aug = _images(sample)
    return _rebuild(sample, sample.camera(), images, [jitter(x) for x in images_aug])


def augment(
    sample: FrameSample,
    seed: int,
    *,
    flip_prob: float = 0.5,
    resize_prob: float = 0.5,
    max_scale: float = 1.15,
    jitter_prob: float = 0.5,
    jitter: tuple[float, float, float, float] = (0.2, 0.2, 0.2, 0.1),
) -> FrameSample:
    """Random flip, resize-crop and colour jitter, reproducible from ``seed``.

    Geometric changes apply to the raw and network copies alike; colour jitter
    only touches the network copies, so the loss compares raw appearance.

    Args:
        sample (FrameSample): Unbatched training sample.
        seed (int): Seed of every random draw.
        flip_prob (float): Probability of a horizontal flip.
        resize_prob (float): Probability of a resize-crop.
        max_scale (float): Largest zoom factor of the resize-crop.
        jitter_prob (float): Probability of colour jitter.
        jitter (tuple[float, float, float, float]): Brightness, contrast, saturation and hue ranges.

    Returns:
        FrameSample: The augmented sample.
    """
    generator = torch.Generator().manual_seed(int(seed))

    def uniform(low=0.0, high=1.0):
        return low + (high - low) * float(torch.rand((), generator=generator))

    do_flip = uniform() < flip_prob
    do_resize = uniform() < resize_prob
    scale, offset = uniform(1.0, max_scale), (uniform(), uniform())
    do_jitter = uniform() < jitter_prob
    b, c, s, h = jitter
    factors = (uniform(1 - b, 1 + b), uniform(1 - c, 1 + c), uniform(1 - s, 1 + s), uniform(-h, h))

    if do_flip:
        sample = hflip(sample)
    if do_resize:
        sample = resize_crop(sample, scale, offset)
    if do_jitter:
        sample = color_jitter(sample, *factors)
    return sample


def sample_seed(seed: int, index: int, epoch: int) -> int:
    """Augmentation seed of one sample, independent of worker scheduling."""
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


class KittiRawDataset(Dataset):
    """Map-style dataset over a list of KITTI frame ids.

    Args:
        root (str | Path): KITTI-raw root.
        entries (Sequence[FrameId]): Target frames, typically one split of a `SplitIndex`.
        resolution (tuple[int, int]): Network (height, width).
        roles (tuple[str, ...]): Source roles.
        num_scales (int): Intrinsics pyramid levels.
        is_train (bool): Training mode (augmentation, skipping of unreadable frames).
        augment (bool): Whether to augment in training mode.
        seed (int): Global seed of the augmentation.
        gt_dir (str | Path | None): Ground-truth depth folder for evaluation.
    """

    def __init__(
        self,
        root: str | Path,
        entries: Sequence[FrameId],
        resolution: tuple[int, int],
        *,
        roles: tuple[str, ...] = ("prev", "next"),
        num_scales: int = 4,
        is_train: bool = True,
        augment: bool = True,
        seed: int = 0,
        gt_dir: str | Path | None = None,
    ):
        self.root = Path(root)
        self.entries = list(entries)
        self.resolution = tuple(resolution)
        self.roles = roles
        self.num_scales = num_scales
        self.is_train = is_train
        self.augment = augment
        self.seed = seed
        self.gt_dir = gt_dir
        self.epoch = 0
        self._calibration: dict[str, dict] = {}

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.entries)

    def _calibration_for(self, entry: FrameId) -> dict:
        if entry.date not in self._calibration:
            self._calibration[entry.date] = read_calibration(self.root / entry.date)
        return self._calibration[entry.date]

    def __getitem__(self, index: int) -> FrameSample:
        for attempt in range(len(self.entries)):
            entry = self.entries[(index + attempt) % len(self.entries)]
            try:
                sample = load_sample(
                    entry,
                    self.root,
                    self.resolution,
                    roles=self.roles,
                    num_scales=self.num_scales,
                    is_train=self.is_train,
                    gt_dir=self.gt_dir,
                    calibration=self._calibration_for(entry),
                )
            except OSError as err:
                if not self.is_train:
                    raise
                logger.warning("Skipping unreadable frame %s: %s", entry, err)
                continue
            if self.is_train and self.augment:
                sample = augment(sample, sample_seed(self.seed, index, self.epoch))
            return sample
        raise RuntimeError("No readable frame left in the dataset.")
