import numpy as np
import pytest
import torch
from PIL import Image

from cuedepth.camgeom import Intrinsics
from cuedepth.config import LossConfig, NetConfig, TrainConfig
from cuedepth.kittidata import FrameSample

KITTI_DATE = "2011_09_26"
KITTI_DRIVE = "2011_09_26_drive_0001_sync"
KITTI_SIZE = (128, 40)  # (width, height) of the fake recordings
KITTI_FOCAL = 100.0
KITTI_BASELINE = 0.54


@pytest.fixture
def toy_camera() -> Intrinsics:
    return Intrinsics(57.6, 57.6, 31.5, 31.5, 64, 64)


@pytest.fixture
def make_sample(toy_camera):
    """Factory of random batched samples at the toy resolution."""

    def build(batch=1, roles=("prev", "next"), seed=0, dtype=torch.float32) -> FrameSample:
        generator = torch.Generator().manual_seed(seed)

        def image():
            return torch.rand(batch, 3, 64, 64, generator=generator, dtype=dtype)

        return FrameSample(
            target=image(),
            sources={role: image() for role in roles},
            intrinsics=toy_camera.pyramid(4, dtype)[None].expand(batch, -1, -1, -1),
        )

    return build


def write_calibration(date_dir, focal=KITTI_FOCAL, baseline=KITTI_BASELINE, size=KITTI_SIZE):
    width, height = size
    cx, cy = width / 2 - 0.5, height / 2 - 0.5
    p2 = [focal, 0, cx, 0, 0, focal, cy, 0, 0, 0, 1, 0]
    p3 = [focal, 0, cx, -focal * baseline, 0, focal, cy, 0, 0, 0, 1, 0]
    lines = [
        "calib_time: 09-Jan-2012 13:57:47",
        f"S_rect_02: {width:.6e} {height:.6e}",
        "P_rect_02: " + " ".join(f"{v:.6e}" for v in p2),
        "P_rect_03: " + " ".join(f"{v:.6e}" for v in p3),
    ]
    date_dir.mkdir(parents=True, exist_ok=True)
    (date_dir / "calib_cam_to_cam.txt").write_text("\n".join(lines) + "\n")


@pytest.fixture
def kitti_root(tmp_path):
    """Factory of small KITTI-raw trees with random frames.

    ``repeat`` lists frames that are written as exact copies of their predecessor.
    """

    def build(num_frames=5, repeat=(), sides=("l", "r"), calibration=True, seed=0):
        root = tmp_path / "kitti"
        date_dir = root / KITTI_DATE
        drive = date_dir / KITTI_DRIVE
        rng = np.random.default_rng(seed)
        width, height = KITTI_SIZE
        for side in sides:
            folder = drive / ("image_02" if side == "l" else "image_03") / "data"
            folder.mkdir(parents=True, exist_ok=True)
            previous = None
            for frame in range(num_frames):
                pixels = rng.integers(0, 256, (height, width, 3), dtype=np.uint8)
                if frame in repeat and previous is not None:
                    pixels = previous
                Image.fromarray(pixels).save(folder / f"{frame:010d}.png")
                previous = pixels
        if calibration:
            write_calibration(date_dir)
        else:
            date_dir.mkdir(parents=True, exist_ok=True)
        return root

    return build


@pytest.fixture
def short_synth_cfg(tmp_path):
    """Factory of short synthetic training runs on the toy network."""

    def build(name="run", **overrides) -> TrainConfig:
        values = dict(
            lr=2e-4,
            lr_drop_epoch=1,
            epochs=2,
            batch_size=1,
            weight_decay=0.0,
            dataset="synth",
            synth_scenes=2,
            steps_per_epoch=2,
            augment=False,
            log_dir=str(tmp_path / name),
            loss=LossConfig(),
            net=NetConfig.toy(),
        )
        values.update(overrides)
        return TrainConfig(**values)

    return build
