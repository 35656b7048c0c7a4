"""Synthetic scenes with exact ground truth.

Scenes are stacks of textured fronto-parallel planes seen by a pinhole camera,
optionally with one rectangular object that moves between the two frames.
Both frames are ray-cast in float64, so depth, pose and the motion mask are
exact. Two texture families exist:

* ``"ramp"``: colour affine in the plane coordinates. A warp with the true depth
  and a pure translation reproduces it to floating-point accuracy, because
  bilinear interpolation is exact on affine signals.
* ``"noise"``: band-limited sinusoids plus smoothed noise. Rich enough to learn
  from; bilinear resampling reproduces it only approximately.

The module also owns the on-disk format of rendered sets and the raw array
header used for depth maps.
"""

import logging
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter, map_coordinates
from scipy.spatial.transform import Rotation
from torch.utils.data import Dataset

from cuedepth.camgeom import DepthMap, Intrinsics, PoseSE3
from cuedepth.kittidata import FrameSample

logger = logging.getLogger(__name__)

RAW_MAGIC = b"CUED"
_RAW_HEADER = struct.Struct("<4sBII")
_RAW_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_RAW_CODES = {dtype: code for code, dtype in _RAW_DTYPES.items()}

_RAMP_BASE = (0.35, 0.5, 0.65)
_NOISE_GRID = 32


@dataclass(frozen=True)
class Plane:
    """Fronto-parallel textured rectangle.

    Attributes:
        depth (float): Distance along the target camera's optical axis.
        extent (tuple[float, float, float, float] | None): ``(x0, x1, y0, y1)`` in scene
            units on the plane; an unbounded plane when None.
        texture (str): ``"noise"`` or ``"ramp"``.
        ramp (tuple[float, float]): Colour gradient along x and y of a ramp texture.
    """

    depth: float
    extent: tuple[float, float, float, float] | None = None
    texture: str = "noise"
    ramp: tuple[float, float] = (0.05, 0.03)

    def __post_init__(self):
        if self.depth <= 0:
            raise ValueError(f"Plane depth must be positive, got {self.depth}.")
        if self.texture not in ("noise", "ramp"):
            raise ValueError(f"Unknown texture '{self.texture}'.")
        if self.extent is not None:
            x0, x1, y0, y1 = self.extent
            if not (x0 < x1 and y0 < y1):
                raise ValueError(f"Degenerate plane extent {self.extent}.")

    def overlaps(self, other: "Plane", shift: Sequence[float] = (0.0, 0.0)) -> bool:
        if self.extent is None or other.extent is None:
            return True
        ax0, ax1, ay0, ay1 = self.extent
        bx0, bx1, by0, by1 = other.extent
        bx0, bx1, by0, by1 = bx0 + shift[0], bx1 + shift[0], by0 + shift[1], by1 + shift[1]
        return ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1


@dataclass(frozen=True)
class MovingObject:
    """Plane that is displaced by ``motion`` (target-camera axes) at source time."""

    plane: Plane
    motion: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class SceneSpec:
    """Declarative description of one target/source pair.

    Attributes:
        planes (tuple[Plane, ...]): Static surfaces.
        camera_motion (tuple[float, ...]): Target-to-source pose as (rx, ry, rz, tx, ty, tz).
        moving_object (MovingObject | None): Optional independently moving surface.
        resolution (tuple[int, int]): Image (height, width).
        focal (float | None): Focal length in pixels, ``0.9 * width`` when None.
        texture_seed (int): Seed of the noise textures.

    Raises:
        ValueError: If surfaces cross or the scene is otherwise not renderable.
    """

    planes: tuple[Plane, ...]
    camera_motion: tuple[float, ...] = (0.0,) * 6
    moving_object: MovingObject | None = None
    resolution: tuple[int, int] = (64, 64)
    focal: float | None = None
    texture_seed: int = 0

    def __post_init__(self):
        self.planes = tuple(Plane(**p) if isinstance(p, dict) else p for p in self.planes)
        if isinstance(self.moving_object, dict):
            obj = dict(self.moving_object)
            self.moving_object = MovingObject(Plane(**obj["plane"]), tuple(obj["motion"]))
        self.camera_motion = tuple(float(v) for v in self.camera_motion)
        self.resolution = tuple(int(v) for v in self.resolution)

        if not self.planes:
            raise ValueError("A scene needs at least one plane.")
        if len(self.camera_motion) != 6:
            raise ValueError("camera_motion needs 6 entries (rotation, translation).")
        if min(self.resolution) < 2:
            raise ValueError("Resolution must be at least 2x2.")
        for i, a in enumerate(self.planes):
            for b in self.planes[i + 1 :]:
                if a.depth == b.depth and a.overlaps(b):
                    raise ValueError(f"Planes at depth {a.depth} cross each other.")
        if self.moving_object is not None:
            obj = self.moving_object
            dx, dy, dz = obj.motion
            if obj.plane.depth + dz <= 0:
                raise ValueError("The moving object passes behind the camera.")
            for plane in self.planes:
                if (plane.depth == obj.plane.depth and plane.overlaps(obj.plane)) or (
                    plane.depth == obj.plane.depth + dz and plane.overlaps(obj.plane, (dx, dy))
                ):
                    raise ValueError("The moving object crosses a static plane.")

    @property
    def intrinsics(self) -> Intrinsics:
        height, width = self.resolution
        focal = self.focal or 0.9 * width
        return Intrinsics(focal, focal, (width - 1) / 2, (height - 1) / 2, width, height)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> Self:
        return cls(**values)


@dataclass
class RenderedPair:
    """Target/source images with exact ground truth.

    Images are float64 arrays of shape (3, H, W) in [0, 1].

    Attributes:
        target (np.ndarray): Target image.
        source (np.ndarray): Source image.
        depth (DepthMap): Target depth.
        pose (PoseSE3): Target-to-source transform (float64 tensors).
        intrinsics (Intrinsics): Shared camera intrinsics.
        motion_mask (np.ndarray): Pixels covered by the moving object in either frame.
        covisible (np.ndarray): Target pixels whose reprojection samples the same static surface.
    """

    target: np.ndarray
    source: np.ndarray
    depth: DepthMap
    pose: PoseSE3
    intrinsics: Intrinsics
    motion_mask: np.ndarray
    covisible: np.ndarray

    def to_sample(self, num_scales: int = 4, dtype: torch.dtype = torch.float32) -> FrameSample:
        """Unbatched training sample with the source in the ``prev`` role."""
        return FrameSample(
            target=torch.from_numpy(self.target).to(dtype),
            sources={"prev": torch.from_numpy(self.source).to(dtype)},
            intrinsics=self.intrinsics.pyramid(num_scales, dtype),
            depth_gt=torch.as_tensor(self.depth.values, dtype=dtype)[None],
            pose_gt={"prev": self.pose.as_vector().to(dtype)},
        )


@dataclass
class _Surface:
    depth: float
    extent: tuple[float, float, float, float] | None
    offset: tuple[float, float]
    index: int
    plane: Plane


class _Textures:
    """Deterministic per-plane colour functions of the plane coordinates."""

    def __init__(self, scene: SceneSpec):
        self.scene = scene
        self.focal = scene.intrinsics.fx
        self._noise: dict[int, tuple] = {}

    def _noise_params(self, index: int, plane: Plane):
        if index not in self._noise:
            rng = np.random.default_rng([self.scene.texture_seed, index])
            # wavelengths of 14-32 px at the plane's own depth
            pixel = plane.depth / self.focal
            angles = rng.uniform(0, np.pi, (3, 4))
            wavelengths = rng.uniform(14, 32, (3, 4)) * pixel
            phases = rng.uniform(0, 2 * np.pi, (3, 4))
            grid = gaussian_filter(rng.standard_normal((3, _NOISE_GRID, _NOISE_GRID)), (0, 3, 3))
            grid /= grid.std(axis=(1, 2), keepdims=True)
            side = 2 * plane.depth * max(self.scene.resolution) / self.focal
            self._noise[index] = (angles, wavelengths, phases, grid, side)
        return self._noise[index]

    def colour(self, surface: _Surface, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        u = x - surface.offset[0]
        v = y - surface.offset[1]
        plane = surface.plane
        if plane.texture == "ramp":
            gx, gy = plane.ramp
            return np.stack([base + gx * u + gy * v for base in _RAMP_BASE])

        angles, wavelengths, phases, grid, side = self._noise_params(surface.index, plane)
        out = []
        for c in range(3):
            value = np.full_like(u, 0.5)
            for k in range(4):
                direction = np.cos(angles[c, k]) * u + np.sin(angles[c, k]) * v
                value += 0.06 * np.sin(2 * np.pi * direction / wavelengths[c, k] + phases[c, k])
            coords = [
                (v / side + 0.5) * (_NOISE_GRID - 1),
                (u / side + 0.5) * (_NOISE_GRID - 1),
            ]
            value += 0.05 * map_coordinates(grid[c], coords, order=3, mode="mirror")
            out.append(value)
        return np.clip(np.stack(out), 0.0, 1.0)


def _surfaces(scene: SceneSpec, at_source: bool) -> list[_Surface]:
    surfaces = [_Surface(p.depth, p.extent, (0.0, 0.0), i, p) for i, p in enumerate(scene.planes)]
    obj = scene.moving_object
    if obj is not None:
        dx, dy, dz = obj.motion if at_source else (0.0, 0.0, 0.0)
        extent = obj.plane.extent
        if extent is not None:
            extent = (extent[0] + dx, extent[1] + dx, extent[2] + dy, extent[3] + dy)
        surfaces.append(_Surface(obj.plane.depth + dz, extent, (dx, dy), len(scene.planes), obj.plane))
    return surfaces


def _cast(
    scene: SceneSpec,
    rotation: np.ndarray,
    translation: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    at_source: bool,
):
    """Intersects camera rays through pixel coordinates (x, y) with the scene.

    The camera maps target-frame points P to ``R P + t``. Returns per-ray camera
    depth, index of the surface hit (-1 for none) and scene coordinates of the hit.
    """
    K = scene.intrinsics
    rays = np.stack([(x - K.cx) / K.fx, (y - K.cy) / K.fy, np.ones_like(x)])
    flat = rays.reshape(3, -1)
    origin = -rotation.T @ translation
    directions = rotation.T @ flat

    depth = np.full(flat.shape[1], np.inf)
    hit = np.full(flat.shape[1], -1)
    hit_x = np.zeros(flat.shape[1])
    hit_y = np.zeros(flat.shape[1])
    for surface in _surfaces(scene, at_source):
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (surface.depth - origin[2]) / directions[2]
        px = origin[0] + lam * directions[0]
        py = origin[1] + lam * directions[1]
        inside = np.isfinite(lam) & (lam > 0)
        if surface.extent is not None:
            x0, x1, y0, y1 = surface.extent
            inside &= (px >= x0) & (px < x1) & (py >= y0) & (py < y1)
        closer = inside & (lam < depth)
        depth = np.where(closer, lam, depth)
        hit = np.where(closer, surface.index, hit)
        hit_x = np.where(closer, px, hit_x)
        hit_y = np.where(closer, py, hit_y)
    shape = x.shape
    return depth.reshape(shape), hit.reshape(shape), hit_x.reshape(shape), hit_y.reshape(shape)


def _shade(scene, textures, hit, hit_x, hit_y, at_source) -> np.ndarray:
    image = np.zeros((3,) + hit.shape)
    for surface in _surfaces(scene, at_source):
        mask = hit == surface.index
        if mask.any():
            image[:, mask] = textures.colour(surface, hit_x[mask], hit_y[mask])
    return image


def _pose_arrays(motion: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    rotation = Rotation.from_rotvec(np.asarray(motion[:3], dtype=np.float64)).as_matrix()
    return rotation, np.asarray(motion[3:], dtype=np.float64)


def render_pair(scene: SceneSpec) -> RenderedPair:
    """Ray-casts the target and source frames of a scene.

    Both frames go through the same routine, the target with the identity pose,
    so a static camera yields bit-identical images outside the moving object.

    Args:
        scene (SceneSpec): Scene to render.

    Raises:
        ValueError: If a target pixel sees no surface.

    Returns:
        RenderedPair: Images and exact ground truth.
    """
    height, width = scene.resolution
    K = scene.intrinsics
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    textures = _Textures(scene)
    identity = (np.eye(3), np.zeros(3))
    rotation, translation = _pose_arrays(scene.camera_motion)

    depth, hit_t, tx, ty = _cast(scene, *identity, xs, ys, at_source=False)
    if (hit_t < 0).any():
        raise ValueError("Some target pixels see no surface; add a background plane.")
    _, hit_s, sx, sy = _cast(scene, rotation, translation, xs, ys, at_source=True)
    target = _shade(scene, textures, hit_t, tx, ty, at_source=False)
    source = _shade(scene, textures, hit_s, sx, sy, at_source=True)

    object_index = len(scene.planes)
    motion_mask = (hit_t == object_index) | (hit_s == object_index)
    if scene.moving_object is None:
        motion_mask[:] = False

    covisible = _covisible(scene, depth, hit_t, rotation, translation, hit_s)
    pose = PoseSE3(
        torch.tensor(scene.camera_motion[:3], dtype=torch.float64),
        torch.tensor(scene.camera_motion[3:], dtype=torch.float64),
    )
    return RenderedPair(target, source, DepthMap(depth), pose, K, motion_mask, covisible)


def _covisible(scene, depth, hit_t, rotation, translation, hit_s) -> np.ndarray:
    height, width = depth.shape
    K = scene.intrinsics
    x, y, valid = brute_force_reproject_grid(depth, K, rotation, translation)
    valid &= (x >= 0) & (x <= width - 1) & (y >= 0) & (y <= height - 1)
    static = hit_t != len(scene.planes)
    valid &= static

    # every source pixel of the bilinear footprint must show the same surface
    xs = np.clip(np.nan_to_num(x), 0, width - 1)
    ys = np.clip(np.nan_to_num(y), 0, height - 1)
    for fx in (np.floor, np.ceil):
        for fy in (np.floor, np.ceil):
            cols = fx(xs).astype(int)
            rows = fy(ys).astype(int)
            valid &= hit_s[rows, cols] == hit_t
    return valid


def brute_force_reproject_grid(depth, intrinsics: Intrinsics, rotation, translation):
    """Vectorized homogeneous-matrix reprojection of a whole depth map, in numpy."""
    K = np.array(
        [[intrinsics.fx, 0, intrinsics.cx], [0, intrinsics.fy, intrinsics.cy], [0, 0, 1]],
        dtype=np.float64,
    )
    height, width = depth.shape
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    pixels = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])
    points = np.linalg.inv(K) @ pixels * depth.ravel()
    moved = rotation @ points + np.asarray(translation)[:, None]
    projected = K @ moved
    valid = projected[2] > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(valid, projected[0] / projected[2], np.nan)
        y = np.where(valid, projected[1] / projected[2], np.nan)
    return x.reshape(height, width), y.reshape(height, width), valid.reshape(height, width)


def brute_force_reproject(
    pixel: tuple[float, float], depth: float, intrinsics: Intrinsics, pose: Sequence[float]
) -> tuple[float, float, bool]:
    """Scalar reprojection of one pixel with explicit 4x4 matrices.

    Args:
        pixel (tuple[float, float]): Target pixel as (x, y).
        depth (float): Target depth at that pixel.
        intrinsics (Intrinsics): Camera intrinsics.
        pose (Sequence[float]): Target-to-source transform (rx, ry, rz, tx, ty, tz).

    Returns:
        tuple[float, float, bool]: Source coordinates and whether the point is in front
        of the source camera; coordinates are NaN otherwise.
    """
    K = np.eye(4)
    K[:3, :3] = [[intrinsics.fx, 0, intrinsics.cx], [0, intrinsics.fy, intrinsics.cy], [0, 0, 1]]
    T = np.eye(4)
    T[:3, :3], T[:3, 3] = _pose_arrays(pose)
    p = np.array([pixel[0], pixel[1], 1.0, 1.0])
    camera = np.linalg.inv(K) @ p
    camera[:3] *= depth
    camera[3] = 1.0
    projected = K @ T @ camera
    if projected[2] <= 0:
        return float("nan"), float("nan"), False
    return float(projected[0] / projected[2]), float(projected[1] / projected[2]), True


class Scenario(str, Enum):
    """Unit-stream situations of a target/source pair."""

    STATIC_SCENE = "static_scene"
    MOVING_OBJECT = "moving_object"
    MOVING_CAMERA = "moving_camera"
    STATIC_CAMERA_MOVING_OBJECT = "static_camera_moving_object"
    MOVING_CAMERA_MOVING_OBJECT = "moving_camera_moving_object"


def scenario_spec(
    scenario: Scenario | str,
    seed: int = 0,
    resolution: tuple[int, int] = (64, 64),
    texture: str = "noise",
) -> SceneSpec:
    """Builds one of the five unit-stream scenarios.

    ``moving_object`` moves the object together with the camera, so it looks
    static in image space.

    Args:
        scenario (Scenario | str): Situation to build.
        seed (int): Texture seed.
        resolution (tuple[int, int]): Image (height, width).
        texture (str): Texture family of every surface.

    Returns:
        SceneSpec: The scene.
    """
    scenario = Scenario(scenario)
    height, width = resolution
    focal = 0.9 * width
    background = Plane(12.0, texture=texture)
    # object spanning roughly the central third of the view at depth 4
    half_x = 4.0 * width / (6 * focal)
    half_y = 4.0 * height / (6 * focal)
    obj = Plane(4.0, (-half_x, half_x, -half_y, half_y), texture=texture)

    camera = (0.0, 0.0, 0.0, 0.0, 0.0, -0.3)
    static = (0.0,) * 6
    object_motion = (0.25, 0.0, 0.0)
    match scenario:
        case Scenario.STATIC_SCENE:
            return SceneSpec((background,), static, None, resolution, focal, seed)
        case Scenario.MOVING_OBJECT:
            co_moving = tuple(-v for v in camera[3:])
            return SceneSpec((background,), camera, MovingObject(obj, co_moving), resolution, focal, seed)
        case Scenario.MOVING_CAMERA:
            return SceneSpec((background, obj), camera, None, resolution, focal, seed)
        case Scenario.STATIC_CAMERA_MOVING_OBJECT:
            return SceneSpec((background,), static, MovingObject(obj, object_motion), resolution, focal, seed)
        case Scenario.MOVING_CAMERA_MOVING_OBJECT:
            return SceneSpec((background,), camera, MovingObject(obj, object_motion), resolution, focal, seed)


def random_scene(seed: int, resolution: tuple[int, int] = (64, 64)) -> SceneSpec:
    """Random static scene with a forward-moving camera.

    A background plane at depth 8-12 carries one to three foreground rectangles
    at depths 2-6; the camera advances 0.2-0.4 with small lateral drift and rotation.
    """
    rng = np.random.default_rng(seed)
    height, width = resolution
    focal = 0.9 * width
    planes = [Plane(float(rng.uniform(8, 12)))]
    depths = rng.choice(np.arange(2.0, 6.01, 0.4), size=int(rng.integers(1, 4)), replace=False)
    for depth in depths:
        half_w = depth * width / (2 * focal)
        half_h = depth * height / (2 * focal)
        cx, cy = rng.uniform(-0.6, 0.6) * half_w, rng.uniform(-0.6, 0.6) * half_h
        sx, sy = rng.uniform(0.2, 0.5) * half_w, rng.uniform(0.2, 0.5) * half_h
        planes.append(Plane(float(depth), (cx - sx, cx + sx, cy - sy, cy + sy)))
    motion = (
        *rng.uniform(-0.01, 0.01, 3),
        *rng.uniform(-0.05, 0.05, 2),
        -rng.uniform(0.2, 0.4),
    )
    return SceneSpec(tuple(planes), tuple(float(v) for v in motion), None, resolution, focal, seed)


def write_raw_array(path: str | Path, array: np.ndarray) -> Path:
    """Writes a 2-D array behind a ``CUED`` header (magic, dtype code, H, W).

    Raises:
        ValueError: If the array is not 2-D or has an unsupported dtype.
    """
    array = np.asarray(array)
    if array.ndim != 2:
        raise ValueError(f"Raw arrays must be 2-D, got shape {array.shape}.")
    dtype = array.dtype.newbyteorder("<") if array.dtype.itemsize > 1 else array.dtype
    if dtype not in _RAW_CODES:
        raise ValueError(f"Unsupported raw array dtype {array.dtype}.")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(_RAW_HEADER.pack(RAW_MAGIC, _RAW_CODES[dtype], *array.shape))
        handle.write(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return path


def read_raw_array(path: str | Path) -> np.ndarray:
    """Reads an array written by `write_raw_array`.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: If the header is invalid or the payload truncated.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Raw array not found: {path}")
    data = path.read_bytes()
    if len(data) < _RAW_HEADER.size:
        raise ValueError(f"{path} is too short for a raw array header.")
    magic, code, height, width = _RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC or code not in _RAW_DTYPES:
        raise ValueError(f"{path} is not a raw array file.")
    dtype = _RAW_DTYPES[code]
    payload = data[_RAW_HEADER.size :]
    if len(payload) != height * width * dtype.itemsize:
        raise ValueError(f"{path} payload does not match its {height}x{width} header.")
    return np.frombuffer(payload, dtype=dtype).reshape(height, width).copy()


def _save_png(path: Path, image: np.ndarray) -> None:
    array = np.clip(np.round(image * 255), 0, 255).astype(np.uint8)
    Image.fromarray(np.moveaxis(array, 0, -1) if array.ndim == 3 else array).save(path)


def _load_png(path: Path) -> np.ndarray:
    with Image.open(path) as image:
        return np.moveaxis(np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0, -1, 0)


def write_rendered_set(pairs: Sequence[RenderedPair], out_dir: str | Path, ids: Sequence[str] | None = None) -> Path:
    """Stores rendered pairs as PNG images, raw depth files and a manifest.

    Layout: ``images/<id>_target.png``, ``images/<id>_source.png``,
    ``depth/<id>.depth``, ``masks/<id>_motion.png`` and ``manifest.txt`` with one
    line ``id fx fy cx cy width height tx ty tz qx qy qz qw`` per pair.

    Returns:
        Path: The output directory.
    """
    out = Path(out_dir)
    ids = list(ids) if ids is not None else [f"{i:05d}" for i in range(len(pairs))]
    if len(ids) != len(pairs):
        raise ValueError("One id per rendered pair is required.")
    for folder in ("images", "depth", "masks"):
        (out / folder).mkdir(parents=True, exist_ok=True)

    lines = ["# id fx fy cx cy width height tx ty tz qx qy qz qw"]
    for name, pair in zip(ids, pairs):
        _save_png(out / "images" / f"{name}_target.png", pair.target)
        _save_png(out / "images" / f"{name}_source.png", pair.source)
        write_raw_array(out / "depth" / f"{name}.depth", np.asarray(pair.depth.values, dtype=np.float32))
        _save_png(out / "masks" / f"{name}_motion.png", pair.motion_mask.astype(np.float64))
        K = pair.intrinsics
        quat = Rotation.from_rotvec(pair.pose.rotation.double().numpy()).as_quat()
        numbers = [K.fx, K.fy, K.cx, K.cy, K.width, K.height, *pair.pose.translation.tolist(), *quat]
        lines.append(" ".join([name] + [repr(float(v)) for v in numbers]))
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    logger.info("Wrote %d rendered pairs to %s", len(pairs), out)
    return out


def read_manifest(out_dir: str | Path) -> dict[str, tuple[Intrinsics, PoseSE3]]:
    """Parses ``manifest.txt`` of a rendered set.

    Raises:
        FileNotFoundError: If the manifest is missing.
    """
    path = Path(out_dir) / "manifest.txt"
    if not path.is_file():
        raise FileNotFoundError(f"Rendered-set manifest not found: {path}")
    records = {}
    for line in path.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        name, *values = line.split()
        fx, fy, cx, cy, width, height, tx, ty, tz, *quat = (float(v) for v in values)
        rotvec = Rotation.from_quat(quat).as_rotvec()
        pose = PoseSE3(torch.tensor(rotvec), torch.tensor([tx, ty, tz], dtype=torch.float64))
        records[name] = (Intrinsics(fx, fy, cx, cy, int(width), int(height)), pose)
    return records


class SynthDataset(Dataset):
    """Randomized static scenes rendered on first access.

    Args:
        num_scenes (int): Number of scenes; scene ``i`` uses seed ``seed + i``.
        resolution (tuple[int, int]): Image (height, width).
        seed (int): Base seed.
        num_scales (int): Intrinsics pyramid levels.
    """

    def __init__(self, num_scenes: int, resolution: tuple[int, int], seed: int = 0, num_scales: int = 4):
        self.num_scenes = num_scenes
        self.resolution = tuple(resolution)
        self.seed = seed
        self.num_scales = num_scales
        self._pairs: dict[int, RenderedPair] = {}

    def __len__(self) -> int:
        return self.num_scenes

    def pair(self, index: int) -> RenderedPair:
        if index not in self._pairs:
            self._pairs[index] = render_pair(random_scene(self.seed + index, self.resolution))
        return self._pairs[index]

    def __getitem__(self, index: int) -> FrameSample:
        sample = self.pair(index).to_sample(self.num_scales)
        sample.frame_id = f"synth_{self.seed + index:05d}"
        return sample


class SynthDirDataset(Dataset):
    """Rendered set read back from disk (quantized 8-bit images).

    Args:
        root (str | Path): Directory written by `write_rendered_set`.
        ids (Sequence[str] | None): Subset of pair ids, all when None.
        num_scales (int): Intrinsics pyramid levels.
        with_depth (bool): Attach the ground-truth depth.
    """

    def __init__(self, root: str | Path, ids: Sequence[str] | None = None, num_scales: int = 4, with_depth: bool = True):
        self.root = Path(root)
        self.records = read_manifest(self.root)
        self.ids = list(ids) if ids is not None else sorted(self.records)
        missing = [i for i in self.ids if i not in self.records]
        if missing:
            raise ValueError(f"Unknown rendered pair id(s): {', '.join(missing)}.")
        self.num_scales = num_scales
        self.with_depth = with_depth

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, index: int) -> FrameSample:
        name = self.ids[index]
        K, pose = self.records[name]
        target = torch.from_numpy(_load_png(self.root / "images" / f"{name}_target.png")).float()
        source = torch.from_numpy(_load_png(self.root / "images" / f"{name}_source.png")).float()
        depth = None
        if self.with_depth:
            depth = torch.from_numpy(read_raw_array(self.root / "depth" / f"{name}.depth").astype(np.float32))[None]
        return FrameSample(
            target=target,
            sources={"prev": source},
            intrinsics=K.pyramid(self.num_scales),
            frame_id=name,
            depth_gt=depth,
            pose_gt={"prev": pose.as_vector().float()},
        )
