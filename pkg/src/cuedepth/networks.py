"""Joint depth and ego-motion network.

Two ResNet-18-style encoders feed the system. The depth encoder sees the target
frame alone; the unit-stream encoder sees a channel-stacked pair of consecutive
frames and serves both the pose decoder and the implicit depth cues extractor
(IDCE). The IDCE output is added to the deepest depth feature before the
depth decoder predicts sigmoid disparities at four scales. The pose decoder
applies high-dimensional attention to its features before regressing a 6-DoF
pose.

Example:
    >>> model = JointDepthNet(NetConfig.toy())
    >>> output = model(sample)
    >>> [d.shape[-1] for d in output.disparities]
    [64, 32, 16, 8]
"""

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import torch
import torch.nn.functional as F
from torch import nn

from cuedepth.camgeom import PoseSE3
from cuedepth.config import NetConfig
from cuedepth.ham import HighDimensionalAttention

if TYPE_CHECKING:
    from cuedepth.kittidata import FrameSample

logger = logging.getLogger(__name__)

FeaturePyramid = list[torch.Tensor]

CHECKPOINT_FORMAT = 1


def disparity_to_depth(disp, min_depth: float = 0.1, max_depth: float = 100.0):
    """Maps sigmoid disparity to depth, ``1 / (a * disp + b)``.

    With ``b = 1 / max_depth`` and ``a = 1 / min_depth - 1 / max_depth``, disparity
    1 gives ``min_depth`` and disparity 0 gives ``max_depth``.

    The accepted range is the closed interval [0, 1]: a float32 sigmoid rounds to
    exactly 1 for logits above about 17 and underflows to 0 for very negative
    ones, and both ends map to finite depths.

    Args:
        disp: Tensor or array with values in [0, 1].
        min_depth (float): Depth at disparity 1.
        max_depth (float): Depth at disparity 0.

    Raises:
        ValueError: If a value lies outside [0, 1] or is NaN, or the range is invalid.

    Returns:
        Depth with the type and shape of ``disp``.
    """
    if not 0 < min_depth < max_depth:
        raise ValueError("Depth range must satisfy 0 < min_depth < max_depth.")
    bad = (disp < 0) | (disp > 1) | (disp != disp)
    if bool(bad.any()):
        raise ValueError("Disparity values must lie in [0, 1].")
    b = 1 / max_depth
    a = 1 / min_depth - b
    return 1 / (a * disp + b)


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with batch norm and an identity (or projected) skip."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.downsample = None
        if stride != 1 or in_channels != out_channels:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class ResnetEncoder(nn.Module):
    """ResNet-18 layout with configurable widths.

    Module names follow torchvision, so ImageNet weights load with
    `load_pretrained` whenever the widths are the standard ones.

    Args:
        widths (tuple[int, ...]): Output channels of the stem and the four residual stages.
        num_input_images (int): Frames stacked along the channel axis.
        input_resolution (tuple[int, int] | None): Required input size, unchecked when None.
    """

    def __init__(
        self,
        widths: tuple[int, ...],
        num_input_images: int = 1,
        input_resolution: tuple[int, int] | None = None,
    ):
        super().__init__()
        self.num_ch_enc = tuple(widths)
        self.num_input_images = num_input_images
        self.input_resolution = input_resolution

        self.conv1 = nn.Conv2d(3 * num_input_images, widths[0], 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(widths[0])
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        self.layer1 = self._make_layer(widths[0], widths[1], 1)
        self.layer2 = self._make_layer(widths[1], widths[2], 2)
        self.layer3 = self._make_layer(widths[2], widths[3], 2)
        self.layer4 = self._make_layer(widths[3], widths[4], 2)

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    @staticmethod
    def _make_layer(in_channels: int, out_channels: int, stride: int) -> nn.Sequential:
        return nn.Sequential(
            BasicBlock(in_channels, out_channels, stride),
            BasicBlock(out_channels, out_channels),
        )

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        if image.shape[1] != 3 * self.num_input_images:
            raise ValueError(
                f"Expected {3 * self.num_input_images} input channels, got {image.shape[1]}."
            )
        if self.input_resolution is not None and tuple(image.shape[-2:]) != tuple(
            self.input_resolution
        ):
            raise ValueError(
                f"Input resolution {tuple(image.shape[-2:])} differs from the configured "
                f"{tuple(self.input_resolution)}."
            )
        x = (image - 0.45) / 0.225
        features = [self.relu(self.bn1(self.conv1(x)))]
        features.append(self.layer1(self.maxpool(features[-1])))
        features.append(self.layer2(features[-1]))
        features.append(self.layer3(features[-1]))
        features.append(self.layer4(features[-1]))
        return features

    def load_pretrained(self, state_dict: dict[str, torch.Tensor], skip_first_layer: bool = False) -> None:
        """Loads torchvision ResNet-18 weights.

        For multi-frame encoders the first convolution is tiled over the stacked
        frames and divided by their number, unless ``skip_first_layer`` keeps
        its own initialization. The classifier is ignored.

        Raises:
            ValueError: If a weight shape does not match this encoder's widths.
        """
        state = {k: v for k, v in state_dict.items() if not k.startswith("fc.")}
        if skip_first_layer:
            state.pop("conv1.weight", None)
        elif self.num_input_images > 1 and "conv1.weight" in state:
            state["conv1.weight"] = (
                torch.cat([state["conv1.weight"]] * self.num_input_images, 1)
                / self.num_input_images
            )
        own = self.state_dict()
        for key, value in state.items():
            if key in own and own[key].shape != value.shape:
                raise ValueError(
                    f"Pretrained weight '{key}' has shape {tuple(value.shape)}, "
                    f"expected {tuple(own[key].shape)}."
                )
        missing, _ = self.load_state_dict(state, strict=False)
        if missing:
            logger.warning("Pretrained weights left %d tensors untouched.", len(missing))


class Bottleneck(nn.Module):
    """1x1 - 3x3 - 1x1 residual bottleneck at a quarter of the channels.

    Every convolution is followed by batch norm and ReLU; the block output is
    ``x + branch(x)``.
    """

    def __init__(self, channels: int):
        super().__init__()
        if channels % 4:
            raise ValueError(f"Bottleneck channels must be divisible by 4, got {channels}.")
        mid = channels // 4
        self.branch = nn.Sequential(
            nn.Conv2d(channels, mid, 1, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, mid, 3, padding=1, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, channels, 1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.branch(x)


class IDCE(nn.Module):
    """Implicit depth cues extractor: a cascade of identical bottlenecks.

    Args:
        channels (int): Channels of the deepest unit-stream feature.
        num_blocks (int): Number of bottlenecks.
    """

    def __init__(self, channels: int, num_blocks: int = 4):
        super().__init__()
        self.blocks = nn.Sequential(*[Bottleneck(channels) for _ in range(num_blocks)])

    def forward(self, unit_stream: torch.Tensor) -> torch.Tensor:
        return self.blocks(unit_stream)


def fuse(depth_feature: torch.Tensor, cue_feature: torch.Tensor) -> torch.Tensor:
    """Element-wise sum of the deepest depth feature and the IDCE output.

    Raises:
        ValueError: If the shapes differ.
    """
    if depth_feature.shape != cue_feature.shape:
        raise ValueError(
            f"Cannot fuse features of shapes {tuple(depth_feature.shape)} "
            f"and {tuple(cue_feature.shape)}."
        )
    return depth_feature + cue_feature


class ConvBlock(nn.Module):
    """Reflection-padded 3x3 convolution followed by ELU."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = Conv3x3(in_channels, out_channels)
        self.nonlin = nn.ELU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.nonlin(self.conv(x))


class Conv3x3(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.pad = nn.ReflectionPad2d(1)
        self.conv = nn.Conv2d(in_channels, out_channels, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(self.pad(x))


class DepthDecoder(nn.Module):
    """U-Net decoder with skip connections and sigmoid disparity heads.

    Output ``s`` has resolution ``input / 2**s``.

    Args:
        num_ch_enc (tuple[int, ...]): Encoder widths, shallowest first.
        num_ch_dec (tuple[int, ...]): Decoder widths, finest level first.
        num_scales (int): Number of disparity heads.
    """

    def __init__(self, num_ch_enc, num_ch_dec, num_scales: int = 4):
        super().__init__()
        self.num_scales = num_scales
        levels = len(num_ch_enc)
        self.levels = levels
        self.convs = nn.ModuleDict()
        for i in range(levels - 1, -1, -1):
            in_channels = num_ch_enc[-1] if i == levels - 1 else num_ch_dec[i + 1]
            self.convs[f"upconv_{i}_0"] = ConvBlock(in_channels, num_ch_dec[i])
            in_channels = num_ch_dec[i] + (num_ch_enc[i - 1] if i > 0 else 0)
            self.convs[f"upconv_{i}_1"] = ConvBlock(in_channels, num_ch_dec[i])
        for s in range(num_scales):
            self.convs[f"dispconv_{s}"] = Conv3x3(num_ch_dec[s], 1)

    def forward(self, features: FeaturePyramid) -> list[torch.Tensor]:
        if len(features) != self.levels:
            raise ValueError(f"Expected {self.levels} feature levels, got {len(features)}.")
        outputs: list[torch.Tensor | None] = [None] * self.num_scales
        x = features[-1]
        for i in range(self.levels - 1, -1, -1):
            x = self.convs[f"upconv_{i}_0"](x)
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            if i > 0:
                x = torch.cat([x, features[i - 1]], 1)
            x = self.convs[f"upconv_{i}_1"](x)
            if i < self.num_scales:
                outputs[i] = torch.sigmoid(self.convs[f"dispconv_{i}"](x))
        return outputs


class PoseDecoder(nn.Module):
    """Regresses a 6-DoF pose from the deepest unit-stream feature.

    A 1x1 squeeze and two 3x3 convolutions (with ReLU) precede the optional
    attention module, global average pooling and a linear layer. Outputs are
    scaled by 0.01.

    Args:
        in_channels (int): Channels of the deepest encoder feature.
        width (int): Working width of the decoder.
    """

    def __init__(self, in_channels: int, width: int):
        super().__init__()
        self.squeeze = nn.Sequential(nn.Conv2d(in_channels, width, 1), nn.ReLU(inplace=True))
        self.convs = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Linear(width, 6)

    def forward(self, feature: torch.Tensor, attention: nn.Module | None = None) -> PoseSE3:
        x = self.convs(self.squeeze(feature))
        if attention is not None:
            x = attention(x)
        vector = 0.01 * self.head(x.mean((2, 3)))
        return PoseSE3.from_vector(vector)


@dataclass
class JointOutput:
    """Disparities per scale (finest first) and target-to-source poses per role."""

    disparities: list[torch.Tensor]
    poses: dict[str, PoseSE3] = field(default_factory=dict)


class JointDepthNet(nn.Module):
    """Depth network, pose network and the modules connecting them.

    The IDCE and the attention module are built after everything else, so two
    models created from the same seed share all other initial weights whatever
    their ablation flags.

    Args:
        cfg (NetConfig): Architecture description.
    """

    TEMPORAL_ROLES = ("prev", "next")

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.encoder_widths
        self.depth_encoder = ResnetEncoder(widths, 1, cfg.input_resolution)
        self.depth_decoder = DepthDecoder(widths, cfg.decoder_widths, cfg.num_scales)
        self.unit_stream_encoder = ResnetEncoder(widths, 2, cfg.input_resolution)
        self.pose_decoder = PoseDecoder(widths[-1], cfg.pose_width)
        self.idce = IDCE(widths[-1]) if cfg.use_idce else None
        self.ham = HighDimensionalAttention(cfg.pose_width, cfg.ham_delta) if cfg.use_ham else None
        # phase 1 trains with the cue branch switched off
        self.idce_active = cfg.use_idce

    def pose_head(self, unit_stream: torch.Tensor) -> PoseSE3:
        """Pose of the second frame of a unit stream relative to the first."""
        return self.pose_decoder(unit_stream, self.ham)

    def depth_features(self, target: torch.Tensor, prev: torch.Tensor) -> tuple[FeaturePyramid, FeaturePyramid]:
        """Depth-encoder pyramid (cue-fused when active) and the (prev, target) unit stream."""
        features = self.depth_encoder(target)
        unit_stream = self.unit_stream_encoder(torch.cat([prev, target], 1))
        if self.idce is not None and self.idce_active:
            features = features[:-1] + [fuse(features[-1], self.idce(unit_stream[-1]))]
        return features, unit_stream

    def predict_disparity(self, target: torch.Tensor, prev: torch.Tensor | None = None) -> list[torch.Tensor]:
        """Disparities of ``target``; without a previous frame the target is duplicated."""
        features, _ = self.depth_features(target, target if prev is None else prev)
        return self.depth_decoder(features)

    def forward(self, sample: "FrameSample") -> JointOutput:
        """Runs the joint network on the augmented copies of a batched sample.

        Temporal poses come from the pose network; the previous frame's
        prediction is inverted because its unit stream runs from source to
        target. A stereo source uses the sample's fixed rig transform.
        """
        target = sample.target_aug
        sources = sample.sources_aug
        prev = sources.get("prev", target)
        features, prev_stream = self.depth_features(target, prev)
        output = JointOutput(self.depth_decoder(features))

        if "prev" in sources:
            output.poses["prev"] = self.pose_head(prev_stream[-1]).inverse()
        if "next" in sources:
            next_stream = self.unit_stream_encoder(torch.cat([target, sources["next"]], 1))
            output.poses["next"] = self.pose_head(next_stream[-1])
        if "stereo" in sources:
            if sample.stereo_pose is None:
                raise ValueError("A stereo source needs the rig transform in stereo_pose.")
            output.poses["stereo"] = PoseSE3.from_vector(sample.stereo_pose.to(target.dtype))
        return output

    def idce_parameters(self) -> list[nn.Parameter]:
        return [] if self.idce is None else list(self.idce.parameters())


def save_checkpoint(
    path: str | Path,
    model: nn.Module,
    manifest: dict,
    extras: dict[str, object] | None = None,
) -> Path:
    """Writes a zip archive holding ``manifest.json``, ``model.pt`` and one ``.pt`` per extra.

    Args:
        path (str | Path): Destination file; parent directories are created.
        model (nn.Module): Model whose state dict is stored.
        manifest (dict): JSON-serializable description (configuration, phase, step).
        extras (dict[str, object] | None): Further torch-serializable states, e.g. the optimizer.

    Returns:
        Path: The written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest, format=CHECKPOINT_FORMAT)
    with zipfile.ZipFile(path, "w") as archive:
        archive.writestr("manifest.json", json.dumps(manifest, indent=2))
        for name, state in {"model": model.state_dict(), **(extras or {})}.items():
            buffer = io.BytesIO()
            torch.save(state, buffer)
            archive.writestr(f"{name}.pt", buffer.getvalue())
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, object]]:
    """Reads an archive written by `save_checkpoint`.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: If the archive has no manifest or an unknown format.

    Returns:
        tuple[dict, dict[str, object]]: The manifest and the stored states by name (``model`` included).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with zipfile.ZipFile(path) as archive:
        names = archive.namelist()
        if "manifest.json" not in names:
            raise ValueError(f"{path} holds no manifest.json.")
        manifest = json.loads(archive.read("manifest.json"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"Unsupported checkpoint format {manifest.get('format')!r}.")
        states = {
            Path(name).stem: torch.load(io.BytesIO(archive.read(name)), weights_only=False)
            for name in names
            if name.endswith(".pt")
        }
    return manifest, states
