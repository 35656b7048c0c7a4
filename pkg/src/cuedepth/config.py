"""Configuration containers for the cuedepth package.

This module defines the dataclasses that parameterize every stage of the
pipeline: the training losses (`LossConfig`), the joint network (`NetConfig`)
and the optimization run (`TrainConfig`). Each container validates itself on
creation, supports dict-like access, and round-trips through plain dictionaries
so that a complete run is described by a single JSON file.

Example:
    >>> from cuedepth.config import TrainConfig
    >>> cfg = TrainConfig.from_file("configs/toy_synth.json")
    >>> cfg.net.input_resolution
    (64, 64)
    >>> cfg.learning_rate(16)
    0.0001
"""

import json
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Any, ClassVar
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self


class _ConfigBase:
    """Shared behavior of all configuration dataclasses."""

    def __getitem__(self, key: str) -> Any:
        """Access a configuration attribute using dict-like indexing.

        Args:
            key (str): Name of the requested field.

        Returns:
            Any: Value of the field.
        """
        return getattr(self, key)

    def copy(self) -> Self:
        """Returns an independent copy of this configuration.

        Returns:
            Self: Copy built from the dictionary representation.
        """
        return self.from_dict(self.to_dict())

    def to_dict(self) -> dict:
        """Returns the configuration as a (nested) dictionary.

        Returns:
            dict: Dictionary representation, JSON serializable.
        """
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> Self:
        """Builds a configuration from a dictionary, rejecting unknown keys.

        Args:
            values (dict[str, Any]): Field names mapped to values. Lists are accepted for tuple fields.

        Raises:
            ValueError: If a key does not name a field of this configuration.

        Returns:
            Self: The validated configuration.
        """
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(
                f"Unknown configuration key(s) for {cls.__name__}: {', '.join(unknown)}"
            )
        return cls(**values)


@dataclass
class LossConfig(_ConfigBase):
    """Weights and constants of the self-supervised loss.

    Attributes:
        alpha (float): SSIM weight of the photometric error.
        gamma (float): Weight of the edge-aware smoothness term.
        num_scales (int): Number of disparity scales the loss is averaged over.
        ssim_c1 (float): SSIM stabilization constant for the means.
        ssim_c2 (float): SSIM stabilization constant for the variances.
        ssim_window (int): Side of the square SSIM window (odd).
        automask (bool): Whether the auto-mask multiplies the photometric term.

    Raises:
        ValueError: If a field is outside its valid range.
    """

    alpha: float = 0.85
    gamma: float = 1e-3
    num_scales: int = 4
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2
    ssim_window: int = 3
    automask: bool = True

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}.")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}.")
        if self.num_scales < 1:
            raise ValueError(f"num_scales must be at least 1, got {self.num_scales}.")
        if self.ssim_c1 <= 0 or self.ssim_c2 <= 0:
            raise ValueError("ssim_c1 and ssim_c2 must be positive.")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError(
                f"ssim_window must be a positive odd integer, got {self.ssim_window}."
            )


@dataclass
class NetConfig(_ConfigBase):
    """Architecture of the joint depth and ego-motion network.

    The encoder has five stages whose output strides are 2, 4, 8, 16 and 32, so
    both input dimensions must be divisible by 32. Toy mode changes widths only,
    never the topology.

    Attributes:
        encoder_widths (tuple[int, ...]): Channels of the five encoder stages.
        decoder_widths (tuple[int, ...]): Channels of the five depth-decoder levels.
        pose_width (int): Channels of the pose decoder (and of its attention module).
        input_resolution (tuple[int, int]): Network input size as (height, width).
        num_scales (int): Number of disparity scales emitted by the depth decoder.
        min_depth (float): Depth reached by disparity 1.
        max_depth (float): Depth reached by disparity 0.
        toy_mode (bool): Marks reduced widths for desk-scale runs.
        use_idce (bool): Builds the implicit depth cues extractor.
        use_ham (bool): Builds the high-dimensional attention module of the pose decoder.
        ham_delta (float): Bandwidth of the attention's Gaussian kernel.

    Raises:
        ValueError: If the architecture is inconsistent.
    """

    encoder_widths: tuple[int, ...] = (64, 64, 128, 256, 512)
    decoder_widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    pose_width: int = 256
    input_resolution: tuple[int, int] = (192, 640)
    num_scales: int = 4
    min_depth: float = 0.1
    max_depth: float = 100.0
    toy_mode: bool = False
    use_idce: bool = True
    use_ham: bool = True
    ham_delta: float = 0.5

    NUM_STAGES: ClassVar[int] = 5

    def __post_init__(self):
        # JSON hands lists back; normalize to tuples
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        self.input_resolution = tuple(int(s) for s in self.input_resolution)

        if len(self.encoder_widths) != self.NUM_STAGES:
            raise ValueError(f"encoder_widths needs {self.NUM_STAGES} entries.")
        if len(self.decoder_widths) != self.NUM_STAGES:
            raise ValueError(f"decoder_widths needs {self.NUM_STAGES} entries.")
        if self.encoder_widths[-1] % 4:
            raise ValueError(
                "The deepest encoder width must be divisible by 4 for the bottleneck cascade."
            )
        stride = 2**self.NUM_STAGES
        height, width = self.input_resolution
        if height % stride or width % stride:
            raise ValueError(
                f"input_resolution {self.input_resolution} must be divisible by {stride}."
            )
        if self.num_scales != 4:
            raise ValueError(f"num_scales must be 4, got {self.num_scales}.")
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError("Depth range must satisfy 0 < min_depth < max_depth.")
        if self.ham_delta <= 0:
            raise ValueError(f"ham_delta must be positive, got {self.ham_delta}.")
        if self.pose_width < 1:
            raise ValueError(f"pose_width must be positive, got {self.pose_width}.")

    @classmethod
    def full(cls, **overrides) -> Self:
        """ResNet-18 widths at the default 192x640 resolution."""
        return cls(**overrides)

    @classmethod
    def toy(cls, **overrides) -> Self:
        """Reduced widths at 64x64, same topology as the full network."""
        values = dict(
            encoder_widths=(8, 16, 32, 64, 128),
            decoder_widths=(8, 8, 16, 32, 64),
            pose_width=32,
            input_resolution=(64, 64),
            toy_mode=True,
        )
        values.update(overrides)
        return cls(**values)


@dataclass
class TrainConfig(_ConfigBase):
    """Optimization schedule, data source and two-phase strategy of a run.

    Phase ``baseline_ham`` trains epochs ``[0, lr_drop_epoch)`` with the cue
    extractor excluded; phase ``joint`` trains epochs ``[lr_drop_epoch, epochs)``
    with a fresh optimizer, starting from a phase-1 checkpoint.

    Attributes:
        lr (float): Initial learning rate.
        lr_drop_epoch (int): Epoch at which the learning rate drops (and phase 2 starts).
        lr_drop_factor (float): Multiplicative learning-rate drop.
        epochs (int): Total number of epochs over both phases.
        batch_size (int): Samples per optimizer step.
        adam_beta1 (float): First Adam moment coefficient.
        adam_beta2 (float): Second Adam moment coefficient.
        weight_decay (float): L2 coefficient applied to convolution and linear weights.
        phase (str): ``"baseline_ham"`` or ``"joint"``.
        seed (int): Seed of initialization, ordering and augmentation.
        dataset (str): ``"kitti"`` or ``"synth"``.
        training_mode (str): ``"M"`` (monocular) or ``"MS"`` (monocular plus stereo).
        loss (LossConfig): Loss configuration.
        net (NetConfig): Network configuration.
        data_path (str | None): KITTI-raw root directory.
        split_file (str | None): Newline-delimited test ids excluded from training.
        log_dir (str): Directory receiving checkpoints and the run log.
        phase1_checkpoint (str | None): Checkpoint the joint phase starts from.
        steps_per_epoch (int | None): Optional cap on optimizer steps per epoch.
        synth_scenes (int): Number of synthetic scenes when ``dataset == "synth"``.
        augment (bool): Whether training samples are augmented.
        freeze_ham_beta (bool): Keeps the attention scale at its initial 0.
        grad_clip (float | None): Gradient-norm clipping threshold, off when None.
        num_workers (int): Data-loader worker processes.
        device (str): Torch device name.

    Raises:
        ValueError: If a field is outside its valid range.
    """

    lr: float = 1e-4
    lr_drop_epoch: int = 15
    lr_drop_factor: float = 0.1
    epochs: int = 20
    batch_size: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 1e-4
    phase: str = "baseline_ham"
    seed: int = 0
    dataset: str = "kitti"
    training_mode: str = "M"
    loss: LossConfig = field(default_factory=LossConfig)
    net: NetConfig = field(default_factory=NetConfig)
    data_path: str | None = None
    split_file: str | None = None
    log_dir: str = "runs/default"
    phase1_checkpoint: str | None = None
    steps_per_epoch: int | None = None
    synth_scenes: int = 10
    augment: bool = True
    freeze_ham_beta: bool = False
    grad_clip: float | None = None
    num_workers: int = 0
    device: str = "cpu"

    PHASES: ClassVar[tuple[str, ...]] = ("baseline_ham", "joint")
    DATASETS: ClassVar[tuple[str, ...]] = ("kitti", "synth")
    TRAINING_MODES: ClassVar[tuple[str, ...]] = ("M", "MS")

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        if isinstance(self.net, dict):
            self.net = NetConfig.from_dict(self.net)

        if self.phase not in self.PHASES:
            raise ValueError(f"phase must be one of {self.PHASES}, got '{self.phase}'.")
        if self.dataset not in self.DATASETS:
            raise ValueError(
                f"dataset must be one of {self.DATASETS}, got '{self.dataset}'."
            )
        if self.training_mode not in self.TRAINING_MODES:
            raise ValueError(
                f"training_mode must be one of {self.TRAINING_MODES}, got '{self.training_mode}'."
            )
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}.")
        if not 0 < self.lr_drop_factor <= 1:
            raise ValueError("lr_drop_factor must lie in (0, 1].")
        if not 0 < self.lr_drop_epoch < self.epochs:
            raise ValueError(
                "lr_drop_epoch must split the run into two non-empty phases "
                f"(0 < {self.lr_drop_epoch} < {self.epochs})."
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}.")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1).")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative.")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be positive when set.")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set.")
        if self.loss.num_scales != self.net.num_scales:
            raise ValueError("loss.num_scales and net.num_scales must agree.")

    def learning_rate(self, epoch: int) -> float:
        """Learning rate of a given epoch under the step schedule.

        Args:
            epoch (int): Zero-based epoch index.

        Returns:
            float: ``lr`` before ``lr_drop_epoch``, ``lr * lr_drop_factor`` from then on.
        """
        if epoch < self.lr_drop_epoch:
            return self.lr
        return self.lr * self.lr_drop_factor

    def phase_epochs(self) -> range:
        """Epochs covered by the configured phase.

        Returns:
            range: ``[0, lr_drop_epoch)`` for phase 1, ``[lr_drop_epoch, epochs)`` for phase 2.
        """
        if self.phase == "baseline_ham":
            return range(0, self.lr_drop_epoch)
        return range(self.lr_drop_epoch, self.epochs)

    def source_roles(self) -> tuple[str, ...]:
        """Source views used by the loss for this dataset and training mode.

        Returns:
            tuple[str, ...]: Role names among ``prev``, ``next`` and ``stereo``.
        """
        if self.dataset == "synth":
            return ("prev",)
        if self.training_mode == "MS":
            return ("prev", "next", "stereo")
        return ("prev", "next")

    @classmethod
    def from_file(cls, path: str | Path) -> Self:
        """Reads a configuration from a JSON file.

        Args:
            path (str | Path): File mirroring the TrainConfig field names, with nested ``loss`` and ``net`` objects.

        Raises:
            FileNotFoundError: If the file does not exist.
            ValueError: If the file holds unknown keys or invalid values.

        Returns:
            TrainConfig: The validated configuration.
        """
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Configuration file not found: {path}")
        with path.open() as handle:
            return cls.from_dict(json.load(handle))

    def to_file(self, path: str | Path) -> None:
        """Writes the configuration as JSON.

        Args:
            path (str | Path): Destination file.
        """
        with Path(path).open("w") as handle:
            json.dump(self.to_dict(), handle, indent=2)
