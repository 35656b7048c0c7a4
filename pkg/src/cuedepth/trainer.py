"""Two-phase optimization of the joint depth and ego-motion network.

Phase ``baseline_ham`` trains depth and pose networks (attention included)
with the cue extractor switched off. Phase ``joint`` starts from a phase-1
checkpoint, attaches a freshly initialized cue extractor and continues with a
new optimizer at the dropped learning rate. Runs are deterministic: the seed
fixes initialization, sample order and augmentation, and every epoch ends in
a checkpoint from which training resumes exactly.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import numpy as np
import torch
from tensorboardX import SummaryWriter
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from cuedepth.config import TrainConfig
from cuedepth.evalmetrics import evaluate_model
from cuedepth.kittidata import FrameSample, KittiRawDataset, index_sequences
from cuedepth.networks import JointDepthNet, load_checkpoint, save_checkpoint
from cuedepth.photoloss import LossBreakdown, total_loss
from cuedepth.synthdata import SynthDataset

logger = logging.getLogger(__name__)

RUNLOG_NAME = "runlog.jsonl"


@dataclass
class RunLog:
    """Structured per-step and per-validation records of a run."""

    records: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)

    @property
    def last_step(self) -> int:
        return self.records[-1]["step"] if self.records else -1

    def log_step(
        self, step: int, epoch: int, phase: str, lr: float, breakdown: LossBreakdown, wall_time: float
    ) -> dict:
        """Appends one training-step record.

        Raises:
            ValueError: If ``step`` does not increase.
        """
        if step <= self.last_step:
            raise ValueError(f"Step {step} does not follow step {self.last_step}.")
        record = {
            "step": step,
            "epoch": epoch,
            "phase": phase,
            "lr": lr,
            **breakdown.to_record(),
            "wall_time": wall_time,
        }
        self.records.append(record)
        return record

    def log_validation(self, epoch: int, step: int, metrics: dict) -> dict:
        record = {"epoch": epoch, "step": step, **metrics}
        self.validation.append(record)
        return record

    def deterministic_records(self) -> list[dict]:
        """Step records without their wall-clock field."""
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]

    def to_lines(self) -> list[str]:
        lines = [json.dumps({"kind": "step", **r}) for r in self.records]
        lines += [json.dumps({"kind": "validation", **r}) for r in self.validation]
        return lines

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.to_lines()) + "\n")
        return path

    @classmethod
    def from_lines(cls, lines) -> Self:
        log = cls()
        for line in lines:
            if not line.strip():
                continue
            record = json.loads(line)
            kind = record.pop("kind")
            (log.records if kind == "step" else log.validation).append(record)
        return log

    @classmethod
    def read(cls, path: str | Path) -> Self:
        return cls.from_lines(Path(path).read_text().splitlines())


def build_datasets(cfg: TrainConfig) -> tuple[Dataset, Dataset | None]:
    """Training dataset and, when ground truth exists, a validation dataset.

    Raises:
        ValueError: If the dataset and training mode cannot be combined or the data path is missing.
    """
    roles = cfg.source_roles()
    resolution = cfg.net.input_resolution
    if cfg.dataset == "synth":
        if cfg.training_mode == "MS":
            raise ValueError("Synthetic scenes have no stereo view; use training_mode 'M'.")
        train = SynthDataset(cfg.synth_scenes, resolution, cfg.seed, cfg.net.num_scales)
        return train, train
    if cfg.data_path is None:
        raise ValueError("dataset 'kitti' needs data_path.")
    split = index_sequences(cfg.data_path, cfg.split_file)
    train = KittiRawDataset(
        cfg.data_path,
        split.train,
        resolution,
        roles=roles,
        num_scales=cfg.net.num_scales,
        augment=cfg.augment,
        seed=cfg.seed,
    )
    return train, None


def _parameter_groups(params: list[torch.nn.Parameter], weight_decay: float) -> list[dict]:
    # decay on convolution and linear weights only
    decay = [p for p in params if p.ndim > 1]
    no_decay = [p for p in params if p.ndim <= 1]
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


class Trainer:
    """Runs one phase of training.

    Args:
        cfg (TrainConfig): Run configuration.
        resume (str | Path | None): Checkpoint of this phase to continue from.

    Raises:
        ValueError: If phase ``joint`` starts without ``phase1_checkpoint``.
    """

    def __init__(self, cfg: TrainConfig, resume: str | Path | None = None):
        self.cfg = cfg
        self.device = torch.device(cfg.device)
        self.log_dir = Path(cfg.log_dir)
        self.log_dir.mkdir(parents=True, exist_ok=True)

        torch.manual_seed(cfg.seed)
        torch.use_deterministic_algorithms(True, warn_only=True)

        self.model = JointDepthNet(cfg.net).to(self.device)
        self.train_dataset, self.val_dataset = build_datasets(cfg)
        self.runlog = RunLog()
        self.step = 0
        self.writers = {mode: SummaryWriter(str(self.log_dir / "tensorboard" / mode)) for mode in ("train", "val")}
        self.start_epoch = cfg.phase_epochs().start

        if cfg.phase == "joint" and resume is None:
            self._load_phase1()
        self._configure_phase()
        self.optimizer = torch.optim.Adam(
            _parameter_groups(self._trainable_parameters(), cfg.weight_decay),
            lr=cfg.learning_rate(self.start_epoch),
            betas=(cfg.adam_beta1, cfg.adam_beta2),
        )
        if resume is not None:
            self._resume(resume)

        logger.info(
            "Phase %s, epochs %d-%d, %d trainable tensors, %d training samples.",
            cfg.phase,
            self.start_epoch,
            cfg.phase_epochs().stop - 1,
            len(self._trainable_parameters()),
            len(self.train_dataset),
        )

    def _load_phase1(self) -> None:
        if self.cfg.phase1_checkpoint is None:
            raise ValueError("Phase 'joint' requires phase1_checkpoint.")
        manifest, states = load_checkpoint(self.cfg.phase1_checkpoint)
        if manifest.get("phase") != "baseline_ham":
            raise ValueError(f"{self.cfg.phase1_checkpoint} is not a phase-1 checkpoint.")
        # the cue extractor keeps its fresh initialization
        state = {k: v for k, v in states["model"].items() if not k.startswith("idce.")}
        self.model.load_state_dict(state, strict=False)
        self.runlog = RunLog.from_lines(manifest.get("runlog", []))
        self.step = manifest["step"]
        logger.info("Loaded phase-1 weights from %s", self.cfg.phase1_checkpoint)

    def _configure_phase(self) -> None:
        model = self.model
        joint = self.cfg.phase == "joint"
        model.idce_active = joint and model.idce is not None
        for p in model.idce_parameters():
            p.requires_grad_(joint)
        if model.ham is not None and self.cfg.freeze_ham_beta:
            for p in model.ham.parameters():
                p.requires_grad_(False)

    def _trainable_parameters(self) -> list[torch.nn.Parameter]:
        return [p for p in self.model.parameters() if p.requires_grad]

    def _resume(self, path: str | Path) -> None:
        manifest, states = load_checkpoint(path)
        if manifest.get("phase") != self.cfg.phase:
            raise ValueError(f"{path} belongs to phase '{manifest.get('phase')}', not '{self.cfg.phase}'.")
        self.model.load_state_dict(states["model"])
        self.optimizer.load_state_dict(states["optimizer"])
        torch.set_rng_state(states["rng"])
        self.step = manifest["step"]
        self.start_epoch = manifest["next_epoch"]
        self.runlog = RunLog.from_lines(manifest.get("runlog", []))
        logger.info("Resumed from %s at epoch %d, step %d", path, self.start_epoch, self.step)

    def epoch_order(self, epoch: int) -> list[int]:
        """Sample order of an epoch, a function of the seed and the epoch only."""
        generator = torch.Generator().manual_seed(self.cfg.seed * 1000003 + epoch)
        return torch.randperm(len(self.train_dataset), generator=generator).tolist()

    def _loader(self, epoch: int) -> DataLoader:
        if hasattr(self.train_dataset, "set_epoch"):
            self.train_dataset.set_epoch(epoch)
        return DataLoader(
            self.train_dataset,
            batch_size=self.cfg.batch_size,
            sampler=self.epoch_order(epoch),
            num_workers=self.cfg.num_workers,
            collate_fn=FrameSample.collate,
            drop_last=len(self.train_dataset) >= self.cfg.batch_size,
        )

    def process_batch(self, batch: FrameSample) -> LossBreakdown:
        """Forward pass and loss of one batch."""
        batch = batch.to(self.device)
        output = self.model(batch)
        return total_loss(
            output.disparities,
            batch,
            output.poses,
            self.cfg.loss,
            self.cfg.net.min_depth,
            self.cfg.net.max_depth,
        )

    def run_epoch(self, epoch: int) -> None:
        cfg = self.cfg
        lr = cfg.learning_rate(epoch)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()

        loader = self._loader(epoch)
        limit = len(loader) if cfg.steps_per_epoch is None else min(len(loader), cfg.steps_per_epoch)
        progress = tqdm(loader, total=limit, desc=f"epoch {epoch}", leave=False)
        for index, batch in enumerate(progress):
            if index >= limit:
                break
            start = time.perf_counter()
            breakdown = self.process_batch(batch)
            self.optimizer.zero_grad()
            breakdown.total.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(self._trainable_parameters(), cfg.grad_clip)
            self.optimizer.step()

            self.step += 1
            record = self.runlog.log_step(self.step, epoch, cfg.phase, lr, breakdown, time.perf_counter() - start)
            self.log_scalars("train", record)
            progress.set_postfix(loss=f"{float(breakdown.total):.4f}")

    def validate(self, epoch: int) -> dict | None:
        """Median-scaled depth metrics on the validation set, when it has ground truth."""
        if self.val_dataset is None:
            return None
        report, _ = evaluate_model(
            self.model,
            (self.val_dataset[i] for i in range(len(self.val_dataset))),
            cap=self.cfg.net.max_depth,
            device=self.device,
        )
        record = self.runlog.log_validation(epoch, self.step, report.to_dict())
        self.log_scalars("val", report.to_dict())
        logger.info("epoch %d | %s", epoch, report.row())
        return record

    def log_scalars(self, mode: str, values: dict) -> None:
        """Writes the numeric entries of a record to the TensorBoard writer of ``mode``.

        List-valued entries are expanded to one scalar per scale.
        """
        writer = self.writers[mode]
        for name, value in values.items():
            if isinstance(value, list):
                for scale, item in enumerate(value):
                    writer.add_scalar(f"{name}/{scale}", item, self.step)
            elif isinstance(value, (int, float)) and name not in ("step", "epoch"):
                writer.add_scalar(name, value, self.step)

    def close(self) -> None:
        for writer in self.writers.values():
            writer.close()

    def save_checkpoint(self, epoch: int) -> Path:
        manifest = {
            "phase": self.cfg.phase,
            "step": self.step,
            "next_epoch": epoch + 1,
            "config": self.cfg.to_dict(),
            "runlog": self.runlog.to_lines(),
        }
        extras = {"optimizer": self.optimizer.state_dict(), "rng": torch.get_rng_state()}
        path = self.log_dir / "checkpoints" / f"{self.cfg.phase}_epoch{epoch:03d}.ckpt"
        save_checkpoint(path, self.model, manifest, extras)
        save_checkpoint(self.log_dir / "checkpoints" / f"{self.cfg.phase}_latest.ckpt", self.model, manifest, extras)
        return path

    def train(self) -> tuple[Path | None, RunLog]:
        """Runs the remaining epochs of the phase.

        Returns:
            tuple[Path | None, RunLog]: Last checkpoint written (None if nothing ran) and the run log.
        """
        checkpoint = None
        for epoch in range(self.start_epoch, self.cfg.phase_epochs().stop):
            self.run_epoch(epoch)
            self.model.eval()
            self.validate(epoch)
            checkpoint = self.save_checkpoint(epoch)
            self.runlog.write(self.log_dir / RUNLOG_NAME)
        self.close()
        return checkpoint, self.runlog


def train(cfg: TrainConfig, resume: str | Path | None = None) -> tuple[Path | None, RunLog]:
    """Trains one phase as configured.

    Args:
        cfg (TrainConfig): Run configuration.
        resume (str | Path | None): Checkpoint of the same phase to continue from.

    Returns:
        tuple[Path | None, RunLog]: Final checkpoint and run log.
    """
    return Trainer(cfg, resume).train()


def train_two_phase(cfg: TrainConfig) -> tuple[Path, RunLog]:
    """Runs phase ``baseline_ham`` then phase ``joint`` in the same log directory."""
    phase1 = cfg.copy()
    phase1.phase = "baseline_ham"
    checkpoint, _ = train(phase1)
    phase2 = cfg.copy()
    phase2.phase = "joint"
    phase2.phase1_checkpoint = str(checkpoint)
    return train(phase2)


def pose_direction_error(predicted: torch.Tensor, expected: torch.Tensor) -> float:
    """Angle in degrees between two translation vectors."""
    a = predicted.detach().double().cpu().numpy().ravel()
    b = expected.detach().double().cpu().numpy().ravel()
    cosine = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0))))
