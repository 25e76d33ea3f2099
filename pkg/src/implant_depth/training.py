"""Training loops, the end-to-end pipeline, and prediction utilities.

Both stages share the same discipline: the model is built under the config
seed, sample order and augmentations derive from stable hashes of
(seed, epoch, index), and checkpoints carry model weights, optimizer state,
the resolved config and the metric history, so an interrupted run resumed
from disk continues bit-identically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np
import torch

from . import checkpoint as ckpt
from .augment import (apply_detector_augment, augment_depth_sample,
                      derive_seed, draw_detector_augment, map_coordinate,
                      resize_image)
from .config import RunConfig, config_to_text, lr_at, text_to_config
from .detector import (OUTPUT_STRIDE, RegionDetector, condition_index,
                       crop_subvolume, extract_peak, focal_loss,
                       gaussian_target, offset_l1_loss)
from .depthnet import DepthNet
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .geometry import Interval
from .losses import total_loss
from .phantom import PatientRecord

FINAL_CKPT = "ckpt-final"


# --------------------------------------------------------------------------
# sample preparation

@dataclass
class DetectorSample:
    image: np.ndarray            # (S, S) float32, detector input frame
    position: tuple[float, float]
    condition: int
    record_id: str


@dataclass
class DepthSample:
    voxels: np.ndarray           # (crop_d, crop_hw, crop_hw) float32
    interval: np.ndarray         # (2,) float32, crop coordinates
    origin: tuple[int, int, int]
    record_id: str


def detector_sample(record: PatientRecord, input_size: int) -> DetectorSample:
    depth_slice = record.volume.voxels[record.crown_slice_index]
    h, w = depth_slice.shape
    image = resize_image(depth_slice, input_size, input_size)
    row = map_coordinate(record.annotation.axial_position[0], h, input_size)
    col = map_coordinate(record.annotation.axial_position[1], w, input_size)
    return DetectorSample(
        image=image,
        position=(row, col),
        condition=condition_index(record.annotation.condition),
        record_id=record.id,
    )


def depth_sample(record: PatientRecord, crop_hw: int, crop_d: int,
                 position: tuple[float, float] | None = None) -> DepthSample:
    """Crop a training sample; `position` defaults to the annotated one."""
    if position is None:
        position = record.annotation.axial_position
    crop, origin = crop_subvolume(record.volume, position, crop_hw, crop_d)
    iv = record.annotation.interval.shifted(-origin[0])
    return DepthSample(
        voxels=crop.voxels,
        interval=np.array([iv.start, iv.end], dtype=np.float32),
        origin=origin,
        record_id=record.id,
    )


# --------------------------------------------------------------------------
# loop plumbing

def make_optimizer(model: torch.nn.Module, config) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.base_lr,
                                betas=(config.beta1, config.beta2),
                                weight_decay=config.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=config.base_lr,
                           momentum=config.momentum,
                           weight_decay=config.weight_decay)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


class JsonlLogger:
    def __init__(self, path: Path):
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")

    def log(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, epoch, 0x5EED))
    return rng.permutation(n)


def _batches(order: np.ndarray, batch_size: int):
    for i in range(0, len(order), batch_size):
        yield order[i:i + batch_size]


def _check_finite(value: float, step: int, epoch: int, ids: list[str]) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(step=step, epoch=epoch, sample_ids=ids,
                               value=value)


def _plot_curve(history: list[dict], out_path: Path, title: str) -> None:
    if not history:
        return
    fig, ax = plt.subplots(figsize=(7, 4))
    epochs = [h["epoch"] for h in history]
    for key in sorted(history[0]):
        if key in ("epoch", "lr"):
            continue
        ax.plot(epochs, [h[key] for h in history], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def _resume_state(resume: str | Path | None, model, optimizer
                  ) -> tuple[int, list[dict]]:
    if resume is None:
        return 0, []
    epoch, history, _ = ckpt.load_checkpoint(resume, model, optimizer)
    return epoch, history


def _save_stage_checkpoint(out_dir: Path, tag: str, model, optimizer,
                           config: RunConfig, epoch: int,
                           history: list[dict]) -> Path:
    path = out_dir / tag
    ckpt.save_checkpoint(path, model, optimizer, config_to_text(config),
                         epoch, history)
    return path


def build_detector(config: RunConfig) -> RegionDetector:
    m = config.model
    torch.manual_seed(config.train.seed)
    return RegionDetector(widths=m.ird_widths, embed_dim=m.ird_embed_dim,
                          head_width=m.ird_head_width,
                          deconv_widths=m.ird_deconv_widths)


def build_depthnet(config: RunConfig) -> DepthNet:
    m = config.model
    torch.manual_seed(config.train.seed)
    return DepthNet(widths=m.idp_widths, decoder_widths=m.idp_decoder_widths,
                    head_width=m.idp_head_width)


# --------------------------------------------------------------------------
# stage: region detector

_FLIP_CONDITION = {0: 2, 1: 1, 2: 0}  # left <-> right under horizontal flip


def _detector_batch(samples: list[DetectorSample], config: RunConfig,
                    epoch: int, indices: np.ndarray):
    """Augmented tensors + targets for one batch."""
    t = config.train
    m = config.model
    size = m.ird_input_size
    out = size // OUTPUT_STRIDE
    images, conds, targets, peaks, offsets_gt, ids = [], [], [], [], [], []
    for idx in indices:
        s = samples[idx]
        image, pos, cond = s.image, s.position, s.condition
        if t.augment:
            params = draw_detector_augment(size, pos,
                                           derive_seed(t.seed, epoch, idx))
            image, pos = apply_detector_augment(image, pos, params)
            if params.flip:
                cond = _FLIP_CONDITION[cond]
        heat_pos = (pos[0] / OUTPUT_STRIDE, pos[1] / OUTPUT_STRIDE)
        target = gaussian_target(heat_pos, m.heatmap_sigma, (out, out))
        peak_r = min(int(np.floor(heat_pos[0] + 0.5)), out - 1)
        peak_c = min(int(np.floor(heat_pos[1] + 0.5)), out - 1)
        images.append(torch.from_numpy(image))
        conds.append(cond)
        targets.append(target)
        peaks.append((peak_r, peak_c))
        offsets_gt.append((heat_pos[0] - peak_r, heat_pos[1] - peak_c))
        ids.append(s.record_id)
    batch = torch.stack(images)[:, None]
    return (batch, torch.tensor(conds, dtype=torch.long),
            torch.stack(targets)[:, None], peaks, offsets_gt, ids)


def train_detector(config: RunConfig, records: list[PatientRecord],
                   out_dir: str | Path,
                   resume: str | Path | None = None) -> Path:
    config.validate()
    t = config.train
    if t.stage != "ird":
        raise ConfigError(f"train_detector needs stage 'ird', got {t.stage!r}")
    if not records:
        raise ConfigError("empty training set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(config_to_text(config), encoding="utf-8")

    model = build_detector(config)
    optimizer = make_optimizer(model, t)
    start_epoch, history = _resume_state(resume, model, optimizer)
    samples = [detector_sample(r, config.model.ird_input_size) for r in records]
    logger = JsonlLogger(out_dir / "log.jsonl")
    step = start_epoch * math.ceil(len(samples) / t.batch_size)
    try:
        for epoch in range(start_epoch, t.epochs):
            lr = lr_at(epoch, t)
            set_lr(optimizer, lr)
            order = _epoch_order(t.seed, epoch, len(samples))
            epoch_focal, epoch_offset, batches = 0.0, 0.0, 0
            for indices in _batches(order, t.batch_size):
                images, conds, targets, peaks, offsets_gt, ids = \
                    _detector_batch(samples, config, epoch, indices)
                output = model(images, conds)
                loss_focal = focal_loss(output.heatmap, targets)
                loss_offset = sum(
                    offset_l1_loss(output.offsets[i], offsets_gt[i], peaks[i])
                    for i in range(len(ids))
                ) / len(ids)
                loss = loss_focal + loss_offset
                _check_finite(float(loss.detach()), step, epoch, ids)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                logger.log({"step": step, "epoch": epoch, "lr": lr,
                            "focal": float(loss_focal.detach()),
                            "offset": float(loss_offset.detach()),
                            "total": float(loss.detach())})
                epoch_focal += float(loss_focal.detach())
                epoch_offset += float(loss_offset.detach())
                batches += 1
                step += 1
            history.append({"epoch": epoch, "lr": lr,
                            "focal": epoch_focal / batches,
                            "offset": epoch_offset / batches})
            if t.checkpoint_every and (epoch + 1) % t.checkpoint_every == 0:
                _save_stage_checkpoint(out_dir, f"ckpt-epoch{epoch + 1:04d}",
                                       model, optimizer, config, epoch + 1,
                                       history)
    finally:
        logger.close()
    final = _save_stage_checkpoint(out_dir, FINAL_CKPT, model, optimizer,
                                   config, t.epochs, history)
    _plot_curve(history, out_dir / "training_curve.png", "region detector")
    return final


# --------------------------------------------------------------------------
# stage: depth network

def train_depthnet(config: RunConfig, records: list[PatientRecord],
                   out_dir: str | Path, resume: str | Path | None = None,
                   positions: dict[str, tuple[float, float]] | None = None
                   ) -> Path:
    """Train the depth regressor on cropped sub-volumes.

    `positions` optionally maps record id to a detected implant position
    (e.g. from a trained detector); the annotated position is used otherwise.
    """
    config.validate()
    t = config.train
    if t.stage != "idpnet":
        raise ConfigError(f"train_depthnet needs stage 'idpnet', got {t.stage!r}")
    if not records:
        raise ConfigError("empty training set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(config_to_text(config), encoding="utf-8")

    m = config.model
    model = build_depthnet(config)
    optimizer = make_optimizer(model, t)
    start_epoch, history = _resume_state(resume, model, optimizer)
    samples = [
        depth_sample(r, m.crop_hw, m.crop_d,
                     None if positions is None else positions.get(r.id))
        for r in records
    ]
    logger = JsonlLogger(out_dir / "log.jsonl")
    step = start_epoch * math.ceil(len(samples) / t.batch_size)
    try:
        for epoch in range(start_epoch, t.epochs):
            lr = lr_at(epoch, t)
            set_lr(optimizer, lr)
            order = _epoch_order(t.seed, epoch, len(samples))
            sums = {"l_reg": 0.0, "l_tiou": 0.0, "l_tpl": 0.0, "l_total": 0.0}
            batches = 0
            for indices in _batches(order, t.batch_size):
                vox, ivs, ids = [], [], []
                for idx in indices:
                    s = samples[idx]
                    voxels = s.voxels
                    if t.augment:
                        voxels = augment_depth_sample(
                            voxels, derive_seed(t.seed, epoch, idx))
                    vox.append(torch.from_numpy(voxels.astype(np.float32)))
                    ivs.append(torch.from_numpy(s.interval))
                    ids.append(s.record_id)
                batch = torch.stack(vox)[:, None]
                gt = torch.stack(ivs)
                pred, feature = model(batch)
                loss, report = total_loss(
                    pred, gt, feature,
                    enable_tiou=t.enable_tiou, enable_tpl=t.enable_tpl,
                    tpl_k=t.tpl_k, tpl_margin=t.tpl_margin,
                    blur_sigma=m.edge_blur_sigma, gain=m.edge_gain)
                _check_finite(report.l_total, step, epoch, ids)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                logger.log({"step": step, "epoch": epoch, "lr": lr,
                            **report.as_dict()})
                for key in sums:
                    sums[key] += getattr(report, key)
                batches += 1
                step += 1
            history.append({"epoch": epoch, "lr": lr,
                            **{k: v / batches for k, v in sums.items()}})
            if t.checkpoint_every and (epoch + 1) % t.checkpoint_every == 0:
                _save_stage_checkpoint(out_dir, f"ckpt-epoch{epoch + 1:04d}",
                                       model, optimizer, config, epoch + 1,
                                       history)
    finally:
        logger.close()
    final = _save_stage_checkpoint(out_dir, FINAL_CKPT, model, optimizer,
                                   config, t.epochs, history)
    _plot_curve(history, out_dir / "training_curve.png", "depth network")
    return final


def train_stage(config: RunConfig, records: list[PatientRecord],
                out_dir: str | Path,
                resume: str | Path | None = None) -> Path:
    if config.train.stage == "ird":
        return train_detector(config, records, out_dir, resume)
    return train_depthnet(config, records, out_dir, resume)


# --------------------------------------------------------------------------
# end-to-end pipeline

def _read_checkpoint_config(directory: str | Path) -> str:
    path = Path(directory) / ckpt.CONFIG_NAME
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CheckpointError(f"missing config snapshot {path}") from None


def detect_position(detector: RegionDetector, record: PatientRecord,
                    input_size: int) -> tuple[float, float]:
    """Detected implant position mapped back to crown-slice voxel coordinates."""
    sample = detector_sample(record, input_size)
    image = torch.from_numpy(sample.image)[None, None]
    cond = torch.tensor([sample.condition], dtype=torch.long)
    with torch.no_grad():
        output = detector(image, cond)
    row_in, col_in = extract_peak(output)
    h, w = record.volume.shape[1:]
    return (map_coordinate(row_in, input_size, h),
            map_coordinate(col_in, input_size, w))


def detect_positions(ird_dir: str | Path, records: list[PatientRecord]
                     ) -> dict[str, tuple[float, float]]:
    """Run a detector checkpoint over records, keyed by record id."""
    ird_config = text_to_config(_read_checkpoint_config(ird_dir))
    detector = build_detector(ird_config)
    ckpt.load_checkpoint(ird_dir, detector)
    detector.eval()
    size = ird_config.model.ird_input_size
    return {r.id: detect_position(detector, r, size) for r in records}


@dataclass(frozen=True)
class Prediction:
    interval: Interval            # original-volume slice coordinates
    interval_crop: Interval       # crop coordinates
    position: tuple[float, float]  # voxel coordinates on the crown slice
    crop_origin: tuple[int, int, int]


class Pipeline:
    """Detector -> crop -> depth regressor, with an oracle-position debug path."""

    def __init__(self, config: RunConfig, depthnet: DepthNet,
                 detector: RegionDetector | None = None,
                 oracle_position: bool = False):
        if detector is None and not oracle_position:
            raise ConfigError("pipeline needs a detector unless oracle_position")
        self.config = config
        self.detector = detector
        self.depthnet = depthnet
        self.oracle_position = oracle_position
        if detector is not None:
            detector.eval()
        depthnet.eval()

    @classmethod
    def from_checkpoints(cls, idp_dir: str | Path,
                         ird_dir: str | Path | None = None,
                         oracle_position: bool = False) -> "Pipeline":
        config = text_to_config(_read_checkpoint_config(idp_dir))
        depthnet = build_depthnet(config)
        ckpt.load_checkpoint(idp_dir, depthnet)
        detector = None
        if ird_dir is not None:
            ird_config = text_to_config(_read_checkpoint_config(ird_dir))
            if ird_config.model != config.model:
                raise CheckpointError(
                    "detector and depth checkpoints disagree on the model "
                    "configuration")
            detector = build_detector(ird_config)
            ckpt.load_checkpoint(ird_dir, detector)
        return cls(config, depthnet, detector, oracle_position)

    def detect_position(self, record: PatientRecord) -> tuple[float, float]:
        return detect_position(self.detector, record,
                               self.config.model.ird_input_size)

    def predict_record(self, record: PatientRecord) -> Prediction:
        if self.oracle_position:
            position = record.annotation.axial_position
        else:
            position = self.detect_position(record)
        m = self.config.model
        crop, origin = crop_subvolume(record.volume, position,
                                      m.crop_hw, m.crop_d)
        batch = torch.from_numpy(crop.voxels.astype(np.float32))[None, None]
        with torch.no_grad():
            pred, _ = self.depthnet(batch)
        interval_crop = Interval(float(pred[0, 0]), float(pred[0, 1]))
        return Prediction(
            interval=interval_crop.shifted(origin[0]),
            interval_crop=interval_crop,
            position=position,
            crop_origin=origin,
        )


def save_prediction_overlays(record: PatientRecord, prediction: Prediction,
                             out_dir: str | Path) -> None:
    """Crown-slice marker plus a side view with predicted/true interval lines."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, 2, figsize=(9, 4.5))
    crown = record.volume.voxels[record.crown_slice_index]
    axes[0].imshow(crown, cmap="gray", vmin=0, vmax=1)
    axes[0].plot(prediction.position[1], prediction.position[0], "rx",
                 markersize=10, label="predicted position")
    gt_pos = record.annotation.axial_position
    axes[0].plot(gt_pos[1], gt_pos[0], "g+", markersize=10, label="annotated")
    axes[0].set_title(f"crown slice {record.crown_slice_index}")
    axes[0].legend(fontsize=7)
    axes[0].axis("off")

    col = int(round(prediction.position[1]))
    col = min(max(col, 0), record.volume.shape[2] - 1)
    side = record.volume.voxels[:, :, col]
    axes[1].imshow(side, cmap="gray", vmin=0, vmax=1, aspect="auto")
    for y, style, label in (
        (prediction.interval.start, "r-", "pred start"),
        (prediction.interval.end, "r--", "pred end"),
        (record.annotation.interval.start, "g-", "true start"),
        (record.annotation.interval.end, "g--", "true end"),
    ):
        axes[1].axhline(y, color=style[0], linestyle=style[1:], linewidth=1.2,
                        label=label)
    axes[1].set_title(f"side view (col {col})")
    axes[1].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_dir / "prediction_overlay.png", dpi=110)
    plt.close(fig)
