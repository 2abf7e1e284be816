"""Training loop for segmentation models.

One warm-up epoch ramps the learning rate linearly to its peak; afterwards a
triangular cycle with a two-epoch period oscillates between a decaying
envelope (ten-epoch half-life) and a hundredth of it.  Windows are sampled
with a seeded generator so runs are reproducible; the best-validation-loss
checkpoint is returned.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .core import Annotation, FrameMatrix, annotation_to_frames
from .errors import NumericalError
from .labels import pit_bce_loss, pit_powerset_loss
from .pipeline import binarize, slide_windows
from .segmentation import SegmentationModel

GRAD_CLIP_NORM = 5.0
CYCLE_FLOOR = 0.01  # trough of the triangular cycle, as a fraction of the envelope


@dataclass(frozen=True)
class TrainConfig:
    """Schedule and optimizer settings; defaults are the full-scale recipe."""

    epochs: int = 80
    steps_per_epoch: int = 900
    batch: int = 32
    lr_peak: float = 0.002
    warmup_epochs: float = 1.0
    cycle_epochs: float = 2.0
    halflife_epochs: float = 10.0
    adapt_lr: float = 0.00005
    adapt_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("steps_per_epoch", "batch", "lr_peak", "warmup_epochs",
                     "cycle_epochs", "halflife_epochs", "adapt_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.adapt_patience < 0:
            raise ValueError("epochs and adapt_patience must be >= 0")


@dataclass
class TrainHistory:
    """Per-epoch traces; lengths equal the number of completed epochs."""

    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_local_der: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int | None = None


def lr_at(config: TrainConfig, epoch: float) -> float:
    """Learning rate at a fractional epoch.

    Linear warm-up to lr_peak over the first epoch, then a triangular wave
    with the configured period between an exponentially decaying envelope
    and envelope/100, peaking at the start of each cycle.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < config.warmup_epochs:
        return config.lr_peak * epoch / config.warmup_epochs
    since_warmup = epoch - config.warmup_epochs
    envelope = config.lr_peak * 2.0 ** (-since_warmup / config.halflife_epochs)
    phase = (since_warmup % config.cycle_epochs) / config.cycle_epochs * 2.0
    down = phase if phase <= 1.0 else 2.0 - phase
    return envelope * (1.0 - down * (1.0 - CYCLE_FLOOR))


# ---------------------------------------------------------------------------
# Window datasets
# ---------------------------------------------------------------------------

Window = tuple[np.ndarray, np.ndarray]  # (features T'xF, labels T'xN)


def make_windows(
    features: FrameMatrix,
    annotation: Annotation,
    window: float,
    num_speakers: int,
    hop: float | None = None,
) -> list[Window]:
    """Cut one recording into fixed-length training windows with frame labels.

    Slot order within a window is by decreasing in-window speech duration;
    windows with more than num_speakers speakers keep the most talkative ones
    and the rest are dropped from the labels.
    """
    hop = window if hop is None else hop
    duration = features.num_frames / features.frame_rate
    out = []
    for span in slide_windows(duration, window, hop):
        chunk = features.crop(*span)
        local = annotation.crop(*span)
        totals = {
            label: sum(seg.duration for seg in local.segments if seg.label == label)
            for label in local.speakers()
        }
        order = sorted(totals, key=lambda lb: (-totals[lb], lb))[:num_speakers]
        labels = annotation_to_frames(
            local, (chunk.start_time, chunk.end_time), features.frame_rate, order
        ).data
        if labels.shape[1] < num_speakers:
            pad = np.zeros((labels.shape[0], num_speakers - labels.shape[1]), dtype=labels.dtype)
            labels = np.hstack([labels, pad])
        out.append((np.asarray(chunk.data, dtype=np.float32), labels))
    return out


def _pit_loss(model: SegmentationModel, probs: torch.Tensor, labels: torch.Tensor):
    if model.config.loss_type == "multilabel":
        loss, _ = pit_bce_loss(probs, labels)
    else:
        loss, _ = pit_powerset_loss(probs, labels, model.config.table())
    return loss


def _batched_forward(model: SegmentationModel, windows: list[Window], indices):
    """One forward per group of equal-length windows; yields (probs, labels)."""
    groups: dict[tuple, list[int]] = {}
    for idx in indices:
        groups.setdefault(windows[idx][0].shape, []).append(int(idx))
    for shape, idxs in groups.items():
        feats = torch.stack([torch.as_tensor(windows[i][0], dtype=torch.float32) for i in idxs])
        probs = model(feats)
        for row, i in enumerate(idxs):
            labels = torch.as_tensor(np.asarray(windows[i][1]), dtype=torch.float32)
            yield probs[row], labels


def _local_frame_der(pred: np.ndarray, ref: np.ndarray) -> tuple[float, float]:
    """(error frames, reference frames) under the best slot assignment."""
    cost = np.abs(pred[:, :, None].astype(int) - ref[:, None, :].astype(int)).sum(axis=0)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum()), float(ref.sum())


def _evaluate(model: SegmentationModel, windows: list[Window]) -> tuple[float, float]:
    """Mean loss and frame-level local DER over a validation set."""
    table = model.config.table() if model.config.loss_type == "powerset" else None
    losses, err_frames, ref_frames = [], 0.0, 0.0
    with torch.no_grad():
        for probs, labels in _batched_forward(model, windows, range(len(windows))):
            losses.append(float(_pit_loss(model, probs, labels)))
            pred = binarize(probs.cpu().numpy(), model.config.loss_type, table)
            err, ref = _local_frame_der(pred, labels.cpu().numpy())
            err_frames += err
            ref_frames += ref
    der = err_frames / ref_frames if ref_frames > 0 else 0.0
    return float(np.mean(losses)), der


def train_segmentation(
    model: SegmentationModel,
    train_windows: list[Window],
    val_windows: list[Window],
    config: TrainConfig,
) -> tuple[SegmentationModel, TrainHistory]:
    """Train and return the model state of the best-validation-loss epoch."""
    history = TrainHistory()
    if config.epochs == 0:
        return model, history
    if not train_windows or not val_windows:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr_peak, betas=(0.9, 0.999), eps=1e-8)
    best_state, best_val = None, math.inf
    for epoch in range(config.epochs):
        model.train()
        epoch_losses = []
        lr = config.lr_peak
        for step in range(config.steps_per_epoch):
            lr = lr_at(config, epoch + step / config.steps_per_epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch_idx = rng.integers(0, len(train_windows), size=config.batch)
            optimizer.zero_grad()
            losses = [
                _pit_loss(model, probs, labels)
                for probs, labels in _batched_forward(model, train_windows, batch_idx)
            ]
            batch_loss = torch.stack(losses).mean()
            if not torch.isfinite(batch_loss):
                raise NumericalError(
                    f"non-finite training loss at epoch {epoch}, step {step}"
                )
            batch_loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), GRAD_CLIP_NORM)
            optimizer.step()
            epoch_losses.append(float(batch_loss.detach()))
        model.eval()
        val_loss, val_der = _evaluate(model, val_windows)
        history.train_loss.append(float(np.mean(epoch_losses)))
        history.val_loss.append(val_loss)
        history.val_local_der.append(val_der)
        history.lr.append(lr)
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(model.state_dict())
            history.best_epoch = epoch
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, history


def adapt(
    model: SegmentationModel,
    train_windows: list[Window],
    val_windows: list[Window],
    config: TrainConfig,
) -> tuple[SegmentationModel, TrainHistory]:
    """Constant-rate fine-tuning with patience-based early stopping.

    The input model counts as the baseline checkpoint, so the returned model
    never validates worse than what went in.  Training stops once
    adapt_patience consecutive epochs fail to improve the validation loss.
    """
    if not train_windows:
        raise ValueError("adaptation set must be non-empty")
    if not val_windows:
        raise ValueError("validation set must be non-empty")
    history = TrainHistory()
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.adapt_lr, betas=(0.9, 0.999), eps=1e-8)
    model.eval()
    best_val, _ = _evaluate(model, val_windows)
    best_state = copy.deepcopy(model.state_dict())
    history.best_epoch = -1  # baseline
    stale = 0
    epoch = 0
    while stale <= config.adapt_patience:
        model.train()
        epoch_losses = []
        for step in range(config.steps_per_epoch):
            batch_idx = rng.integers(0, len(train_windows), size=config.batch)
            optimizer.zero_grad()
            losses = [
                _pit_loss(model, probs, labels)
                for probs, labels in _batched_forward(model, train_windows, batch_idx)
            ]
            batch_loss = torch.stack(losses).mean()
            if not torch.isfinite(batch_loss):
                raise NumericalError(f"non-finite adaptation loss at epoch {epoch}")
            batch_loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), GRAD_CLIP_NORM)
            optimizer.step()
            epoch_losses.append(float(batch_loss.detach()))
        model.eval()
        val_loss, val_der = _evaluate(model, val_windows)
        history.train_loss.append(float(np.mean(epoch_losses)))
        history.val_loss.append(val_loss)
        history.val_local_der.append(val_der)
        history.lr.append(config.adapt_lr)
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(model.state_dict())
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
        epoch += 1
    model.load_state_dict(best_state)
    return model, history


def save_history_csv(path: str | Path, history: TrainHistory) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_local_der", "lr"])
        rows = zip(history.train_loss, history.val_loss, history.val_local_der, history.lr)
        for epoch, (train, val, der, lr) in enumerate(rows):
            writer.writerow([epoch, f"{train:.6f}", f"{val:.6f}", f"{der:.6f}", f"{lr:.8f}"])
