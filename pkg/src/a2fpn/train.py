"""Training and evaluation loops shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .autodiff import Adam, Tape, Tensor
from .autodiff import functional as F
from .autodiff.init import make_rng
from .data.augment import AugmentationPolicy, augment
from .data.tta import single_pass_predict, tta_predict
from .errors import TrainingDivergenceError
from .metrics import ConfusionMatrix, confusion_update, mean_iou

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 3e-4
    seed: int = 0
    policy: Optional[AugmentationPolicy] = field(default_factory=AugmentationPolicy)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_miou: float


@dataclass
class TrainResult:
    history: List[EpochRecord]
    best_state: dict
    best_epoch: int
    best_val_miou: float


def predict_labels(model, images: np.ndarray, tta: bool = False, batch_size: int = 8) -> np.ndarray:
    model.eval()
    preds = []
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        probs = tta_predict(model, chunk) if tta else single_pass_predict(model, chunk)
        preds.append(np.argmax(probs, axis=1))
    return np.concatenate(preds)


def evaluate(model, images, labels, num_classes: int, tta: bool = False, batch_size: int = 8) -> ConfusionMatrix:
    cm = ConfusionMatrix(num_classes)
    return confusion_update(cm, predict_labels(model, images, tta, batch_size), labels)


def train_model(
    model,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    val_images: np.ndarray,
    val_labels: np.ndarray,
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Cross-entropy + Adam.  Keeps the state with the best validation mIoU (earliest on ties)."""
    rng = make_rng(cfg.seed + 1_000_003)
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    num_classes = model.variant.num_classes
    best_state, best_epoch, best_miou = model.state_dict(), 0, -1.0
    history = []
    n = len(train_images)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(n)
        losses = []
        for step, start in enumerate(range(0, n, cfg.batch_size), 1):
            idx = order[start : start + cfg.batch_size]
            if cfg.policy is not None:
                pairs = [augment(train_images[i], train_labels[i], cfg.policy, rng) for i in idx]
                xb = np.stack([p[0] for p in pairs])
                yb = np.stack([p[1] for p in pairs])
            else:
                xb, yb = train_images[idx], train_labels[idx]
            optimizer.zero_grad()
            with Tape() as tape:
                loss = F.cross_entropy_loss(model(Tensor(xb)), yb)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergenceError(epoch, step, value)
            tape.backward(loss)
            optimizer.step()
            losses.append(value)
        cm = evaluate(model, val_images, val_labels, num_classes)
        record = EpochRecord(epoch, float(np.mean(losses)), mean_iou(cm))
        history.append(record)
        log.info("epoch %d loss %.4f val mIoU %.4f", epoch, record.train_loss, record.val_miou)
        if on_epoch is not None:
            on_epoch(record)
        if record.val_miou > best_miou:
            best_state, best_epoch, best_miou = model.state_dict(), epoch, record.val_miou
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(history, best_state, best_epoch, best_miou)
