"""Downstream classifier: a 50-layer bottleneck residual network trained with
SGD + Nesterov momentum, plus the evaluation battery (confusion matrix,
per-class precision, total accuracy, true/false-positive change rates)."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from torchvision.models import resnet50

from .data import DatasetManifest, ImageRecord, load_batch


@dataclass
class ClassifierConfig:
    n_classes: int = 9
    batch_size: int = 32
    lr: float = 1e-3
    epochs: int = 300
    momentum: float = 0.9
    input_side: int = 256
    pretrained_import: str | None = None  # path to a state_dict to warm-start from
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid batch_size/epochs")


@dataclass
class EvalReport:
    labels: list[str]
    confusion: np.ndarray  # rows: truth, cols: prediction
    tp: dict[str, int]
    fp: dict[str, int]
    per_class_precision: dict[str, float]
    total_accuracy: float
    undefined_precision: set[str] = field(default_factory=set)

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write("label,tp,fp,precision\n")
            for label in self.labels:
                f.write(
                    f"{label},{self.tp[label]},{self.fp[label]},"
                    f"{self.per_class_precision[label]:.6f}\n"
                )
            f.write(f"total_accuracy,,,{self.total_accuracy:.6f}\n")

    def confusion_to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write("truth\\pred," + ",".join(self.labels) + "\n")
            for i, label in enumerate(self.labels):
                f.write(label + "," + ",".join(str(int(v)) for v in self.confusion[i]) + "\n")


def build_classifier(config: ClassifierConfig) -> nn.Module:
    """Standard 50-layer bottleneck residual topology with an n-class head."""
    torch.manual_seed(config.seed)
    model = resnet50(weights=None, num_classes=config.n_classes)
    if config.pretrained_import:
        state = torch.load(config.pretrained_import, map_location="cpu")
        missing = model.load_state_dict(state, strict=False)
        del missing
    return model


def train_classifier(
    instance: DatasetManifest, config: ClassifierConfig
) -> tuple[nn.Module, list[dict]]:
    """Cross-entropy fine-tuning on the train split; deterministic in seed.

    Returns the model and a per-epoch history of mean train loss/accuracy.
    """
    records = instance.subset(split="train")
    if not records:
        raise ValueError("instance has no train records")
    label_to_idx = {label: i for i, label in enumerate(instance.label_set)}
    present = {r.class_label for r in records}
    missing = set(instance.label_set) - present
    if missing:
        raise ValueError(f"empty classes in train split: {sorted(missing)}")
    if len(instance.label_set) != config.n_classes:
        raise ValueError(
            f"config.n_classes={config.n_classes} but instance has {len(instance.label_set)} labels"
        )

    model = build_classifier(config)
    model.train()
    opt = torch.optim.SGD(
        model.parameters(), lr=config.lr, momentum=config.momentum, nesterov=True
    )
    images = load_batch(records, config.input_side)
    targets = torch.tensor([label_to_idx[r.class_label] for r in records])
    rng = random.Random(config.seed)
    criterion = nn.CrossEntropyLoss()
    history: list[dict] = []
    n = len(records)
    for epoch in range(config.epochs):
        order = list(range(n))
        rng.shuffle(order)
        epoch_loss, epoch_correct = 0.0, 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            x, y = images[idx], targets[idx]
            logits = model(x)
            loss = criterion(logits, y)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite classifier loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(idx)
            epoch_correct += (logits.argmax(dim=1) == y).sum().item()
        history.append(
            {"epoch": epoch, "train_loss": epoch_loss / n, "train_accuracy": epoch_correct / n}
        )
    return model, history


def predict(model: nn.Module, records: Sequence[ImageRecord], label_set: Sequence[str],
            input_side: int, batch_size: int = 32) -> list[str]:
    model.eval()
    preds: list[str] = []
    with torch.no_grad():
        for lo in range(0, len(records), batch_size):
            chunk = records[lo : lo + batch_size]
            logits = model(load_batch(chunk, input_side))
            for i in logits.argmax(dim=1).tolist():
                preds.append(label_set[i])
    model.train()
    return preds


def evaluate(
    model: nn.Module,
    test_records: Sequence[ImageRecord],
    label_set: Sequence[str],
    input_side: int = 256,
) -> EvalReport:
    unknown = {r.class_label for r in test_records} - set(label_set)
    if unknown:
        raise ValueError(f"unknown labels in test set: {sorted(unknown)}")
    preds = predict(model, test_records, label_set, input_side)
    truths = [r.class_label for r in test_records]
    return evaluation_report(truths, preds, label_set)


def evaluation_report(
    truths: Sequence[str], preds: Sequence[str], label_set: Sequence[str]
) -> EvalReport:
    """Confusion-matrix bookkeeping shared by model and oracle paths."""
    labels = list(label_set)
    index = {label: i for i, label in enumerate(labels)}
    n = len(labels)
    confusion = np.zeros((n, n), dtype=np.int64)
    for t, p in zip(truths, preds):
        confusion[index[t], index[p]] += 1
    tp = {label: int(confusion[i, i]) for i, label in enumerate(labels)}
    fp = {label: int(confusion[:, i].sum() - confusion[i, i]) for i, label in enumerate(labels)}
    precision, undefined = {}, set()
    for label in labels:
        denom = tp[label] + fp[label]
        if denom == 0:
            precision[label] = 0.0
            undefined.add(label)
        else:
            precision[label] = tp[label] / denom
    total = int(confusion.sum())
    accuracy = float(np.trace(confusion)) / total if total else 0.0
    return EvalReport(
        labels=labels,
        confusion=confusion,
        tp=tp,
        fp=fp,
        per_class_precision=precision,
        total_accuracy=accuracy,
        undefined_precision=undefined,
    )


UNDEFINED = float("nan")


def _rel_change(new: int, old: int) -> float:
    return (new - old) / old if old != 0 else UNDEFINED


def tp_change(base: EvalReport, aug: EvalReport) -> dict[str, float]:
    """Per-class relative change of true positives; NaN flags a zero base."""
    if base.labels != aug.labels:
        raise ValueError("mismatched label sets")
    return {label: _rel_change(aug.tp[label], base.tp[label]) for label in base.labels}


def fp_change(
    base: EvalReport, aug_c: EvalReport, aug_s: EvalReport
) -> dict[str, tuple[float, float, float]]:
    """Per-class triple: classic vs base, synthetic vs base, synthetic vs
    classic relative false-positive change; NaN flags zero denominators."""
    if not (base.labels == aug_c.labels == aug_s.labels):
        raise ValueError("mismatched label sets")
    out = {}
    for label in base.labels:
        out[label] = (
            _rel_change(aug_c.fp[label], base.fp[label]),
            _rel_change(aug_s.fp[label], base.fp[label]),
            _rel_change(aug_s.fp[label], aug_c.fp[label]),
        )
    return out
