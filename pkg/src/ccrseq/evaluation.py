"""Word accuracy, the union-average metric and metric files."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import charset
from .datagen import DatasetManifest, load_answers
from .recognizer import Recognizer, load_checkpoint, recognize

logger = logging.getLogger(__name__)

METRICS_MAGIC = "#ccr-seq-metrics v1"


@dataclass
class EvalSplit:
    name: str
    images: np.ndarray  # (N, H, W) uint8
    labels: list[str]


def load_eval_split(manifest_path, limit: int = 0) -> EvalSplit:
    """Images plus labels, taken inline or from the sealed answer manifest."""
    manifest = DatasetManifest.read(manifest_path)
    labels = manifest.labels
    if any(lbl is None for lbl in labels):
        answers = load_answers(manifest.root, manifest.split)
        if [r.path for r in answers.records] != [r.path for r in manifest.records]:
            raise ValueError(f"sealed answers for {manifest.split} do not match its manifest")
        labels = answers.labels
    if limit:
        manifest.records = manifest.records[:limit]
        labels = labels[:limit]
    return EvalSplit(manifest.split, manifest.load_pixels(), list(labels))


def is_correct(prediction: str, label: str) -> bool:
    return prediction.lower() == charset.normalize_label(label)


@dataclass
class MetricsRecord:
    correct: dict[str, list[bool]] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)
    extras: dict[str, float] = field(default_factory=dict)

    def accuracy(self, split: str) -> float:
        c = self.correct[split]
        return sum(c) / len(c) if c else 0.0

    def count(self, split: str) -> int:
        return len(self.correct[split])

    @property
    def accuracies(self) -> dict[str, float]:
        return {s: self.accuracy(s) for s in self.correct}

    @property
    def avg(self) -> float:
        """Accuracy over the union of all splits, not the mean of split accuracies."""
        total = sum(len(c) for c in self.correct.values())
        hits = sum(sum(c) for c in self.correct.values())
        return hits / total if total else 0.0

    def to_text(self) -> str:
        lines = [METRICS_MAGIC]
        for k, v in sorted(self.metadata.items()):
            lines.append(f"meta.{k}\t{v}")
        for s in self.correct:
            lines.append(f"acc.{s}\t{self.accuracy(s)!r}")
            lines.append(f"count.{s}\t{self.count(s)}")
            lines.append(f"hits.{s}\t{sum(self.correct[s])}")
        lines.append(f"avg\t{self.avg!r}")
        for k, v in sorted(self.extras.items()):
            lines.append(f"extra.{k}\t{v!r}")
        for s, c in self.correct.items():
            lines.append(f"samples.{s}\t{''.join('1' if x else '0' for x in c)}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "MetricsRecord":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != METRICS_MAGIC:
            raise ValueError(f"{path}: not a v1 metrics file")
        rec = cls()
        for line in lines[1:]:
            key, _, value = line.partition("\t")
            if key.startswith("meta."):
                rec.metadata[key[5:]] = value
            elif key.startswith("samples."):
                rec.correct[key[8:]] = [ch == "1" for ch in value]
            elif key.startswith("extra."):
                rec.extras[key[6:]] = float(value)
        return rec


@torch.no_grad()
def predict(model: Recognizer, images: np.ndarray, batch_size: int = 256) -> list[str]:
    dtype = next(model.parameters()).dtype
    preds: list[str] = []
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(images[i:i + batch_size].astype(np.float32) / np.float32(255.0)).to(dtype)
        preds.extend(recognize(model, x, batch_size))
    return preds


def evaluate_model(model: Recognizer, splits: Sequence[EvalSplit], metadata: Optional[dict] = None) -> MetricsRecord:
    rec = MetricsRecord(metadata=dict(metadata or {}))
    for split in splits:
        preds = predict(model, split.images)
        rec.correct[split.name] = [is_correct(p, l) for p, l in zip(preds, split.labels)]
    return rec


def evaluate(checkpoint, manifests: Sequence) -> MetricsRecord:
    """Greedy inference-mode word accuracy of a checkpoint's online model."""
    ckpt = load_checkpoint(checkpoint)
    splits = [load_eval_split(m) for m in manifests]
    meta = {"checkpoint_sha256": ckpt.digest[:16]}
    for k in ("variant", "seed"):
        if k in ckpt.config:
            meta[k] = str(ckpt.config[k])
    return evaluate_model(ckpt.online, splits, meta)
