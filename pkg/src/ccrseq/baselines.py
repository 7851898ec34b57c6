"""Reference semi-supervised strategies sharing the trainer and evaluation harness.

* Pseudo Label: the current online model labels the unlabeled split on clean
  (un-augmented) inputs; confident predictions become hard labels that are
  trained on next to the labeled batch. Labels are refreshed once per pass
  over the unlabeled split.
* Noisy Student: a supervised teacher labels the unlabeled split, a freshly
  initialized student trains on labeled + pseudo-labeled data under StrongAug,
  and the student becomes the next teacher.
* SCR: independent (unaligned) decoding in the unsupervised branch.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import charset
from .augment import AugmentKind, AugmentPolicy, Augmenter
from .config import BaselineConfig, TrainConfig, Variant, apply_variant
from .recognizer import Recognizer, decode_inference, load_checkpoint
from .trainer import (
    BRANCH_PSEUDO,
    IndexStream,
    LabeledBatch,
    RunResult,
    TrainData,
    Trainer,
    fit,
    init_state,
    make_evaluators,
    per_sample_seeds,
    run_training,
)

logger = logging.getLogger(__name__)

PSEUDO_TAG = 13


@dataclass
class PseudoLabels:
    indices: np.ndarray  # into the unlabeled images
    texts: list[str]
    confidence: np.ndarray  # of the accepted predictions

    def __len__(self):
        return len(self.texts)


def _default_augmenter(cfg: TrainConfig, audit: Optional[list] = None) -> Augmenter:
    return Augmenter(
        weak=AugmentPolicy(AugmentKind.WEAK, brightness=cfg.weak_brightness, contrast=cfg.weak_contrast),
        strong=AugmentPolicy(AugmentKind.STRONG, n=cfg.strong_n, magnitude=cfg.strong_magnitude),
        audit=audit,
    )


@torch.no_grad()
def score_unlabeled(model: Recognizer, images: np.ndarray, augmenter: Augmenter,
                    batch_size: int = 256) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Greedy predictions, confidences and "ended with EOS" flags on un-augmented inputs."""
    dtype = next(model.parameters()).dtype
    model.eval()
    texts: list[str] = []
    conf, ended = [], []
    for i in range(0, len(images), batch_size):
        chunk = images[i:i + batch_size]
        x = torch.from_numpy(augmenter(chunk, [0] * len(chunk), AugmentKind.NONE, "pseudo_labeling")).to(dtype)
        out = decode_inference(model, model.encode(x))
        texts.extend(out.strings())
        conf.append(out.confidence.double().numpy())
        last = out.dists.tokens.gather(1, (out.lengths - 1).clamp_min(0).unsqueeze(1)).squeeze(1)
        ended.append((last == charset.EOS).numpy())
    model.train()
    if not texts:
        return [], np.zeros(0), np.zeros(0, dtype=bool)
    return texts, np.concatenate(conf), np.concatenate(ended)


def select_pseudo_labels(texts, confidence, ended, beta_u: float) -> PseudoLabels:
    """Keep predictions with confidence strictly above ``beta_u`` that form a valid label."""
    keep = []
    for i, (t, c, e) in enumerate(zip(texts, confidence, ended)):
        if c > beta_u and e and 0 < len(t) <= charset.MAX_LABEL_LEN:
            keep.append(i)
    idx = np.array(keep, dtype=np.int64)
    return PseudoLabels(idx, [texts[i] for i in keep], np.asarray(confidence, dtype=np.float64)[idx])


def pseudo_label(model: Recognizer, images: np.ndarray, beta_u: float, augmenter: Augmenter) -> PseudoLabels:
    return select_pseudo_labels(*score_unlabeled(model, images, augmenter), beta_u)


class PseudoBatches:
    """Draws ``batch`` pseudo-labeled samples per step from the current accepted pool.

    The pool is rebuilt by ``labeler`` at step 0 and then every ``refresh`` steps.
    An empty pool yields no pseudo batch, so the step is purely supervised.
    """

    def __init__(self, data: TrainData, cfg: TrainConfig, labeler, refresh: int, batch: Optional[int] = None):
        self.data, self.cfg, self.labeler = data, cfg, labeler
        self.refresh = max(1, refresh)
        self.batch = batch or cfg.batch_unlabeled
        self.pool: Optional[PseudoLabels] = None
        self.stream: Optional[IndexStream] = None
        self.history: list[dict] = []
        self._round = -1

    def _rebuild(self, trainer: Optional[Trainer], step: int):
        self.pool = self.labeler(trainer)
        self._round += 1
        self.stream = IndexStream(len(self.pool), self.batch, self.cfg.seed, PSEUDO_TAG * 1000 + self._round)
        self.history.append({"step": step, "accepted": len(self.pool),
                             "accepted_fraction": len(self.pool) / max(1, len(self.data.unlabeled_images))})
        logger.info("step %d: %d pseudo labels accepted", step, len(self.pool))

    def __call__(self, trainer: Trainer, step: int) -> Optional[LabeledBatch]:
        if self.pool is None or step % self.refresh == 0:
            self._rebuild(trainer, step)
        if not len(self.pool):
            return None
        k = (step % self.refresh) if self.refresh > 1 else step
        pos = self.stream.batch_at(k)
        return LabeledBatch(self.data.unlabeled_images[self.pool.indices[pos]],
                            [self.pool.texts[i] for i in pos],
                            per_sample_seeds(self.cfg.seed, step, BRANCH_PSEUDO, len(pos)))


def _supervised_cfg(cfg: TrainConfig, variant: str) -> TrainConfig:
    c = apply_variant(cfg, Variant.SUPERVISED_ONLY)
    return dataclasses.replace(c, variant=variant)


def _write_json(path: Optional[Path], obj) -> None:
    if path is not None:
        path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def run_pseudo_label(cfg: TrainConfig, corpus_dir, baseline: Optional[BaselineConfig] = None,
                     out_dir=None, evaluate: bool = True, data: Optional[TrainData] = None,
                     augmenter: Optional[Augmenter] = None) -> RunResult:
    baseline = baseline or BaselineConfig(kind="PSEUDO_LABEL")
    cfg = _supervised_cfg(cfg, "PSEUDO_LABEL")
    data = data or TrainData.from_corpus(corpus_dir)
    augmenter = augmenter or _default_augmenter(cfg)
    trainer = Trainer(cfg, augmenter=augmenter)
    refresh = baseline.pl_refresh_every or math.ceil(len(data.unlabeled_images) / cfg.batch_unlabeled)
    hook = PseudoBatches(data, cfg, lambda tr: pseudo_label(tr.state.online, data.unlabeled_images,
                                                            baseline.beta_u, augmenter), refresh)
    evaluator, final = make_evaluators(cfg, corpus_dir, data) if evaluate else (None, None)
    out = Path(out_dir) if out_dir is not None else None
    res = fit(trainer, data, out, evaluator, pseudo_hook=hook, final_splits=final,
              metadata={"baseline": "PSEUDO_LABEL", "beta_u": baseline.beta_u})
    _write_json(out / "pseudo.json" if out else None, hook.history)
    res.extras["pseudo_history"] = hook.history
    return res


def run_noisy_student(cfg: TrainConfig, corpus_dir, baseline: Optional[BaselineConfig] = None,
                      out_dir=None, evaluate: bool = True, data: Optional[TrainData] = None,
                      augmenter: Optional[Augmenter] = None, teacher_checkpoint=None) -> RunResult:
    """Teacher -> student iterations; each student restarts from the same initialization.

    Writes ``teacher0/`` (unless ``teacher_checkpoint`` is given) and
    ``student1..N/`` run directories; the last student's checkpoint, trace and
    metrics are also copied to ``out_dir``.
    """
    baseline = baseline or BaselineConfig(kind="NOISY_STUDENT")
    data = data or TrainData.from_corpus(corpus_dir)
    augmenter = augmenter or _default_augmenter(cfg)
    out = Path(out_dir) if out_dir is not None else None
    evaluator, final = make_evaluators(cfg, corpus_dir, data) if evaluate else (None, None)

    if teacher_checkpoint is not None:
        teacher = load_checkpoint(teacher_checkpoint).online
    else:
        tcfg = _supervised_cfg(cfg, "NOISY_STUDENT_TEACHER")
        tr = Trainer(tcfg, augmenter=augmenter)
        fit(tr, data, out / "teacher0" if out else None, evaluator, final_splits=final)
        teacher = tr.state.online

    scfg = _supervised_cfg(cfg, "NOISY_STUDENT")
    history, res = [], None
    for it in range(1, baseline.ns_iterations + 1):
        labels = pseudo_label(teacher, data.unlabeled_images, baseline.beta_u, augmenter)
        history.append({"iteration": it, "accepted": len(labels)})
        hook = PseudoBatches(data, scfg, lambda _tr, labels=labels: labels, refresh=scfg.steps + 1)
        student = Trainer(scfg, state=init_state(scfg), augmenter=augmenter)
        res = fit(student, data, out / f"student{it}" if out else None, evaluator, pseudo_hook=hook,
                  final_splits=final, metadata={"baseline": "NOISY_STUDENT", "iteration": it,
                                                "beta_u": baseline.beta_u})
        teacher = student.state.online

    if out is not None:
        last = out / f"student{baseline.ns_iterations}"
        for name in ("final.ckpt", "trace.jsonl", "metrics.tsv", "config.ini", "run.json"):
            if (last / name).exists():
                shutil.copyfile(last / name, out / name)
        _write_json(out / "pseudo.json", history)
        res = dataclasses.replace(res, checkpoint=out / "final.ckpt", out_dir=out)
    res.extras["pseudo_history"] = history
    return res


def run_scr(cfg: TrainConfig, corpus_dir, stress: bool = False, out_dir=None, evaluate: bool = True,
            data: Optional[TrainData] = None, augmenter: Optional[Augmenter] = None) -> RunResult:
    """Unaligned consistency; ``stress`` also drops projection, EMA, weight decay and DA."""
    variant = Variant.SCR_STRESS if stress else Variant.SCR
    return run_training(cfg, corpus_dir, variant, out_dir, evaluate, augmenter, data)


def run_baseline(kind: str, cfg: TrainConfig, corpus_dir, baseline: Optional[BaselineConfig] = None,
                 out_dir=None, **kwargs) -> RunResult:
    kind = kind.upper()
    aliases = {"PL": "PSEUDO_LABEL", "NS": "NOISY_STUDENT"}
    kind = aliases.get(kind, kind)
    baseline = dataclasses.replace(baseline or BaselineConfig(), kind=kind)
    if kind == "PSEUDO_LABEL":
        return run_pseudo_label(cfg, corpus_dir, baseline, out_dir, **kwargs)
    if kind == "NOISY_STUDENT":
        return run_noisy_student(cfg, corpus_dir, baseline, out_dir, **kwargs)
    if kind == "SCR":
        return run_scr(cfg, corpus_dir, out_dir=out_dir, **kwargs)
    raise ValueError(f"unknown baseline {kind!r}")
