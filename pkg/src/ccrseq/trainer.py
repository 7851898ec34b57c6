"""Semi-supervised training loop.

One optimizer step does:

1. supervised branch: StrongAug(labeled) through the online model,
   teacher-forced on the ground truth;
2. unsupervised branch: WeakAug(unlabeled) through the target model in
   inference mode and StrongAug(same images) through the online model plus
   projection head, paired step by step (or unaligned for SCR);
3. covariance alignment between the two branches' character features;
4. backward on the weighted sum, AdamW step on online + projection only;
5. EMA of the online encoder/decoder/classifier into the target.

Every random choice (batch order, per-image augmentation) is derived from
``(seed, step, branch, index)``, so a run is reproducible bit-for-bit and
an unsupervised branch never perturbs the supervised one's randomness.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import charset
from .augment import AugmentKind, AugmentPolicy, Augmenter
from .config import TrainConfig, Variant, apply_variant, dump_config
from .datagen import DatasetManifest
from .evaluation import EvalSplit, MetricsRecord, evaluate_model, load_eval_split, predict
from .losses import (
    consistency_loss,
    domain_adaptation_loss,
    overall_loss,
    sharpen,
    supervised_loss,
)
from .recognizer import (
    ProjectionHead,
    Recognizer,
    check_compatible,
    decode_ccr_paired,
    decode_scr,
    decode_training,
    make_target,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

BRANCH_LABELED = 0
BRANCH_WEAK = 1
BRANCH_STRONG = 2
BRANCH_PSEUDO = 3

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# EMA


@torch.no_grad()
def ema_update(target: nn.Module, online: nn.Module, alpha: float) -> nn.Module:
    """``target = alpha * target + (1 - alpha) * online``, in place, over shared-role parameters.

    Floating-point buffers (normalization statistics) follow the same rule.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    check_compatible(target, online)
    if alpha == 1.0:
        return target
    online_params = dict(online.named_parameters()) | dict(online.named_buffers())
    pairs = list(target.named_parameters()) + [(k, b) for k, b in target.named_buffers() if b.is_floating_point()]
    for name, t in pairs:
        o = online_params[name]
        if alpha == 0.0:
            t.copy_(o)
        else:
            t.mul_(alpha).add_(o, alpha=1.0 - alpha)
    return target


# ---------------------------------------------------------------------------
# collapse detection


def edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalized_edit_distance(a: str, b: str) -> float:
    n = max(len(a), len(b))
    return edit_distance(a, b) / n if n else 0.0


def mean_pairwise_distance(strings: Sequence[str]) -> float:
    n = len(strings)
    if n < 2:
        return 0.0
    counts = Counter(strings)
    uniq = list(counts)
    total = 0.0
    for x, y in itertools.combinations(uniq, 2):
        total += counts[x] * counts[y] * normalized_edit_distance(x, y)
    return total / (n * (n - 1) / 2)


@dataclass
class CollapseReport:
    step: int
    unique_fraction: float
    mean_pairwise_distance: float
    collapsed: bool


def collapse_report(predictions: Sequence[str], step: int = 0, threshold: float = 0.10) -> CollapseReport:
    n = len(predictions)
    unique = len(set(predictions)) / n if n else 0.0
    return CollapseReport(step, unique, mean_pairwise_distance(predictions), unique < threshold)


def detect_collapse(model: Recognizer, probe_images: np.ndarray, step: int = 0,
                    threshold: float = 0.10) -> CollapseReport:
    """Decode the probe set and report how diverse the predictions are."""
    if len(probe_images) < 50:
        raise ValueError("collapse probe needs at least 50 images")
    return collapse_report(predict(model, probe_images), step, threshold)


# ---------------------------------------------------------------------------
# data


@dataclass
class TrainData:
    labeled_images: np.ndarray  # (N, H, W) uint8
    labeled_texts: list[str]
    unlabeled_images: np.ndarray

    @classmethod
    def from_corpus(cls, corpus_dir) -> "TrainData":
        corpus = Path(corpus_dir)
        lab = DatasetManifest.read(corpus / "train_labeled.tsv")
        unl = DatasetManifest.read(corpus / "train_unlabeled.tsv")
        if any(t is None for t in lab.labels):
            raise ValueError("train_labeled manifest has unlabeled records")
        if any(t is not None for t in unl.labels):
            raise ValueError("train_unlabeled manifest exposes labels")
        return cls(lab.load_pixels(), list(lab.labels), unl.load_pixels())


def per_sample_seeds(seed: int, step: int, branch: int, n: int) -> list[int]:
    states = np.random.SeedSequence([seed, step, branch]).spawn(n)
    return [int(s.generate_state(1)[0]) for s in states]


class IndexStream:
    """Endless epoch-shuffled index stream; batch ``k`` is a pure function of ``(seed, tag, k)``."""

    def __init__(self, n: int, batch: int, seed: int, tag: int):
        self.n, self.batch, self.seed, self.tag = n, batch, seed, tag
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            if len(self._perms) > 4:
                self._perms.clear()
            self._perms[epoch] = np.random.default_rng([self.seed, self.tag, epoch]).permutation(self.n)
        return self._perms[epoch]

    def batch_at(self, k: int) -> np.ndarray:
        if self.n == 0:
            return np.zeros(0, dtype=np.int64)
        pos = np.arange(k * self.batch, (k + 1) * self.batch)
        epochs, offsets = np.divmod(pos, self.n)
        return np.array([self._perm(int(e))[int(o)] for e, o in zip(epochs, offsets)], dtype=np.int64)


@dataclass
class LabeledBatch:
    images: np.ndarray  # uint8 (B, H, W)
    texts: list[str]
    seeds: list[int]


@dataclass
class UnlabeledBatch:
    images: np.ndarray
    weak_seeds: list[int]
    strong_seeds: list[int]


def make_batches(data: TrainData, cfg: TrainConfig, step: int,
                 streams: tuple[IndexStream, IndexStream]) -> tuple[LabeledBatch, UnlabeledBatch]:
    li = streams[0].batch_at(step)
    ui = streams[1].batch_at(step) if cfg.use_unlabeled else np.zeros(0, dtype=np.int64)
    lab = LabeledBatch(data.labeled_images[li], [data.labeled_texts[i] for i in li],
                       per_sample_seeds(cfg.seed, step, BRANCH_LABELED, len(li)))
    unl = UnlabeledBatch(data.unlabeled_images[ui],
                         per_sample_seeds(cfg.seed, step, BRANCH_WEAK, len(ui)),
                         per_sample_seeds(cfg.seed, step, BRANCH_STRONG, len(ui)))
    return lab, unl


def text_targets(texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
    """Teacher-forcing context ``[BOS, c1..cn]`` and targets ``[c1..cn, EOS]``, PAD-padded."""
    seqs = [charset.encode(t) for t in texts]
    targets = torch.tensor(charset.pad_batch(seqs), dtype=torch.long)
    contexts = torch.tensor(charset.pad_batch([[charset.BOS] + s[:-1] for s in seqs]), dtype=torch.long)
    return contexts, targets


# ---------------------------------------------------------------------------
# trainer


@dataclass
class LossBreakdown:
    l_reg: float
    l_cons: float
    l_da: float
    l_total: float
    filtered_fraction: float  # share of unlabeled samples removed by the confidence gate
    l_pseudo: float = 0.0


@dataclass
class TrainState:
    online: Recognizer
    projection: Optional[ProjectionHead]
    target: Recognizer
    optimizer: torch.optim.Optimizer
    scheduler: Optional[torch.optim.lr_scheduler.LRScheduler]
    step: int = 0


def init_state(cfg: TrainConfig) -> TrainState:
    dtype = DTYPES[cfg.dtype]
    torch.manual_seed(cfg.seed)
    online = Recognizer().to(dtype)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    projection = ProjectionHead(generator=gen).to(dtype) if cfg.use_projection else None
    target = make_target(online)
    params = list(online.parameters()) + (list(projection.parameters()) if projection is not None else [])
    optimizer = torch.optim.AdamW(params, lr=cfg.max_lr, weight_decay=cfg.weight_decay)
    scheduler = None
    if cfg.steps > 0:
        scheduler = torch.optim.lr_scheduler.OneCycleLR(optimizer, max_lr=cfg.max_lr, total_steps=cfg.steps)
    return TrainState(online, projection, target, optimizer, scheduler)


class Trainer:
    def __init__(self, cfg: TrainConfig, state: Optional[TrainState] = None, augmenter: Optional[Augmenter] = None):
        self.cfg = cfg
        self.state = state or init_state(cfg)
        self.dtype = DTYPES[cfg.dtype]
        self.augmenter = augmenter or Augmenter(
            weak=AugmentPolicy(AugmentKind.WEAK, brightness=cfg.weak_brightness, contrast=cfg.weak_contrast),
            strong=AugmentPolicy(AugmentKind.STRONG, n=cfg.strong_n, magnitude=cfg.strong_magnitude),
        )
        # instrumentation: last unsupervised decode pair, set by train_step
        self.last_pair = None

    def _tensor(self, images: np.ndarray, seeds, kind: str, purpose: str) -> torch.Tensor:
        return torch.from_numpy(self.augmenter(images, seeds, AugmentKind(kind), purpose)).to(self.dtype)

    def objective(self, lab: LabeledBatch, unl: UnlabeledBatch, pseudo: Optional[LabeledBatch] = None):
        """Forward pass of all branches; returns (total loss tensor, breakdown)."""
        cfg, st = self.cfg, self.state
        x_l = self._tensor(lab.images, lab.seeds, cfg.labeled_aug, "labeled")
        ctx, gt = text_targets(lab.texts)
        out_l = decode_training(st.online, st.online.encode(x_l), ctx)
        l_reg = supervised_loss(out_l.dists, gt)

        l_pseudo = None
        if pseudo is not None and len(pseudo.texts):
            x_p = self._tensor(pseudo.images, pseudo.seeds, cfg.labeled_aug, "pseudo")
            ctx_p, gt_p = text_targets(pseudo.texts)
            out_p = decode_training(st.online, st.online.encode(x_p), ctx_p)
            l_pseudo = supervised_loss(out_p.dists, gt_p)

        zero = l_reg.new_zeros(())
        l_cons, l_da, filtered = zero, zero, 0.0
        if cfg.use_unlabeled and len(unl.images):
            x_w = self._tensor(unl.images, unl.weak_seeds, cfg.target_aug, "target")
            x_s = self._tensor(unl.images, unl.strong_seeds, cfg.online_aug, "online")
            aligned = cfg.consistency_mode == "ccr" or cfg.shared_context
            pair = decode_ccr_paired if aligned else decode_scr
            t_out, o_out = pair(st.target, st.online, st.projection, x_w, x_s,
                                length_normalized=cfg.loss.length_normalized_confidence)
            self.last_pair = (t_out, o_out)
            lengths = torch.minimum(t_out.lengths, o_out.lengths)
            steps = min(t_out.dists.logits.shape[1], o_out.dists.logits.shape[1])
            p_target = sharpen(t_out.dists.logits[:, :steps], cfg.loss.tau)
            p_online = o_out.dists.probs[:, :steps]
            l_cons = consistency_loss(p_target, p_online, t_out.confidence, cfg.loss, lengths)
            filtered = float((t_out.confidence <= cfg.loss.beta_u).double().mean())
            mask = torch.arange(steps).unsqueeze(0) < lengths.unsqueeze(1)
            l_da = domain_adaptation_loss(out_l.valid_features(), o_out.char_features[:, :steps][mask])

        reg_total = l_reg if l_pseudo is None else l_reg + l_pseudo
        total = overall_loss(reg_total, l_cons, l_da, cfg.loss)
        breakdown = LossBreakdown(l_reg.item(), l_cons.item(), l_da.item(), total.item(), filtered,
                                  l_pseudo.item() if l_pseudo is not None else 0.0)
        return total, breakdown

    def train_step(self, lab: LabeledBatch, unl: UnlabeledBatch, pseudo: Optional[LabeledBatch] = None,
                   before_ema: Optional[Callable[["Trainer"], None]] = None) -> LossBreakdown:
        cfg, st = self.cfg, self.state
        st.online.train()
        try:
            total, breakdown = self.objective(lab, unl, pseudo)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"step {st.step}: {exc}") from exc
        st.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if cfg.grad_clip > 0:
            params = [p for g in st.optimizer.param_groups for p in g["params"]]
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        st.optimizer.step()
        if st.scheduler is not None and st.step + 1 < cfg.steps:
            st.scheduler.step()
        if before_ema is not None:
            before_ema(self)
        alpha = cfg.effective_alpha if st.step >= cfg.ema_start else 0.0
        ema_update(st.target, st.online, alpha)
        st.step += 1
        return breakdown


# ---------------------------------------------------------------------------
# training run


def _fmt(x):
    return None if x is None else float(x)


class TraceWriter:
    FIELDS = ("step", "l_reg", "l_cons", "l_da", "l_total", "filtered_fraction",
              "test_clean_acc", "test_perturbed_acc", "unique_fraction")

    def __init__(self, path: Optional[Path]):
        self.path = path
        self.records: list[dict] = []
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("", encoding="utf-8")

    def write(self, record: dict) -> None:
        rec = {k: record.get(k) for k in self.FIELDS}
        for k, v in record.items():
            if k not in rec:
                rec[k] = v
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(rec) + "\n")


@dataclass
class Evaluator:
    splits: list[EvalSplit]
    probe: Optional[np.ndarray]
    threshold: float = 0.10

    @classmethod
    def from_corpus(cls, corpus_dir, cfg: TrainConfig, data: Optional[TrainData] = None,
                    limit: int = 0) -> "Evaluator":
        corpus = Path(corpus_dir)
        splits = [load_eval_split(corpus / f"{s}.tsv", limit) for s in ("test_clean", "test_perturbed")]
        splits = [s for s in splits if len(s.labels)]
        probe = None
        if data is not None and cfg.probe_size and len(data.unlabeled_images) >= 50:
            probe = data.unlabeled_images[:cfg.probe_size]
        return cls(splits, probe, cfg.collapse_threshold)

    def run(self, model: Recognizer, step: int) -> dict:
        rec = evaluate_model(model, self.splits)
        out = {f"{s}_acc": rec.accuracy(s) for s in rec.correct}
        out["avg_acc"] = rec.avg
        if self.probe is not None:
            rep = detect_collapse(model, self.probe, step, self.threshold)
            out.update(unique_fraction=rep.unique_fraction, pairwise_distance=rep.mean_pairwise_distance,
                       collapsed=rep.collapsed)
        return out


@dataclass
class RunResult:
    checkpoint: Optional[Path]  # None when nothing was written
    trace: list[dict]
    metrics: Optional[MetricsRecord] = None
    out_dir: Optional[Path] = None
    extras: dict = field(default_factory=dict)


PseudoHook = Callable[["Trainer", int], Optional[LabeledBatch]]


def fit(trainer: Trainer, data: TrainData, out_dir: Optional[Path], evaluator: Optional[Evaluator] = None,
        pseudo_hook: Optional[PseudoHook] = None, final_splits: Optional[list[EvalSplit]] = None,
        metadata: Optional[dict] = None) -> RunResult:
    """Run ``cfg.steps`` optimizer steps with periodic evaluation and tracing."""
    cfg = trainer.cfg
    out = Path(out_dir) if out_dir is not None else None
    trace = TraceWriter(out / "trace.jsonl" if out is not None else None)
    ckpt_path = (out / "final.ckpt") if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
        (out / "run.json").write_text(json.dumps(
            {"variant": cfg.variant, "seed": cfg.seed, "config": cfg.digest(), **(metadata or {})},
            sort_keys=True) + "\n", encoding="utf-8")

    streams = (IndexStream(len(data.labeled_texts), cfg.batch_labeled, cfg.seed, 11),
               IndexStream(len(data.unlabeled_images), cfg.batch_unlabeled, cfg.seed, 12))
    window: list[LossBreakdown] = []
    best = {"best_perturbed_before_collapse": None, "best_avg_before_collapse": None}
    collapsed_at = None
    st = trainer.state

    def save(path):
        save_checkpoint(path, st.online, st.projection, st.target, config=cfg.to_dict(),
                        extra={"step": st.step})

    while st.step < cfg.steps:
        step = st.step
        lab, unl = make_batches(data, cfg, step, streams)
        pseudo = pseudo_hook(trainer, step) if pseudo_hook is not None else None
        try:
            br = trainer.train_step(lab, unl, pseudo)
        except TrainingDiverged as exc:
            if out is not None:
                (out / "nan_dump.json").write_text(json.dumps({
                    "step": step, "error": str(exc), "labeled_seeds": lab.seeds,
                    "weak_seeds": unl.weak_seeds, "strong_seeds": unl.strong_seeds, "texts": lab.texts,
                }, indent=1), encoding="utf-8")
            raise
        window.append(br)
        done = st.step
        if done % cfg.log_every == 0 or done == cfg.steps:
            rec = {"step": done}
            for k in ("l_reg", "l_cons", "l_da", "l_total", "filtered_fraction"):
                rec[k] = float(np.mean([getattr(b, k) for b in window]))
            if pseudo_hook is not None:
                rec["l_pseudo"] = float(np.mean([b.l_pseudo for b in window]))
            window = []
            if evaluator is not None and ((cfg.eval_every and done % cfg.eval_every == 0) or done == cfg.steps):
                ev = evaluator.run(st.online, done)
                rec.update(ev)
                if ev.get("collapsed") and collapsed_at is None:
                    collapsed_at = done
                if collapsed_at is None:
                    for key, src in (("best_perturbed_before_collapse", "test_perturbed_acc"),
                                     ("best_avg_before_collapse", "avg_acc")):
                        if src in ev:
                            b = best[key]
                            best[key] = max(b if b is not None else -1.0, ev[src])
                logger.info("step %d  l_total %.4f  %s", done, rec["l_total"],
                            "  ".join(f"{k} {v:.4f}" for k, v in ev.items() if isinstance(v, float)))
            if not math.isfinite(rec["l_total"]):
                raise TrainingDiverged(f"non-finite loss at step {done}")
            trace.write(rec)
        if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save(out / f"step{done:06d}.ckpt")

    if out is not None:
        save(ckpt_path)
    metrics = None
    if final_splits:
        meta = {"variant": cfg.variant, "seed": str(cfg.seed), "config": cfg.digest(), "steps": str(cfg.steps)}
        meta.update({k: str(v) for k, v in (metadata or {}).items()})
        metrics = evaluate_model(st.online, final_splits, meta)
        metrics.extras["collapsed_at"] = float(collapsed_at) if collapsed_at is not None else -1.0
        for k, v in best.items():
            if v is not None:
                metrics.extras[k] = v
        if out is not None:
            metrics.write(out / "metrics.tsv")
    return RunResult(ckpt_path, trace.records, metrics, out, {"collapsed_at": collapsed_at})


def run_training(cfg: TrainConfig, corpus_dir, variant=Variant.FULL, out_dir=None,
                 evaluate: bool = True, augmenter: Optional[Augmenter] = None,
                 data: Optional[TrainData] = None) -> RunResult:
    """Train one variant on a corpus directory; inference uses the online model."""
    cfg = apply_variant(cfg, variant)
    data = data or TrainData.from_corpus(corpus_dir)
    trainer = Trainer(cfg, augmenter=augmenter)
    evaluator, final = make_evaluators(cfg, corpus_dir, data) if evaluate else (None, None)
    return fit(trainer, data, out_dir, evaluator, final_splits=final)


def make_evaluators(cfg: TrainConfig, corpus_dir, data: TrainData) -> tuple[Evaluator, list[EvalSplit]]:
    """The periodic evaluator (possibly on a test prefix) and the full final splits."""
    evaluator = Evaluator.from_corpus(corpus_dir, cfg, data, cfg.eval_limit)
    final = Evaluator.from_corpus(corpus_dir, cfg).splits if cfg.eval_limit else evaluator.splits
    return evaluator, final
