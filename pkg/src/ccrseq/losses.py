"""Training objectives.

Sequence losses take padded ``(B, T, C)`` tensors plus per-sample lengths;
each sample is averaged over its own valid steps and the batch is averaged
over samples. A bare ``(T, C)`` input is treated as a batch of one.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch

from .recognizer import StepDistributions

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


class Distance(str, enum.Enum):
    KL = "KL"
    CE = "CE"
    MSE = "MSE"


@dataclass
class LossConfig:
    tau: float = 0.4
    beta_u: float = 0.5
    dist: Distance = Distance.KL
    lambda_cons: float = 1.0
    lambda_da: float = 0.01
    length_normalized_confidence: bool = False

    def __post_init__(self):
        self.dist = Distance(self.dist)
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.beta_u <= 1.0:
            raise ValueError("beta_u must lie in [0, 1]")
        if self.lambda_cons < 0 or self.lambda_da < 0:
            raise ValueError("loss weights must be non-negative")


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 2 else x


def _step_mask(batch: int, steps: int, lengths: Optional[torch.Tensor], device) -> torch.Tensor:
    if lengths is None:
        return torch.ones(batch, steps, dtype=torch.bool, device=device)
    return torch.arange(steps, device=device).unsqueeze(0) < lengths.unsqueeze(1)


def supervised_loss(dists: StepDistributions, gt_tokens: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of the ground truth (which ends in EOS)."""
    logp = _batched(dists.log_probs)
    gt = gt_tokens.unsqueeze(0) if gt_tokens.dim() == 1 else gt_tokens
    if gt.shape != logp.shape[:2]:
        raise ValueError(f"ground truth shape {tuple(gt.shape)} does not match {tuple(logp.shape[:2])} steps")
    lengths = dists.lengths
    mask = _step_mask(*gt.shape, lengths, logp.device)
    safe = torch.where(mask, gt, torch.zeros_like(gt))
    nll = -logp.gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    per_sample = (nll * mask).sum(1) / mask.sum(1).clamp_min(1)
    return per_sample.mean()


def sharpen(logits: torch.Tensor, tau: float) -> torch.Tensor:
    if not tau > 0:
        raise ValueError("tau must be positive")
    return torch.softmax(logits / tau, dim=-1)


def confidence_score(probs: torch.Tensor, lengths: Optional[torch.Tensor] = None,
                     length_normalized: bool = False) -> torch.Tensor:
    """Product of per-step max probabilities; a (T, C) input gives a scalar."""
    single = probs.dim() == 2
    p = _batched(probs)
    if p.shape[1] == 0:
        raise ValueError("confidence of an empty sequence is undefined")
    mask = _step_mask(p.shape[0], p.shape[1], lengths, p.device)
    top = torch.where(mask, p.max(-1).values, torch.ones((), dtype=p.dtype))
    if length_normalized:
        score = torch.exp(torch.log(top).sum(1) / mask.sum(1).clamp_min(1).to(p.dtype))
    else:
        score = top.prod(1)
    return score[0] if single else score


def step_distance(target: torch.Tensor, online: torch.Tensor, dist: Distance) -> torch.Tensor:
    """Elementwise-per-step distance, reducing only the class axis."""
    dist = Distance(dist)
    if dist is Distance.MSE:
        return ((target - online) ** 2).mean(-1)
    log_q = torch.log(online.clamp_min(LOG_CLAMP))
    cross = -(target * log_q).sum(-1)
    if dist is Distance.CE:
        return cross
    return torch.xlogy(target, target).sum(-1) + cross


def consistency_loss(target_probs: torch.Tensor, online_probs: torch.Tensor, score: torch.Tensor,
                     cfg: LossConfig, lengths: Optional[torch.Tensor] = None,
                     reduce: bool = True) -> torch.Tensor:
    """Confidence-gated per-step distance between target and online outputs.

    ``target_probs`` are the already-sharpened target distributions and are
    treated as constants. A sample contributes only if its ``score``
    exceeds ``beta_u``; gated samples contribute exactly zero but still count
    in the batch mean.
    """
    p = _batched(target_probs).detach()
    q = _batched(online_probs)
    if p.shape != q.shape:
        raise ValueError(f"target/online step mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    score = torch.as_tensor(score, dtype=p.dtype).reshape(-1).detach()
    mask = _step_mask(p.shape[0], p.shape[1], lengths, p.device)
    d = torch.where(mask, step_distance(p, q, cfg.dist), torch.zeros((), dtype=q.dtype))
    per_sample = d.sum(1) / mask.sum(1).clamp_min(1)
    keep = score > cfg.beta_u
    per_sample = torch.where(keep, per_sample, torch.zeros_like(per_sample))
    return per_sample.mean() if reduce else per_sample


def covariance(h: torch.Tensor) -> torch.Tensor:
    centered = h - h.mean(0, keepdim=True)
    return centered.T @ centered / (h.shape[0] - 1)


def domain_adaptation_loss(feats_labeled: torch.Tensor, feats_unlabeled: torch.Tensor) -> torch.Tensor:
    """Squared Frobenius distance between the two feature covariances, over ``4 d^2``."""
    if feats_labeled.shape[0] < 2 or feats_unlabeled.shape[0] < 2:
        logger.warning("domain adaptation loss needs >= 2 feature rows per side; contributing 0")
        return feats_labeled.new_zeros(()) + 0.0 * (feats_labeled.sum() + feats_unlabeled.sum())
    d = feats_labeled.shape[1]
    diff = covariance(feats_labeled) - covariance(feats_unlabeled)
    return (diff ** 2).sum() / (4.0 * d * d)


def overall_loss(l_reg, l_cons, l_da, cfg: LossConfig):
    for name, value in (("l_reg", l_reg), ("l_cons", l_cons), ("l_da", l_da)):
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise FloatingPointError(f"{name} is not finite ({v})")
    return l_reg + cfg.lambda_cons * l_cons + cfg.lambda_da * l_da
