"""Attention encoder-decoder text recognizer and its decode procedures.

Token layout follows :mod:`ccrseq.charset`: the classifier scores the 36
characters plus EOS, while decoder inputs may also be BOS or PAD.

All decode procedures work on padded batches. A :class:`DecodeOutput` holds
per-step tensors of shape ``(B, T, ...)`` plus per-sample ``lengths``;
positions at or past a sample's length are padding and carry no meaning.
"""

from __future__ import annotations

import copy
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import charset

FEATURE_DIM = 256
EMBED_DIM = 128
FEATURE_LENGTH = 25
CHECKPOINT_FORMAT = "ccrseq-checkpoint"
CHECKPOINT_VERSION = 1


class Encoder(nn.Module):
    """Four conv blocks taking a 1x32x100 image to a length-25 sequence of 256-d features.

    Each block is conv, batch norm, ReLU and max-pool. Inputs in [0, 1] are
    mapped to [-1, 1] first.
    """

    def __init__(self, channels=(32, 64, 128, 256)):
        super().__init__()
        pools = [(2, 2), (2, 2), (2, 1), (4, 1)]
        layers = []
        c_in = 1
        for c_out, pool in zip(channels, pools):
            layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.ReLU(), nn.MaxPool2d(pool)]
            c_in = c_out
        self.net = nn.Sequential(*layers)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(1)
        if images.shape[1:] != (1, 32, 100):
            raise ValueError(f"expected (B, 1, 32, 100) images, got {tuple(images.shape)}")
        f = self.net(images * 2.0 - 1.0)  # (B, d, 1, 25)
        return f.squeeze(2).transpose(1, 2)


class AttentionDecoder(nn.Module):
    """GRU cell with additive attention over the encoder features.

    The per-step character feature is ``relu(W [h_t; c_t])``, so it is
    non-negative; this makes an identity-initialized projection head an
    exact identity.
    """

    def __init__(self, dim: int = FEATURE_DIM, embed_dim: int = EMBED_DIM):
        super().__init__()
        self.dim = dim
        self.embedding = nn.Embedding(charset.NUM_INPUT_TOKENS, embed_dim)
        self.query = nn.Linear(dim, dim, bias=False)
        self.key = nn.Linear(dim, dim)
        self.score = nn.Linear(dim, 1, bias=False)
        self.cell = nn.GRUCell(embed_dim + dim, dim)
        self.output = nn.Linear(2 * dim, dim)

    def init_state(self, features: torch.Tensor) -> torch.Tensor:
        return features.new_zeros(features.shape[0], self.dim)

    def step(self, tokens, hidden, features, keys):
        energy = self.score(torch.tanh(keys + self.query(hidden).unsqueeze(1))).squeeze(-1)
        attn = torch.softmax(energy, dim=1)
        context = torch.bmm(attn.unsqueeze(1), features).squeeze(1)
        hidden = self.cell(torch.cat([self.embedding(tokens), context], dim=1), hidden)
        feature = F.relu(self.output(torch.cat([hidden, context], dim=1)))
        return feature, hidden


class Recognizer(nn.Module):
    """Encoder, decoder and classifier; one instance is one parameter set."""

    def __init__(self, dim: int = FEATURE_DIM):
        super().__init__()
        self.encoder = Encoder()
        self.decoder = AttentionDecoder(dim)
        self.classifier = nn.Linear(dim, charset.NUM_CLASSES)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)


class ProjectionHead(nn.Module):
    """Two-layer perceptron d -> d -> d with ReLU, initialized near identity."""

    def __init__(self, dim: int = FEATURE_DIM, noise: float = 0.01, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.reset_identity(noise, generator)

    @torch.no_grad()
    def reset_identity(self, noise: float = 0.0, generator: Optional[torch.Generator] = None):
        for fc in (self.fc1, self.fc2):
            eye = torch.eye(fc.weight.shape[0], dtype=fc.weight.dtype)
            if noise > 0:
                eye = eye + noise * torch.randn(eye.shape, generator=generator, dtype=fc.weight.dtype)
            fc.weight.copy_(eye)
            fc.bias.zero_()

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


# ---------------------------------------------------------------------------
# decode outputs


@dataclass
class StepDistributions:
    logits: torch.Tensor  # (B, T, C) pre-softmax scores
    tokens: torch.Tensor  # (B, T) argmax of each step
    lengths: torch.Tensor  # (B,) number of valid steps

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    @property
    def log_probs(self) -> torch.Tensor:
        return torch.log_softmax(self.logits, dim=-1)

    def mask(self) -> torch.Tensor:
        t = torch.arange(self.logits.shape[1], device=self.logits.device)
        return t.unsqueeze(0) < self.lengths.unsqueeze(1)

    @classmethod
    def from_probs(cls, probs: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> "StepDistributions":
        """Wrap explicit probabilities; a (T, C) input is treated as one sequence."""
        if probs.dim() == 2:
            probs = probs.unsqueeze(0)
        logits = torch.log(probs)
        if lengths is None:
            lengths = torch.full((probs.shape[0],), probs.shape[1], dtype=torch.long)
        return cls(logits=logits, tokens=probs.argmax(-1), lengths=lengths)


@dataclass
class DecodeOutput:
    dists: StepDistributions
    char_features: torch.Tensor  # (B, T, d) decoder output before projection/classifier
    inputs: torch.Tensor  # (B, T) token consumed at each step
    confidence: Optional[torch.Tensor] = None  # (B,)

    @property
    def lengths(self):
        return self.dists.lengths

    def strings(self) -> list[str]:
        out = []
        for toks, n in zip(self.dists.tokens.tolist(), self.lengths.tolist()):
            out.append(charset.decode(toks[:n]))
        return out

    def valid_features(self) -> torch.Tensor:
        """Character features of all valid steps, stacked to (N, d)."""
        return self.char_features[self.dists.mask()]


def sequence_confidence(probs: torch.Tensor, lengths: torch.Tensor, length_normalized: bool = False) -> torch.Tensor:
    """Product over valid steps of the max class probability."""
    top = probs.max(dim=-1).values
    t = torch.arange(probs.shape[1], device=probs.device)
    top = torch.where(t.unsqueeze(0) < lengths.unsqueeze(1), top, torch.ones_like(top))
    if length_normalized:
        return torch.exp(torch.log(top).sum(1) / lengths.clamp_min(1).to(top.dtype))
    return top.prod(dim=1)


def _classify(model: Recognizer, feature, projection):
    return model.classifier(projection(feature) if projection is not None else feature)


def _check_tokens(tokens: torch.Tensor):
    if tokens.numel() and (tokens.min() < 0 or tokens.max() >= charset.NUM_INPUT_TOKENS):
        raise ValueError("context token outside the decoder vocabulary")


def decode_training(model: Recognizer, features: torch.Tensor, context_tokens: torch.Tensor,
                    projection: Optional[ProjectionHead] = None,
                    lengths: Optional[torch.Tensor] = None) -> DecodeOutput:
    """Teacher-forced decoding: step ``t`` consumes ``context_tokens[:, t]``.

    ``context_tokens`` is (B, T) and starts with BOS. When ``projection`` is
    given, character features pass through it before the classifier.
    """
    if context_tokens.dim() == 1:
        context_tokens = context_tokens.unsqueeze(0)
    _check_tokens(context_tokens)
    B, T = context_tokens.shape
    if T > charset.MAX_DECODE_LEN:
        raise ValueError(f"context longer than {charset.MAX_DECODE_LEN} steps")
    if T and bool((context_tokens[:, 0] != charset.BOS).any()):
        raise ValueError("context must begin with BOS")
    if lengths is None:
        lengths = (context_tokens != charset.PAD).sum(1)
    dec = model.decoder
    keys = dec.key(features)
    hidden = dec.init_state(features)
    feats, logits = [], []
    for t in range(T):
        f, hidden = dec.step(context_tokens[:, t], hidden, features, keys)
        feats.append(f)
        logits.append(_classify(model, f, projection))
    feats_t = torch.stack(feats, 1) if feats else features.new_zeros(B, 0, dec.dim)
    logits_t = torch.stack(logits, 1) if logits else features.new_zeros(B, 0, charset.NUM_CLASSES)
    dists = StepDistributions(logits_t, logits_t.argmax(-1), lengths)
    return DecodeOutput(dists, feats_t, context_tokens)


def decode_inference(model: Recognizer, features: torch.Tensor, max_len: int = charset.MAX_DECODE_LEN,
                     projection: Optional[ProjectionHead] = None,
                     length_normalized: bool = False) -> DecodeOutput:
    """Greedy decoding fed by its own argmax, stopping at EOS or ``max_len``.

    The EOS step is part of the output. ``confidence`` is the product of the
    per-step max probabilities over the emitted steps.
    """
    B = features.shape[0]
    dec = model.decoder
    keys = dec.key(features)
    hidden = dec.init_state(features)
    token = torch.full((B,), charset.BOS, dtype=torch.long, device=features.device)
    lengths = torch.zeros(B, dtype=torch.long, device=features.device)
    done = torch.zeros(B, dtype=torch.bool, device=features.device)
    feats, logits, toks, inputs = [], [], [], []
    for _ in range(max_len):
        inputs.append(token)
        f, hidden = dec.step(token, hidden, features, keys)
        z = _classify(model, f, projection)
        token = z.argmax(-1)
        feats.append(f)
        logits.append(z)
        toks.append(token)
        lengths = lengths + (~done).long()
        done = done | (token == charset.EOS)
        if bool(done.all()):
            break
        token = torch.where(done, torch.full_like(token, charset.PAD), token)
    logits_t = torch.stack(logits, 1)
    dists = StepDistributions(logits_t, torch.stack(toks, 1), lengths)
    out = DecodeOutput(dists, torch.stack(feats, 1), torch.stack(inputs, 1))
    out.confidence = sequence_confidence(dists.probs, lengths, length_normalized)
    return out


def shifted_context(tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """``[BOS, tokens[:, :-1]]`` with PAD beyond each length."""
    B, T = tokens.shape
    ctx = torch.cat([torch.full((B, 1), charset.BOS, dtype=tokens.dtype, device=tokens.device), tokens[:, :-1]], 1)
    t = torch.arange(T, device=tokens.device).unsqueeze(0)
    return torch.where(t < lengths.unsqueeze(1), ctx, torch.full_like(ctx, charset.PAD))


def check_compatible(a: nn.Module, b: nn.Module) -> None:
    sa, sb = a.state_dict(), b.state_dict()
    if sa.keys() != sb.keys():
        raise ValueError("parameter sets have different entries")
    for k in sa:
        if sa[k].shape != sb[k].shape:
            raise ValueError(f"parameter {k} has shape {tuple(sa[k].shape)} vs {tuple(sb[k].shape)}")


def decode_ccr_paired(target: Recognizer, online: Recognizer, projection: Optional[ProjectionHead],
                      images_weak: torch.Tensor, images_strong: torch.Tensor,
                      max_len: int = charset.MAX_DECODE_LEN,
                      length_normalized: bool = False) -> tuple[DecodeOutput, DecodeOutput]:
    """Character-level paired decoding.

    The target decodes the weak view greedily without gradient; its argmax at
    step ``t`` is the step ``t+1`` input of both decoders, so the online
    decoder (strong view, through ``projection``) is teacher-forced on the
    target's pseudo labels and both outputs share the target's length.
    Since the target never reads online state, running it to completion
    first is equivalent to stepping the two in lockstep.
    """
    check_compatible(target, online)
    with torch.no_grad():
        target_out = decode_inference(target, target.encode(images_weak), max_len,
                                      length_normalized=length_normalized)
    context = shifted_context(target_out.dists.tokens, target_out.lengths)
    online_out = decode_training(online, online.encode(images_strong), context, projection,
                                 lengths=target_out.lengths.clone())
    return target_out, online_out


def decode_scr(target: Recognizer, online: Recognizer, projection: Optional[ProjectionHead],
               images_weak: torch.Tensor, images_strong: torch.Tensor,
               max_len: int = charset.MAX_DECODE_LEN,
               length_normalized: bool = False) -> tuple[DecodeOutput, DecodeOutput]:
    """Standard (unaligned) pairing: each decoder feeds on its own outputs."""
    check_compatible(target, online)
    with torch.no_grad():
        target_out = decode_inference(target, target.encode(images_weak), max_len,
                                      length_normalized=length_normalized)
    online_out = decode_inference(online, online.encode(images_strong), max_len, projection=projection)
    return target_out, online_out


# ---------------------------------------------------------------------------
# parameter sets and checkpoints


def make_target(online: Recognizer) -> Recognizer:
    """Frozen copy of ``online``; it always runs with its stored normalization statistics."""
    target = copy.deepcopy(online).eval()
    for p in target.parameters():
        p.requires_grad_(False)
    return target


def save_checkpoint(path, online: Recognizer, projection: Optional[ProjectionHead] = None,
                    target: Optional[Recognizer] = None, config: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    tensors = {f"online.{k}": v.detach().clone() for k, v in online.state_dict().items()}
    if projection is not None:
        tensors.update({f"projection.{k}": v.detach().clone() for k, v in projection.state_dict().items()})
    if target is not None:
        tensors.update({f"target.{k}": v.detach().clone() for k, v in target.state_dict().items()})
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "tensors": tensors,
        "shapes": {k: list(v.shape) for k, v in tensors.items()},
        "dtypes": {k: str(v.dtype) for k, v in tensors.items()},
        "config": config or {},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(blob, buf)
    path.write_bytes(buf.getvalue())


@dataclass
class Checkpoint:
    online: Recognizer
    projection: Optional[ProjectionHead]
    target: Optional[Recognizer]
    config: dict
    extra: dict
    digest: str


def _load_group(module: nn.Module, tensors: dict, prefix: str):
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    dtype = next(iter(state.values())).dtype
    module.to(dtype)
    module.load_state_dict(state)
    return module


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    blob = torch.load(io.BytesIO(raw), map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} archive")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    tensors = blob["tensors"]
    for k, shape in blob["shapes"].items():
        if list(tensors[k].shape) != shape:
            raise ValueError(f"{path}: tensor {k} does not match its recorded shape")
    online = _load_group(Recognizer(), tensors, "online.")
    projection = None
    if any(k.startswith("projection.") for k in tensors):
        projection = _load_group(ProjectionHead(noise=0.0), tensors, "projection.")
    target = None
    if any(k.startswith("target.") for k in tensors):
        target = make_target(_load_group(Recognizer(), tensors, "target."))
    return Checkpoint(online, projection, target, blob.get("config", {}), blob.get("extra", {}),
                      hashlib.sha256(raw).hexdigest())


@torch.no_grad()
def recognize(model: Recognizer, images: torch.Tensor, batch_size: int = 256) -> list[str]:
    """Greedy inference-mode strings for a (N, 32, 100) float batch."""
    model.eval()
    out: list[str] = []
    for i in range(0, images.shape[0], batch_size):
        chunk = images[i:i + batch_size]
        out.extend(decode_inference(model, model.encode(chunk)).strings())
    return out
