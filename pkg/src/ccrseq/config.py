"""Run configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import configparser
import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .losses import Distance, LossConfig


class Variant(str, enum.Enum):
    FULL = "FULL"
    SUPERVISED_ONLY = "SUPERVISED_ONLY"
    SCR = "SCR"  # unaligned decoding, every other unit on
    SCR_STRESS = "SCR_STRESS"  # unaligned decoding, no projection/EMA/WD/DA
    NO_EMA = "NO_EMA"
    NO_WD = "NO_WD"
    NO_PROJ = "NO_PROJ"
    NO_DA = "NO_DA"
    # cumulative unit ablation, all with aligned decoding
    CCR_BARE = "CCR_BARE"
    PROJ = "PROJ"
    PROJ_WD = "PROJ_WD"
    PROJ_WD_EMA = "PROJ_WD_EMA"


@dataclass
class TrainConfig:
    alpha: float = 0.999
    batch_labeled: int = 64
    batch_unlabeled: int = 48
    steps: int = 10_000
    max_lr: float = 1e-3
    weight_decay: float = 0.01
    grad_clip: float = 5.0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    strong_n: int = 2
    strong_magnitude: int = 10
    weak_brightness: float = 0.2
    weak_contrast: float = 0.2
    labeled_aug: str = "STRONG"
    online_aug: str = "STRONG"
    target_aug: str = "WEAK"

    use_unlabeled: bool = True
    use_projection: bool = True
    use_ema: bool = True
    consistency_mode: str = "ccr"  # "ccr" or "scr"
    shared_context: bool = False  # scr only: force aligned contexts
    ema_start: int = 0  # before this step the target tracks the online model exactly

    log_every: int = 50
    eval_every: int = 500
    eval_limit: int = 0  # 0 evaluates full test splits during training
    probe_size: int = 200
    collapse_threshold: float = 0.10
    checkpoint_every: int = 0
    dtype: str = "float32"
    variant: str = "FULL"

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        if self.consistency_mode not in ("ccr", "scr"):
            raise ValueError("consistency_mode must be 'ccr' or 'scr'")

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.use_ema else 0.0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss"]["dist"] = Distance(d["loss"]["dist"]).value
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class BaselineConfig:
    kind: str = "PSEUDO_LABEL"  # PSEUDO_LABEL | NOISY_STUDENT | SCR
    beta_u: float = 0.5
    ns_iterations: int = 3
    pl_refresh_every: int = 0  # 0: once per pass over the unlabeled split

    def __post_init__(self):
        if self.ns_iterations < 1:
            raise ValueError("ns_iterations must be >= 1")
        if not 0.0 <= self.beta_u <= 1.0:
            raise ValueError("beta_u must lie in [0, 1]")


def apply_variant(cfg: TrainConfig, variant) -> TrainConfig:
    v = Variant(variant)
    loss = dataclasses.replace(cfg.loss)
    c = dataclasses.replace(cfg, loss=loss, variant=v.value)
    if v is Variant.SUPERVISED_ONLY:
        c.use_unlabeled = False
        c.use_projection = False
        c.loss.lambda_cons = 0.0
        c.loss.lambda_da = 0.0
    elif v is Variant.SCR:
        c.consistency_mode = "scr"
    elif v is Variant.SCR_STRESS:
        c.consistency_mode = "scr"
        c.use_projection = False
        c.use_ema = False
        c.weight_decay = 0.0
        c.loss.lambda_da = 0.0
    elif v is Variant.NO_EMA:
        c.use_ema = False
    elif v is Variant.NO_WD:
        c.weight_decay = 0.0
    elif v is Variant.NO_PROJ:
        c.use_projection = False
    elif v is Variant.NO_DA:
        c.loss.lambda_da = 0.0
    elif v in (Variant.CCR_BARE, Variant.PROJ, Variant.PROJ_WD, Variant.PROJ_WD_EMA):
        units = {
            Variant.CCR_BARE: (False, False, False),
            Variant.PROJ: (True, False, False),
            Variant.PROJ_WD: (True, True, False),
            Variant.PROJ_WD_EMA: (True, True, True),
        }[v]
        c.use_projection, wd, c.use_ema = units
        if not wd:
            c.weight_decay = 0.0
        c.loss.lambda_da = 0.0
    return c


# flat file keys -> (section object, attribute, parser)
_BOOL = lambda s: str(s).strip().lower() in ("1", "true", "yes", "on")  # noqa: E731
KEYS: dict[str, tuple[str, str, Any]] = {
    "augment.strong.n": ("train", "strong_n", int),
    "augment.strong.magnitude": ("train", "strong_magnitude", int),
    "augment.weak.brightness": ("train", "weak_brightness", float),
    "augment.weak.contrast": ("train", "weak_contrast", float),
    "augment.labeled": ("train", "labeled_aug", str),
    "augment.online": ("train", "online_aug", str),
    "augment.target": ("train", "target_aug", str),
    "loss.tau": ("loss", "tau", float),
    "loss.beta_u": ("loss", "beta_u", float),
    "loss.dist": ("loss", "dist", lambda s: Distance(s.upper())),
    "loss.lambda_cons": ("loss", "lambda_cons", float),
    "loss.lambda_da": ("loss", "lambda_da", float),
    "loss.length_normalized_confidence": ("loss", "length_normalized_confidence", _BOOL),
    "train.alpha": ("train", "alpha", float),
    "train.batch_labeled": ("train", "batch_labeled", int),
    "train.batch_unlabeled": ("train", "batch_unlabeled", int),
    "train.steps": ("train", "steps", int),
    "train.max_lr": ("train", "max_lr", float),
    "train.weight_decay": ("train", "weight_decay", float),
    "train.grad_clip": ("train", "grad_clip", float),
    "train.seed": ("train", "seed", int),
    "train.use_unlabeled": ("train", "use_unlabeled", _BOOL),
    "train.use_projection": ("train", "use_projection", _BOOL),
    "train.use_ema": ("train", "use_ema", _BOOL),
    "train.consistency_mode": ("train", "consistency_mode", str),
    "train.shared_context": ("train", "shared_context", _BOOL),
    "train.ema_start": ("train", "ema_start", int),
    "train.log_every": ("train", "log_every", int),
    "train.eval_every": ("train", "eval_every", int),
    "train.eval_limit": ("train", "eval_limit", int),
    "train.probe_size": ("train", "probe_size", int),
    "train.collapse_threshold": ("train", "collapse_threshold", float),
    "train.checkpoint_every": ("train", "checkpoint_every", int),
    "train.dtype": ("train", "dtype", str),
    "baseline.beta_u": ("baseline", "beta_u", float),
    "baseline.ns_iterations": ("baseline", "ns_iterations", int),
    "baseline.pl_refresh_every": ("baseline", "pl_refresh_every", int),
}


def parse_config(text: str) -> tuple[TrainConfig, BaselineConfig]:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case
    parser.read_string("[config]\n" + text)
    train, loss, baseline = {}, {}, {}
    targets = {"train": train, "loss": loss, "baseline": baseline}
    for key, raw in parser.items("config"):
        if key not in KEYS:
            raise KeyError(f"unknown config key {key!r}")
        section, attr, conv = KEYS[key]
        targets[section][attr] = conv(raw.strip())
    cfg = TrainConfig(loss=LossConfig(**loss), **train)
    return cfg, BaselineConfig(**baseline)


def load_config(path) -> tuple[TrainConfig, BaselineConfig]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: TrainConfig, baseline: BaselineConfig | None = None) -> str:
    objs = {"train": cfg, "loss": cfg.loss, "baseline": baseline or BaselineConfig()}
    lines = []
    for key, (section, attr, _) in KEYS.items():
        v = getattr(objs[section], attr)
        if isinstance(v, enum.Enum):
            v = v.value
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"
