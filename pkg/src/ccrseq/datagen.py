"""Two-domain rendered text corpus.

CLEAN images are plain renders of a string with one of a few built-in font
styles. PERTURBED images take the same render and push it through a seeded
degradation pipeline (perspective warp, texture, blur, photometric shift,
sensor noise), which gives a controllable domain gap.

Every image is a pure function of ``(text, seed)``, so a corpus can be
regenerated bit-exactly from the seed recorded in its manifests.
"""

from __future__ import annotations

import argparse
import enum
import logging
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from scipy import ndimage

from . import charset

logger = logging.getLogger(__name__)

IMAGE_HEIGHT = 32
IMAGE_WIDTH = 100
GENERATOR_VERSION = "ccrseq-datagen/1"
MANIFEST_MAGIC = "#ccr-seq-manifest"
ANSWERS_MAGIC = "#ccr-seq-answers"

SPLITS = ("train_labeled", "train_unlabeled", "test_clean", "test_perturbed")


class Domain(str, enum.Enum):
    CLEAN = "CLEAN"
    PERTURBED = "PERTURBED"


@dataclass
class ImageSample:
    pixels: np.ndarray  # (H, W) float32 in [0, 1]
    label: Optional[str] = None
    domain: Domain = Domain.CLEAN

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ValueError(f"expected a 2-D grayscale grid, got shape {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def with_pixels(self, pixels: np.ndarray) -> "ImageSample":
        return ImageSample(pixels=pixels, label=self.label, domain=self.domain)


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so that PNG storage is lossless."""
    q = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    return q.astype(np.float32) / np.float32(255.0)


def sample_seed(corpus_seed: int, split_index: int, index: int) -> int:
    return int(np.random.SeedSequence([corpus_seed, split_index, index]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# clean rendering


@lru_cache(maxsize=None)
def _bitmap_font():
    return ImageFont.load_default_imagefont()


@lru_cache(maxsize=None)
def _outline_font(size: int):
    return ImageFont.load_default(size=size)


def _draw_glyphs(text: str, font, rng: np.random.Generator, scale: int = 1, bold: bool = False) -> Image.Image:
    advances = [int(round(font.getlength(c))) for c in text]
    jitter = rng.integers(-1, 2, size=len(text))  # kerning jitter in [-1, 1] px
    height = font.getbbox("Wg")[3] + 4
    width = sum(advances) + int(np.abs(jitter).sum()) + 8
    mask = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(mask)
    x = 4
    for c, adv, j in zip(text, advances, jitter):
        x = max(0, x + int(j))
        draw.text((x, 2), c, fill=255, font=font)
        if bold:
            draw.text((x + 1, 2), c, fill=255, font=font)
        x += adv + (1 if bold else 0)
    bbox = mask.getbbox() or (0, 0, 1, 1)
    mask = mask.crop((max(0, bbox[0] - 1), max(0, bbox[1] - 1), min(width, bbox[2] + 1), min(height, bbox[3] + 1)))
    if scale != 1:
        mask = mask.resize((mask.width * scale, mask.height * scale), Image.NEAREST)
    return mask


def _italicize(mask: Image.Image, shear: float) -> Image.Image:
    extra = int(np.ceil(abs(shear) * mask.height))
    out = Image.new("L", (mask.width + extra, mask.height), 0)
    out.paste(mask, (0, 0))
    # x_src = x_dst + shear * y_dst - offset, slants glyph tops to the right
    return out.transform(out.size, Image.AFFINE, (1.0, shear, -extra, 0.0, 1.0, 0.0), Image.BILINEAR)


def _style_bitmap(text, rng):
    return _draw_glyphs(text, _bitmap_font(), rng, scale=2)


def _style_bitmap_bold(text, rng):
    return _draw_glyphs(text, _bitmap_font(), rng, scale=2, bold=True)


def _style_sans(text, rng):
    return _draw_glyphs(text, _outline_font(22), rng)


def _style_sans_italic(text, rng):
    return _italicize(_draw_glyphs(text, _outline_font(22), rng), 0.25)


FONT_STYLES = {
    "bitmap": _style_bitmap,
    "bitmap-bold": _style_bitmap_bold,
    "sans": _style_sans,
    "sans-italic": _style_sans_italic,
}


def render_clean(text: str, seed: int) -> ImageSample:
    """Render ``text`` on a plain background; deterministic in ``(text, seed)``."""
    charset.validate_text(text)
    rng = np.random.default_rng([seed, 0])
    names = list(FONT_STYLES)
    style = names[int(rng.integers(len(names)))]
    glyphs = FONT_STYLES[style](text, rng)

    pad_y = int(rng.integers(2, 5))
    scale = min((IMAGE_HEIGHT - 2 * pad_y) / glyphs.height, (IMAGE_WIDTH - 4) / glyphs.width)
    w = max(1, min(IMAGE_WIDTH, int(round(glyphs.width * scale))))
    h = max(1, min(IMAGE_HEIGHT, int(round(glyphs.height * scale))))
    glyphs = glyphs.resize((w, h), Image.BILINEAR)
    canvas = Image.new("L", (IMAGE_WIDTH, IMAGE_HEIGHT), 0)
    x0 = int(rng.integers(0, IMAGE_WIDTH - w + 1))
    y0 = (IMAGE_HEIGHT - h) // 2
    canvas.paste(glyphs, (x0, y0))

    mask = np.asarray(canvas, dtype=np.float64) / 255.0
    background = rng.uniform(0.75, 1.0)
    ink = rng.uniform(0.0, 0.3)
    pixels = background + (ink - background) * mask
    return ImageSample(pixels=quantize(pixels), label=text, domain=Domain.CLEAN)


# ---------------------------------------------------------------------------
# perturbation


@dataclass(frozen=True)
class PerturbConfig:
    warp: float = 0.15  # max corner displacement, fraction of each dimension
    blur: float = 1.5  # max gaussian sigma, px
    noise: float = 0.08  # max additive gaussian sigma
    texture: float = 0.35  # max texture blend opacity
    shift: float = 0.25  # max brightness shift / contrast change
    floor: float = 0.0  # magnitudes are drawn from [floor * max, max]

    @classmethod
    def preset(cls, name: str) -> "PerturbConfig":
        if name == "off":
            return cls(warp=0.0, blur=0.0, noise=0.0, texture=0.0, shift=0.0)
        if name == "default":
            return cls()
        if name == "strong":
            return cls(floor=0.5)
        raise ValueError(f"unknown perturbation strength {name!r}")


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 matrix mapping each ``src`` point onto the matching ``dst`` point."""
    rows = []
    rhs = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.extend([u, v])
    h = np.linalg.solve(np.asarray(rows, dtype=np.float64), np.asarray(rhs, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def perspective_warp(pixels: np.ndarray, displacement: np.ndarray) -> np.ndarray:
    """Warp so that the image corners land at ``corners + displacement`` (px, shape (4, 2))."""
    h, w = pixels.shape
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    # inverse map: output corner -> displaced source location
    m = _homography(corners, corners + displacement)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = m @ np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])
    sx = (pts[0] / pts[2]).reshape(h, w)
    sy = (pts[1] / pts[2]).reshape(h, w)
    return ndimage.map_coordinates(pixels, [sy, sx], order=1, mode="nearest")


def _texture(rng: np.random.Generator, shape) -> np.ndarray:
    coarse = rng.normal(size=(shape[0] // 4, shape[1] // 4))
    field = ndimage.zoom(coarse, (shape[0] / coarse.shape[0], shape[1] / coarse.shape[1]), order=1)
    stripes = np.sin(np.arange(shape[1]) * rng.uniform(0.2, 1.2) + rng.uniform(0, 2 * np.pi))[None, :]
    tex = field + 0.5 * stripes
    lo, hi = tex.min(), tex.max()
    return (tex - lo) / (hi - lo) if hi > lo else np.zeros(shape)


def perturb(sample: ImageSample, seed: int, config: PerturbConfig = PerturbConfig()) -> ImageSample:
    rng = np.random.default_rng([seed, 1])

    def magnitude(limit: float) -> float:
        return float(rng.uniform(config.floor * limit, limit)) if limit > 0 else 0.0

    x = sample.pixels.astype(np.float64)
    h, w = x.shape

    warp = magnitude(config.warp)
    if warp > 0:
        disp = rng.uniform(-1.0, 1.0, size=(4, 2)) * warp * np.array([w, h])
        x = perspective_warp(x, disp)

    opacity = magnitude(config.texture)
    if opacity > 0:
        x = (1.0 - opacity) * x + opacity * _texture(rng, x.shape)

    sigma = magnitude(config.blur)
    if sigma > 0:
        x = ndimage.gaussian_filter(x, sigma, mode="nearest")

    shift = magnitude(config.shift)
    if shift > 0:
        contrast = 1.0 + rng.uniform(-shift, shift)
        brightness = rng.uniform(-shift, shift)
        mean = x.mean()
        x = (x - mean) * contrast + mean + brightness

    noise = magnitude(config.noise)
    if noise > 0:
        x = x + rng.normal(0.0, noise, size=x.shape)

    return ImageSample(pixels=quantize(x), label=sample.label, domain=Domain.PERTURBED)


def render_perturbed(text: str, seed: int, config: PerturbConfig = PerturbConfig()) -> ImageSample:
    """Clean render of ``(text, seed)`` pushed through the degradation pipeline."""
    return perturb(render_clean(text, seed), seed, config)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestRecord:
    path: str
    label: Optional[str]
    domain: Domain


@dataclass
class DatasetManifest:
    split: str
    records: list[ManifestRecord]
    seed: int
    generator: str = GENERATOR_VERSION
    perturb: str = "default"
    root: Optional[Path] = None
    answers: Optional["DatasetManifest"] = None

    def __len__(self):
        return len(self.records)

    @property
    def labels(self) -> list[Optional[str]]:
        return [r.label for r in self.records]

    def header(self, magic: str = MANIFEST_MAGIC) -> str:
        return f"{magic} v1 seed={self.seed} split={self.split} perturb={self.perturb} generator={self.generator}"

    def to_text(self, magic: str = MANIFEST_MAGIC) -> str:
        lines = [self.header(magic)]
        for r in self.records:
            lines.append(f"{r.path}\t{r.label if r.label is not None else '-'}\t{r.domain.value}")
        return "\n".join(lines) + "\n"

    def write(self, path, magic: str = MANIFEST_MAGIC) -> None:
        Path(path).write_text(self.to_text(magic), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or not (lines[0].startswith(MANIFEST_MAGIC) or lines[0].startswith(ANSWERS_MAGIC)):
            raise ValueError(f"{path}: missing manifest header")
        meta = dict(tok.split("=", 1) for tok in lines[0].split()[2:] if "=" in tok)
        if "seed" not in meta:
            raise ValueError(f"{path}: header has no seed")
        records = []
        for n, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{n}: expected 3 tab-separated fields")
            rel, label, domain = parts
            records.append(ManifestRecord(rel, None if label == "-" else label, Domain(domain)))
        root = path.parent.parent if path.parent.name == "sealed" else path.parent
        return cls(
            split=meta.get("split", path.stem),
            records=records,
            seed=int(meta["seed"]),
            generator=meta.get("generator", GENERATOR_VERSION),
            perturb=meta.get("perturb", "default"),
            root=root,
        )

    def load_pixels(self) -> np.ndarray:
        """All images as a (N, H, W) uint8 array."""
        if self.root is None:
            raise ValueError("manifest has no root directory")
        out = np.empty((len(self.records), IMAGE_HEIGHT, IMAGE_WIDTH), dtype=np.uint8)
        for i, r in enumerate(self.records):
            with Image.open(self.root / r.path) as im:
                out[i] = np.asarray(im.convert("L"))
        return out


# ---------------------------------------------------------------------------
# corpus


@dataclass
class GenerationConfig:
    labeled: int = 20_000
    unlabeled: int = 20_000
    test_clean: int = 2_000
    test_perturbed: int = 2_000
    seed: int = 0
    min_len: int = 1
    max_len: int = charset.MAX_LABEL_LEN
    perturb: str = "default"  # PerturbConfig preset name
    labeled_domain: Domain = Domain.CLEAN

    def counts(self) -> dict[str, int]:
        return {
            "train_labeled": self.labeled,
            "train_unlabeled": self.unlabeled,
            "test_clean": self.test_clean,
            "test_perturbed": self.test_perturbed,
        }


class CapacityError(ValueError):
    pass


def string_capacity(min_len: int, max_len: int) -> int:
    return sum(charset.NUM_CHARS ** n for n in range(min_len, max_len + 1))


def sample_strings(n: int, rng: np.random.Generator, min_len: int, max_len: int, exclude: set[str]) -> list[str]:
    """``n`` distinct strings (uniform length, then uniform characters) not in ``exclude``."""
    out: list[str] = []
    seen = set(exclude)
    attempts = 0
    budget = 1000 + 200 * n
    while len(out) < n:
        attempts += 1
        if attempts > budget:
            raise CapacityError(f"could not draw {n} distinct strings of length {min_len}..{max_len}")
        length = int(rng.integers(min_len, max_len + 1))
        s = "".join(charset.CHARACTERS[i] for i in rng.integers(0, charset.NUM_CHARS, size=length))
        if s in seen:
            continue
        seen.add(s)
        out.append(s)
    return out


def _render(text: str, seed: int, domain: Domain, perturb_cfg: PerturbConfig) -> ImageSample:
    if domain is Domain.CLEAN:
        return render_clean(text, seed)
    return render_perturbed(text, seed, perturb_cfg)


def build_corpus(config: GenerationConfig, out_dir=None) -> dict[str, DatasetManifest]:
    """Generate all four splits; writes images and manifests if ``out_dir`` is given.

    Strings are unique across the whole corpus, so train and test never share
    a string. PERTURBED unlabeled/test splits carry null labels; their labels
    go to ``sealed/<split>.tsv``.
    """
    counts = config.counts()
    if any(c < 0 for c in counts.values()):
        raise ValueError("split counts must be non-negative")
    if not 1 <= config.min_len <= config.max_len <= charset.MAX_LABEL_LEN:
        raise ValueError("string length range must lie within 1..12")
    capacity = string_capacity(config.min_len, config.max_len)
    total = sum(counts.values())
    if total > capacity:
        raise CapacityError(f"requested {total} unique strings but only {capacity} exist")

    perturb_cfg = PerturbConfig.preset(config.perturb)
    rng = np.random.default_rng([config.seed, 0x5EED])
    taken: set[str] = set()
    texts: dict[str, list[str]] = {}
    # test strings first so their distribution does not depend on train counts
    for split in ("test_clean", "test_perturbed", "train_labeled", "train_unlabeled"):
        texts[split] = sample_strings(counts[split], rng, config.min_len, config.max_len, taken)
        taken.update(texts[split])

    domains = {
        "train_labeled": config.labeled_domain,
        "train_unlabeled": Domain.PERTURBED,
        "test_clean": Domain.CLEAN,
        "test_perturbed": Domain.PERTURBED,
    }
    sealed_splits = {s for s in SPLITS if domains[s] is Domain.PERTURBED and s != "train_labeled"}

    out = Path(out_dir) if out_dir is not None else None
    manifests: dict[str, DatasetManifest] = {}
    answers: dict[str, DatasetManifest] = {}
    for split_index, split in enumerate(SPLITS):
        records, sealed = [], []
        for i, text in enumerate(texts[split]):
            rel = f"images/{split}/{i:06d}.png"
            seed = sample_seed(config.seed, split_index, i)
            if out is not None:
                img = _render(text, seed, domains[split], perturb_cfg)
                path = out / rel
                path.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(np.rint(img.pixels * 255.0).astype(np.uint8), mode="L").save(path)
            visible = None if split in sealed_splits else text
            records.append(ManifestRecord(rel, visible, domains[split]))
            sealed.append(ManifestRecord(rel, text, domains[split]))
        manifests[split] = DatasetManifest(split, records, config.seed, perturb=config.perturb, root=out)
        if split in sealed_splits:
            answers[split] = DatasetManifest(split, sealed, config.seed, perturb=config.perturb, root=out)
            manifests[split].answers = answers[split]

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "sealed").mkdir(exist_ok=True)
        for split, m in manifests.items():
            m.write(out / f"{split}.tsv")
        for split, m in answers.items():
            m.write(out / "sealed" / f"{split}.tsv", magic=ANSWERS_MAGIC)
    return manifests


def load_answers(corpus_dir, split: str) -> DatasetManifest:
    path = Path(corpus_dir) / "sealed" / f"{split}.tsv"
    if not path.exists():
        raise FileNotFoundError(f"no sealed answer manifest for {split!r} at {path}")
    return DatasetManifest.read(path)


def regenerate(manifest: DatasetManifest, answers: Optional[DatasetManifest] = None) -> np.ndarray:
    """Re-render a written split from its recorded seed (for audit)."""
    perturb_cfg = PerturbConfig.preset(manifest.perturb)
    split_index = SPLITS.index(manifest.split)
    labels = (answers or manifest).labels
    out = np.empty((len(manifest), IMAGE_HEIGHT, IMAGE_WIDTH), dtype=np.uint8)
    for i, (rec, text) in enumerate(zip(manifest.records, labels)):
        if text is None:
            raise ValueError(f"record {i} of {manifest.split} has no label; pass the sealed answers")
        img = _render(text, sample_seed(manifest.seed, split_index, i), rec.domain, perturb_cfg)
        out[i] = np.rint(img.pixels * 255.0).astype(np.uint8)
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="datagen", description="Generate the two-domain rendered text corpus")
    ap.add_argument("--out", required=True)
    ap.add_argument("--labeled", type=int, default=20_000)
    ap.add_argument("--unlabeled", type=int, default=20_000)
    ap.add_argument("--test", type=int, default=2_000, help="test images per domain")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--perturb-strength", choices=["off", "default", "strong"], default="default")
    ap.add_argument("--labeled-domain", choices=[d.value for d in Domain], default=Domain.CLEAN.value,
                    help="PERTURBED gives the in-domain setting")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")

    cfg = GenerationConfig(
        labeled=args.labeled,
        unlabeled=args.unlabeled,
        test_clean=args.test,
        test_perturbed=args.test,
        seed=args.seed,
        perturb=args.perturb_strength,
        labeled_domain=Domain(args.labeled_domain),
    )
    os.makedirs(args.out, exist_ok=True)
    manifests = build_corpus(cfg, args.out)
    for split, m in manifests.items():
        logger.info("%s: %d images", split, len(m))
    return 0
