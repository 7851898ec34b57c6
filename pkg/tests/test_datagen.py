import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccrseq import charset, datagen
from ccrseq.datagen import (
    CapacityError,
    DatasetManifest,
    Domain,
    GenerationConfig,
    PerturbConfig,
    build_corpus,
    load_answers,
    regenerate,
    render_clean,
    render_perturbed,
)

texts = st.text(alphabet=charset.CHARACTERS, min_size=1, max_size=12)


# ---------------------------------------------------------------------------
# charset


def test_charset_layout():
    assert len(charset.CHARACTERS) == 36 == len(set(charset.CHARACTERS))
    assert (charset.EOS, charset.BOS, charset.PAD) == (36, 37, 38)
    assert charset.NUM_CLASSES == 37 and charset.NUM_INPUT_TOKENS == 39
    assert charset.MAX_DECODE_LEN == 13


@given(texts)
def test_encode_decode_roundtrip(text):
    toks = charset.encode(text)
    assert toks[-1] == charset.EOS and len(toks) == len(text) + 1
    assert charset.decode(toks) == text


def test_invalid_character_named():
    with pytest.raises(charset.InvalidCharacterError) as info:
        charset.encode("ab-c")
    assert info.value.symbol == "-"
    assert "'-'" in str(info.value)


@pytest.mark.parametrize("bad", ["", "a" * 13, "Hello"])
def test_validate_rejects(bad):
    with pytest.raises(ValueError):
        charset.validate_text(bad)


def test_normalize_label():
    assert charset.normalize_label("Hello, World-7!") == "helloworld7"


# ---------------------------------------------------------------------------
# rendering


def test_render_single_glyph():
    img = render_clean("a", 0)
    assert img.pixels.shape == (32, 100)
    assert img.label == "a" and img.domain is Domain.CLEAN
    # glyph is darker than the background somewhere
    assert img.pixels.min() < img.pixels.max() - 0.3


def test_render_deterministic_and_seed_sensitive():
    a, b, c = render_clean("hello7", 42), render_clean("hello7", 42), render_clean("hello7", 43)
    assert np.array_equal(a.pixels, b.pixels)
    assert (a.pixels != c.pixels).sum() >= 1


def test_render_rejects_bad_text():
    with pytest.raises(charset.InvalidCharacterError, match="'#'"):
        render_clean("ab#", 1)
    with pytest.raises(ValueError):
        render_perturbed("", 1)


def test_at_least_three_font_styles_are_used():
    assert len(datagen.FONT_STYLES) >= 3
    # different seeds land on different styles; images with one glyph differ in ink width
    widths = set()
    for seed in range(40):
        x = render_clean("m", seed).pixels
        widths.add(int((x < x.mean() - 0.2).any(axis=0).sum()))
    assert len(widths) >= 3


@settings(max_examples=25, deadline=None)
@given(texts, st.integers(0, 2**31 - 1))
def test_render_range_and_shape(text, seed):
    for img in (render_clean(text, seed), render_perturbed(text, seed)):
        assert img.pixels.shape == (32, 100)
        assert 0.0 <= img.pixels.min() and img.pixels.max() <= 1.0
        assert img.label == text
    assert render_perturbed(text, seed).domain is Domain.PERTURBED


def test_perturbed_differs_from_clean():
    clean, pert = render_clean("abc", 7), render_perturbed("abc", 7)
    assert np.abs(clean.pixels - pert.pixels).mean() > 0
    assert np.array_equal(pert.pixels, render_perturbed("abc", 7).pixels)


def test_zero_perturbation_is_identity():
    off = PerturbConfig.preset("off")
    for seed in range(5):
        assert np.array_equal(render_perturbed("zq81", seed, off).pixels, render_clean("zq81", seed).pixels)


def test_image_sample_validation():
    with pytest.raises(ValueError):
        datagen.ImageSample(np.full((32, 100), 1.5), "a", Domain.CLEAN)
    with pytest.raises(ValueError):
        datagen.ImageSample(np.zeros((32, 100, 3)), "a", Domain.CLEAN)


# ---------------------------------------------------------------------------
# corpus


def test_small_corpus_counts_and_disjointness(tmp_path):
    ms = build_corpus(GenerationConfig(10, 10, 4, 4, seed=1), tmp_path)
    assert {k: len(v) for k, v in ms.items()} == {
        "train_labeled": 10, "train_unlabeled": 10, "test_clean": 4, "test_perturbed": 4}
    answers = {s: (ms[s].answers or ms[s]).labels for s in ms}
    train = set(answers["train_labeled"]) | set(answers["train_unlabeled"])
    test = set(answers["test_clean"]) | set(answers["test_perturbed"])
    assert not train & test
    for m in ms.values():
        for r in m.records:
            assert (tmp_path / r.path).exists()


def test_corpus_is_byte_identical(tmp_path):
    cfg = GenerationConfig(6, 6, 3, 3, seed=9)
    build_corpus(cfg, tmp_path / "a")
    build_corpus(cfg, tmp_path / "b")
    for rel in ["train_labeled.tsv", "train_unlabeled.tsv", "test_clean.tsv", "test_perturbed.tsv",
                "sealed/test_perturbed.tsv", "images/train_unlabeled/000004.png"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_evaluation_only_corpus(tmp_path):
    ms = build_corpus(GenerationConfig(0, 0, 1, 1, seed=2), tmp_path)
    assert len(ms["train_labeled"]) == 0 and len(ms["test_perturbed"]) == 1
    assert DatasetManifest.read(tmp_path / "train_labeled.tsv").records == []


def test_capacity_error():
    with pytest.raises(CapacityError):
        build_corpus(GenerationConfig(30, 20, 0, 0, min_len=1, max_len=1))


def test_perturbed_splits_are_sealed(tmp_path):
    build_corpus(GenerationConfig(5, 5, 3, 3, seed=4), tmp_path)
    for split in ("train_unlabeled", "test_perturbed"):
        text = (tmp_path / f"{split}.tsv").read_text()
        m = DatasetManifest.read(tmp_path / f"{split}.tsv")
        assert all(lbl is None for lbl in m.labels)
        assert all(line.split("\t")[1] == "-" for line in text.splitlines()[1:])
        answers = load_answers(tmp_path, split)
        assert all(answers.labels)
    assert all(DatasetManifest.read(tmp_path / "train_labeled.tsv").labels)
    assert not (tmp_path / "sealed" / "train_labeled.tsv").exists()
    with pytest.raises(FileNotFoundError):
        load_answers(tmp_path, "test_clean")


def test_manifest_header(tmp_path):
    build_corpus(GenerationConfig(2, 2, 1, 1, seed=11), tmp_path)
    header = (tmp_path / "train_labeled.tsv").read_text().splitlines()[0]
    assert header.startswith("#ccr-seq-manifest v1 seed=11")
    first = (tmp_path / "train_labeled.tsv").read_text().splitlines()[1].split("\t")
    assert first[0] == "images/train_labeled/000000.png" and first[2] == "CLEAN"


def test_regeneration_is_bit_exact(tmp_path):
    build_corpus(GenerationConfig(4, 4, 2, 2, seed=5, perturb="strong"), tmp_path)
    for split in datagen.SPLITS:
        m = DatasetManifest.read(tmp_path / f"{split}.tsv")
        answers = load_answers(tmp_path, split) if any(lbl is None for lbl in m.labels) else None
        assert np.array_equal(regenerate(m, answers), m.load_pixels())


def test_in_domain_labeled_split_is_perturbed(tmp_path):
    ms = build_corpus(GenerationConfig(3, 3, 1, 1, seed=6, labeled_domain=Domain.PERTURBED), tmp_path)
    assert all(r.domain is Domain.PERTURBED and r.label for r in ms["train_labeled"].records)


def test_malformed_manifest_rejected(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("not a header\n")
    with pytest.raises(ValueError):
        DatasetManifest.read(p)
    p.write_text("#ccr-seq-manifest v1 seed=0\nonly\ttwo\n")
    with pytest.raises(ValueError):
        DatasetManifest.read(p)


def test_datagen_cli(tmp_path):
    assert datagen.main(["--out", str(tmp_path), "--labeled", "3", "--unlabeled", "2", "--test", "1",
                         "--seed", "8", "--perturb-strength", "off"]) == 0
    assert len(DatasetManifest.read(tmp_path / "train_unlabeled.tsv")) == 2
    assert "perturb=off" in (tmp_path / "test_perturbed.tsv").read_text().splitlines()[0]
