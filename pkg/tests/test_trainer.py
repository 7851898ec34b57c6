import dataclasses
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ccrseq import augment, charset
from ccrseq.augment import AugmentKind, AugmentPolicy, Augmenter
from ccrseq.config import TrainConfig, Variant, apply_variant, dump_config, parse_config
from ccrseq.losses import LossConfig
from ccrseq.recognizer import Recognizer, decode_training, load_checkpoint, make_target
from ccrseq.trainer import (
    IndexStream,
    TraceWriter,
    TrainData,
    Trainer,
    TrainingDiverged,
    collapse_report,
    detect_collapse,
    ema_update,
    make_batches,
    mean_pairwise_distance,
    run_training,
)

from . import oracles


def small_cfg(**kw):
    base = dict(batch_labeled=4, batch_unlabeled=4, steps=6, log_every=2, eval_every=2, probe_size=0,
                seed=5, dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data(tiny_corpus):
    return TrainData.from_corpus(tiny_corpus)


# ---------------------------------------------------------------------------
# EMA


def _scalar_module(v):
    m = torch.nn.Linear(1, 1, bias=False).double()
    with torch.no_grad():
        m.weight.fill_(v)
    return m


def test_ema_exact_values():
    t, o = _scalar_module(1.0), _scalar_module(0.0)
    ema_update(t, o, 0.999)
    assert t.weight.item() == 0.999
    ema_update(t, o, 1.0)
    assert t.weight.item() == 0.999
    ema_update(t, o, 0.0)
    assert t.weight.item() == 0.0


def test_ema_alpha_one_is_bit_exact_fixed_point():
    online, other = Recognizer(), Recognizer()
    target = make_target(other)
    before = {k: v.clone() for k, v in target.state_dict().items()}
    ema_update(target, online, 1.0)
    assert all(torch.equal(before[k], v) for k, v in target.state_dict().items())


def test_ema_rejects_mismatch_and_bad_alpha():
    with pytest.raises(ValueError):
        ema_update(Recognizer(dim=64), Recognizer(), 0.5)
    with pytest.raises(ValueError):
        ema_update(Recognizer(), Recognizer(), 1.5)


@settings(max_examples=50)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(0, 1))
def test_ema_matches_oracle_and_stays_in_hull(values, alpha):
    t = torch.nn.Linear(len(values), 1, bias=False).double()
    o = torch.nn.Linear(len(values), 1, bias=False).double()
    rng = np.random.default_rng(len(values))
    online_vals = rng.uniform(-10, 10, size=len(values))
    with torch.no_grad():
        t.weight.copy_(torch.tensor([values], dtype=torch.float64))
        o.weight.copy_(torch.from_numpy(online_vals).unsqueeze(0))
    ema_update(t, o, alpha)
    want = oracles.ema(values, online_vals.tolist(), alpha)
    got = t.weight[0].tolist()
    assert got == pytest.approx(want, rel=1e-12, abs=1e-12)
    for g, a, b in zip(got, values, online_vals):
        assert min(a, b) - 1e-12 <= g <= max(a, b) + 1e-12


# ---------------------------------------------------------------------------
# train_step contracts


def test_target_changes_only_through_ema(data):
    cfg = small_cfg(steps=100, alpha=0.9)
    tr = Trainer(cfg)
    streams = (IndexStream(len(data.labeled_texts), 4, cfg.seed, 11), IndexStream(len(data.unlabeled_images), 4, cfg.seed, 12))
    for step in range(100):
        lab, unl = make_batches(data, cfg, step, streams)
        before = {k: v.clone() for k, v in tr.state.target.state_dict().items()}
        seen = {}

        def hook(trainer):
            seen["pre_ema"] = {k: v.clone() for k, v in trainer.state.target.state_dict().items()}
            seen["online"] = {k: v.clone() for k, v in trainer.state.online.state_dict().items()}

        tr.train_step(lab, unl, before_ema=hook)
        assert all(torch.equal(before[k], seen["pre_ema"][k]) for k in before)
        after = tr.state.target.state_dict()
        for k in before:
            if before[k].is_floating_point():
                want = before[k] * 0.9 + seen["online"][k] * (1 - 0.9)
                torch.testing.assert_close(after[k], want, rtol=0, atol=1e-15)
            else:
                assert torch.equal(after[k], before[k])


def test_alpha_one_freezes_target(data):
    cfg = small_cfg(steps=20, alpha=1.0)
    tr = Trainer(cfg)
    frozen = {k: v.clone() for k, v in tr.state.target.state_dict().items()}
    streams = (IndexStream(len(data.labeled_texts), 4, cfg.seed, 11), IndexStream(len(data.unlabeled_images), 4, cfg.seed, 12))
    for step in range(20):
        tr.train_step(*make_batches(data, cfg, step, streams))
    assert all(torch.equal(frozen[k], v) for k, v in tr.state.target.state_dict().items())
    assert any(not torch.equal(frozen[k], v) for k, v in tr.state.online.state_dict().items())


def test_target_is_not_optimized(data):
    tr = Trainer(small_cfg())
    opt_ids = {id(p) for g in tr.state.optimizer.param_groups for p in g["params"]}
    assert not opt_ids & {id(p) for p in tr.state.target.parameters()}
    assert {id(p) for p in tr.state.projection.parameters()} <= opt_ids
    assert isinstance(tr.state.optimizer, torch.optim.AdamW)
    assert tr.state.optimizer.param_groups[0]["weight_decay"] == 0.01


def test_weight_decay_is_decoupled():
    # a parameter with zero gradient shrinks by exactly (1 - lr * wd) under decoupled decay
    p = torch.nn.Parameter(torch.tensor([2.0], dtype=torch.float64))
    opt = torch.optim.AdamW([p], lr=0.1, weight_decay=0.01)
    p.grad = torch.zeros_like(p)
    opt.step()
    assert p.item() == pytest.approx(2.0 * (1 - 0.1 * 0.01), rel=1e-15)


def test_loss_breakdown_bookkeeping(data):
    cfg = small_cfg(loss=LossConfig(beta_u=0.0, lambda_cons=0.7, lambda_da=0.3))
    tr = Trainer(cfg)
    streams = (IndexStream(len(data.labeled_texts), 4, cfg.seed, 11), IndexStream(len(data.unlabeled_images), 4, cfg.seed, 12))
    for step in range(3):
        br = tr.train_step(*make_batches(data, cfg, step, streams))
        assert br.l_total == pytest.approx(br.l_reg + 0.7 * br.l_cons + 0.3 * br.l_da, abs=1e-9)
        assert br.l_cons > 0 and br.l_da > 0 and br.filtered_fraction == 0.0


def test_augmentation_routing(data):
    audit = []
    cfg = small_cfg()
    aug = Augmenter(AugmentPolicy(AugmentKind.WEAK), AugmentPolicy(AugmentKind.STRONG), audit)
    tr = Trainer(cfg, augmenter=aug)
    streams = (IndexStream(len(data.labeled_texts), 4, cfg.seed, 11), IndexStream(len(data.unlabeled_images), 4, cfg.seed, 12))
    tr.train_step(*make_batches(data, cfg, 0, streams))
    assert audit == [("labeled", AugmentKind.STRONG, 4), ("target", AugmentKind.WEAK, 4),
                     ("online", AugmentKind.STRONG, 4)]


def test_empty_unlabeled_batch_is_supervised_step(data):
    cfg = small_cfg()
    empty = dataclasses.replace(data, unlabeled_images=data.unlabeled_images[:0])
    tr = Trainer(cfg)
    streams = (IndexStream(len(data.labeled_texts), 4, cfg.seed, 11), IndexStream(0, 4, cfg.seed, 12))
    br = tr.train_step(*make_batches(empty, cfg, 0, streams))
    assert br.l_cons == 0.0 and br.l_da == 0.0 and br.l_total == br.l_reg


def test_index_stream_is_pure():
    a, b = IndexStream(10, 4, 1, 11), IndexStream(10, 4, 1, 11)
    seq = [a.batch_at(k).tolist() for k in range(6)]
    assert seq == [b.batch_at(k).tolist() for k in reversed(range(6))][::-1]
    flat = sum(seq[:5], [])[:10]
    assert sorted(flat) == list(range(10))


# ---------------------------------------------------------------------------
# supervised equivalence against an independent loop


def _oracle_supervised_losses(data, cfg, steps):
    """Minimal supervised trainer sharing only the model class and seeds."""
    torch.manual_seed(cfg.seed)
    model = Recognizer().double()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.max_lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.max_lr, total_steps=cfg.steps)
    n = len(data.labeled_texts)
    losses = []
    for step in range(steps):
        pos = np.arange(step * cfg.batch_labeled, (step + 1) * cfg.batch_labeled)
        idx = [np.random.default_rng([cfg.seed, 11, p // n]).permutation(n)[p % n] for p in pos]
        seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence([cfg.seed, step, 0]).spawn(len(idx))]
        x = np.stack([augment.strong_pixels(data.labeled_images[i].astype(np.float32) / np.float32(255.0), s)
                      for i, s in zip(idx, seeds)])
        texts = [data.labeled_texts[i] for i in idx]
        T = max(len(t) for t in texts) + 1
        gt = torch.full((len(texts), T), charset.PAD)
        ctx = torch.full((len(texts), T), charset.PAD)
        for b, t in enumerate(texts):
            ids = [charset.CHARACTERS.index(c) for c in t]
            gt[b, :len(t) + 1] = torch.tensor(ids + [charset.EOS])
            ctx[b, :len(t) + 1] = torch.tensor([charset.BOS] + ids)
        logits = decode_training(model, model.encode(torch.from_numpy(x).double()), ctx).dists.logits
        logp = torch.log_softmax(logits, -1)
        per = []
        for b, t in enumerate(texts):
            per.append(-sum(logp[b, k, gt[b, k]] for k in range(len(t) + 1)) / (len(t) + 1))
        loss = torch.stack(per).mean()
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(list(model.parameters()), cfg.grad_clip)
        opt.step()
        if step + 1 < cfg.steps:
            sched.step()
        losses.append(loss.item())
    return losses


def test_full_variant_without_unsupervised_terms_equals_supervised_loop(data):
    cfg = small_cfg(steps=10, alpha=1.0, loss=LossConfig(lambda_cons=0.0, lambda_da=0.0))
    tr = Trainer(cfg)
    streams = (IndexStream(len(data.labeled_texts), 4, cfg.seed, 11), IndexStream(len(data.unlabeled_images), 4, cfg.seed, 12))
    got = [tr.train_step(*make_batches(data, cfg, s, streams)).l_reg for s in range(10)]
    want = _oracle_supervised_losses(data, cfg, 10)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-9)


# ---------------------------------------------------------------------------
# collapse detection


def test_collapse_report_constant_and_distinct():
    rep = collapse_report(["aaa"] * 60, step=3)
    assert rep.unique_fraction == pytest.approx(1 / 60) and rep.collapsed
    assert rep.mean_pairwise_distance == 0.0
    rep = collapse_report([f"w{i}" for i in range(60)])
    assert rep.unique_fraction == 1.0 and not rep.collapsed


@settings(max_examples=30, deadline=None)
@given(st.lists(st.text(alphabet="abc", max_size=4), min_size=2, max_size=12))
def test_pairwise_distance_matches_oracle(strings):
    n = len(strings)
    want = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            m = max(len(strings[i]), len(strings[j]))
            want += oracles.levenshtein(strings[i], strings[j]) / m if m else 0.0
    want /= n * (n - 1) / 2
    assert mean_pairwise_distance(strings) == pytest.approx(want, abs=1e-12)
    assert 0.0 <= mean_pairwise_distance(strings) <= 1.0


def test_detect_collapse_rigged_and_random(data):
    m = Recognizer()
    rep = detect_collapse(m, data.unlabeled_images[:60])
    assert 0 <= rep.unique_fraction <= 1 and 0 <= rep.mean_pairwise_distance <= 1
    with torch.no_grad():
        m.classifier.weight.zero_()
        m.classifier.bias.zero_()
        m.classifier.bias[charset.EOS] = 20.0
    rep = detect_collapse(m, data.unlabeled_images[:60])
    assert rep.unique_fraction == pytest.approx(1 / 60) and rep.collapsed
    with pytest.raises(ValueError):
        detect_collapse(m, data.unlabeled_images[:49])


# ---------------------------------------------------------------------------
# runs


def test_zero_steps_returns_initial_checkpoint(tiny_corpus, tmp_path):
    res = run_training(small_cfg(steps=0), tiny_corpus, out_dir=tmp_path)
    assert res.trace == []
    assert (tmp_path / "trace.jsonl").read_text() == ""
    torch.manual_seed(5)
    init = Recognizer().double()
    ck = load_checkpoint(res.checkpoint)
    assert all(torch.equal(a, b) for a, b in zip(init.state_dict().values(), ck.online.state_dict().values()))


def test_identical_runs_write_identical_traces(tiny_corpus, tmp_path):
    cfg = small_cfg(steps=4, dtype="float32", probe_size=60)
    run_training(cfg, tiny_corpus, out_dir=tmp_path / "a")
    run_training(cfg, tiny_corpus, out_dir=tmp_path / "b")
    for name in ("trace.jsonl", "metrics.tsv", "config.ini"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_trace_schema(tiny_corpus, tmp_path):
    res = run_training(small_cfg(steps=4, probe_size=60), tiny_corpus, out_dir=tmp_path)
    recs = [json.loads(line) for line in (tmp_path / "trace.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [2, 4]
    for r in recs:
        assert list(r)[:len(TraceWriter.FIELDS)] == list(TraceWriter.FIELDS)
        assert 0 <= r["test_clean_acc"] <= 1 and 0 <= r["unique_fraction"] <= 1
    assert set(res.metrics.correct) == {"test_clean", "test_perturbed"}


class _PoisonAugmenter(Augmenter):
    def __call__(self, images, seeds, kind, purpose):
        out = super().__call__(images, seeds, kind, purpose)
        if purpose == "labeled":
            out[:] = np.nan
        return out


def test_nan_loss_aborts_with_dump(tiny_corpus, tmp_path):
    cfg = small_cfg()
    aug = _PoisonAugmenter(AugmentPolicy(AugmentKind.WEAK), AugmentPolicy(AugmentKind.STRONG))
    with pytest.raises(TrainingDiverged, match="l_reg"):
        run_training(cfg, tiny_corpus, out_dir=tmp_path, augmenter=aug)
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert dump["step"] == 0 and len(dump["labeled_seeds"]) == 4


def test_unlabeled_manifest_with_labels_is_refused(tmp_path):
    from ccrseq.datagen import GenerationConfig, build_corpus

    build_corpus(GenerationConfig(2, 2, 1, 1, seed=1, perturb="off"), tmp_path)
    text = (tmp_path / "train_unlabeled.tsv").read_text().replace("\t-\t", "\tleak\t")
    (tmp_path / "train_unlabeled.tsv").write_text(text)
    with pytest.raises(ValueError, match="exposes labels"):
        TrainData.from_corpus(tmp_path)


# ---------------------------------------------------------------------------
# configuration


def test_config_round_trip_and_unknown_key():
    cfg = TrainConfig(alpha=0.99, steps=123, loss=LossConfig(dist="CE", tau=0.5))
    back, _ = parse_config(dump_config(cfg))
    assert back.to_dict() == {**cfg.to_dict(), "variant": back.variant}
    with pytest.raises(KeyError):
        parse_config("train.bogus = 1")
    cfg, _ = parse_config("augment.strong.n = 3\nloss.dist = mse\n")
    assert cfg.strong_n == 3 and cfg.loss.dist.value == "MSE"


def test_variants():
    base = TrainConfig()
    sup = apply_variant(base, Variant.SUPERVISED_ONLY)
    assert not sup.use_unlabeled and sup.loss.lambda_cons == 0 and sup.loss.lambda_da == 0
    stress = apply_variant(base, Variant.SCR_STRESS)
    assert (stress.consistency_mode, stress.use_projection, stress.use_ema, stress.weight_decay) == ("scr", False, False, 0.0)
    assert apply_variant(base, Variant.NO_EMA).effective_alpha == 0.0
    units = [apply_variant(base, v) for v in ("CCR_BARE", "PROJ", "PROJ_WD", "PROJ_WD_EMA", "FULL")]
    assert [(u.use_projection, u.weight_decay > 0, u.use_ema, u.loss.lambda_da > 0) for u in units] == [
        (False, False, False, False), (True, False, False, False), (True, True, False, False),
        (True, True, True, False), (True, True, True, True)]
    assert base.loss.lambda_da == 0.01  # the base config is not mutated
