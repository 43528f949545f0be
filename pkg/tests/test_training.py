import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import day
from ehrfuse.augmentation import MaskingConfig, MlmConfig
from ehrfuse.encoder import ModelConfig, TextEncoder
from ehrfuse.errors import DimensionMismatch, NonFiniteGradient, NoPositives
from ehrfuse.labeling import Tagger
from ehrfuse.records import FusedEntry, Source
from ehrfuse.samples import EncodedSample, plain_samples
from ehrfuse.tokenizer import CLS, MASK, N_SPECIAL, SEP, SPECIALS, build_vocab
from ehrfuse.training import (
    AdamWState,
    FoldAssignment,
    TrainConfig,
    adamw_step,
    lr_schedule,
    mlm_loss,
    positive_weights,
    run_finetuning,
    run_pretraining,
    stratified_folds,
    weighted_bce_loss,
)
from oracles import cross_entropy_mp, weighted_bce_mp

CLS_ID, SEP_ID, MASK_ID = (SPECIALS.index(t) for t in (CLS, SEP, MASK))

# -- losses -------------------------------------------------------------------


def test_positive_weights():
    Y = np.array([[1]] * 10 + [[0]] * 90)
    assert positive_weights(Y).tolist() == [9.0]
    assert positive_weights(np.array([[1], [0]])).tolist() == [1.0]
    with pytest.raises(NoPositives):
        positive_weights(np.zeros((4, 1)))
    with pytest.warns(RuntimeWarning):
        assert positive_weights(np.zeros((4, 1)), rho_max=50).tolist() == [50.0]
    assert positive_weights(Y, rho_max=5).tolist() == [5.0]


def test_loss_examples():
    ln2 = float(weighted_bce_loss([0.0], [1], [1], [1.0]))
    assert math.isclose(ln2, math.log(2), rel_tol=1e-12)
    assert float(weighted_bce_loss([3.0, -2.0], [1, 0], [0, 0], [2.0, 1.0])) == 0.0
    v = float(weighted_bce_loss([2.0, -1.0], [1, 0], [1, 1], [3.0, 1.0]))
    assert abs(v - 0.347023) < 1e-5


def test_loss_dimension_errors():
    with pytest.raises(DimensionMismatch):
        weighted_bce_loss([[0.0, 1.0]], [[1, 0, 0]], [[1, 1]], [1.0, 1.0])
    with pytest.raises(DimensionMismatch):
        weighted_bce_loss([[0.0, 1.0]], [[1, 0]], [[1, 1]], [1.0])


finite = st.floats(-20, 20, allow_nan=False)


@given(st.integers(1, 4), st.integers(1, 4), st.data())
def test_loss_matches_high_precision(B, D, data):
    z = data.draw(arrays(np.float64, (B, D), elements=finite))
    y = data.draw(arrays(np.int64, (B, D), elements=st.integers(0, 1)))
    w = data.draw(arrays(np.int64, (B, D), elements=st.integers(0, 1)))
    rho = data.draw(arrays(np.float64, (D,), elements=st.floats(0.1, 50)))
    assert abs(float(weighted_bce_loss(z, y, w, rho)) - weighted_bce_mp(z, y, w, rho)) < 1e-8


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.int64, (3, 4), elements=st.integers(0, 1)))
def test_reduces_to_plain_bce(z, y):
    plain = torch.nn.functional.binary_cross_entropy_with_logits(torch.tensor(z), torch.tensor(y, dtype=torch.float64))
    assert math.isclose(float(weighted_bce_loss(z, y, np.ones_like(y), np.ones(4))), float(plain), abs_tol=1e-12)


@given(arrays(np.float64, (2, 3), elements=finite), st.floats(0.5, 10))
def test_doubling_rho_increases_loss(z, rho):
    y = np.array([[1, 0, 1], [1, 1, 0]])
    w = np.ones_like(y)
    a = float(weighted_bce_loss(z, y, w, np.full(3, rho)))
    b = float(weighted_bce_loss(z, y, w, np.full(3, 2 * rho)))
    assert b > a


@given(arrays(np.float64, (2, 3), elements=finite))
def test_stable_form_matches_naive(z):
    y = np.array([[1, 0, 1], [0, 1, 0]])
    rho = np.array([2.0, 0.5, 4.0])
    s = 1 / (1 + np.exp(-z))
    naive = -(rho * y * np.log(s) + (1 - y) * np.log(1 - s)).mean(axis=1).mean()
    # the naive form itself carries ~1e-7 relative cancellation error at |z| = 20
    assert math.isclose(float(weighted_bce_loss(z, y, np.ones_like(y), rho)), naive, rel_tol=1e-6, abs_tol=1e-9)


def test_mlm_loss_examples():
    logits = torch.zeros(3, 100, dtype=torch.float64)
    assert math.isclose(float(mlm_loss(logits, [4, -100, 7])), math.log(100), rel_tol=1e-12)
    onehot = torch.eye(5, dtype=torch.float64)[[1, 3]] * 1e6
    assert float(mlm_loss(onehot, [1, 3])) < 1e-9
    with pytest.warns(RuntimeWarning):
        assert float(mlm_loss(logits, [-100, -100, -100])) == 0.0


@given(arrays(np.float64, (4, 6), elements=st.floats(-30, 30)), st.lists(st.integers(-1, 5), min_size=4, max_size=4))
def test_mlm_loss_oracle(logits, raw):
    labels = [l if l >= 0 else -100 for l in raw]
    if all(l == -100 for l in labels):
        labels[0] = 0
    kept = [(row, l) for row, l in zip(logits, labels) if l != -100]
    expected = sum(cross_entropy_mp(row, l) for row, l in kept) / len(kept)
    assert abs(float(mlm_loss(torch.tensor(logits), labels)) - expected) < 1e-8


# -- optimizer ----------------------------------------------------------------


def test_lr_schedule():
    assert lr_schedule(0, 100, 1e-3, 0.1) == 0.0
    assert math.isclose(lr_schedule(10, 100, 1e-3, 0.1), 1e-3)
    assert math.isclose(lr_schedule(55, 100, 1e-3, 0.1), 5e-4)
    assert lr_schedule(100, 100, 1e-3, 0.1) == 0.0


@given(st.integers(1, 500), st.floats(0.0, 1.0))
def test_lr_bounded(total, warm):
    for s in range(0, total + 1, max(1, total // 7)):
        assert 0.0 <= lr_schedule(s, total, 0.01, warm) <= 0.01 + 1e-15


def test_adamw_examples():
    p = {"w": torch.tensor([1.0], dtype=torch.float64)}
    adamw_step(p, {"w": torch.zeros(1, dtype=torch.float64)}, AdamWState(), lr=0.1)
    assert p["w"].item() == 1.0
    p = {"w": torch.tensor([0.0], dtype=torch.float64)}
    adamw_step(p, {"w": torch.ones(1, dtype=torch.float64)}, AdamWState(), lr=0.1)
    assert abs(p["w"].item() - (-0.1 / (1 + 1e-8))) < 1e-15
    p = {"w": torch.tensor([2.0], dtype=torch.float64), "b.bias": torch.tensor([2.0], dtype=torch.float64)}
    zero = {k: torch.zeros(1, dtype=torch.float64) for k in p}
    adamw_step(p, zero, AdamWState(), lr=0.1, weight_decay=0.5)
    assert math.isclose(p["w"].item(), 2.0 * (1 - 0.1 * 0.5)) and p["b.bias"].item() == 2.0
    with pytest.raises(NonFiniteGradient):
        adamw_step(p, {k: torch.tensor([math.nan], dtype=torch.float64) for k in p}, AdamWState(), lr=0.1)


def test_adamw_matches_torch():
    torch.manual_seed(0)
    w = torch.randn(5, 3, dtype=torch.float64)
    ref = w.clone().requires_grad_(True)
    opt = torch.optim.AdamW([ref], lr=0.01, weight_decay=0.1, eps=1e-8)
    state = AdamWState()
    params = {"w": w}
    for i in range(10):
        g = torch.randn(5, 3, dtype=torch.float64)
        ref.grad = g.clone()
        opt.step()
        adamw_step(params, {"w": g}, state, lr=0.01, weight_decay=0.1)
    assert torch.allclose(params["w"], ref.detach(), atol=1e-12)


# -- folds --------------------------------------------------------------------


def test_folds_small_example():
    Y = np.zeros((100, 1), int)
    Y[:10] = 1
    f = stratified_folds(Y, 5, seed=0)
    assert f.sizes().tolist() == [20] * 5
    assert [int(Y[f.folds == k].sum()) for k in range(5)] == [2] * 5


@given(st.integers(5, 300), st.integers(1, 4), st.integers(0, 2**31), st.integers(3, 7))
def test_fold_sizes_balanced(n, D, seed, k):
    if n < k:
        return
    Y = np.random.default_rng(seed).random((n, D)) < 0.15
    f = stratified_folds(Y, k, seed)
    sizes = f.sizes()
    assert sizes.max() - sizes.min() <= 1 and sizes.sum() == n
    for d in range(D):
        per = np.bincount(f.folds[Y[:, d]], minlength=k)
        assert per.max() - per.min() <= max(2, 0.5 * Y[:, d].sum() / k + 1)


def test_fold_roles():
    f = FoldAssignment(np.zeros(5, int), 5)
    assert f.roles(2) == {"train": (0, 1, 4), "val": 2, "test": 3}
    assert f.roles(4)["test"] == 0 and f.roles(4)["val"] == 4
    tests = [f.roles(i)["test"] for i in range(5)]
    assert sorted(tests) == list(range(5))


def test_folds_deterministic_and_roundtrip(tmp_path):
    Y = np.random.default_rng(1).random((57, 3)) < 0.2
    a = stratified_folds(Y, 5, 3, [f"p{i}" for i in range(57)])
    b = stratified_folds(Y, 5, 3, [f"p{i}" for i in range(57)])
    assert (a.folds == b.folds).all()
    a.write(tmp_path / "f.tsv")
    back = FoldAssignment.read(tmp_path / "f.tsv")
    assert (back.folds == a.folds).all() and back.patient_ids == a.patient_ids


# -- loops --------------------------------------------------------------------


def toy_cohort(small_catalog, small_defs, n=60, seed=0):
    rng = np.random.default_rng(seed)
    keys = sorted(c.key for c in small_catalog)
    tagger = Tagger(small_defs)
    out = []
    for i in range(n):
        codes = [keys[j] for j in rng.integers(0, len(keys), rng.integers(5, 12))]
        seq = [FusedEntry(small_catalog[k], day(t), Source.GP if k[0] == "READ2" else Source.HOSPITAL)
               for t, k in enumerate(codes)]
        out.append(tagger(f"p{i:03d}", seq))
    return out


def small_model(vocab, D=2):
    cfg = ModelConfig(vocab_size=len(vocab), max_tokens=64, hidden_dim=16, num_layers=1, num_heads=2,
                      feedforward_dim=32, num_phenotypes=D, dropout_rate=0.1)
    return TextEncoder(cfg, seed=0)


def test_pretraining_decreases_and_is_deterministic(small_catalog, small_defs):
    cohort = toy_cohort(small_catalog, small_defs)
    vocab = build_vocab(small_catalog.descriptions(), 200)
    samples = plain_samples(cohort, vocab, 64)
    cfg = TrainConfig(batch_size=8, mlm_lr=3e-3, mlm_epochs=6, eval_every=1.0, patience=100,
                      mlm_val_fraction=0.2, warmup_proportion=0.1)
    ck1, log1 = run_pretraining(samples, small_model(vocab), cfg, MlmConfig(seed=1))
    ck2, log2 = run_pretraining(samples, small_model(vocab), cfg, MlmConfig(seed=1))
    assert log1.records == log2.records
    assert all(np.array_equal(ck1.tensors[k], ck2.tensors[k]) for k in ck1.tensors)
    train = log1.losses("train")
    assert train[-1] < train[0]
    assert min(log1.losses("val")) < log1.losses("val")[0]
    assert {"step", "epoch", "split", "loss", "lr"} <= set(log1.records[0])


def test_pretraining_max_steps(small_catalog, small_defs):
    cohort = toy_cohort(small_catalog, small_defs, n=20)
    vocab = build_vocab(small_catalog.descriptions(), 200)
    cfg = TrainConfig(batch_size=4, mlm_lr=1e-3, mlm_epochs=5, mlm_val_fraction=0.0)
    ck, log = run_pretraining(plain_samples(cohort, vocab, 64), small_model(vocab), cfg, max_steps=3)
    assert ck.step == 3


def test_finetuning_outputs(small_catalog, small_defs):
    cohort = toy_cohort(small_catalog, small_defs, n=80, seed=1)
    vocab = build_vocab(small_catalog.descriptions(), 200)
    Y = np.stack([t.y for t in cohort])
    folds = stratified_folds(Y, 5, 0, [t.patient_id for t in cohort])
    from ehrfuse.encoder import Checkpoint
    pre = Checkpoint.from_model(small_model(vocab))
    cfg = TrainConfig(batch_size=8, cls_lr=1e-3, cls_epochs=2, eval_every=0.5)
    masking = MaskingConfig(seed=4)
    corpus = small_catalog.descriptions()
    r1 = run_finetuning(cohort, folds, 4, cfg, pre, vocab, masking, corpus)
    r2 = run_finetuning(cohort, folds, 4, cfg, pre, vocab, masking, corpus)
    assert r1.roles["test"] == 0
    test_ids = [cohort[i].patient_id for i in folds.members(0)]
    assert list(r1.predictions.patient_ids) == test_ids
    assert (r1.predictions.folds == 0).all()
    assert np.array_equal(r1.predictions.probabilities, r2.predictions.probabilities)
    assert ((r1.predictions.probabilities > 0) & (r1.predictions.probabilities < 1)).all()
    train_y = Y[folds.members(r1.roles["train"])]
    assert np.allclose(r1.rho, positive_weights(train_y))


def toy_sentences(n=50, length=8, content=40, seed=0):
    rng = np.random.default_rng(seed)
    vocab_size = N_SPECIAL + content
    out = []
    for i in range(n):
        ids = np.array([CLS_ID, *rng.integers(N_SPECIAL, vocab_size, length), SEP_ID], np.int64)
        out.append(EncodedSample(f"s{i:02d}", 0, 0, None, ids, np.ones_like(ids),
                                 np.zeros(1, np.uint8), np.zeros(1, np.uint8), np.ones(1)))
    return out, vocab_size


def toy_encoder(vocab_size, hidden=64):
    cfg = ModelConfig(vocab_size=vocab_size, max_tokens=16, hidden_dim=hidden, num_layers=2,
                      num_heads=2, feedforward_dim=2 * hidden, num_phenotypes=1, dropout_rate=0.0)
    return TextEncoder(cfg, seed=0)


def overfit_cfg(epochs):
    return TrainConfig(batch_size=10, mlm_lr=2e-3, mlm_epochs=epochs, mlm_val_fraction=0.0,
                       warmup_proportion=0.05, weight_decay=0.0, eval_every=1.0)


def test_pretraining_200_steps_descends():
    corpus, V = toy_sentences()
    ck, log = run_pretraining(corpus, toy_encoder(V), overfit_cfg(40), MlmConfig(seed=0))
    assert ck.step == 200
    train = log.losses("train")
    assert train[-1] < train[0]


def test_overfit_recovers_masked_tokens():
    corpus, V = toy_sentences()
    ck, _ = run_pretraining(corpus, toy_encoder(V), overfit_cfg(300), MlmConfig(seed=0))
    model = ck.to_model()
    model.eval()
    hit = total = 0
    with torch.no_grad():
        for s in corpus:
            for j in range(1, len(s.ids) - 1):
                x = torch.from_numpy(s.ids.copy())[None]
                x[0, j] = MASK_ID
                pred = model.mlm_logits(model.encode(x, torch.ones_like(x)))[0, j].argmax()
                hit += int(pred) == s.ids[j]
                total += 1
    assert hit / total > 0.9
