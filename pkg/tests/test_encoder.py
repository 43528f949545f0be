import math

import numpy as np
import pytest
import torch

from ehrfuse.encoder import (
    Checkpoint,
    ModelConfig,
    TextEncoder,
    load_checkpoint,
    parameter_gradients,
    save_checkpoint,
)
from ehrfuse.errors import ConfigMismatch, CorruptCheckpoint, GraphNotRecorded, ShapeMismatch
from ehrfuse.training import mlm_loss, weighted_bce_loss
from oracles import finite_difference_check, sample_entries

CFG = ModelConfig(vocab_size=30, max_tokens=12, hidden_dim=16, num_layers=2, num_heads=2,
                  feedforward_dim=32, num_phenotypes=3, dropout_rate=0.1)


def batch(seed=0, B=3, n=10):
    g = torch.Generator().manual_seed(seed)
    ids = torch.randint(5, CFG.vocab_size, (B, n), generator=g)
    ids[:, 0] = 2
    mask = torch.ones(B, n, dtype=torch.long)
    mask[1, 7:] = 0
    mask[2, 4:] = 0
    ids[mask == 0] = 0
    return ids, mask


def test_shapes_and_attention():
    m = TextEncoder(CFG, seed=1)
    ids, mask = batch()
    h, attns = m.encode(ids, mask, return_attention=True)
    assert h.shape == (3, 10, 16)
    assert len(attns) == 2
    for a in attns:
        assert a.shape == (3, 2, 10, 10)
        assert torch.allclose(a.sum(-1), torch.ones(3, 2, 10))
        assert (a[2, :, :, 4:] == 0).all()
    z, p = m.classify(h)
    assert z.shape == (3, 3) and ((p > 0) & (p < 1)).all()
    assert m.mlm_logits(h).shape == (3, 10, 30)


def test_shape_errors():
    m = TextEncoder(CFG)
    ids, mask = batch()
    with pytest.raises(ShapeMismatch):
        m.encode(ids, mask[:, :5])
    with pytest.raises(ShapeMismatch):
        m.encode(torch.full((1, 13), 5), torch.ones(1, 13, dtype=torch.long))
    with pytest.raises(ShapeMismatch):
        m.encode(torch.tensor([[2, 99]]), torch.ones(1, 2, dtype=torch.long))


def test_padding_invariance():
    m = TextEncoder(CFG, seed=2).double()
    ids, mask = batch()
    h = m.encode(ids, mask)
    ids2 = ids.clone()
    ids2[mask == 0] = 17
    h2 = m.encode(ids2, mask)
    real = mask.bool()
    assert (h - h2)[real].abs().max() < 1e-9


def test_decoder_values():
    m = TextEncoder(CFG, seed=3).double()
    ids, mask = batch()
    with torch.no_grad():
        m.decoder.weight.zero_()
        m.decoder.bias.zero_()
    _, p = m.classify(m.encode(ids, mask))
    assert torch.allclose(p, torch.full_like(p, 0.5))
    with torch.no_grad():
        m.decoder.bias.fill_(math.log(3))
    _, p = m.classify(m.encode(ids, mask))
    assert torch.allclose(p, torch.full_like(p, 0.75))
    torch.nn.init.normal_(m.decoder.weight)
    h = m.encode(ids, mask)
    z, _ = m.classify(h)
    assert torch.allclose(z, h[:, 0] @ m.decoder.weight.T + m.decoder.bias)


def test_classify_uses_cls_only():
    m = TextEncoder(CFG, seed=4)
    h = torch.randn(2, 6, 16)
    h2 = h.clone()
    h2[:, 1:] = torch.randn(2, 5, 16)
    assert torch.equal(m.classify(h)[0], m.classify(h2)[0])


def test_mlm_softmax():
    m = TextEncoder(CFG, seed=5)
    ids, mask = batch()
    probs = torch.softmax(m.mlm_logits(m.encode(ids, mask)), -1)
    assert torch.allclose(probs.sum(-1), torch.ones(3, 10))


def test_dropout_seeded():
    m = TextEncoder(CFG, seed=6)
    ids, mask = batch()
    a = m.encode(ids, mask, train=True, generator=torch.Generator().manual_seed(9))
    b = m.encode(ids, mask, train=True, generator=torch.Generator().manual_seed(9))
    c = m.encode(ids, mask, train=True, generator=torch.Generator().manual_seed(10))
    assert torch.equal(a, b) and not torch.equal(a, c)
    assert torch.equal(m.encode(ids, mask), m.encode(ids, mask))


def test_seeded_init():
    a, b = TextEncoder(CFG, seed=7), TextEncoder(CFG, seed=7)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_overfit_mlm_recovers_tokens():
    torch.manual_seed(0)
    cfg = ModelConfig(vocab_size=20, max_tokens=8, hidden_dim=16, num_layers=1, num_heads=2,
                      feedforward_dim=32, num_phenotypes=1, dropout_rate=0.0)
    m = TextEncoder(cfg, seed=0)
    ids = torch.tensor([[2, 7, 8, 9, 10, 11, 3]])
    mask = torch.ones_like(ids)
    corrupted = ids.clone()
    corrupted[0, 3] = 4
    labels = torch.full_like(ids, -100)
    labels[0, 3] = 9
    opt = torch.optim.Adam(m.parameters(), lr=1e-2)
    for _ in range(150):
        opt.zero_grad()
        loss = mlm_loss(m.mlm_logits(m.encode(corrupted, mask)).reshape(-1, 20), labels.reshape(-1))
        loss.backward()
        opt.step()
    assert int(m.mlm_logits(m.encode(corrupted, mask))[0, 3].argmax()) == 9


def test_zero_weight_gives_zero_decoder_gradient():
    m = TextEncoder(CFG, seed=8).double()
    ids, mask = batch()
    z = m(ids, mask)
    loss = weighted_bce_loss(z, torch.ones(3, 3), torch.zeros(3, 3), torch.ones(3))
    with pytest.raises(GraphNotRecorded):
        parameter_gradients(loss.detach(), m)
    g = parameter_gradients(loss + 0 * z.sum(), m)
    assert (g["decoder.weight"] == 0).all() and (g["decoder.bias"] == 0).all()
    assert set(g) == {n for n, _ in m.named_parameters()}


def _joint_loss(m, ids, mask):
    y = torch.tensor([[1.0, 0, 1], [0, 0, 1], [1, 1, 0]], dtype=torch.float64)
    omega = torch.tensor([[1.0, 1, 0], [1, 1, 1], [0, 1, 1]], dtype=torch.float64)
    rho = torch.tensor([2.0, 3.0, 0.5], dtype=torch.float64)
    labels = torch.full_like(ids, -100)
    labels[0, 2], labels[1, 5], labels[2, 1] = 6, 11, 29

    def fn():
        h = m.encode(ids, mask)
        z, _ = m.classify(h)
        return weighted_bce_loss(z, y, omega, rho) + mlm_loss(m.mlm_logits(h).reshape(-1, 30),
                                                               labels.reshape(-1))
    return fn


def test_gradient_check_small():
    cfg = ModelConfig(vocab_size=30, max_tokens=12, hidden_dim=16, num_layers=2, num_heads=2,
                      feedforward_dim=32, num_phenotypes=3, dropout_rate=0.0, init_std=0.3)
    m = TextEncoder(cfg, seed=11).double()
    ids, mask = batch()
    entries = sample_entries(m, 4, np.random.default_rng(0))
    assert any(n == "token_embedding" for n, _ in entries)
    assert finite_difference_check(_joint_loss(m, ids, mask), m, entries) < 1e-4


def test_checkpoint_roundtrip(tmp_path):
    m = TextEncoder(CFG, seed=12)
    ck = Checkpoint.from_model(m, step=5, rng_state={"epoch": 1})
    save_checkpoint(ck, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt", expected=CFG)
    assert back.step == 5 and back.rng_state == {"epoch": 1}
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    m2 = back.to_model()
    ids, mask = batch()
    assert torch.equal(m(ids, mask), m2(ids, mask))


def test_checkpoint_errors(tmp_path):
    ck = Checkpoint.from_model(TextEncoder(CFG))
    save_checkpoint(ck, tmp_path / "a.ckpt")
    data = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-7])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "m.ckpt")
    (tmp_path / "x.ckpt").write_bytes(data + b"\0")
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "x.ckpt")
    other = ModelConfig(**{**CFG.__dict__, "hidden_dim": 32})
    with pytest.raises(ConfigMismatch):
        load_checkpoint(tmp_path / "a.ckpt", expected=other)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, hidden_dim=10, num_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=0)
