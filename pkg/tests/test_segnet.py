import numpy as np
import pytest

from vqseg.autodiff import Tensor
from vqseg.errors import ConfigError, DimensionError, NumericalError
from vqseg.metrics import dice_score
from vqseg.segnet import (
    Adam,
    AdamConfig,
    ModelConfig,
    build_model,
    compute_losses,
    config_from_dict,
    augment_batch,
    predict,
    train_epoch,
)
from vqseg.synthdata import CorpusSpec, generate_split


def small(**kw):
    base = dict(levels=3, base_channels=8, num_classes=2, D=32, K=8)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def tiny_corpus():
    return generate_split(CorpusSpec(n_train=8, image_size=32, seed=7), "train")


def test_bottleneck_shape():
    m = build_model(small())
    x = np.random.default_rng(0).random((2, 1, 32, 32)).astype(np.float32)
    out = m(Tensor(x))
    assert out.latent_pre.shape == (2, 32, 8, 8)
    assert out.logits.shape == (2, 2, 32, 32)
    # spatially the bottleneck is strictly coarser than the input
    assert out.latent_pre.shape[2] * out.latent_pre.shape[3] < x.shape[2] * x.shape[3]


def test_vq_disabled_passthrough():
    m = build_model(small(vq_enabled=False))
    out = m(Tensor(np.zeros((1, 1, 16, 16), dtype=np.float32)))
    assert out.latent_post is out.latent_pre and out.quant is None
    assert "codebook" not in m.parameters()


def test_same_seed_same_weights():
    a, b = build_model(small(seed=3)), build_model(small(seed=3))
    pa, pb = a.parameters(), b.parameters()
    assert list(pa) == list(pb)
    for k in pa:
        assert pa[k].data.tobytes() == pb[k].data.tobytes()
    c = build_model(small(seed=4))
    assert c.parameters()["stem.weight"].data.tobytes() != pa["stem.weight"].data.tobytes()


def test_forward_deterministic():
    m = build_model(small())
    x = np.random.default_rng(1).random((2, 1, 16, 16)).astype(np.float32)
    assert m(Tensor(x)).logits.data.tobytes() == m(Tensor(x)).logits.data.tobytes()


def test_zero_head_gives_uniform_softmax():
    m = build_model(small(num_classes=3))
    m.head.weight.data[...] = 0
    m.head.bias.data[...] = 0
    logits = m(Tensor(np.random.default_rng(2).random((1, 1, 16, 16)).astype(np.float32))).logits.data
    np.testing.assert_array_equal(logits, 0.0)


def test_latent_on_codebook_rows_is_unchanged():
    m = build_model(small())
    x = np.random.default_rng(3).random((1, 1, 16, 16)).astype(np.float32)
    e, _ = m.encode(Tensor(x))
    rows = e.data.transpose(0, 2, 3, 1).reshape(-1, 32)
    m.codebook.vectors.data = rows[:8].copy()
    from vqseg.quantiser import quantise

    q = quantise(Tensor(rows[:8].reshape(1, 2, 4, 32).transpose(0, 3, 1, 2).copy()), m.codebook)
    np.testing.assert_array_equal(q.z_q.data.transpose(0, 2, 3, 1).reshape(-1, 32), rows[:8])


def test_strict_invariance_without_skips():
    m = build_model(small(skip_connections=False))
    rng = np.random.default_rng(4)
    x = rng.random((1, 1, 16, 16)).astype(np.float32)
    base = m(Tensor(x))
    xp = np.clip(x + rng.normal(0, 1e-4, x.shape), 0, 1).astype(np.float32)
    other = m(Tensor(xp))
    if np.array_equal(base.quant.indices, other.quant.indices):
        assert base.logits.data.tobytes() == other.logits.data.tobytes()
    # decoding the same code map always gives the same logits
    z = base.quant.z_q
    assert m.decode(z).data.tobytes() == base.logits.data.tobytes()


def test_config_errors():
    with pytest.raises(ConfigError):
        build_model(small(levels=1))
    with pytest.raises(ConfigError):
        build_model(small(D=16))
    m = build_model(small())
    with pytest.raises(ConfigError):
        m(Tensor(np.zeros((1, 1, 18, 18), dtype=np.float32)))
    with pytest.raises(DimensionError):
        m(Tensor(np.zeros((1, 2, 16, 16), dtype=np.float32)))
    with pytest.raises(ConfigError):
        config_from_dict(ModelConfig, {"levels": 3, "depth": 2})


def test_loss_terms_sum(tiny_corpus):
    m = build_model(ModelConfig(levels=3, base_channels=8, D=32))
    t = compute_losses(m, tiny_corpus.images[:4], tiny_corpus.masks[:4])
    parts = sum(float(t[k].data) for k in ("dice_loss", "ce_loss", "codebook_loss", "commitment_loss"))
    assert float(t["loss"].data) == pytest.approx(parts, rel=1e-6)
    stats = train_epoch(m, tiny_corpus, Adam(m.parameters(), AdamConfig()), np.random.default_rng(0))
    reported = stats.dice_loss + stats.ce_loss + stats.codebook_loss + stats.commitment_loss
    assert abs(stats.loss - reported) <= 1e-6


def test_lr_zero_freezes_weights(tiny_corpus):
    m = build_model(ModelConfig(levels=3, base_channels=8, D=32))
    before = {k: p.data.copy() for k, p in m.parameters().items()}
    opt = Adam(m.parameters(), AdamConfig(lr=0.0))
    s1 = train_epoch(m, tiny_corpus, opt, np.random.default_rng(0), augment=False)
    s2 = train_epoch(m, tiny_corpus, opt, np.random.default_rng(0), augment=False)
    for k, p in m.parameters().items():
        assert p.data.tobytes() == before[k].tobytes(), k
    assert s1.loss == s2.loss


def test_unassigned_codes_do_not_move(tiny_corpus):
    m = build_model(ModelConfig(levels=3, base_channels=8, D=32, K=16))
    # park half the codebook far away so it cannot be selected
    m.codebook.vectors.data[8:] += 100.0
    before = m.codebook.numpy().copy()
    stats = train_epoch(m, tiny_corpus, Adam(m.parameters(), AdamConfig(lr=1e-3)), np.random.default_rng(0))
    used = np.array(stats.usage) > 0
    after = m.codebook.numpy()
    assert not used[8:].any()
    np.testing.assert_array_equal(after[~used], before[~used])
    assert (np.abs(after[used] - before[used]).sum(axis=1) > 0).all()
    assert stats.codes_used == used.sum()


def test_overfit_single_sample():
    corpus = generate_split(CorpusSpec(n_train=1, image_size=32, seed=11), "train")
    cfg = ModelConfig(levels=3, base_channels=8, D=32, seed=1)
    m = build_model(cfg)
    opt = Adam(m.parameters(), AdamConfig(lr=3e-3, weight_decay=0.0))
    rng = np.random.default_rng(0)
    for _ in range(200):
        train_epoch(m, corpus, opt, rng, batch_size=1, augment=False)
    pred = predict(m, corpus.images)[0]
    d = dice_score(pred, corpus.masks[0], 3)
    assert d[1:].mean() >= 0.99, d


def test_nan_loss_names_first_op(tiny_corpus):
    m = build_model(ModelConfig(levels=3, base_channels=8, D=32))
    m.stem.weight.data[0, 0, 0, 0] = np.inf
    opt = Adam(m.parameters(), AdamConfig())
    with pytest.raises(NumericalError) as info:
        train_epoch(m, tiny_corpus, opt, np.random.default_rng(0), augment=False)
    assert info.value.op == "conv2d"


def test_augment_keeps_image_mask_aligned():
    rng = np.random.default_rng(5)
    img = np.zeros((4, 1, 20, 20), dtype=np.float32)
    img[:, 0, 5:9, 6:12] = 1.0
    msk = (img[:, 0] > 0.5).astype(np.uint8)
    a_img, a_msk = augment_batch(img, msk, rng)
    np.testing.assert_array_equal(a_img[:, 0] > 0.5, a_msk.astype(bool))


@pytest.mark.parametrize("decoupled", [False, True])
def test_adam_step_matches_hand_computation(decoupled):
    w = Tensor(np.full((1, 1, 1, 2), 2.0), requires_grad=True)
    b = Tensor(np.array([1.0]), requires_grad=True)
    cfg = AdamConfig(lr=0.1, weight_decay=0.5, decoupled=decoupled)
    opt = Adam({"w": w, "b": b}, cfg)
    gw = np.array([[[[0.5, -1.0]]]], dtype=np.float32)
    w.grad, b.grad = gw.copy(), np.array([0.25], dtype=np.float32)
    opt.step()
    g = gw + (0.0 if decoupled else 0.5 * 2.0)
    m_hat = g  # after one step the bias-corrected moments equal g and g^2
    expected = 2.0 - 0.1 * m_hat / (np.abs(g) + 1e-8)
    if decoupled:
        expected -= 0.1 * 0.5 * 2.0
    np.testing.assert_allclose(w.data, expected, rtol=1e-6)
    # biases are never decayed
    np.testing.assert_allclose(b.data, [1.0 - 0.1], rtol=1e-6)
