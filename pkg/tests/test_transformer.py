import math

import numpy as np
import pytest

from tcdlab import autodiff as ad
from tcdlab.autodiff import Tensor
from tcdlab.errors import ConfigError, EmptyMaskError, ShapeError, VocabError
from tcdlab.moe import MoEConfig
from tcdlab.transformer import Encoder, ModelConfig, expected_param_count, geometry_hash

from conftest import random_batch, tiny_config, tiny_model


def set_param(model, name, value):
    model.params[name].data = np.asarray(value, dtype=float) * np.ones(model.params[name].shape)


def ln(x, eps=1e-12):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


# -- config ---------------------------------------------------------------

def test_config_defaults_ffn_to_four_h():
    assert ModelConfig(hidden_dim=12, num_heads=3).ffn_dim == 48


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        ModelConfig(hidden_dim=10, num_heads=3)


def test_geometry_hash_ignores_training_only_fields():
    a, b = tiny_config(), tiny_config(dropout=0.1, init_std=0.5)
    assert geometry_hash(a, None) == geometry_hash(b, None)
    assert geometry_hash(a, MoEConfig(4, lambda_B=1.0)) == geometry_hash(a, MoEConfig(4, lambda_B=9.0))
    assert geometry_hash(a, None) != geometry_hash(tiny_config(hidden_dim=32), None)
    assert geometry_hash(a, MoEConfig(4)) != geometry_hash(a, MoEConfig(2))


# -- embedding ------------------------------------------------------------

def test_embed_zero_tables():
    m = tiny_model()
    set_param(m, "tok_emb", 0.0)
    set_param(m, "pos_emb", 0.0)
    assert not m.embed(np.array([[5, 6, 7]])).data.any()


def test_embed_positions_distinguish_same_token():
    m = tiny_model()
    out = m.embed(np.array([[9, 9, 9]])).data[0]
    assert not np.array_equal(out[0], out[1])
    m.params["pos_emb"].data[1] = m.params["pos_emb"].data[0]
    out = m.embed(np.array([[9, 9, 9]])).data[0]
    assert np.array_equal(out[0], out[1]) and not np.array_equal(out[0], out[2])


def test_embed_tied_projection_roundtrip():
    cfg = tiny_config(vocab_size=12, hidden_dim=16)
    m = Encoder(cfg)
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(16, 16)))
    m.params["tok_emb"].data = q[:12].copy()
    set_param(m, "pos_emb", 0.0)
    ids = np.array([[3, 0, 11, 7, 7, 5]])
    logits = m.mlm_logits(m.embed(ids).reshape(-1, 16)).data
    assert logits.argmax(axis=1).tolist() == ids[0].tolist()


def test_embed_rejects_bad_ids():
    m = tiny_model()
    with pytest.raises(VocabError):
        m.embed(np.array([[1, 20]]))
    with pytest.raises(VocabError):
        m.embed(np.array([[-1, 2]]))
    with pytest.raises(ShapeError):
        m.embed(np.zeros((1, 13), dtype=int))


# -- attention sublayer -----------------------------------------------------

def test_mha_zero_output_projection():
    m = tiny_model()
    set_param(m, "layers.0.attn.wo", 0.0)
    set_param(m, "layers.0.attn.bo", 0.0)
    ids, valid = random_batch()
    _, taps = m(ids, valid)
    h0 = m.embed(ids).data.reshape(-1, 16)
    assert not taps.inner[0].data.any()
    assert np.allclose(taps.trunk[0].data, ln(h0), atol=1e-12)


def test_mha_single_token_attends_to_itself():
    m = tiny_model()
    ids = np.array([[7]])
    _, taps = m(ids)
    p = {k: v.data for k, v in m.params.items()}
    h = m.embed(ids).data[0]
    expected = (h @ p["layers.0.attn.wv"] + p["layers.0.attn.bv"]) @ p["layers.0.attn.wo"] + p["layers.0.attn.bo"]
    assert np.allclose(taps.inner[0].data, expected, atol=1e-15)


def test_mha_two_token_hand_softmax():
    m = Encoder(ModelConfig(vocab_size=8, hidden_dim=2, num_layers=1, num_heads=1, ffn_dim=2, max_seq_len=4))
    set_param(m, "pos_emb", 0.0)
    m.params["tok_emb"].data[5] = [1.0, 0.0]
    m.params["tok_emb"].data[6] = [0.0, 2.0]
    m.params["layers.0.attn.wq"].data = np.array([[1.0, 0.5], [0.0, 1.0]])
    m.params["layers.0.attn.wk"].data = np.array([[2.0, 0.0], [1.0, 1.0]])
    m.params["layers.0.attn.wv"].data = np.eye(2)
    m.params["layers.0.attn.wo"].data = np.eye(2)
    for b in "qkvo":
        set_param(m, f"layers.0.attn.b{b}", 0.0)
    _, taps = m(np.array([[5, 6]]))
    h = np.array([[1.0, 0.0], [0.0, 2.0]])
    q, k = h @ m.params["layers.0.attn.wq"].data, h @ m.params["layers.0.attn.wk"].data
    expected = []
    for i in range(2):
        s = [float(q[i] @ k[j]) / math.sqrt(2) for j in range(2)]
        w = [math.exp(v - max(s)) for v in s]
        w = [v / sum(w) for v in w]
        expected.append(w[0] * h[0] + w[1] * h[1])
    assert np.allclose(taps.inner[0].data, expected, atol=1e-14)


def test_attention_stays_within_sequence_and_ignores_padding():
    m = tiny_model(experts=None)
    ids, valid = random_batch(batch=3, length=6)
    out, _ = m(ids, valid)
    ids2 = ids.copy()
    ids2[1] = np.random.default_rng(7).integers(5, 20, size=6)
    ids2[2, ~valid[2]] = 13
    out2, _ = m(ids2, valid)
    assert np.array_equal(out.data[0], out2.data[0])
    assert np.array_equal(out.data[2][valid[2]], out2.data[2][valid[2]])
    assert not np.array_equal(out.data[1], out2.data[1])


def test_attention_rows_sum_to_one():
    m = tiny_model()
    ids, valid = random_batch()
    _, taps = m(ids, valid)
    q, k = taps.queries[0].data, taps.keys[0].data
    bias = np.where(valid, 0.0, -1e9)[:, None, None, :]
    w = ad.softmax(Tensor(q @ k.swapaxes(-1, -2) / math.sqrt(8) + bias)).data
    assert np.allclose(w.sum(-1), 1.0, atol=1e-12)
    assert np.all(w[2][..., ~valid[2]] < 1e-300)


# -- FFN sublayer -----------------------------------------------------------

def test_ffn_zero_down_projection():
    m = tiny_model()
    set_param(m, "layers.0.ffn.w2", 0.0)
    set_param(m, "layers.0.ffn.b2", 0.0)
    ids, valid = random_batch()
    _, taps = m(ids, valid)
    assert not taps.inner[1].data.any()
    assert np.allclose(taps.trunk[1].data, ln(taps.trunk[0].data), atol=1e-12)


def test_ffn_gelu_origin():
    m = tiny_model()
    set_param(m, "layers.0.ffn.w1", 0.0)
    set_param(m, "layers.0.ffn.b1", 0.0)
    b2 = np.random.default_rng(1).normal(size=16)
    m.params["layers.0.ffn.b2"].data = b2
    _, taps = m(*random_batch())
    assert np.array_equal(taps.inner[1].data, np.broadcast_to(b2, taps.inner[1].shape))


def test_ffn_scalar_hand_evaluation():
    m = Encoder(ModelConfig(vocab_size=8, hidden_dim=1, num_layers=1, num_heads=1, ffn_dim=1, max_seq_len=2))
    for name, val in (("w1", 1.7), ("b1", -0.3), ("w2", 0.8), ("b2", 0.05)):
        set_param(m, f"layers.0.ffn.{name}", val)
    _, taps = m(np.array([[6]]))
    x = taps.trunk[0].data[0, 0]
    z = 1.7 * x - 0.3
    expected = 0.5 * z * (1 + math.erf(z / math.sqrt(2))) * 0.8 + 0.05
    assert taps.inner[1].data[0, 0] == pytest.approx(expected, abs=1e-15)


# -- full encoder -----------------------------------------------------------

def test_zero_layers_returns_embeddings():
    m = tiny_model(num_layers=0)
    ids, valid = random_batch()
    out, taps = m(ids, valid)
    assert np.array_equal(out.data, m.embed(ids).data)
    assert taps.trunk == taps.inner == taps.queries == taps.keys == []


@pytest.mark.parametrize("experts", [None, 3])
def test_tap_counts_and_shapes(experts):
    m = tiny_model(experts=experts)
    ids, valid = random_batch(batch=3, length=7)
    _, taps = m(ids, valid)
    assert (len(taps.trunk), len(taps.inner), len(taps.queries), len(taps.keys)) == (4, 4, 2, 2)
    assert all(t.shape == (21, 16) for t in taps.trunk + taps.inner)
    assert all(t.shape == (3, 2, 7, 8) for t in taps.queries + taps.keys)
    q, k = taps.head_qk(1, 1)
    assert q.shape == k.shape == (21, 8)
    assert len(taps.router_probs) == (0 if experts is None else 2)


def test_forward_deterministic():
    ids, valid = random_batch()
    a, _ = tiny_model(seed=4, experts=4)(ids, valid)
    b, _ = tiny_model(seed=4, experts=4)(ids, valid)
    assert np.array_equal(a.data, b.data)


def test_post_ln_residual_identity_every_sublayer():
    m = tiny_model(experts=None)
    for layer in range(2):
        for name in ("attn.wo", "attn.bo", "ffn.w2", "ffn.b2"):
            set_param(m, f"layers.{layer}.{name}", 0.0)
    ids, valid = random_batch()
    _, taps = m(ids, valid)
    prev = m.embed(ids).data.reshape(-1, 16)
    for trunk in taps.trunk:
        assert np.array_equal(trunk.data, ad.layer_norm(Tensor(prev), Tensor(np.ones(16)), Tensor(np.zeros(16))).data)
        prev = trunk.data


@pytest.mark.parametrize("experts", [None, 1, 5])
def test_parameter_count_formula(experts):
    cfg = tiny_config(vocab_size=37, hidden_dim=12, num_heads=3, ffn_dim=20, num_layers=3)
    moe = None if experts is None else MoEConfig(num_experts=experts)
    m = Encoder(cfg, moe)
    assert m.num_parameters() == sum(t.size for t in m.params.values()) == expected_param_count(cfg, moe)


def test_mlm_loss_uniform_and_empty_mask():
    m = tiny_model()
    set_param(m, "tok_emb", 0.0)
    ids, valid = random_batch()
    hidden, _ = m(ids, valid)
    mask = np.zeros(ids.shape, dtype=bool)
    with pytest.raises(EmptyMaskError):
        m.mlm_loss(hidden, ids, mask)
    mask[0, 2] = True
    assert m.mlm_loss(hidden, ids, mask).item() == pytest.approx(math.log(20), abs=1e-14)


def test_freeze_blocks_gradients():
    m = tiny_model()
    m.freeze()
    assert m.trainable() == {}
    ids, valid = random_batch()
    hidden, _ = m(ids, valid)
    assert not hidden.requires_grad


def test_state_arrays_roundtrip():
    a, b = tiny_model(seed=1, experts=2), tiny_model(seed=2, experts=2)
    b.load_arrays(a.state_arrays())
    ids, valid = random_batch()
    assert np.array_equal(a(ids, valid)[0].data, b(ids, valid)[0].data)
    with pytest.raises(Exception):
        tiny_model(seed=1, experts=3).load_arrays(a.state_arrays())


def test_dropout_only_in_training_mode():
    m = tiny_model(dropout=0.5)
    ids, valid = random_batch()
    m.training = False
    a = m(ids, valid, rng=np.random.default_rng(0))[0].data
    b = m(ids, valid, rng=np.random.default_rng(1))[0].data
    assert np.array_equal(a, b)
    m.training = True
    c = m(ids, valid, rng=np.random.default_rng(0))[0].data
    assert not np.array_equal(a, c)


def test_vanilla_gradients_reach_every_parameter():
    m = tiny_model()
    ids, valid = random_batch()
    hidden, _ = m(ids, valid)
    mask = valid.copy()
    ad.backward(m.mlm_loss(hidden, ids, mask))
    missing = [n for n, p in m.params.items() if p.grad is None]
    assert missing == []
