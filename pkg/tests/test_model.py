import math

import numpy as np
import pytest

from calr.exceptions import ShapeError, TokenRangeError
from calr.model import (
    GatedFfn,
    ModelConfig,
    batch_loss,
    evaluate_loss,
    ffn_forward,
    forward,
    init_model,
    lm_loss,
)


def silu(v):
    return v / (1.0 + math.exp(-v))


def naive_ffn(w_g, w_u, w_d, x):
    n, d = x.shape
    f = w_g.shape[1]
    out = np.zeros((n, d))
    for t in range(n):
        hidden = []
        for j in range(f):
            g = sum(x[t, i] * w_g[i, j] for i in range(d))
            u = sum(x[t, i] * w_u[i, j] for i in range(d))
            hidden.append(g * silu(u))
        for k in range(d):
            out[t, k] = sum(hidden[j] * w_d[j, k] for j in range(f))
    return out


def naive_rms_norm(x, w, eps=1e-6):
    return x / np.sqrt(np.mean(x**2, axis=-1, keepdims=True) + eps) * w


# -- config ------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(d_model=0)
    cfg = ModelConfig(d_model=8, n_heads=2, d_ff=16, n_layers=1, max_seq_len=4, seed=5)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# -- ffn ---------------------------------------------------------------------------


def test_ffn_zero_input_gives_zero(rng):
    ffn = GatedFfn(rng.normal(size=(4, 6)), rng.normal(size=(4, 6)), rng.normal(size=(6, 4)))
    assert np.array_equal(ffn_forward(ffn, np.zeros((3, 4))), np.zeros((3, 4)))


def test_ffn_identity_example():
    eye = np.eye(2)
    out = ffn_forward(GatedFfn(eye, eye, eye), np.array([[1.0, 1.0]]))
    np.testing.assert_allclose(out, [[0.7310585786300049, 0.7310585786300049]], rtol=1e-14)


def test_ffn_matches_naive_oracle(rng):
    w_g, w_u, w_d = rng.normal(size=(5, 7)), rng.normal(size=(5, 7)), rng.normal(size=(7, 5))
    x = rng.normal(size=(4, 5))
    np.testing.assert_allclose(ffn_forward(GatedFfn(w_g, w_u, w_d), x), naive_ffn(w_g, w_u, w_d, x), atol=1e-12)


def test_ffn_shape_errors(rng):
    with pytest.raises(ShapeError):
        GatedFfn(np.zeros((4, 6)), np.zeros((4, 5)), np.zeros((6, 4)))
    ffn = GatedFfn(np.zeros((4, 6)), np.zeros((4, 6)), np.zeros((6, 4)))
    with pytest.raises(ShapeError):
        ffn_forward(ffn, np.zeros((2, 5)))


# -- forward -------------------------------------------------------------------------


def test_logits_shape_and_determinism(tiny_model, rng):
    ids = rng.integers(0, 256, size=(2, 16))
    a = forward(tiny_model, ids)
    assert a.shape == (2, 16, 256)
    assert np.array_equal(a, forward(tiny_model, ids))


def test_single_token_batch(tiny_model):
    logits = forward(tiny_model, [[65]])
    assert logits.shape == (1, 1, 256)
    # different sequence lengths change BLAS blocking, hence rounding only
    np.testing.assert_allclose(logits[0, 0], forward(tiny_model, [[65, 66, 67]])[0, 0], rtol=0, atol=1e-13)


def test_batch_permutation(tiny_model, rng):
    ids = rng.integers(0, 256, size=(4, 12))
    perm = np.array([2, 0, 3, 1])
    np.testing.assert_allclose(forward(tiny_model, ids[perm]), forward(tiny_model, ids)[perm], rtol=0, atol=1e-13)


def test_causality(tiny_model, rng):
    ids = rng.integers(0, 256, size=(2, 16))
    base = forward(tiny_model, ids)
    for j in (1, 7, 15):
        changed = ids.copy()
        changed[:, j] = (changed[:, j] + 1) % 256
        out = forward(tiny_model, changed)
        assert np.array_equal(out[:, :j], base[:, :j])
        assert not np.allclose(out[:, j:], base[:, j:])


def test_token_validation(tiny_model):
    with pytest.raises(TokenRangeError):
        forward(tiny_model, [[0, 256]])
    with pytest.raises(TokenRangeError):
        forward(tiny_model, [[-1]])
    with pytest.raises(ShapeError):
        forward(tiny_model, np.zeros((1, 33), dtype=int))
    with pytest.raises(TokenRangeError):
        forward(tiny_model, np.zeros((1, 3)))


def test_tap_invariants(tiny_model, rng):
    ids = rng.integers(0, 256, size=(2, 10))
    _, taps = forward(tiny_model, ids, taps=True)
    assert len(taps) == tiny_model.config.n_layers
    for i in range(len(taps) - 1):
        assert np.array_equal(taps[i]["block_out"], taps[i + 1]["block_in"])
    for block, tap in zip(tiny_model.blocks, taps):
        normed = naive_rms_norm(tap["ffn_in"], block.ffn_norm.data)
        np.testing.assert_allclose(normed, tap["ffn_input"], atol=1e-12)
        expected = tap["ffn_in"] + ffn_forward(block.ffn, normed.reshape(-1, normed.shape[-1])).reshape(normed.shape)
        np.testing.assert_allclose(tap["ffn_out"], expected, atol=1e-12)


# -- loss ------------------------------------------------------------------------------


def test_lm_loss_uniform():
    assert lm_loss(np.zeros((2, 5, 256)), np.zeros((2, 5), dtype=int)) == pytest.approx(math.log(256), rel=1e-14)


def test_lm_loss_confident_limit():
    targets = np.array([[1, 2, 3]])
    logits = np.zeros((1, 3, 256))
    logits[0, np.arange(3), targets[0]] = 200.0
    assert lm_loss(logits, targets) < 1e-80


def test_lm_loss_matches_naive_log_softmax(rng):
    logits = rng.normal(scale=3.0, size=(3, 4, 256))
    targets = rng.integers(0, 256, size=(3, 4))
    total = 0.0
    for b in range(3):
        for t in range(4):
            row = logits[b, t]
            total += math.log(sum(math.exp(v) for v in row)) - row[targets[b, t]]
    assert lm_loss(logits, targets) == pytest.approx(total / 12, rel=1e-10)


def test_fresh_model_loss_near_uniform(tiny_model, rng):
    batch = rng.integers(0, 256, size=(4, 33))
    assert abs(batch_loss(tiny_model, batch) - math.log(256)) <= 0.5


def test_evaluate_loss_is_token_weighted(tiny_model, rng):
    a = rng.integers(0, 256, size=(3, 9))
    b = rng.integers(0, 256, size=(1, 9))
    expected = (3 * batch_loss(tiny_model, a) + batch_loss(tiny_model, b)) / 4
    assert evaluate_loss(tiny_model, [a, b]) == pytest.approx(expected, rel=1e-14)
    with pytest.raises(ValueError):
        evaluate_loss(tiny_model, [])


# -- init ------------------------------------------------------------------------------


def test_init_deterministic(tiny_config):
    a, b = init_model(tiny_config), init_model(tiny_config)
    for (name, p), q in zip(a.named_parameters().items(), b.named_parameters().values()):
        assert np.array_equal(p.data, q.data), name


def test_init_seed_changes_weights(tiny_config):
    from dataclasses import replace

    a = init_model(tiny_config)
    b = init_model(replace(tiny_config, seed=1))
    assert not np.array_equal(a.embed.data, b.embed.data)


def test_init_statistics():
    model = init_model(ModelConfig(d_model=64, n_layers=1, n_heads=4, d_ff=64))
    emb = model.embed.data
    assert emb.size >= 16384
    assert abs(emb.mean()) < 0.1 * 0.02
    assert abs(emb.std() - 0.02) < 0.1 * 0.02
    assert np.all(model.final_norm.data == 1.0)
    assert all(np.all(b.ffn_norm.data == 1.0) and np.all(b.attn_norm.data == 1.0) for b in model.blocks)


def test_parameter_names_and_count(tiny_model, tiny_config):
    names = list(tiny_model.named_parameters())
    assert names[0] == "embed" and names[-1] == "final_norm"
    assert "blocks.2.ffn.w_d" in names and "blocks.0.attn.q.weight" in names
    d, f, L = tiny_config.d_model, tiny_config.d_ff, tiny_config.n_layers
    assert tiny_model.n_params() == 256 * d + L * (4 * d * d + 3 * d * f + 2 * d) + d
