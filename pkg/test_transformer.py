#!/usr/bin/env python3
"""
Tests for the toy transformer: init, forward, injection, classifier, checkpoints, linear attention
"""

import numpy as np
import pytest

from lab.core.exceptions import ShapeError
from lab.models.config import ModelConfig
from lab.transformer import (
    Injection,
    LinearAttentionParams,
    apply_classifier,
    forward,
    forward_batch,
    init_model,
    linear_attention_step,
    load_model,
    save_model,
)


def test_init_is_reproducible(tiny_config):
    a, b = init_model(tiny_config), init_model(tiny_config)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    c = init_model(tiny_config.model_copy(update={"seed": tiny_config.seed + 1}))
    assert not np.array_equal(a.params["tok_emb"].data, c.params["tok_emb"].data)


def test_head_dim():
    config = ModelConfig(n_layers=1, d_model=64, n_heads=4, vocab_size=10)
    assert config.head_dim == 16
    with pytest.raises(ValueError):
        ModelConfig(n_layers=1, d_model=30, n_heads=4, vocab_size=10)


def test_forward_shapes(tiny_model):
    trace = forward(tiny_model, [1, 5, 7, 2, 9])
    d, V = tiny_model.config.d_model, tiny_model.config.vocab_size
    assert trace.logits.shape == (5, V)
    assert len(trace.hidden) == tiny_model.n_layers + 1
    assert all(h.shape == (5, d) for h in trace.hidden)
    assert len(trace.attn) == tiny_model.n_layers


def test_attention_rows_sum_to_one(tiny_model):
    trace = forward(tiny_model, [3, 4, 5, 6, 7, 8])
    for a in trace.attn:
        assert np.abs(a.data.sum(axis=-1) - 1.0).max() < 1e-10
        assert np.all(np.triu(a.data[0], k=1) == 0.0)


def test_causality(tiny_model):
    """Changing token j leaves every earlier position untouched"""
    base = [3, 4, 5, 6, 7, 8]
    changed = list(base)
    changed[4] = 20
    a, b = forward(tiny_model, base), forward(tiny_model, changed)
    for ha, hb in zip(a.hidden, b.hidden):
        assert np.array_equal(ha.data[:4], hb.data[:4])
        assert not np.array_equal(ha.data[4], hb.data[4])


def test_prefix_consistency(tiny_model):
    tokens = [3, 9, 5, 6, 7, 8, 11]
    full = forward(tiny_model, tokens)
    prefix = forward(tiny_model, tokens[:4])
    for hf, hp in zip(full.hidden, prefix.hidden):
        assert np.allclose(hf.data[:4], hp.data, atol=1e-12)


def test_padding_does_not_change_real_positions(tiny_model):
    a = [3, 4, 5, 6]
    b = [7, 8]
    batch = forward_batch(tiny_model, [a, b + [0, 0]], lengths=[4, 2])
    single = forward(tiny_model, b)
    assert np.allclose(batch.select(1).logits.data, single.logits.data, atol=1e-12)
    assert np.allclose(batch.last_hidden[-1][1], single.last_hidden[-1], atol=1e-12)


def test_noop_injection(tiny_model):
    tokens = [3, 4, 5, 6, 7]
    plain = forward(tiny_model, tokens)
    vec = plain.hidden[1].data[2].copy()
    patched = forward(tiny_model, tokens, injection=Injection(layer=1, position=2, vector=vec))
    assert np.array_equal(plain.logits.data, patched.logits.data)


def test_injection_changes_downstream_only(tiny_model):
    tokens = [3, 4, 5, 6, 7]
    plain = forward(tiny_model, tokens)
    patched = forward(tiny_model, tokens, injection=Injection(1, 2, np.ones(tiny_model.config.d_model)))
    assert np.array_equal(plain.logits.data[:2], patched.logits.data[:2])
    assert not np.allclose(plain.logits.data[2:], patched.logits.data[2:])


@pytest.mark.parametrize("layer,position", [(0, 1), (3, 1), (1, 5), (1, -1)])
def test_injection_out_of_bounds(tiny_model, layer, position):
    with pytest.raises(ShapeError):
        forward(tiny_model, [3, 4, 5], injection=Injection(layer, position, np.zeros(tiny_model.config.d_model)))


def test_forward_rejects_bad_tokens(tiny_model):
    with pytest.raises(ShapeError):
        forward(tiny_model, [1, tiny_model.config.vocab_size])
    with pytest.raises(ShapeError):
        forward(tiny_model, [1] * (tiny_model.config.p_max + 1))


def test_classifier_matches_forward_logits(tiny_model):
    trace = forward(tiny_model, [3, 4, 5, 6], capture=False)
    logits = apply_classifier(tiny_model, trace.last_hidden[-1])
    assert np.allclose(logits, trace.logits.data[-1], atol=1e-12)


def test_classifier_zero_vector_at_init(tiny_model):
    logits = apply_classifier(tiny_model, np.zeros(tiny_model.config.d_model))
    assert np.allclose(logits, logits[0])
    with pytest.raises(ShapeError):
        apply_classifier(tiny_model, np.zeros(tiny_model.config.d_model + 1))


def test_linear_attention_kind_runs(tiny_config):
    model = init_model(tiny_config.model_copy(update={"attention_kind": "linear_normalized",
                                                      "feature_map": "elu_plus_one"}))
    trace = forward(model, [3, 4, 5, 6])
    assert np.all(np.isfinite(trace.logits.data))


def test_checkpoint_roundtrip(tiny_model, tmp_path):
    path = save_model(tiny_model, tmp_path / "model.iclt")
    loaded = load_model(path)
    assert loaded.config == tiny_model.config
    assert all(np.array_equal(loaded.params[k].data, tiny_model.params[k].data) for k in tiny_model.params)


def test_linear_attention_examples():
    eye = np.eye(2)
    params = LinearAttentionParams(eye, eye, eye)
    out = linear_attention_step([np.array([1.0, 0.0]), np.array([0.0, 1.0])], np.array([1.0, 1.0]), params)
    # z = (1, 1, 2) over the two demos and the query
    assert out == pytest.approx(np.array([1.0, 1.0]))

    h_q = np.array([0.5, -2.0])
    assert linear_attention_step([], h_q, params) == pytest.approx(h_q * (h_q @ h_q))
    same = linear_attention_step([h_q] * 5, h_q, params)
    assert same == pytest.approx(h_q * (h_q @ h_q))


def test_linear_attention_is_mean_of_terms(rng):
    d = 3
    params = LinearAttentionParams(*(rng.normal(size=(d, d)) for _ in range(3)))
    demos = rng.normal(size=(4, d))
    q = rng.normal(size=d)
    h = np.vstack([demos, q])
    z = (h @ params.wk.T) @ (params.wq @ q)
    expected = (z[:, None] * (h @ params.wv.T)).mean(axis=0)
    assert linear_attention_step(list(demos), q, params) == pytest.approx(expected)


def test_linear_attention_shape_error():
    params = LinearAttentionParams(np.eye(3), np.eye(3), np.eye(3))
    with pytest.raises(ShapeError):
        linear_attention_step([], np.ones(2), params)
