import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import attention_oracle, ffn, ln

from stpn import numcore as nc
from stpn.encoder import EncoderConfig, encode_plain, encode_prompted_deep, encode_prompted_shallow, init_encoder_params
from stpn.errors import DimensionError
from stpn.predictor import (SupportSpec, extract_support_embeddings, init_deep_projections,
                            init_mixer_predictor, init_transformer_predictor, predict_mixer,
                            predict_transformer, project_deep, sample_support_indices, support_offsets)


def jitter(params, scale, seed):
    r = np.random.default_rng(seed)
    return {k: v + scale * r.normal(size=v.shape) for k, v in params.items()}


# --- support sampling -------------------------------------------------------------


def test_worked_example_even_count():
    assert sample_support_indices(100, SupportSpec(2, 6), 1000) == [94, 96, 98, 102, 104, 106]


def test_odd_count_biases_to_past():
    assert support_offsets(8, 7) == [-32, -24, -16, -8, 8, 16, 24]
    assert sample_support_indices(100, SupportSpec(8, 7), 1000) == [68, 76, 84, 92, 108, 116, 124]


def test_clamping_at_clip_start():
    assert sample_support_indices(5, SupportSpec(8, 2), 20) == [0, 13]


def test_clamping_disabled_raises():
    with pytest.raises(IndexError):
        sample_support_indices(5, SupportSpec(8, 2, clamp=False), 20)


def test_bad_arguments():
    with pytest.raises(ValueError):
        SupportSpec(1, 0)
    with pytest.raises(ValueError):
        SupportSpec(0, 1)
    with pytest.raises(IndexError):
        sample_support_indices(20, SupportSpec(1, 2), 20)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 299), st.integers(1, 20), st.integers(1, 15), st.integers(1, 300))
def test_support_indices_properties(t, stride, count, extra):
    T = t + extra
    idx = sample_support_indices(t, SupportSpec(stride, count), T)
    assert len(idx) == count
    assert idx == sorted(idx)
    assert all(0 <= i < T for i in idx)
    offsets = support_offsets(stride, count)
    assert 0 not in offsets
    assert sum(o < 0 for o in offsets) == math.ceil(count / 2)


# --- support embeddings ---------------------------------------------------------------

CFG = EncoderConfig(image_size=(8, 8), patch_size=(4, 4), depth=2, width=8, heads=2, ffn_hidden=16)


def test_support_embeddings_match_plain_encoding():
    p = init_encoder_params(CFG, nc.Rng(0))
    clip = np.random.default_rng(0).uniform(size=(6, 3, 8, 8))
    emb = extract_support_embeddings(clip, [0, 0, 4], p, CFG)
    assert len(emb) == 3
    assert np.array_equal(emb[0], emb[1])
    assert np.array_equal(emb[2], encode_plain(clip[4], p, CFG))


# --- transformer predictor --------------------------------------------------------------


def transformer_params(d=8, n_prompts=3, seed=0):
    return jitter(init_transformer_predictor(d, n_prompts, nc.Rng(seed)), 0.3, seed)


def transformer_oracle(support, p, heads):
    ctx = np.concatenate(support, axis=0)
    qn = ln(p["predictor.q"], p["predictor.ln1.g"], p["predictor.ln1.b"])
    kn = ln(ctx, p["predictor.ln_ctx.g"], p["predictor.ln_ctx.b"])
    q_hat = attention_oracle(qn, kn, p, "predictor.mha", heads) + p["predictor.q"]
    z = ln(q_hat, p["predictor.ln2.g"], p["predictor.ln2.b"])
    return ffn(z, p, "predictor.ffn") + z


def test_transformer_matches_oracle():
    p = transformer_params()
    support = list(np.random.default_rng(1).normal(size=(2, 4, 8)))
    out = predict_transformer(support, p, heads=2)
    assert out.shape == (3, 8)
    np.testing.assert_allclose(out, transformer_oracle(support, p, 2), atol=1e-12)


def test_transformer_identical_context_shortcut():
    p = transformer_params()
    v = np.random.default_rng(2).normal(size=8)
    support = [np.tile(v, (4, 1))] * 3
    # every attention weight row averages identical values, so the output is the projected value
    vn = ln(v, p["predictor.ln_ctx.g"], p["predictor.ln_ctx.b"])
    attended = (vn @ p["predictor.mha.wv"] + p["predictor.mha.bv"]) @ p["predictor.mha.wo"] + p["predictor.mha.bo"]
    z = ln(attended + p["predictor.q"], p["predictor.ln2.g"], p["predictor.ln2.b"])
    np.testing.assert_allclose(predict_transformer(support, p, heads=2), ffn(z, p, "predictor.ffn") + z, atol=1e-12)


def test_transformer_output_shape_independent_of_k():
    p = transformer_params(n_prompts=5)
    for k in (1, 2, 7):
        assert predict_transformer(list(np.ones((k, 4, 8))), p, 2).shape == (5, 8)


def test_transformer_permutation_invariance():
    p = transformer_params()
    r = np.random.default_rng(3)
    support = list(r.normal(size=(5, 4, 8)))
    ref = predict_transformer(support, p, 2)
    for _ in range(20):
        perm = r.permutation(5)
        assert np.abs(predict_transformer([support[i] for i in perm], p, 2) - ref).max() <= 1e-12


def test_predictor_errors():
    p = transformer_params()
    with pytest.raises(ValueError):
        predict_transformer([], p, 2)
    with pytest.raises(DimensionError):
        predict_transformer([np.ones((4, 6))], p, 2)
    with pytest.raises(DimensionError):
        predict_mixer([np.ones((4, 8)), np.ones((3, 8))], mixer_params())


# --- mixer predictor ------------------------------------------------------------------------


def mixer_params(d=8, n=4, n_prompts=3, seed=0):
    return jitter(init_mixer_predictor(d, n, n_prompts, nc.Rng(seed)), 0.3, seed)


def test_mixer_step_by_step():
    p = mixer_params()
    support = list(np.random.default_rng(4).normal(size=(2, 4, 8)))
    trace = {}
    out = predict_mixer(support, p, trace=trace)
    avg = (support[0] + support[1]) / 2
    z = ln(avg, p["mixer.ln1.g"], p["mixer.ln1.b"])
    h = ffn(z.T, p, "mixer.mix")
    assert trace["h"].shape == (8, 3)
    np.testing.assert_allclose(trace["h"], h, atol=1e-12)
    hn = ln(h, p["mixer.ln2.g"], p["mixer.ln2.b"])
    assert out.shape == (3, 8)
    np.testing.assert_allclose(out, ffn(hn.T, p, "mixer.chan"), atol=1e-12)


def test_mixer_permutation_and_copies_are_exact():
    p = mixer_params()
    r = np.random.default_rng(5)
    support = list(r.normal(size=(6, 4, 8)))
    ref = predict_mixer(support, p)
    for _ in range(20):
        perm = r.permutation(6)
        assert np.array_equal(predict_mixer([support[i] for i in perm], p), ref)
    one = predict_mixer([support[0]], p)
    for k in (2, 3, 7):
        assert np.array_equal(predict_mixer([support[0]] * k, p), one)


def test_mixer_rejects_wrong_token_count():
    with pytest.raises(DimensionError):
        predict_mixer([np.ones((5, 8))], mixer_params())


# --- deep projections ------------------------------------------------------------------------


def test_project_deep_identity_and_count():
    base = np.random.default_rng(0).normal(size=(3, 8))
    p = {}
    for i in range(2):
        p[f"deep.fc{i}.w"], p[f"deep.fc{i}.b"] = np.eye(8), np.zeros(8)
    sets = project_deep(base, p, 2)
    assert len(sets) == 2 and all(np.array_equal(s, base) for s in sets)
    with pytest.raises(ValueError):
        project_deep(base, p, 3)
    assert len(project_deep(base, init_deep_projections(8, 4, nc.Rng(0)), 4)) == 4


def test_zero_projected_prompts_still_shift_encoding():
    enc = jitter(init_encoder_params(CFG, nc.Rng(1)), 0.2, 1)
    p = {}
    for i in range(2):
        p[f"deep.fc{i}.w"], p[f"deep.fc{i}.b"] = np.zeros((8, 8)), np.zeros(8)
    sets = project_deep(np.ones((3, 8)), p, 2)
    x = np.random.default_rng(0).uniform(size=(3, 8, 8))
    assert not np.allclose(encode_prompted_deep(x, sets, enc, CFG), encode_plain(x, enc, CFG))


def test_single_layer_deep_equals_shallow_via_projection():
    cfg = EncoderConfig(image_size=(8, 8), patch_size=(4, 4), depth=1, width=8, heads=2, ffn_hidden=16)
    enc = jitter(init_encoder_params(cfg, nc.Rng(2)), 0.2, 2)
    proj = jitter(init_deep_projections(8, 1, nc.Rng(2)), 0.3, 3)
    base = np.random.default_rng(1).normal(size=(3, 8))
    (only,) = project_deep(base, proj, 1)
    x = np.random.default_rng(0).uniform(size=(3, 8, 8))
    assert np.array_equal(encode_prompted_deep(x, [only], enc, cfg), encode_prompted_shallow(x, only, enc, cfg))


# --- gradients through both paths --------------------------------------------------------------


@pytest.mark.parametrize("kind", ["transformer", "mixer"])
def test_gradients_reach_predictor_and_encoder(kind):
    enc = jitter(init_encoder_params(CFG, nc.Rng(0)), 0.1, 0)
    pred = transformer_params(n_prompts=2) if kind == "transformer" else mixer_params(n_prompts=2)
    params = {**enc, **pred}
    r = np.random.default_rng(6)
    sup, cur, w = r.uniform(size=(2, 3, 8, 8)), r.uniform(size=(3, 8, 8)), r.normal(size=(4, 8))

    def loss(p):
        s = encode_plain(sup, p, CFG)
        prompts = predict_transformer(s, p, 2) if kind == "transformer" else predict_mixer(s, p)
        return nc.total(encode_prompted_shallow(cur, prompts, p, CFG) * w)

    errs = nc.finite_diff_errors(loss, params, wrt=[k for k in params if "layer1" not in k])
    assert max(errs.values()) < 1e-4
    grads = nc.autodiff_grads(loss, params)
    assert np.abs(grads["encoder.patch.w"]).max() > 0
    some_pred = "predictor.q" if kind == "transformer" else "mixer.mix.w1"
    assert np.abs(grads[some_pred]).max() > 0
