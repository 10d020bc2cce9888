"""Support-frame sampling and the two dynamic-prompt predictors.

A prompt set is a ``[N_P, d]`` array (or graph node), optionally with
leading batch dimensions. Support embeddings are passed either as a list of
K ``[..., n, d]`` tensors or pre-stacked as ``[..., K, n, d]``.
"""
import math
from dataclasses import dataclass

import numpy as np

from .encoder import encode_plain, ffn, init_ffn, init_linear, init_ln, init_mha, mha
from .errors import DimensionError
from .numcore import ops
from .numcore.rng import Rng

PREDICTORS = ("transformer", "mixer")


@dataclass(frozen=True)
class SupportSpec:
    stride: int = 8
    count: int = 7
    clamp: bool = True

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("support stride must be >= 1")
        if self.count < 1:
            raise ValueError("support count must be >= 1")


def support_offsets(stride, count):
    """Signed frame offsets: ceil(K/2) in the past, floor(K/2) in the future."""
    if count < 1:
        raise ValueError("support count must be >= 1")
    past = math.ceil(count / 2)
    future = count // 2
    return [-stride * k for k in range(past, 0, -1)] + [stride * k for k in range(1, future + 1)]


def sample_support_indices(t, spec, T):
    """Indices of the K support frames around frame ``t`` of a ``T``-frame clip.

    Out-of-range indices are clamped into ``[0, T-1]`` (duplicates are kept);
    with ``spec.clamp=False`` they raise instead.
    """
    if not 0 <= t < T:
        raise IndexError(f"frame {t} outside clip of length {T}")
    raw = [t + o for o in support_offsets(spec.stride, spec.count)]
    if not spec.clamp and any(i < 0 or i >= T for i in raw):
        raise IndexError(f"support indices {raw} leave the clip [0, {T - 1}]")
    return sorted(min(max(i, 0), T - 1) for i in raw)


def extract_support_embeddings(frames, indices, params, config):
    """Encode each support frame with the shared encoder, no prompts.

    ``frames`` is a ``[T, 3, H, W]`` clip; returns a list of ``[n, d]``.
    """
    return [encode_plain(frames[i], params, config) for i in indices]


def _stacked(support):
    if isinstance(support, (list, tuple)):
        if not support:
            raise ValueError("empty support list")
        shapes = {ops.value(s).shape for s in support}
        if len(shapes) != 1:
            raise DimensionError(f"support embeddings have inconsistent shapes {sorted(shapes)}")
        return ops.stack(list(support), axis=-3)
    if ops.value(support).shape[-3] == 0:
        raise ValueError("empty support list")
    return support


def init_transformer_predictor(width, n_prompts, rng):
    if isinstance(rng, int):
        rng = Rng(rng)
    rng = rng.spawn("predictor")
    p = {"predictor.q": rng.spawn("predictor.q").truncated_normal(0.02, (n_prompts, width))}
    p.update(init_mha(rng, "predictor.mha", width))
    p.update(init_ln("predictor.ln1", width))
    p.update(init_ln("predictor.ln_ctx", width))
    p.update(init_ln("predictor.ln2", width))
    p.update(init_ffn(rng, "predictor.ffn", width, 2 * width, width))
    return p


def init_mixer_predictor(width, n_patches, n_prompts, rng):
    if isinstance(rng, int):
        rng = Rng(rng)
    rng = rng.spawn("mixer")
    p = {}
    p.update(init_ln("mixer.ln1", width))
    p.update(init_ffn(rng, "mixer.mix", n_patches, 2 * n_patches, n_prompts))
    p.update(init_ln("mixer.ln2", n_prompts))
    p.update(init_ffn(rng, "mixer.chan", width, 2 * width, width))
    return p


def init_deep_projections(width, depth, rng):
    if isinstance(rng, int):
        rng = Rng(rng)
    rng = rng.spawn("deep")
    p = {}
    for i in range(depth):
        p.update(init_linear(rng, f"deep.fc{i}", width, width))
    return p


def predict_transformer(support, params, heads, eps=1e-5):
    """Learnable queries cross-attend to the concatenated support tokens.

    ``Q' = MHA(LN(Q), LN(ctx)) + Q`` then ``P = FFN(LN(Q')) + LN(Q')``.
    """
    x = _stacked(support)
    shape = ops.value(x).shape
    if shape[-1] != np.shape(ops.value(params["predictor.q"]))[-1]:
        raise DimensionError(f"support width {shape[-1]} does not match prompt queries")
    ctx = ops.reshape(x, shape[:-3] + (shape[-3] * shape[-2], shape[-1]))
    q = params["predictor.q"]
    qn = ops.layer_norm(q, params["predictor.ln1.g"], params["predictor.ln1.b"], eps)
    kn = ops.layer_norm(ctx, params["predictor.ln_ctx.g"], params["predictor.ln_ctx.b"], eps)
    q_hat = mha(qn, kn, params, "predictor.mha", heads) + q
    z = ops.layer_norm(q_hat, params["predictor.ln2.g"], params["predictor.ln2.b"], eps)
    return ffn(z, params, "predictor.ffn") + z


def predict_mixer(support, params, eps=1e-5, trace=None):
    """Temporal mean, token-mixing FFN to N_P slots, then channel FFN.

    When ``trace`` is a dict the hidden ``[..., d, N_P]`` feature is stored
    under ``"h"``.
    """
    x = _stacked(support)
    if ops.value(x).shape[-2] != np.shape(ops.value(params["mixer.mix.w1"]))[0]:
        raise DimensionError("support token count does not match the token-mixing FFN")
    avg = ops.mean_over_axis(x, axis=-3, order_free=True)
    z = ops.layer_norm(avg, params["mixer.ln1.g"], params["mixer.ln1.b"], eps)
    h = ffn(ops.swap_last(z), params, "mixer.mix")
    if trace is not None:
        trace["h"] = h
    hn = ops.layer_norm(h, params["mixer.ln2.g"], params["mixer.ln2.b"], eps)
    return ffn(ops.swap_last(hn), params, "mixer.chan")


def project_deep(base, params, depth):
    """One prompt set per encoder layer: ``P_i = base @ W_i + b_i``."""
    names = [k for k in params if k.startswith("deep.fc") and k.endswith(".w")]
    if len(names) != depth:
        raise ValueError(f"expected {depth} deep projections, found {len(names)}")
    return [ops.matmul(base, params[f"deep.fc{i}.w"]) + params[f"deep.fc{i}.b"] for i in range(depth)]
