"""Patch embedding and a constant-width pre-LN transformer encoder.

Parameters live in a flat ``name -> array`` dict using the checkpoint names
(``encoder.layer0.wq`` ...). Weight matrices are stored ``(in, out)`` so a
projection is ``x @ w + b``. Every function accepts either plain arrays or
graph nodes as parameters (see :mod:`stpn.numcore.ops`).

Inputs may carry leading batch dimensions: a frame batch ``[..., 3, H, W]``
produces tokens ``[..., n, d]``.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .numcore import ops
from .numcore.rng import Rng

LAYER_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
              "ln1.g", "ln1.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ln2.g", "ln2.b")


@dataclass(frozen=True)
class EncoderConfig:
    image_size: tuple = (32, 32)
    patch_size: tuple = (8, 8)
    depth: int = 2
    width: int = 32
    heads: int = 2
    ffn_hidden: int = 64
    ln_eps: float = 1e-5
    pos_embed: bool = True

    def __post_init__(self):
        (H, W), (h, w) = self.image_size, self.patch_size
        if min(H, W, h, w) < 1 or H % h or W % w:
            raise DimensionError(f"image {self.image_size} not divisible into patches {self.patch_size}")
        if self.depth < 1:
            raise ValueError("encoder depth must be >= 1")
        if self.width < 1 or self.heads < 1 or self.width % self.heads:
            raise DimensionError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def grid(self):
        return (self.image_size[0] // self.patch_size[0], self.image_size[1] // self.patch_size[1])

    @property
    def n_patches(self):
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self):
        return 3 * self.patch_size[0] * self.patch_size[1]


@dataclass
class TokenSeq:
    """Token rows; the first ``prompt_count`` rows are prompt-derived."""

    tokens: object
    prompt_count: int = 0

    @property
    def patch_count(self):
        return ops.value(self.tokens).shape[-2] - self.prompt_count

    def patches(self):
        return self.tokens[..., self.prompt_count:, :]


def init_linear(rng, name, n_in, n_out, std=0.02):
    return {
        f"{name}.w": rng.spawn(f"{name}.w").truncated_normal(std, (n_in, n_out)),
        f"{name}.b": np.zeros(n_out),
    }


def init_ln(prefix, d):
    return {f"{prefix}.g": np.ones(d), f"{prefix}.b": np.zeros(d)}


def init_ffn(rng, prefix, n_in, hidden, n_out, std=0.02):
    return {
        f"{prefix}.w1": rng.spawn(f"{prefix}.w1").truncated_normal(std, (n_in, hidden)),
        f"{prefix}.b1": np.zeros(hidden),
        f"{prefix}.w2": rng.spawn(f"{prefix}.w2").truncated_normal(std, (hidden, n_out)),
        f"{prefix}.b2": np.zeros(n_out),
    }


def init_mha(rng, prefix, d, std=0.02):
    p = {}
    for k in "qkvo":
        p[f"{prefix}.w{k}"] = rng.spawn(f"{prefix}.w{k}").truncated_normal(std, (d, d))
        p[f"{prefix}.b{k}"] = np.zeros(d)
    return p


def init_encoder_params(config, rng):
    """Truncated-normal(0.02) projections, zero biases, unit LayerNorm scales."""
    if isinstance(rng, int):
        rng = Rng(rng)
    rng = rng.spawn("encoder")
    d = config.width
    p = {}
    p.update(init_linear(rng, "encoder.patch", config.patch_dim, d))
    if config.pos_embed:
        p["encoder.pos"] = rng.spawn("encoder.pos").truncated_normal(0.02, (config.n_patches, d))
    for i in range(config.depth):
        pre = f"encoder.layer{i}"
        p.update(init_mha(rng, pre, d))
        p.update(init_ln(f"{pre}.ln1", d))
        p.update(init_ffn(rng, f"{pre}.ffn", d, config.ffn_hidden, d))
        p.update(init_ln(f"{pre}.ln2", d))
    return p


def init_head_params(width, num_classes, rng):
    if isinstance(rng, int):
        rng = Rng(rng)
    return init_linear(rng.spawn("head"), "head", width, num_classes)


def encoder_param_shapes(config):
    return {k: v.shape for k, v in init_encoder_params(config, Rng(0)).items()}


def patchify(frame, patch_size):
    """``[..., 3, H, W]`` -> ``[..., n, 3*h*w]`` with patches in raster order."""
    frame = np.asarray(frame, dtype=np.float64)
    h, w = patch_size
    *lead, c, H, W = frame.shape
    x = frame.reshape(*lead, c, H // h, h, W // w, w)
    nl = len(lead)
    x = x.transpose(*range(nl), nl + 1, nl + 3, nl, nl + 2, nl + 4)
    return x.reshape(*lead, (H // h) * (W // w), c * h * w)


def patch_embed(frame, params, config):
    shape = np.shape(frame)
    if len(shape) < 3 or shape[-3] != 3 or tuple(shape[-2:]) != tuple(config.image_size):
        raise DimensionError(f"frame shape {shape} does not match 3x{config.image_size}")
    x = ops.matmul(patchify(frame, config.patch_size), params["encoder.patch.w"]) + params["encoder.patch.b"]
    if config.pos_embed:
        x = x + params["encoder.pos"]
    return TokenSeq(x, 0)


def linear(x, params, prefix):
    return ops.matmul(x, params[f"{prefix}.w"]) + params[f"{prefix}.b"]


def mha(queries, context, params, prefix, heads):
    """Multi-head scaled dot-product attention of ``queries`` over ``context``.

    Keys and values are both projected from ``context``; scale is
    ``1/sqrt(d/heads)``. Batch dimensions of the two inputs broadcast.
    """
    qs, cs = ops.value(queries).shape, ops.value(context).shape
    d = qs[-1]
    if cs[-1] != d or params[f"{prefix}.wq"].shape[0] != d:
        raise DimensionError(f"mha width mismatch: queries {qs}, context {cs}")
    if d % heads:
        raise DimensionError(f"{heads} heads do not divide width {d}")
    dh = d // heads
    q = ops.matmul(queries, params[f"{prefix}.wq"]) + params[f"{prefix}.bq"]
    k = ops.matmul(context, params[f"{prefix}.wk"]) + params[f"{prefix}.bk"]
    v = ops.matmul(context, params[f"{prefix}.wv"]) + params[f"{prefix}.bv"]

    def split(x, rows, lead):
        x = ops.reshape(x, lead + (rows, heads, dh))
        nl = len(lead)
        return ops.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))

    qh = split(q, qs[-2], qs[:-2])
    kh = split(k, cs[-2], cs[:-2])
    vh = split(v, cs[-2], cs[:-2])
    scores = ops.matmul(qh, ops.swap_last(kh)) * (1.0 / np.sqrt(dh))
    out = ops.matmul(ops.softmax(scores), vh)  # [..., heads, q, dh]
    lead = ops.value(out).shape[:-3]
    nl = len(lead)
    out = ops.transpose(out, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    out = ops.reshape(out, lead + (qs[-2], d))
    return ops.matmul(out, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]


def ffn(x, params, prefix):
    h = ops.gelu(ops.matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return ops.matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def transformer_layer(x, params, index, config):
    """Pre-LN block: ``x + MHA(LN(x))`` then ``+ FFN(LN(.))``."""
    pre = f"encoder.layer{index}"
    tok = x.tokens
    if ops.value(tok).shape[-1] != config.width:
        raise DimensionError(f"token width {ops.value(tok).shape[-1]} != {config.width}")
    eps = config.ln_eps
    h = ops.layer_norm(tok, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"], eps)
    tok = tok + mha(h, h, params, pre, config.heads)
    h = ops.layer_norm(tok, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"], eps)
    tok = tok + ffn(h, params, f"{pre}.ffn")
    return TokenSeq(tok, x.prompt_count)


def _prepend(prompts, patches):
    """Concatenate prompt rows in front of patch rows, broadcasting batch dims."""
    ps, ts = ops.value(prompts).shape, ops.value(patches).shape
    if ps[-1] != ts[-1]:
        raise DimensionError(f"prompt width {ps[-1]} != token width {ts[-1]}")
    if ps[-2] == 0:
        return TokenSeq(patches, 0)
    if ps[:-2] != ts[:-2]:
        prompts = prompts + np.zeros(ts[:-2] + ps[-2:])
    return TokenSeq(ops.concat([prompts, patches], axis=-2), ps[-2])


def encode_plain(frame, params, config):
    """Final-layer patch embeddings ``[..., n, d]`` without prompts."""
    x = patch_embed(frame, params, config)
    for i in range(config.depth):
        x = transformer_layer(x, params, i, config)
    return x.tokens


def encode_prompted_shallow(frame, prompts, params, config, trace=None):
    """Prepend one prompt set before layer 1 and carry prompt rows through.

    Returns only the patch rows of the last layer. When ``trace`` is a list
    the row count seen by each layer is appended to it.
    """
    x = _prepend(prompts, patch_embed(frame, params, config).tokens)
    for i in range(config.depth):
        if trace is not None:
            trace.append(ops.value(x.tokens).shape[-2])
        x = transformer_layer(x, params, i, config)
    return x.patches()


def encode_prompted_deep(frame, prompt_sets, params, config, trace=None):
    """Replace the prompt rows with a fresh set at the input of every layer."""
    if len(prompt_sets) != config.depth:
        raise ValueError(f"deep prompting needs {config.depth} prompt sets, got {len(prompt_sets)}")
    patches = patch_embed(frame, params, config).tokens
    for i in range(config.depth):
        x = _prepend(prompt_sets[i], patches)
        if trace is not None:
            trace.append(ops.value(x.tokens).shape[-2])
        patches = transformer_layer(x, params, i, config).patches()
    return patches


def conv_prompt_downscale(prompts, weight, bias=None):
    """Run 9 prompts through a 3x3 / stride 2 convolution as a 3x3 map.

    ``prompts`` is ``[9, d]`` (row-major 3x3 grid), ``weight`` is
    ``[3, 3, d, d_out]``. The map is zero-padded by 2 on each side so the
    output grid is again 3x3, returned as ``[9, d_out]``.
    """
    shape = ops.value(prompts).shape
    if shape[-2] != 9:
        raise ValueError(f"conv prompt path needs exactly 9 prompts (a 3x3 map), got {shape[-2]}")
    d = shape[-1]
    kh, kw, d_in, d_out = np.shape(ops.value(weight))
    if (kh, kw) != (3, 3) or d_in != d:
        raise DimensionError(f"conv weight {np.shape(ops.value(weight))} incompatible with width {d}")
    grid = ops.reshape(prompts, (3, 3, d))
    padded = ops.pad(grid, ((2, 2), (2, 2), (0, 0)))  # 7x7
    size = (7 - 3) // 2 + 1
    rows, cols = [], []
    for i in range(size):
        for j in range(size):
            for a in range(3):
                for b in range(3):
                    rows.append(2 * i + a)
                    cols.append(2 * j + b)
    patches = ops.take(padded, (np.array(rows), np.array(cols)))  # [size*size*9, d]
    patches = ops.reshape(patches, (size * size, 9 * d))
    out = ops.matmul(patches, ops.reshape(weight, (9 * d, d_out)))
    if bias is not None:
        out = out + bias
    return out


def head_classify(features, params):
    """Mean-pool the patch rows then map linearly to class logits."""
    shape = ops.value(features).shape
    w = params["head.w"]
    if shape[-1] != np.shape(ops.value(w))[0]:
        raise DimensionError(f"features {shape} do not match head weight {np.shape(ops.value(w))}")
    lead = shape[:-2]
    pooled = ops.reshape(ops.mean_over_axis(features, axis=-2), (int(np.prod(lead, dtype=np.int64)), shape[-1]))
    logits = ops.matmul(pooled, w) + params["head.b"]
    return ops.reshape(logits, lead + (np.shape(ops.value(w))[1],))
