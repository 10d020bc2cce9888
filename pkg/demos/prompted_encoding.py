"""
Prompted encoding of a single frame
===================================

Encode one synthetic frame three ways (plain, shallow prompts, deep prompts)
and look at how many rows each layer sees.
"""

# %%
# A clip from the generator: 8 frames of 32x32 RGB with one moving sprite.
import numpy as np

from stpn.encoder import EncoderConfig, encode_plain, encode_prompted_deep, encode_prompted_shallow, init_encoder_params
from stpn.numcore import Rng
from stpn.predictor import (SupportSpec, init_deep_projections, init_transformer_predictor, predict_transformer,
                            project_deep, sample_support_indices)
from stpn.synthvid import gen_clip

clip = gen_clip(seed=3, T=8, H=32, W=32, num_classes=4)
print("class", clip.class_label, "degraded frames", np.flatnonzero(clip.degraded))

# %%
# A two-layer encoder on 8x8 patches gives 16 patch tokens per frame.
cfg = EncoderConfig(image_size=(32, 32), patch_size=(8, 8), depth=2, width=32, heads=2, ffn_hidden=64)
params = init_encoder_params(cfg, Rng(0))
t = 4
plain = encode_plain(clip.frames[t], params, cfg)
print("plain", plain.shape)

# %%
# Support frames around t, stride 1, four of them. Clamping keeps the count
# fixed near the clip ends.
support_idx = sample_support_indices(t, SupportSpec(stride=1, count=4), clip.T)
print("support frames", support_idx)
support = encode_plain(clip.frames[support_idx], params, cfg)

# %%
# Seven prompts predicted from the support tokens by learnable queries.
pred = init_transformer_predictor(cfg.width, 7, Rng(0))
prompts = predict_transformer(support, pred, cfg.heads)
print("prompts", prompts.shape)

# %%
# Shallow prompting: the layers see 16 + 7 rows, the output keeps 16.
rows = []
shallow = encode_prompted_shallow(clip.frames[t], prompts, params, cfg, trace=rows)
print("rows per layer", rows, "output", shallow.shape)
print("shift from plain", float(np.abs(shallow - plain).max()))

# %%
# Deep prompting projects the same prompts once per layer and swaps them in.
deep_sets = project_deep(prompts, init_deep_projections(cfg.width, cfg.depth, Rng(0)), cfg.depth)
deep = encode_prompted_deep(clip.frames[t], deep_sets, params, cfg)
print("deep vs shallow", float(np.abs(deep - shallow).max()))
