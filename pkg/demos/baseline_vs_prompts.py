"""
Per-frame baseline against prompted encoding
============================================

Train both models for the same number of steps on a small generated set and
compare accuracy on degraded frames. Takes about a minute.
"""

# %%
import logging

from stpn import harness
from stpn.config import RunConfig

logging.basicConfig(level=logging.WARNING)

# %%
# 300 clips of 8 frames; half the frames are blurred, occluded or both.
base = RunConfig(clips=300, frames=8, size="32x32", classes=4, degrade_prob=0.5, S=1, K=4, NP=7,
                 batch=32, lr=3e-3, steps=300, eval_every=100)
train_clips, eval_clips = harness.load_data(base)
print(len(train_clips), "train clips,", len(eval_clips), "eval clips")

# %%
# Same data, same seed, same step budget. Only the injection mode differs.
for injection in ("none", "shallow"):
    result = harness.train(base.replace(injection=injection), train_clips, eval_clips)
    last = result.history[-1]
    print(f"{injection:8s} acc {last.acc:.3f}  degraded {last.acc_degraded:.3f}  clean {last.acc_clean:.3f}"
          f"  ({result.steps_per_sec:.1f} steps/s)")
