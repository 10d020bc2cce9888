"""
Motion speed of generated clips
===============================

Bucket clips by the mean IoU of each box with the box ten frames away.
"""

# %%
from collections import Counter

from stpn.synthvid import AnnotatedBox, gen_dataset, motion_iou_category

# %%
# Hand-made tracks first: a 10x10 box moving 0, 1 and 5 pixels per 10 frames.
for step in (0, 1, 5):
    track = [AnnotatedBox(t * step / 10, 0, t * step / 10 + 10, 10) for t in range(30)]
    cat, m = motion_iou_category(track)
    print(f"{step} px / 10 frames: mIoU {m:.4f} -> {cat}")

# %%
# Generated clips are short (16 frames here), so the offset shrinks to the
# clip length minus one when needed.
clips = gen_dataset(200, 16, 32, 32, 4, seed=0)
print(Counter(motion_iou_category(c.boxes)[0] for c in clips))
