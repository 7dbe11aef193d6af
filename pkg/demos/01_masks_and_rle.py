"""
Binary masks, run-length encoding, and overlap
==============================================

Instance masks travel through the pipeline as run-length encodings:
column-major runs, starting with the background run. This script round
trips a few masks through the codec and checks the overlap helpers.
"""

import os

import numpy as np

from peakseg import masks

out_dir = os.path.join(os.path.dirname(__file__), "output")
os.makedirs(out_dir, exist_ok=True)

# A small blob to encode. Anything boolean and 2-d works.
rng = np.random.default_rng(7)
mask = np.zeros((24, 32), dtype=bool)
mask[6:18, 8:20] = True
mask[10:14, 18:28] = True

counts = masks.rle_encode(mask)
print("mask pixels:", int(mask.sum()))
print("runs:", len(counts), "first runs:", counts[:6])

# The codec is lossless: decoding returns the exact array. The JSON
# object form carries the shape along with the counts.
back = masks.rle_decode(counts, *mask.shape)
assert np.array_equal(back, mask)
obj = masks.rle_to_obj(mask)
assert np.array_equal(masks.rle_from_obj(obj), mask)
print("round trip exact:", np.array_equal(back, mask),
      "| object form size:", obj["size"])

# Overlap is plain Jaccard similarity. Shifting a copy of the mask
# makes the overlap drop off smoothly.
shifts = range(0, 13, 2)
overlaps = []
for s in shifts:
    shifted = np.zeros_like(mask)
    shifted[:, s:] = mask[:, : mask.shape[1] - s]
    overlaps.append(masks.iou(mask, shifted))
print("iou by shift:", [round(v, 3) for v in overlaps])

# iou is symmetric and bounded; identical masks score 1, disjoint 0.
a, b = mask, np.roll(mask, 16, axis=1)
assert masks.iou(a, b) == masks.iou(b, a)
assert masks.iou(a, a) == 1.0
assert 0.0 <= masks.iou(a, b) <= 1.0

# Random masks round trip too, including empty and full ones.
for density in (0.0, 0.1, 0.5, 0.9, 1.0):
    m = rng.random((17, 23)) < density
    assert np.array_equal(masks.rle_decode(masks.rle_encode(m), 17, 23), m)
print("random density round trips: ok")

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

fig, axes = plt.subplots(1, 3, figsize=(9, 3))
axes[0].imshow(mask, cmap="gray")
axes[0].set_title("mask")
axes[1].imshow(back, cmap="gray")
axes[1].set_title("decode(encode(mask))")
axes[2].plot(list(shifts), overlaps, marker="o")
axes[2].set_title("iou vs shift")
axes[2].set_xlabel("column shift")
for ax in axes[:2]:
    ax.set_axis_off()
fig.tight_layout()
path = os.path.join(out_dir, "01_masks_and_rle.png")
fig.savefig(path, dpi=110)
print("figure:", path)
