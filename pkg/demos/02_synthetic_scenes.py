"""
Synthetic scenes with weak labels and proposal galleries
========================================================

Every image is a pure function of (seed, index): colored shapes painted
front to back, image-level labels saying only which classes appear, and
a gallery of class-agnostic proposal masks with noisy objectness scores.
The gallery imitates an off-the-shelf proposal method: perturbed copies
of each object plus distractor blobs.
"""

import os

import numpy as np

from peakseg.scenes import SceneConfig, generate_scene, shape_family

out_dir = os.path.join(os.path.dirname(__file__), "output")
os.makedirs(out_dir, exist_ok=True)

config = SceneConfig(height=96, width=96, num_classes=4, seed=3)
record = generate_scene(config, image_index=0)

print("image:", record.image.shape, record.image.dtype)
print("labels:", record.labels, " (class c present iff labels[c-1] == 1)")
print("instances:", [(i.class_id, shape_family(i.class_id)) for i in record.instances])
print("proposals:", len(record.proposals))

# Objectness correlates with how object-like a proposal is, but the
# scores are noisy on purpose: selecting by objectness alone picks a
# decent but imperfect mask, exactly the regime pseudo labels live in.
scores = np.array([p.objectness for p in record.proposals])
print("objectness range: %.3f .. %.3f" % (scores.min(), scores.max()))

# Regenerating the same (seed, index) gives the identical scene.
again = generate_scene(config, image_index=0)
assert np.array_equal(again.image, record.image)
print("regeneration bit-identical: ok")

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

fig, axes = plt.subplots(2, 5, figsize=(13, 5.5))
axes[0, 0].imshow(record.image)
axes[0, 0].set_title("image")

# Ground-truth instance masks (visible regions, pairwise disjoint).
overlay = np.zeros(record.image.shape[:2])
for k, inst in enumerate(record.instances, start=1):
    overlay[inst.mask] = k
axes[0, 1].imshow(overlay, cmap="tab10", interpolation="nearest")
axes[0, 1].set_title("instances")

# A few proposals, best and worst by objectness.
order = np.argsort(-scores)
for col, rank in enumerate([0, 1, 2]):
    p = record.proposals[order[rank]]
    axes[0, col + 2].imshow(p.mask, cmap="gray")
    axes[0, col + 2].set_title("b=%.2f" % p.objectness)
for col, rank in enumerate([len(order) - 3, len(order) - 2, len(order) - 1]):
    p = record.proposals[order[rank]]
    axes[1, col + 2].imshow(p.mask, cmap="gray")
    axes[1, col + 2].set_title("b=%.2f" % p.objectness)

axes[1, 0].hist(scores, bins=12, color="#4878a8")
axes[1, 0].set_title("objectness")
axes[1, 1].imshow(record.image)
for inst in record.instances:
    r0, c0, r1, c1 = inst.box
    axes[1, 1].add_patch(plt.Rectangle((c0 - 0.5, r0 - 0.5), c1 - c0 + 1,
                                       r1 - r0 + 1, fill=False, color="w"))
axes[1, 1].set_title("boxes")
for ax in axes.ravel():
    if not ax.has_data():
        ax.set_axis_off()
    elif ax is not axes[1, 0]:
        ax.set_axis_off()
fig.tight_layout()
path = os.path.join(out_dir, "02_synthetic_scenes.png")
fig.savefig(path, dpi=110)
print("figure:", path)
