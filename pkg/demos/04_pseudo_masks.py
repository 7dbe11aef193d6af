"""
From peaks to pseudo instance masks
===================================

Each peak of a class activation map marks one suspected object. The
proposals whose masks contain the peak's pixel are its candidates, and
one is drawn with probability proportional to objectness. The winning
proposal, labeled with the peak's class, becomes a pseudo mask: a free,
noisy stand-in for a human-drawn annotation.
"""

import os

import numpy as np

from peakseg import classifier as clf
from peakseg import pseudo as ps
from peakseg.masks import iou
from peakseg.scenes import SceneConfig, generate_scene

out_dir = os.path.join(os.path.dirname(__file__), "output")
os.makedirs(out_dir, exist_ok=True)

config = SceneConfig(height=64, width=64, num_classes=3, max_objects=3,
                     min_size=10, max_size=24, variants_per_instance=5,
                     distractors=8, seed=11)
records = [generate_scene(config, i) for i in range(80)]
model, _ = clf.train_classifier(records, config.num_classes,
                                epochs=25, lr=0.03, seed=0)

# Build pseudo masks for one image. Weak peaks (below half the map
# maximum) are dropped, and a peak with no covering proposal is skipped.
rec = records[4]
cams = clf.forward_cam(model, rec.image)
rng = np.random.default_rng(0)
targets, diag = ps.build_pseudo_targets(rec, cams, rng)
print("diagnostics:", diag)
for t in targets:
    print("  class %d  peak %s  proposal #%d  %d px"
          % (t.class_id, t.peak, t.proposal_index, int(t.mask.sum())))

# How good are pseudo masks, really? Compare each one against the best
# matching ground-truth instance (the demo may peek; training never does).
overlaps = []
for t in targets:
    best = max((iou(t.mask, inst.mask) for inst in rec.instances
                if inst.class_id == t.class_id), default=0.0)
    overlaps.append(best)
print("overlap with ground truth:", [round(v, 2) for v in overlaps])

# Sampling is stochastic: another visit may pick another candidate.
# Freezing the generator freezes the choice.
second = ps.build_pseudo_targets(rec, cams, np.random.default_rng(0))[0]
assert [t.proposal_index for t in second] == [t.proposal_index for t in targets]
print("same generator, same draws: ok")

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

n = max(len(targets), 1)
fig, axes = plt.subplots(2, n + 1, figsize=(2.6 * (n + 1), 5.2))
axes[0, 0].imshow(rec.image)
axes[0, 0].set_title("image")
gt = np.zeros(rec.image.shape[:2])
for k, inst in enumerate(rec.instances, start=1):
    gt[inst.mask] = k
axes[1, 0].imshow(gt, cmap="tab10", interpolation="nearest")
axes[1, 0].set_title("ground truth")
for k, t in enumerate(targets):
    axes[0, k + 1].imshow(t.mask, cmap="gray")
    axes[0, k + 1].set_title("pseudo, class %d" % t.class_id)
    axes[1, k + 1].imshow(rec.image)
    axes[1, k + 1].contour(t.mask, levels=[0.5], colors="cyan")
    axes[1, k + 1].set_title("iou %.2f" % overlaps[k])
for ax in axes.ravel():
    ax.set_axis_off()
fig.tight_layout()
path = os.path.join(out_dir, "04_pseudo_masks.png")
fig.savefig(path, dpi=110)
print("figure:", path)
