"""
Scoring instance predictions: mAP, best overlap, counting error
===============================================================

Predictions are matched to ground truth greedily in score order; a
match needs the same class, the same image, and mask IoU at or above
the threshold. From the match flags come precision-recall curves and
all-point interpolated average precision. ABO ignores scores entirely
and asks how well the best prediction covers each instance, and the
counting error compares per-image, per-class object counts.
"""

import os

import numpy as np

from peakseg import metrics as M

out_dir = os.path.join(os.path.dirname(__file__), "output")
os.makedirs(out_dir, exist_ok=True)


def rect(h, w, r0, c0, r1, c1):
    m = np.zeros((h, w), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


# Two images, two classes. Ground truth first.
gts = [
    {"image_id": "a", "class_id": 1, "mask": rect(32, 32, 4, 4, 12, 12)},
    {"image_id": "a", "class_id": 2, "mask": rect(32, 32, 18, 18, 30, 30)},
    {"image_id": "b", "class_id": 1, "mask": rect(32, 32, 8, 8, 24, 24)},
]

# Predictions: a good one, a duplicate, a near miss, and a wrong class.
preds = [
    {"image_id": "a", "class_id": 1, "score": 0.95, "mask": rect(32, 32, 4, 4, 12, 12)},
    {"image_id": "a", "class_id": 1, "score": 0.80, "mask": rect(32, 32, 5, 5, 12, 12)},
    {"image_id": "b", "class_id": 1, "score": 0.70, "mask": rect(32, 32, 9, 9, 22, 22)},
    {"image_id": "a", "class_id": 2, "score": 0.60, "mask": rect(32, 32, 2, 18, 10, 30)},
]

# The duplicate becomes a false positive: its ground truth is taken.
outcomes = M.greedy_match([p for p in preds if p["class_id"] == 1],
                          [g for g in gts if g["class_id"] == 1], 0.5)
print("class-1 outcomes at IoU 0.5:", outcomes)

for thr in M.IOU_THRESHOLDS:
    value, per_class = M.map_at(preds, gts, thr, num_classes=2)
    print("mAP@%.2f = %.3f  per-class %s"
          % (thr, value, {c: None if v is None else round(v, 3)
                          for c, v in per_class.items()}))

print("ABO       = %.3f" % M.abo(preds, gts, num_classes=2))
print("count MAE = %.3f" % M.count_mae(preds, gts, num_classes=2))

# The full report adds size and count breakdowns with an ignore rule:
# predictions matching an out-of-bin instance are dropped, not punished.
report = M.evaluate(preds, gts, num_classes=2)
print("size breakdown:", report["size_breakdown"])
print("count breakdown:", report["count_breakdown"])

M.plot_pr_curves(preds, gts, 2, os.path.join(out_dir, "05_pr_curves.png"))
print("figure:", os.path.join(out_dir, "05_pr_curves.png"))
