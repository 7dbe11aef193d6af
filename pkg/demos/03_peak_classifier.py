"""
Training a classifier from image-level labels, then reading its peaks
=====================================================================

The classifier sees only which classes appear in each image, never
where. Its convolutional head produces one activation map per class at
1/8 resolution; strict local maxima of those maps are the peaks, and
the class score is the mean activation over them. After training, the
peaks line up with object centers even though no location was ever
supervised.
"""

import os

import numpy as np

from peakseg import classifier as clf
from peakseg.scenes import SceneConfig, generate_scene

out_dir = os.path.join(os.path.dirname(__file__), "output")
os.makedirs(out_dir, exist_ok=True)

# A small training set keeps the demo quick; the pipeline default is larger.
config = SceneConfig(height=64, width=64, num_classes=3, max_objects=3,
                     min_size=10, max_size=24, variants_per_instance=3,
                     distractors=5, seed=11)
records = [generate_scene(config, i) for i in range(80)]

model, history = clf.train_classifier(records, config.num_classes,
                                      epochs=25, lr=0.03, seed=0)
print("loss: %.3f -> %.3f" % (history["loss"][0], history["loss"][-1]))

# Image-level accuracy on fresh scenes: probability above 0.5 means "present".
test = [generate_scene(config, 1000 + i) for i in range(40)]
hits = total = 0
for rec in test:
    probs, _ = clf.predict_scores(model, rec.image)
    hits += int(np.array_equal(probs > 0.5, rec.labels.astype(bool)))
    total += 1
print("exact label-vector accuracy: %d/%d" % (hits, total))

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

# Show CAMs and their peaks for one test image.
rec = test[0]
cams = clf.forward_cam(model, rec.image)
fig, axes = plt.subplots(1, config.num_classes + 2, figsize=(13, 3))
axes[0].imshow(rec.image)
axes[0].set_title("image (labels %s)" % rec.labels.tolist())
axes[0].set_axis_off()
for c in range(config.num_classes):
    ax = axes[c + 1]
    ax.imshow(cams[c], cmap="magma")
    peaks = clf.find_peaks(cams[c], window=3)
    if peaks:
        rows, cols = zip(*peaks)
        ax.scatter(cols, rows, s=18, c="cyan", marker="x")
    ax.set_title("class %d: %d peaks" % (c + 1, len(peaks)))
    ax.set_axis_off()
axes[-1].plot(history["loss"])
axes[-1].set_title("training loss")
axes[-1].set_xlabel("epoch")
fig.tight_layout()
path = os.path.join(out_dir, "03_peak_classifier.png")
fig.savefig(path, dpi=110)
print("figure:", path)
