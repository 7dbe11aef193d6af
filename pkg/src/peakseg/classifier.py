"""Image-level classifier whose class response maps expose instance peaks.

A small fully convolutional network maps an RGB image to one response map
per class at 1/8 resolution. Strict local maxima of each map act as
instance candidates; their mean activation is the image-level class score,
so the network can be trained with nothing but presence/absence labels.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import nn
from .errors import TrainingDiverged

CAM_STRIDE = 8
LOG_FLOOR = 1e-12


def build_classifier(num_classes: int, rng: np.random.Generator | None = None) -> dict:
    """Fully convolutional scorer: image (3ch) -> per-class maps at 1/8 scale."""
    rng = rng or np.random.default_rng(0)
    features = nn.Sequential([
        nn.Conv2d(3, 16, 3, stride=2, rng=rng), nn.ReLU(),
        nn.Conv2d(16, 32, 3, stride=2, rng=rng), nn.ReLU(),
        nn.Conv2d(32, 64, 3, stride=2, rng=rng), nn.ReLU(),
        nn.Conv2d(64, 64, 3, stride=1, rng=rng), nn.ReLU(),
    ])
    head = nn.Conv2d(64, num_classes, 1, pad=0, rng=rng)
    return {"features": features, "head": head, "num_classes": num_classes}


def _to_nchw(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    return image.transpose(2, 0, 1)[None]


def _forward_batch(model: dict, batch: np.ndarray) -> np.ndarray:
    return model["head"].forward(model["features"].forward(batch))


def forward_cam(model: dict, image: np.ndarray) -> np.ndarray:
    """Class response maps for one image: (num_classes, H/8, W/8)."""
    return _forward_batch(model, _to_nchw(image))[0]


def find_peaks(cam: np.ndarray, window: int = 3) -> list[tuple[int, int]]:
    """Strict local maxima of a 2D map within an odd square window.

    A location is a peak when its value exceeds every other value in the
    window centered on it; the window is clipped at map borders. Peaks are
    returned sorted by value descending, ties broken by (row, col).
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    cam = np.asarray(cam, dtype=np.float64)
    if cam.ndim != 2:
        raise ValueError(f"expected a 2D map, got shape {cam.shape}")
    footprint = np.ones((window, window), dtype=bool)
    footprint[window // 2, window // 2] = False
    neighbor_max = ndimage.maximum_filter(cam, footprint=footprint,
                                          mode="constant", cval=-np.inf)
    rows, cols = np.nonzero(cam > neighbor_max)
    order = np.lexsort((cols, rows, -cam[rows, cols]))
    return [(int(rows[k]), int(cols[k])) for k in order]


def peak_score(cam: np.ndarray, peaks: list[tuple[int, int]]) -> float:
    """Mean activation over peaks; the global maximum if there are none."""
    cam = np.asarray(cam, dtype=np.float64)
    if not peaks:
        return float(cam.max())
    return float(np.mean([cam[i, j] for i, j in peaks]))


def peak_pool(cams: np.ndarray, window: int = 3):
    """Per-class peak-mean scores plus the positions that produced them.

    Returns (scores, pooled) where pooled[c] is the list of positions whose
    mean gave scores[c]; with no peaks it is the single argmax location, so
    the score is always a mean over pooled[c].
    """
    num_classes = cams.shape[0]
    scores = np.empty(num_classes)
    pooled = []
    for c in range(num_classes):
        peaks = find_peaks(cams[c], window)
        if not peaks:
            flat = int(np.argmax(cams[c]))
            peaks = [tuple(int(v) for v in np.unravel_index(flat, cams[c].shape))]
        pooled.append(peaks)
        scores[c] = np.mean([cams[c][i, j] for i, j in peaks])
    return scores, pooled


def peak_pool_backward(dscores: np.ndarray, pooled, cam_shape) -> np.ndarray:
    """Spread score gradients evenly over each class's pooled positions."""
    dcams = np.zeros(cam_shape)
    for c, peaks in enumerate(pooled):
        share = dscores[c] / len(peaks)
        for i, j in peaks:
            dcams[c, i, j] += share
    return dcams


def multilabel_loss(scores: np.ndarray, labels: np.ndarray):
    """Mean per-class soft-margin loss and its gradient in the scores.

    loss = -(1/C) sum_c [ y_c log sig(s_c) + (1 - y_c) log sig(-s_c) ]
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} vs labels {labels.shape}")
    num_classes = scores.shape[-1]
    pos = np.maximum(nn.log_sigmoid(scores), np.log(LOG_FLOOR))
    neg = np.maximum(nn.log_sigmoid(-scores), np.log(LOG_FLOOR))
    loss = -(labels * pos + (1 - labels) * neg).sum(axis=-1) / num_classes
    grad = (nn.sigmoid(scores) - labels) / num_classes
    return float(np.mean(loss)), grad


def train_classifier(records, num_classes: int, *, window: int = 3,
                     lr: float = 0.01, momentum: float = 0.9, epochs: int = 30,
                     batch_size: int = 8, seed: int = 0,
                     model: dict | None = None):
    """Train the peak classifier from image-level labels only.

    records: sequence with .image (H, W, 3) and .labels (num_classes,).
    Augmentation is restricted to random horizontal flips. Returns the
    model and a history dict with per-epoch mean loss.
    """
    rng = np.random.default_rng(seed)
    if model is None:
        model = build_classifier(num_classes, rng)
    opt = nn.SGD({"features": model["features"], "head": model["head"]},
                 lr=lr, momentum=momentum)
    images = np.stack([r.image.transpose(2, 0, 1) for r in records])
    labels = np.stack([np.asarray(r.labels, dtype=np.float64) for r in records])
    n = len(records)
    history = {"loss": []}
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = images[idx]
            flip = rng.random(len(idx)) < 0.5
            if flip.any():
                batch = batch.copy()
                batch[flip] = batch[flip][:, :, :, ::-1]
            cams = _forward_batch(model, batch)
            dcams = np.zeros_like(cams)
            batch_loss = 0.0
            for b in range(len(idx)):
                scores, pooled = peak_pool(cams[b], window)
                loss, dscores = multilabel_loss(scores, labels[idx[b]])
                batch_loss += loss
                dcams[b] = peak_pool_backward(dscores / len(idx), pooled,
                                              cams[b].shape)
            batch_loss /= len(idx)
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(f"classifier loss became {batch_loss}")
            model["features"].backward(model["head"].backward(dcams))
            opt.step()
            epoch_loss += batch_loss * len(idx)
        history["loss"].append(epoch_loss / n)
    return model, history


def predict_scores(model: dict, image: np.ndarray, window: int = 3):
    """Class presence probabilities and response maps for one image."""
    cams = forward_cam(model, image)
    scores, _ = peak_pool(cams, window)
    return nn.sigmoid(scores), cams


def save_classifier(path, model: dict, extra: dict | None = None) -> None:
    path = Path(path)
    state = nn.state_dict({"features": model["features"], "head": model["head"]})
    np.savez(path, **state)
    meta = {"num_classes": model["num_classes"], "cam_stride": CAM_STRIDE}
    meta.update(extra or {})
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_classifier(path) -> tuple[dict, dict]:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    model = build_classifier(int(meta["num_classes"]))
    with np.load(path) as data:
        state = {k: data[k] for k in data.files}
    nn.load_state_dict({"features": model["features"], "head": model["head"]}, state)
    return model, meta
