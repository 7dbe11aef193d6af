"""Detect-then-segment model trained on sampled pseudo masks.

Gallery proposal boxes act as regions of interest (there is no learned
proposal stage): a small convolutional backbone feeds RoI-pooled features
to three heads that classify each region, regress a box correction, and
paint a 28x28 mask per class. Predictions can afterwards be swapped for
the best-overlapping gallery proposal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import masks as mk
from . import nn
from .errors import TrainingDiverged

FEAT_STRIDE = 4
ROI_SIZE = 7
MASK_SIZE = 28
DELTA_CLAMP = 2.0


def build_segmenter(num_classes: int, rng: np.random.Generator | None = None) -> dict:
    rng = rng or np.random.default_rng(0)
    backbone = nn.Sequential([
        nn.Conv2d(3, 16, 3, stride=2, rng=rng), nn.ReLU(),
        nn.Conv2d(16, 32, 3, stride=2, rng=rng), nn.ReLU(),
        nn.Conv2d(32, 64, 3, stride=1, rng=rng), nn.ReLU(),
    ])
    trunk = nn.Sequential([
        nn.Linear(64 * ROI_SIZE * ROI_SIZE, 256, rng=rng), nn.ReLU(),
    ])
    # Near-zero head weights make the initial predictions neutral: every
    # box starts as its own RoI, classes start uniform, masks start at
    # 0.5. A default-scale init puts the log-size deltas at order one,
    # which scatters the initial boxes too far for the small box-loss
    # gradients to pull back.
    return {
        "backbone": backbone,
        "trunk": trunk,
        "cls": nn.Linear(256, num_classes + 1, rng=rng, w_scale=0.01),
        "box": nn.Linear(256, 4, rng=rng, w_scale=0.001),
        "mask": nn.Linear(256, num_classes * MASK_SIZE * MASK_SIZE, rng=rng,
                          w_scale=0.01),
        "num_classes": num_classes,
    }


def _modules(model: dict) -> dict:
    return {k: model[k] for k in ("backbone", "trunk", "cls", "box", "mask")}


# ---------------------------------------------------------------------------
# Box parameterization
# ---------------------------------------------------------------------------

def _box_geometry(boxes: np.ndarray):
    boxes = np.asarray(boxes, dtype=np.float64)
    h = boxes[:, 2] - boxes[:, 0] + 1
    w = boxes[:, 3] - boxes[:, 1] + 1
    cy = boxes[:, 0] + (h - 1) / 2
    cx = boxes[:, 1] + (w - 1) / 2
    return cy, cx, h, w


def encode_box_delta(rois: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Regression targets: center offsets in units of RoI size, log size ratios."""
    ry, rx, rh, rw = _box_geometry(rois)
    ty, tx, th, tw = _box_geometry(targets)
    return np.stack([(ty - ry) / rh, (tx - rx) / rw,
                     np.log(th / rh), np.log(tw / rw)], axis=1)


def decode_box_delta(rois: np.ndarray, deltas: np.ndarray,
                     image_shape: tuple[int, int]) -> np.ndarray:
    """Apply predicted deltas to RoIs, returning clipped inclusive int boxes."""
    ry, rx, rh, rw = _box_geometry(np.atleast_2d(rois))
    d = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
    cy = ry + d[:, 0] * rh
    cx = rx + d[:, 1] * rw
    # only the log-size terms are clamped; exp would blow up otherwise
    h = rh * np.exp(np.clip(d[:, 2], -DELTA_CLAMP, DELTA_CLAMP))
    w = rw * np.exp(np.clip(d[:, 3], -DELTA_CLAMP, DELTA_CLAMP))
    r0 = np.floor(cy - (h - 1) / 2 + 0.5)
    c0 = np.floor(cx - (w - 1) / 2 + 0.5)
    r1 = np.floor(cy + (h - 1) / 2 + 0.5)
    c1 = np.floor(cx + (w - 1) / 2 + 0.5)
    out = np.stack([r0, c0, r1, c1], axis=1).astype(np.int64)
    out[:, 0] = np.clip(out[:, 0], 0, image_shape[0] - 1)
    out[:, 1] = np.clip(out[:, 1], 0, image_shape[1] - 1)
    out[:, 2] = np.clip(out[:, 2], 0, image_shape[0] - 1)
    out[:, 3] = np.clip(out[:, 3], 0, image_shape[1] - 1)
    out[:, 2] = np.maximum(out[:, 2], out[:, 0])
    out[:, 3] = np.maximum(out[:, 3], out[:, 1])
    return out


def assign_rois(roi_boxes: np.ndarray, target_boxes: np.ndarray,
                iou_threshold: float = 0.5) -> np.ndarray:
    """Match each RoI to a target: index of the best target when the best
    box IoU reaches the threshold, else -1 (background). Ties pick the
    lowest target index."""
    roi_boxes = np.atleast_2d(roi_boxes)
    if len(target_boxes) == 0:
        return np.full(len(roi_boxes), -1, dtype=np.int64)
    iou = mk.box_iou_matrix(roi_boxes, np.atleast_2d(target_boxes))
    best = iou.argmax(axis=1)  # argmax returns the first (lowest) maximizer
    matched = iou[np.arange(len(roi_boxes)), best] >= iou_threshold
    return np.where(matched, best, -1)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _smooth_l1(d: np.ndarray):
    a = np.abs(d)
    loss = np.where(a < 1, 0.5 * d * d, a - 0.5)
    grad = np.where(a < 1, d, np.sign(d))
    return loss, grad


def segmentation_loss(cls_logits: np.ndarray, box_deltas: np.ndarray,
                      mask_logits: np.ndarray, roi_labels: np.ndarray,
                      box_targets: np.ndarray, mask_targets: np.ndarray,
                      positive: np.ndarray):
    """Joint loss over one image's RoIs and its gradients.

    cls_logits: (R, C+1) with class 0 = background, scored for every RoI.
    box_deltas: (R, 4); mask_logits: (R, C, S, S). Box and mask terms are
    elementwise means over positive RoIs only and are zero without
    positives. Total is the unweighted sum of the three terms.
    """
    r = cls_logits.shape[0]
    probs = nn.softmax(cls_logits, axis=1)
    picked = np.clip(probs[np.arange(r), roi_labels], 1e-12, None)
    l_cls = float(-np.log(picked).mean())
    dcls = probs.copy()
    dcls[np.arange(r), roi_labels] -= 1.0
    dcls /= r

    dbox = np.zeros_like(box_deltas)
    dmask = np.zeros_like(mask_logits)
    pos_idx = np.nonzero(positive)[0]
    if pos_idx.size:
        diff = box_deltas[pos_idx] - box_targets[pos_idx]
        loss_el, grad_el = _smooth_l1(diff)
        l_box = float(loss_el.mean())
        dbox[pos_idx] = grad_el / loss_el.size

        chan = roi_labels[pos_idx] - 1  # mask channels hold real classes only
        logits = mask_logits[pos_idx, chan]
        targets = mask_targets[pos_idx]
        bce = -(targets * nn.log_sigmoid(logits)
                + (1 - targets) * nn.log_sigmoid(-logits))
        l_mask = float(bce.mean())
        dmask[pos_idx, chan] = (nn.sigmoid(logits) - targets) / bce.size
    else:
        l_box = 0.0
        l_mask = 0.0

    parts = {"cls": l_cls, "box": l_box, "mask": l_mask}
    return l_cls + l_box + l_mask, parts, (dcls, dbox, dmask)


# ---------------------------------------------------------------------------
# Forward/backward plumbing
# ---------------------------------------------------------------------------

def _forward_rois(model: dict, image: np.ndarray, roi_boxes: np.ndarray):
    x = image.transpose(2, 0, 1)[None]
    feat = model["backbone"].forward(x)[0]
    pooled, cache = nn.roi_align(feat, roi_boxes, ROI_SIZE, FEAT_STRIDE)
    flat = pooled.reshape(len(roi_boxes), -1)
    hidden = model["trunk"].forward(flat)
    num_classes = model["num_classes"]
    cls_logits = model["cls"].forward(hidden)
    box_deltas = model["box"].forward(hidden)
    mask_logits = model["mask"].forward(hidden).reshape(
        len(roi_boxes), num_classes, MASK_SIZE, MASK_SIZE)
    return (cls_logits, box_deltas, mask_logits), (cache, pooled.shape, feat.shape)


def _backward_rois(model: dict, grads, cache) -> None:
    dcls, dbox, dmask = grads
    roi_cache, pooled_shape, _ = cache
    dhidden = (model["cls"].backward(dcls)
               + model["box"].backward(dbox)
               + model["mask"].backward(dmask.reshape(len(dmask), -1)))
    dflat = model["trunk"].backward(dhidden)
    dfeat = nn.roi_align_backward(dflat.reshape(pooled_shape), roi_cache)
    model["backbone"].backward(dfeat[None])


def _jitter_boxes(boxes: np.ndarray, count: int, rng: np.random.Generator,
                  image_shape: tuple[int, int]) -> np.ndarray:
    """Randomly shifted and rescaled copies of the given boxes."""
    if len(boxes) == 0 or count == 0:
        return np.zeros((0, 4), dtype=np.int64)
    rep = np.repeat(np.asarray(boxes, dtype=np.float64), count, axis=0)
    cy, cx, h, w = _box_geometry(rep)
    cy = cy + rng.uniform(-0.15, 0.15, len(rep)) * h
    cx = cx + rng.uniform(-0.15, 0.15, len(rep)) * w
    h = h * np.exp(rng.uniform(-0.25, 0.25, len(rep)))
    w = w * np.exp(rng.uniform(-0.25, 0.25, len(rep)))
    r0 = np.floor(cy - (h - 1) / 2 + 0.5)
    c0 = np.floor(cx - (w - 1) / 2 + 0.5)
    r1 = np.floor(cy + (h - 1) / 2 + 0.5)
    c1 = np.floor(cx + (w - 1) / 2 + 0.5)
    out = np.stack([r0, c0, r1, c1], axis=1).astype(np.int64)
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, image_shape[0] - 1)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, image_shape[1] - 1)
    out[:, 2] = np.maximum(out[:, 2], out[:, 0])
    out[:, 3] = np.maximum(out[:, 3], out[:, 1])
    return out


@dataclass
class _RoiBatch:
    boxes: np.ndarray
    labels: np.ndarray
    positive: np.ndarray
    box_targets: np.ndarray
    mask_targets: np.ndarray


def _build_roi_batch(record, targets, rng: np.random.Generator,
                     proposal_boxes: np.ndarray, *, roi_per_image: int,
                     jitter_per_target: int) -> _RoiBatch | None:
    image_shape = record.image.shape[:2]
    target_boxes = np.array([mk.box_to_array(mk.bbox(t.mask)) for t in targets])
    jitter = _jitter_boxes(target_boxes, jitter_per_target, rng, image_shape)
    rois = np.concatenate([proposal_boxes, jitter], axis=0)
    matched = assign_rois(rois, target_boxes)

    pos_idx = np.nonzero(matched >= 0)[0]
    neg_idx = np.nonzero(matched < 0)[0]
    room = max(roi_per_image - pos_idx.size, 0)
    if neg_idx.size > room:
        neg_idx = rng.choice(neg_idx, size=room, replace=False)
    keep = np.sort(np.concatenate([pos_idx, neg_idx]))
    rois = rois[keep]
    matched = matched[keep]

    positive = matched >= 0
    labels = np.zeros(len(rois), dtype=np.int64)
    box_targets = np.zeros((len(rois), 4))
    mask_targets = np.zeros((len(rois), MASK_SIZE, MASK_SIZE))
    for k in np.nonzero(positive)[0]:
        t = targets[matched[k]]
        labels[k] = t.class_id
        box_targets[k] = encode_box_delta(rois[k][None],
                                          target_boxes[matched[k]][None])[0]
        mask_targets[k] = nn.crop_resize_nearest(t.mask, rois[k], MASK_SIZE)
    return _RoiBatch(rois, labels, positive, box_targets, mask_targets)


def train_segmenter(records, target_fn, num_classes: int, *, lr: float = 0.005,
                    momentum: float = 0.9, epochs: int = 20, seed: int = 0,
                    roi_per_image: int = 64, jitter_per_target: int = 3,
                    model: dict | None = None):
    """Train the detect-then-segment model on sampled pseudo targets.

    target_fn(record, rng) supplies that visit's instance targets; when it
    draws fresh samples each call the model sees a different consistent
    mask set every epoch. Images with no targets are skipped. Returns the
    model and per-epoch mean losses for each term.
    """
    rng = np.random.default_rng(seed)
    if model is None:
        model = build_segmenter(num_classes, rng)
    opt = nn.SGD(_modules(model), lr=lr, momentum=momentum)
    proposal_boxes = [
        np.array([mk.box_to_array(mk.bbox(p.mask)) for p in r.proposals])
        for r in records
    ]
    history = {"loss": [], "cls": [], "box": [], "mask": [], "skipped": []}
    for _ in range(epochs):
        order = rng.permutation(len(records))
        sums = {"loss": 0.0, "cls": 0.0, "box": 0.0, "mask": 0.0}
        stepped = 0
        skipped = 0
        for idx in order:
            record = records[idx]
            targets = target_fn(record, rng)
            if not targets:
                skipped += 1
                continue
            batch = _build_roi_batch(record, targets, rng, proposal_boxes[idx],
                                     roi_per_image=roi_per_image,
                                     jitter_per_target=jitter_per_target)
            outputs, cache = _forward_rois(model, record.image, batch.boxes)
            total, parts, grads = segmentation_loss(
                *outputs, batch.labels, batch.box_targets, batch.mask_targets,
                batch.positive)
            if not np.isfinite(total):
                raise TrainingDiverged(f"segmenter loss became {total}")
            _backward_rois(model, grads, cache)
            opt.step()
            stepped += 1
            sums["loss"] += total
            for key in ("cls", "box", "mask"):
                sums[key] += parts[key]
        denom = max(stepped, 1)
        for key in ("loss", "cls", "box", "mask"):
            history[key].append(sums[key] / denom)
        history["skipped"].append(skipped)
    return model, history


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.5):
    """Greedy non-maximum suppression; suppresses IoU strictly above the
    threshold. Returns kept indices in score order (ties keep input order)."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    boxes = np.atleast_2d(boxes)
    kept = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        kept.append(int(i))
        later = order[pos + 1:]
        later = later[~suppressed[later]]
        if later.size:
            iou = mk.box_iou_matrix(boxes[i][None], boxes[later])[0]
            suppressed[later[iou > iou_threshold]] = True
    return kept


def predict(model: dict, image: np.ndarray, proposals, *,
            score_min: float = 0.5, nms_iou: float = 0.5,
            mask_threshold: float = 0.5) -> list[dict]:
    """Detect and segment instances in one image.

    Every gallery proposal box is scored; a region keeps its best real
    class when that probability reaches score_min, survives per-class NMS,
    and contributes a full-resolution mask decoded from its 28x28 channel
    inside the corrected box. Results are sorted by score descending.
    """
    if not proposals:
        return []
    image = np.asarray(image, dtype=np.float64)
    image_shape = image.shape[:2]
    roi_boxes = np.array([mk.box_to_array(mk.bbox(p.mask)) for p in proposals])
    (cls_logits, box_deltas, mask_logits), _ = _forward_rois(model, image,
                                                             roi_boxes)
    probs = nn.softmax(cls_logits, axis=1)
    class_probs = probs[:, 1:]
    winners = class_probs.argmax(axis=1) + 1
    scores = class_probs[np.arange(len(proposals)), winners - 1]
    keep = scores >= score_min
    if not keep.any():
        return []
    idx = np.nonzero(keep)[0]
    final_boxes = decode_box_delta(roi_boxes[idx], box_deltas[idx], image_shape)

    results = []
    for class_id in np.unique(winners[idx]):
        sel = idx[winners[idx] == class_id]
        boxes_c = final_boxes[np.nonzero(winners[idx] == class_id)[0]]
        kept = nms(boxes_c, scores[sel], nms_iou)
        for k in kept:
            r = sel[k]
            box = boxes_c[k]
            grid = nn.sigmoid(mask_logits[r, class_id - 1])
            bh = box[2] - box[0] + 1
            bw = box[3] - box[1] + 1
            painted = nn.resize_bilinear(grid, bh, bw) >= mask_threshold
            if not painted.any():
                continue
            mask = np.zeros(image_shape, dtype=bool)
            mask[box[0]:box[2] + 1, box[1]:box[3] + 1] = painted
            results.append({"class_id": int(class_id),
                            "score": float(scores[r]),
                            "box": [int(v) for v in box],
                            "mask": mask})
    results.sort(key=lambda d: -d["score"])
    return results


def refine_predictions(predictions: list[dict], proposals) -> list[dict]:
    """Swap each predicted mask for the gallery proposal it overlaps most.

    Class and score are untouched; the box is recomputed from the adopted
    mask. A prediction overlapping nothing keeps its own mask. Ties pick
    the lowest proposal index, which makes the operation idempotent when
    the gallery already contains the mask.
    """
    refined = []
    for pred in predictions:
        best_iou = 0.0
        best_mask = None
        for p in proposals:
            v = mk.iou(pred["mask"], p.mask)
            if v > best_iou:
                best_iou = v
                best_mask = p.mask
        out = dict(pred)
        if best_mask is not None:
            out["mask"] = best_mask
            out["box"] = [int(v) for v in mk.box_to_array(mk.bbox(best_mask))]
        refined.append(out)
    return refined


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_segmenter(path, model: dict, extra: dict | None = None) -> None:
    path = Path(path)
    np.savez(path, **nn.state_dict(_modules(model)))
    meta = {"num_classes": model["num_classes"], "feat_stride": FEAT_STRIDE,
            "roi_size": ROI_SIZE, "mask_size": MASK_SIZE}
    meta.update(extra or {})
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_segmenter(path) -> tuple[dict, dict]:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    model = build_segmenter(int(meta["num_classes"]))
    with np.load(path) as data:
        state = {k: data[k] for k in data.files}
    nn.load_state_dict(_modules(model), state)
    return model, meta
