"""Independent reference evaluator used to cross-check metrics.

Deliberately written in a different style from the library: pixel-set
IoU, dict-heavy bookkeeping, and a literal reading of the matching and
interpolation rules. Slow but obviously correct.
"""

import numpy as np


def pixel_iou(mask_a, mask_b):
    a = {(i, j) for i, j in zip(*np.nonzero(mask_a))}
    b = {(i, j) for i, j in zip(*np.nonzero(mask_b))}
    union = a | b
    if not union:
        return 0.0
    return len(a & b) / len(union)


def ref_match(preds, gts, thr, in_bin=None):
    """Greedy matching; returns per-prediction outcome strings."""
    if in_bin is None:
        in_bin = [True] * len(gts)
    order = sorted(range(len(preds)),
                   key=lambda k: (-preds[k]["score"], preds[k]["image_id"],
                                  preds[k].get("index", k)))
    taken = set()
    outcomes = []
    for k in order:
        p = preds[k]
        best = None
        hit_ignored = False
        for g, gt in enumerate(gts):
            if gt["image_id"] != p["image_id"]:
                continue
            v = pixel_iou(p["mask"], gt["mask"])
            if v < thr:
                continue
            if not in_bin[g]:
                hit_ignored = True
            elif g not in taken:
                if best is None or v > best[1]:
                    best = (g, v)
        if best is not None:
            taken.add(best[0])
            outcomes.append("tp")
        elif hit_ignored:
            outcomes.append("ignore")
        else:
            outcomes.append("fp")
    return outcomes


def ref_ap(flags, num_gt):
    """All-point interpolation written as the literal envelope definition."""
    points = []
    tp = fp = 0
    for flag in flags:
        if flag:
            tp += 1
        else:
            fp += 1
        points.append((tp / num_gt, tp / (tp + fp)))
    if not points:
        return 0.0
    ap = 0.0
    prev_r = 0.0
    for r, _ in points:
        if r <= prev_r:
            continue
        best = max(p for r2, p in points if r2 >= r)
        ap += (r - prev_r) * best
        prev_r = r
    return ap


def ref_map(preds, gts, thr, num_classes):
    values = []
    for c in range(1, num_classes + 1):
        cls_gts = [g for g in gts if g["class_id"] == c]
        if not cls_gts:
            continue
        cls_preds = [p for p in preds if p["class_id"] == c]
        flags = [o == "tp" for o in ref_match(cls_preds, cls_gts, thr)]
        values.append(ref_ap(flags, len(cls_gts)))
    return float(np.mean(values)) if values else None


def ref_abo(preds, gts, num_classes):
    values = []
    for c in range(1, num_classes + 1):
        cls_gts = [g for g in gts if g["class_id"] == c]
        if not cls_gts:
            continue
        per_gt = []
        for gt in cls_gts:
            overlaps = [pixel_iou(gt["mask"], p["mask"]) for p in preds
                        if p["class_id"] == c
                        and p["image_id"] == gt["image_id"]]
            per_gt.append(max(overlaps) if overlaps else 0.0)
        values.append(sum(per_gt) / len(per_gt))
    return float(np.mean(values)) if values else None


def ref_count_mae(preds, gts, num_classes):
    cells = {}
    for gt in gts:
        key = (gt["image_id"], gt["class_id"])
        cells.setdefault(key, [0, 0])[0] += 1
    for p in preds:
        key = (p["image_id"], p["class_id"])
        cells.setdefault(key, [0, 0])[1] += 1
    if not cells:
        return None
    return sum(abs(g - p) for g, p in cells.values()) / len(cells)


def ref_binned_map(preds, gts, num_classes, bin_of_gt, name, thr=0.5):
    """bin_of_gt: list of bin names aligned with gts."""
    values = []
    for c in range(1, num_classes + 1):
        idx = [k for k, g in enumerate(gts) if g["class_id"] == c]
        cls_gts = [gts[k] for k in idx]
        in_bin = [bin_of_gt[k] == name for k in idx]
        if not any(in_bin):
            continue
        cls_preds = [p for p in preds if p["class_id"] == c]
        outcomes = ref_match(cls_preds, cls_gts, thr, in_bin=in_bin)
        flags = [o == "tp" for o in outcomes if o != "ignore"]
        values.append(ref_ap(flags, sum(in_bin)))
    return float(np.mean(values)) if values else None
