"""Instance-segmentation evaluation: AP, best-overlap, counting error.

Predictions and ground truth are plain dicts carrying boolean masks.
Matching is greedy per class in global score order, AP uses all-point
interpolation (the precision envelope), and breakdowns re-run matching
inside object-size and per-image-count bins with out-of-bin instances
treated as ignores rather than errors.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import masks as mk

IOU_THRESHOLDS = (0.25, 0.5, 0.75)
SIZE_BINS = ("small", "medium", "large")
COUNT_BINS = ("1", "2-4", "5+")


def gts_from_records(records) -> list[dict]:
    """Flatten scene records into ground-truth entries (reads instances)."""
    out = []
    for r in records:
        for inst in r.instances:
            out.append({"image_id": r.image_id, "class_id": inst.class_id,
                        "mask": inst.mask})
    return out


def _normalize_preds(preds) -> list[dict]:
    """Attach a per-image index used for deterministic tie-breaking."""
    seen: dict[str, int] = {}
    out = []
    for p in preds:
        idx = seen.get(p["image_id"], 0)
        seen[p["image_id"]] = idx + 1
        q = dict(p)
        q["index"] = idx
        out.append(q)
    return out


def _score_order(preds) -> list[int]:
    return sorted(range(len(preds)),
                  key=lambda k: (-preds[k]["score"], preds[k]["image_id"],
                                 preds[k]["index"]))


def greedy_match(preds, gts, iou_threshold: float,
                 gt_in_bin=None) -> list[str]:
    """Match one class's predictions to its ground truth.

    Predictions are visited in score order (ties: image_id, then index);
    each claims the highest-IoU unmatched in-bin instance in its image if
    that IoU reaches the threshold. With a bin mask, predictions that
    instead overlap an out-of-bin instance are labeled "ignore".

    Returns one of "tp", "fp", "ignore" per prediction, in visit order.
    """
    if any("index" not in p for p in preds):
        preds = _normalize_preds(preds)
    if gt_in_bin is None:
        gt_in_bin = [True] * len(gts)
    by_image: dict[str, list[int]] = {}
    for g, gt in enumerate(gts):
        by_image.setdefault(gt["image_id"], []).append(g)
    matched = [False] * len(gts)
    outcomes = []
    for k in _score_order(preds):
        pred = preds[k]
        candidates = by_image.get(pred["image_id"], [])
        best_g, best_iou = -1, 0.0
        ignore_hit = False
        for g in candidates:
            v = mk.iou(pred["mask"], gts[g]["mask"])
            if v < iou_threshold:
                continue
            if gt_in_bin[g]:
                if not matched[g] and v > best_iou:
                    best_g, best_iou = g, v
            else:
                ignore_hit = True
        if best_g >= 0:
            matched[best_g] = True
            outcomes.append("tp")
        elif ignore_hit:
            outcomes.append("ignore")
        else:
            outcomes.append("fp")
    return outcomes


def average_precision(flags, num_gt: int) -> float:
    """All-point interpolated AP from TP/FP flags in score order."""
    if num_gt <= 0:
        raise ValueError("average_precision needs at least one instance")
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # precision envelope: best precision achievable at or beyond each recall
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, envelope):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def _split_by_class(entries, num_classes: int, kind: str):
    by_class: dict[int, list] = {c: [] for c in range(1, num_classes + 1)}
    for e in entries:
        c = e["class_id"]
        if c not in by_class:
            raise ValueError(f"{kind} entry has unknown class_id {c}")
        by_class[c].append(e)
    return by_class


def map_at(preds, gts, iou_threshold: float, num_classes: int):
    """Mean AP over classes with at least one ground-truth instance.

    Returns (map, per_class) where per_class maps class_id to its AP or
    None for classes absent from the ground truth.
    """
    preds = _normalize_preds(preds)
    pred_by_class = _split_by_class(preds, num_classes, "prediction")
    gt_by_class = _split_by_class(gts, num_classes, "ground-truth")
    per_class: dict[int, float | None] = {}
    values = []
    for c in range(1, num_classes + 1):
        if not gt_by_class[c]:
            per_class[c] = None
            continue
        outcomes = greedy_match(pred_by_class[c], gt_by_class[c], iou_threshold)
        flags = [o == "tp" for o in outcomes]
        ap = average_precision(flags, len(gt_by_class[c]))
        per_class[c] = ap
        values.append(ap)
    return (float(np.mean(values)) if values else None), per_class


def abo(preds, gts, num_classes: int):
    """Average best overlap: per instance, the best IoU any same-class
    prediction in its image achieves; averaged within each class, then
    across classes present in the ground truth. Scores are not used."""
    gt_by_class = _split_by_class(gts, num_classes, "ground-truth")
    pred_by_class = _split_by_class(preds, num_classes, "prediction")
    values = []
    for c in range(1, num_classes + 1):
        if not gt_by_class[c]:
            continue
        by_image: dict[str, list] = {}
        for p in pred_by_class[c]:
            by_image.setdefault(p["image_id"], []).append(p)
        best = []
        for gt in gt_by_class[c]:
            overlaps = [mk.iou(gt["mask"], p["mask"])
                        for p in by_image.get(gt["image_id"], [])]
            best.append(max(overlaps, default=0.0))
        values.append(float(np.mean(best)))
    return float(np.mean(values)) if values else None


def count_mae(preds, gts, num_classes: int):
    """Mean absolute counting error over (image, class) cells that have at
    least one true or predicted instance."""
    cells: dict[tuple[str, int], list[int]] = {}
    for gt in gts:
        cell = cells.setdefault((gt["image_id"], gt["class_id"]), [0, 0])
        cell[0] += 1
    for p in preds:
        if not 1 <= p["class_id"] <= num_classes:
            raise ValueError(f"prediction has unknown class_id {p['class_id']}")
        cell = cells.setdefault((p["image_id"], p["class_id"]), [0, 0])
        cell[1] += 1
    if not cells:
        return None
    return float(np.mean([abs(g - p) for g, p in cells.values()]))


def size_bin(mask: np.ndarray) -> str:
    """small: under 1% of the image; large: over 10%; medium: between."""
    frac = mk.area(mask) / mask.size
    if frac < 0.01:
        return "small"
    if frac <= 0.10:
        return "medium"
    return "large"


def count_bin(n: int) -> str:
    if n == 1:
        return "1"
    if n <= 4:
        return "2-4"
    return "5+"


def _binned_map(preds, gts, num_classes: int, bins: list[str],
                bin_names, iou_threshold: float = 0.5):
    """mAP per bin with out-of-bin ground truth treated as ignore."""
    preds = _normalize_preds(preds)
    pred_by_class = _split_by_class(preds, num_classes, "prediction")
    out = {}
    for name in bin_names:
        values = []
        for c in range(1, num_classes + 1):
            cls_gts = [g for g in gts if g["class_id"] == c]
            in_bin = [bins[k] == name for k, g in enumerate(gts)
                      if g["class_id"] == c]
            n_in = sum(in_bin)
            if n_in == 0:
                continue
            outcomes = greedy_match(pred_by_class[c], cls_gts, iou_threshold,
                                    gt_in_bin=in_bin)
            flags = [o == "tp" for o in outcomes if o != "ignore"]
            values.append(average_precision(flags, n_in))
        out[name] = float(np.mean(values)) if values else None
    return out


def size_breakdown(preds, gts, num_classes: int, iou_threshold: float = 0.5):
    bins = [size_bin(g["mask"]) for g in gts]
    return _binned_map(preds, gts, num_classes, bins, SIZE_BINS, iou_threshold)


def count_breakdown(preds, gts, num_classes: int, iou_threshold: float = 0.5):
    cell_counts: dict[tuple[str, int], int] = {}
    for g in gts:
        key = (g["image_id"], g["class_id"])
        cell_counts[key] = cell_counts.get(key, 0) + 1
    bins = [count_bin(cell_counts[(g["image_id"], g["class_id"])]) for g in gts]
    return _binned_map(preds, gts, num_classes, bins, COUNT_BINS, iou_threshold)


def evaluate(preds, gts, num_classes: int) -> dict:
    """Full evaluation report for one split."""
    maps = {}
    per_class_50 = None
    for thr in IOU_THRESHOLDS:
        value, per_class = map_at(preds, gts, thr, num_classes)
        maps[f"{thr:g}"] = value
        if thr == 0.5:
            per_class_50 = {str(c): v for c, v in per_class.items()}
    image_ids = {g["image_id"] for g in gts} | {p["image_id"] for p in preds}
    return {
        "num_images": len(image_ids),
        "num_gt": len(gts),
        "num_predictions": len(preds),
        "map": maps,
        "per_class_ap_50": per_class_50,
        "abo": abo(preds, gts, num_classes),
        "count_mae": count_mae(preds, gts, num_classes),
        "size_breakdown": size_breakdown(preds, gts, num_classes),
        "count_breakdown": count_breakdown(preds, gts, num_classes),
    }


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_predictions(path, preds) -> None:
    """Write predictions as JSON with run-length encoded masks."""
    entries = []
    for p in preds:
        box = p.get("box")
        if box is None:
            box = [int(v) for v in mk.box_to_array(mk.bbox(p["mask"]))]
        entries.append({
            "image_id": p["image_id"],
            "class_id": int(p["class_id"]),
            "score": float(p["score"]),
            "box": [int(v) for v in box],
            "rle": mk.rle_to_obj(p["mask"]),
        })
    entries.sort(key=lambda e: (e["image_id"], -e["score"], e["class_id"]))
    Path(path).write_text(json.dumps(entries, indent=2, sort_keys=True))


def load_predictions(path) -> list[dict]:
    out = []
    for e in json.loads(Path(path).read_text()):
        out.append({
            "image_id": e["image_id"],
            "class_id": int(e["class_id"]),
            "score": float(e["score"]),
            "box": list(e["box"]),
            "mask": mk.rle_from_obj(e["rle"]),
        })
    return out


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))


def write_tables(path, rows: list[dict]) -> None:
    """Flat CSV of headline numbers, one row per evaluated artifact."""
    columns = ["name", "split", "map_0.25", "map_0.5", "map_0.75",
               "abo", "count_mae"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in columns})


def report_row(name: str, split: str, report: dict) -> dict:
    def fmt(v):
        return "" if v is None else f"{v:.4f}"

    return {
        "name": name,
        "split": split,
        "map_0.25": fmt(report["map"]["0.25"]),
        "map_0.5": fmt(report["map"]["0.5"]),
        "map_0.75": fmt(report["map"]["0.75"]),
        "abo": fmt(report["abo"]),
        "count_mae": fmt(report["count_mae"]),
    }


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------

def plot_pr_curves(preds, gts, num_classes: int, path,
                   iou_threshold: float = 0.5) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    preds_n = _normalize_preds(preds)
    pred_by_class = _split_by_class(preds_n, num_classes, "prediction")
    gt_by_class = _split_by_class(gts, num_classes, "ground-truth")
    fig, ax = plt.subplots(figsize=(5, 4))
    plotted = False
    for c in range(1, num_classes + 1):
        if not gt_by_class[c]:
            continue
        outcomes = greedy_match(pred_by_class[c], gt_by_class[c], iou_threshold)
        flags = np.array([o == "tp" for o in outcomes], dtype=bool)
        if flags.size == 0:
            continue
        tp = np.cumsum(flags)
        fp = np.cumsum(~flags)
        recall = tp / len(gt_by_class[c])
        precision = tp / (tp + fp)
        ax.plot(np.concatenate([[0], recall]),
                np.concatenate([[1], precision]),
                label=f"class {c}", drawstyle="steps-post")
        plotted = True
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    if plotted:
        ax.legend(loc="lower left", fontsize=8)
    ax.set_title(f"precision-recall at IoU {iou_threshold:g}")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_breakdowns(report: dict, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    for ax, key, names in ((axes[0], "size_breakdown", SIZE_BINS),
                           (axes[1], "count_breakdown", COUNT_BINS)):
        values = [report[key][n] for n in names]
        xs = np.arange(len(names))
        heights = [0.0 if v is None else v for v in values]
        bars = ax.bar(xs, heights, color="#4878a8")
        for bar, v in zip(bars, values):
            label = "n/a" if v is None else f"{v:.2f}"
            ax.text(bar.get_x() + bar.get_width() / 2, bar.get_height() + 0.01,
                    label, ha="center", fontsize=8)
        ax.set_xticks(xs)
        ax.set_xticklabels(names)
        ax.set_ylim(0, 1.1)
        ax.set_title(key.replace("_", " "))
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
