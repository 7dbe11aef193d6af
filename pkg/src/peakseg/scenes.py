"""Deterministic synthetic scenes: shapes, image-level labels, proposal galleries.

Each image is a function of (seed, image_index) only, so datasets can be
regenerated bit-identically and images can be produced in any order. Objects
are simple colored shapes (one shape family per class) painted with occlusion;
the stored instance masks are the visible regions, which are pairwise disjoint.

The proposal gallery imitates an off-the-shelf object proposal method:
perturbed copies of every instance plus distractor blobs, with objectness
scores that correlate with true overlap but are deliberately noisy.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .masks import Box, area, bbox, iou, rle_from_obj, rle_to_obj

SHAPE_FAMILIES = ("disk", "square", "triangle", "cross")


@dataclass
class SceneConfig:
    """Knobs for scene and proposal-gallery generation."""

    height: int = 96
    width: int = 96
    num_classes: int = 4
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 8
    max_size: int = 40
    variants_per_instance: int = 8   # perturbed proposals per instance
    distractors: int = 24            # non-instance proposals per image
    pixel_noise: float = 0.03
    objectness_noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.height < 32 or self.width < 32:
            raise ValueError("image size must be at least 32x32")
        if self.variants_per_instance < 3:
            raise ValueError("variants_per_instance must be >= 3")
        if self.distractors < 5:
            raise ValueError("distractors must be >= 5")
        if not (0 <= self.min_objects <= self.max_objects):
            raise ValueError("need 0 <= min_objects <= max_objects")
        if not (2 <= self.min_size <= self.max_size):
            raise ValueError("need 2 <= min_size <= max_size")


@dataclass
class Instance:
    """One ground-truth object: its class and visible pixel support."""

    class_id: int
    mask: np.ndarray
    box: Box


@dataclass
class Proposal:
    """Class-agnostic candidate mask with an objectness confidence."""

    mask: np.ndarray
    objectness: float


class GtAccessCounter:
    """Counts reads of ground-truth instances through the dataset layer.

    Training stages must leave this at zero; only evaluation may read GT.
    """

    def __init__(self) -> None:
        self.count = 0

    def bump(self) -> None:
        self.count += 1


class ImageRecord:
    """One image with its weak labels, proposals, and (gated) ground truth.

    ``instances`` is evaluation-only: every read is reported to the attached
    access counter so the weak-supervision contract can be audited.
    """

    def __init__(self, image_id, image, labels, instances, proposals,
                 counter: GtAccessCounter | None = None, index: int | None = None):
        self.image_id = image_id
        self.image = image
        self.labels = labels
        self.proposals = proposals
        self.index = index
        self._instances = instances
        self._counter = counter

    @property
    def instances(self) -> list[Instance]:
        if self._counter is not None:
            self._counter.bump()
        return self._instances

    def __repr__(self) -> str:
        return (f"ImageRecord({self.image_id!r}, labels={list(self.labels)}, "
                f"proposals={len(self.proposals)})")


def derive_image_labels(instances: list[Instance], num_classes: int) -> np.ndarray:
    """Image-level label vector: y_c = 1 iff some instance has class c."""
    labels = np.zeros(num_classes, dtype=np.int64)
    for inst in instances:
        if not (1 <= inst.class_id <= num_classes):
            raise ValueError(f"class_id {inst.class_id} outside [1, {num_classes}]")
        labels[inst.class_id - 1] = 1
    return labels


def shape_family(class_id: int) -> str:
    return SHAPE_FAMILIES[(class_id - 1) % len(SHAPE_FAMILIES)]


def class_color(class_id: int, num_classes: int) -> np.ndarray:
    hue = (class_id - 1) / num_classes
    return np.array(colorsys.hsv_to_rgb(hue, 0.65, 0.85))


def _paint_shape(family: str, h: int, w: int, cy: float, cx: float, size: float) -> np.ndarray:
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    dr, dc = rr - cy, cc - cx
    half = size / 2.0
    if family == "disk":
        return dr * dr + dc * dc <= half * half
    if family == "square":
        return (np.abs(dr) <= half) & (np.abs(dc) <= half)
    if family == "triangle":
        # upward-pointing: width grows linearly from apex to base
        inside_rows = (dr >= -half) & (dr <= half)
        return inside_rows & (np.abs(dc) <= (dr + half) / 2.0)
    if family == "cross":
        bar = size / 6.0
        horiz = (np.abs(dr) <= bar) & (np.abs(dc) <= half)
        vert = (np.abs(dc) <= bar) & (np.abs(dr) <= half)
        return horiz | vert
    raise ValueError(f"unknown shape family {family!r}")


def _scene_rng(config: SceneConfig, image_index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((config.seed, image_index, stream))
    )


def generate_scene(config: SceneConfig, image_index: int,
                   image_id: str | None = None) -> ImageRecord:
    """Generate one scene. Deterministic in (config.seed, image_index).

    Objects are placed front-to-back: each new object keeps only the pixels
    not already claimed by objects in front of it, and placement is retried
    until that visible region is non-empty.
    """
    config.validate()
    rng = _scene_rng(config, image_index, 0)
    h, w, c = config.height, config.width, config.num_classes

    n_objects = int(rng.integers(config.min_objects, config.max_objects + 1))
    occupied = np.zeros((h, w), dtype=bool)
    instances: list[Instance] = []
    for _ in range(n_objects):
        class_id = int(rng.integers(1, c + 1))
        family = shape_family(class_id)
        size = float(rng.uniform(config.min_size, config.max_size))
        margin = size / 2.0 + 1.0
        for _attempt in range(50):
            cy = float(rng.uniform(margin, h - 1 - margin))
            cx = float(rng.uniform(margin, w - 1 - margin))
            shape = _paint_shape(family, h, w, cy, cx, size)
            visible = shape & ~occupied
            if visible.any():
                break
        else:
            continue  # no free spot; drop the object
        occupied |= shape
        instances.append(Instance(class_id, visible, bbox(visible)))

    image = np.full((h, w, 3), 0.12)
    for inst in instances:
        color = class_color(inst.class_id, c)
        color = np.clip(color + rng.uniform(-0.06, 0.06, size=3), 0.0, 1.0)
        image[inst.mask] = color
    image += rng.normal(0.0, config.pixel_noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    labels = derive_image_labels(instances, c)
    if image_id is None:
        image_id = f"img_{image_index:05d}"
    record = ImageRecord(image_id, image, labels, instances, [], index=image_index)
    record.proposals = generate_proposals(record, config)
    return record


def _shift_mask(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    ys_src = slice(max(-dy, 0), min(h - dy, h))
    xs_src = slice(max(-dx, 0), min(w - dx, w))
    out[ys, xs] = mask[ys_src, xs_src]
    return out


def _jitter_boundary(mask: np.ndarray, rng: np.random.Generator, p: float) -> np.ndarray:
    inner = mask & ~ndimage.binary_erosion(mask)
    outer = ndimage.binary_dilation(mask) & ~mask
    out = mask.copy()
    out[outer & (rng.random(mask.shape) < p)] = True
    out[inner & (rng.random(mask.shape) < p)] = False
    return out


def _perturb_mask(mask: np.ndarray, rng: np.random.Generator, gentle: bool) -> np.ndarray:
    m = mask
    n_ops = 1 if gentle else int(rng.integers(1, 3))
    for _ in range(n_ops):
        op = rng.integers(0, 4)
        amount = 1 if gentle else int(rng.integers(1, 3))
        if op == 0:
            m = ndimage.binary_dilation(m, iterations=amount)
        elif op == 1:
            eroded = ndimage.binary_erosion(m, iterations=amount)
            m = eroded if eroded.any() else m
        elif op == 2:
            lim = 1 if gentle else 3
            m = _shift_mask(m, int(rng.integers(-lim, lim + 1)),
                            int(rng.integers(-lim, lim + 1)))
        else:
            m = _jitter_boundary(m, rng, 0.2 if gentle else 0.5)
    return m if m.any() else mask


def _random_blob(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    while True:
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        a, b = rng.uniform(4, 18, size=2)
        theta = rng.uniform(0, np.pi)
        rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
        dr, dc = rr - cy, cc - cx
        u = dr * np.cos(theta) + dc * np.sin(theta)
        v = -dr * np.sin(theta) + dc * np.cos(theta)
        blob = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        if blob.any():
            return blob


def _background_chunk(h: int, w: int, occupied: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
    for _ in range(20):
        ch = int(rng.integers(8, 31))
        cw = int(rng.integers(8, 31))
        r0 = int(rng.integers(0, max(h - ch, 1)))
        c0 = int(rng.integers(0, max(w - cw, 1)))
        rect = np.zeros((h, w), dtype=bool)
        rect[r0:r0 + ch, c0:c0 + cw] = True
        chunk = rect & ~occupied
        if chunk.any():
            return chunk
    return rect  # fully occluded board; keep the raw rectangle


def generate_proposals(record: ImageRecord, config: SceneConfig) -> list[Proposal]:
    """Build the proposal gallery for one record.

    Per instance: ``variants_per_instance`` perturbed masks whose objectness is
    its true IoU plus noise (clamped to [0.05, 1]); the first two variants are
    kept gentle and regenerated until they overlap the instance at IoU >= 0.9,
    so every object has high-quality proposals. Plus ``distractors`` masks
    (blobs, background chunks, unions of instance pairs) with objectness drawn
    from (0, 0.4].
    """
    rng = _scene_rng(config, record.index if record.index is not None else 0, 1)
    h, w = config.height, config.width
    instances = record._instances  # generator side; not a dataset-layer read
    proposals: list[Proposal] = []

    for inst in instances:
        for v in range(config.variants_per_instance):
            if v <= 1:
                m = _perturb_mask(inst.mask, rng, gentle=True)
                for _ in range(20):
                    if iou(m, inst.mask) >= 0.9:
                        break
                    m = _perturb_mask(inst.mask, rng, gentle=True)
                else:
                    m = inst.mask.copy()
            else:
                m = _perturb_mask(inst.mask, rng, gentle=False)
            overlap = iou(m, inst.mask)
            score = float(np.clip(overlap + rng.normal(0, config.objectness_noise),
                                  0.05, 1.0))
            proposals.append(Proposal(m, score))

    occupied = np.zeros((h, w), dtype=bool)
    for inst in instances:
        occupied |= inst.mask
    for k in range(config.distractors):
        kind = k % 3
        if kind == 0 or (kind == 2 and len(instances) < 2):
            m = _random_blob(h, w, rng)
        elif kind == 1:
            m = _background_chunk(h, w, occupied, rng)
        else:
            i, j = rng.choice(len(instances), size=2, replace=False)
            m = instances[i].mask | instances[j].mask
        score = float(0.4 * (1.0 - rng.random()))
        proposals.append(Proposal(m, max(score, 1e-6)))
    return proposals


# ---------------------------------------------------------------------------
# On-disk dataset layout:
#   <root>/dataset.json                 generation config + provenance
#   <root>/<split>/images/<id>.png     8-bit RGB
#   <root>/<split>/annotations.json    per-image labels, instances, proposals
# ---------------------------------------------------------------------------

def write_split(split_dir: str | Path, records: list[ImageRecord]) -> None:
    split_dir = Path(split_dir)
    (split_dir / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in sorted(records, key=lambda r: r.image_id):
        img8 = np.clip(np.round(rec.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img8).save(split_dir / "images" / f"{rec.image_id}.png")
        entries.append({
            "image_id": rec.image_id,
            "labels": [int(v) for v in rec.labels],
            "instances": [
                {"class_id": inst.class_id, "rle": rle_to_obj(inst.mask)}
                for inst in rec._instances
            ],
            "proposals": [
                {"rle": rle_to_obj(p.mask), "objectness": p.objectness}
                for p in rec.proposals
            ],
        })
    with open(split_dir / "annotations.json", "w") as f:
        json.dump(entries, f, sort_keys=True)


def build_dataset(config: SceneConfig, n_train: int, n_val: int,
                  root: str | Path, extra: dict | None = None) -> None:
    """Generate and write a train/val dataset under ``root``.

    Validation images use indices past the training range so the two splits
    never share a random stream.
    """
    root = Path(root)
    train = [generate_scene(config, i, f"train_{i:05d}") for i in range(n_train)]
    val = [generate_scene(config, n_train + i, f"val_{i:05d}") for i in range(n_val)]
    write_split(root / "train", train)
    write_split(root / "val", val)
    meta = {"config": asdict(config), "splits": {"train": n_train, "val": n_val}}
    if extra:
        meta.update(extra)
    with open(root / "dataset.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_dataset_meta(root: str | Path) -> dict:
    with open(Path(root) / "dataset.json") as f:
        return json.load(f)


def load_split(split_dir: str | Path,
               counter: GtAccessCounter | None = None) -> list[ImageRecord]:
    """Load a split; ground-truth reads go through ``counter`` if given."""
    split_dir = Path(split_dir)
    with open(split_dir / "annotations.json") as f:
        entries = json.load(f)
    records = []
    for entry in entries:
        img = np.asarray(
            Image.open(split_dir / "images" / f"{entry['image_id']}.png"),
            dtype=np.float64) / 255.0
        instances = []
        for inst in entry["instances"]:
            m = rle_from_obj(inst["rle"])
            instances.append(Instance(int(inst["class_id"]), m, bbox(m)))
        proposals = [Proposal(rle_from_obj(p["rle"]), float(p["objectness"]))
                     for p in entry["proposals"]]
        records.append(ImageRecord(
            entry["image_id"], img, np.asarray(entry["labels"], dtype=np.int64),
            instances, proposals, counter=counter))
    return records
