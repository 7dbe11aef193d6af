"""Turn class response peaks plus a proposal gallery into pseudo masks.

Each retained peak is mapped to an image pixel; every gallery proposal
covering that pixel is a candidate, and one candidate is drawn with
probability proportional to its objectness. The drawn masks act as
instance-level training targets even though only image-level labels were
ever observed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import masks as mk
from . import nn
from .classifier import find_peaks


@dataclass
class PeakCandidate:
    """A retained peak and the gallery proposals that cover its pixel."""
    class_id: int
    peak: tuple[int, int]
    peak_value: float
    pixel: tuple[int, int]
    candidate_indices: np.ndarray


@dataclass
class PseudoTarget:
    """One sampled instance target."""
    class_id: int
    proposal_index: int
    mask: np.ndarray
    peak: tuple[int, int]
    peak_value: float


def peak_to_pixel(peak: tuple[int, int], stride: int,
                  image_shape: tuple[int, int]) -> tuple[int, int]:
    """Center of the stride cell a response-map location corresponds to."""
    i = min(peak[0] * stride + stride // 2, image_shape[0] - 1)
    j = min(peak[1] * stride + stride // 2, image_shape[1] - 1)
    return i, j


def candidate_proposals(proposals, pixel: tuple[int, int]) -> np.ndarray:
    """Indices of proposals whose mask contains the pixel."""
    i, j = pixel
    return np.array([k for k, p in enumerate(proposals) if p.mask[i, j]],
                    dtype=np.int64)


def sample_proposal(objectness: np.ndarray, rng: np.random.Generator,
                    size=None):
    """Draw an index with probability proportional to objectness.

    A zero total falls back to a uniform draw; an empty vector is an error.
    Returns a single int, or an array of draws when size is given.
    """
    b = np.asarray(objectness, dtype=np.float64)
    if b.size == 0:
        raise ValueError("cannot sample from an empty candidate set")
    if np.any(b < 0):
        raise ValueError("objectness must be non-negative")
    total = b.sum()
    if total == 0:
        drawn = rng.integers(b.size, size=size)
    else:
        drawn = rng.choice(b.size, size=size, p=b / total)
    return drawn if size is not None else int(drawn)


def extract_peak_candidates(record, cams: np.ndarray, *, stride: int = 8,
                            window: int = 3, tau: float = 0.5,
                            max_peaks: int = 8):
    """Find retained peaks for each present class and their candidate sets.

    Peaks below tau times the map maximum are dropped; at most max_peaks
    strongest peaks per class survive. Peaks whose pixel no proposal covers
    are skipped and counted. Deterministic given the record and maps.
    """
    image_shape = record.image.shape[:2]
    out = []
    diag = {"peaks_total": 0, "peaks_kept": 0, "peaks_skipped_no_candidate": 0}
    for c in range(cams.shape[0]):
        if not record.labels[c]:
            continue
        cam = cams[c]
        peaks = find_peaks(cam, window)
        diag["peaks_total"] += len(peaks)
        floor = tau * cam.max()
        peaks = [p for p in peaks if cam[p] >= floor][:max_peaks]
        for p in peaks:
            pixel = peak_to_pixel(p, stride, image_shape)
            cand = candidate_proposals(record.proposals, pixel)
            if cand.size == 0:
                diag["peaks_skipped_no_candidate"] += 1
                continue
            diag["peaks_kept"] += 1
            out.append(PeakCandidate(class_id=c + 1, peak=p,
                                     peak_value=float(cam[p]), pixel=pixel,
                                     candidate_indices=cand))
    return out, diag


def sample_targets(candidates, proposals, rng: np.random.Generator):
    """Draw one proposal per retained peak (objectness-weighted)."""
    targets = []
    for cand in candidates:
        b = np.array([proposals[k].objectness for k in cand.candidate_indices])
        pick = int(cand.candidate_indices[sample_proposal(b, rng)])
        targets.append(PseudoTarget(class_id=cand.class_id,
                                    proposal_index=pick,
                                    mask=proposals[pick].mask,
                                    peak=cand.peak,
                                    peak_value=cand.peak_value))
    return targets


def build_pseudo_targets(record, cams: np.ndarray, rng: np.random.Generator,
                         *, stride: int = 8, window: int = 3,
                         tau: float = 0.5, max_peaks: int = 8):
    """Peak extraction plus one sampling pass; returns (targets, diagnostics)."""
    candidates, diag = extract_peak_candidates(record, cams, stride=stride,
                                               window=window, tau=tau,
                                               max_peaks=max_peaks)
    return sample_targets(candidates, record.proposals, rng), diag


def targets_to_entry(image_id: str, targets) -> dict:
    """JSON-ready record of sampled targets for one image."""
    return {
        "image_id": image_id,
        "targets": [{
            "class_id": t.class_id,
            "rle": mk.rle_to_obj(t.mask),
            "peak": [int(t.peak[0]), int(t.peak[1])],
            "peak_value": t.peak_value,
        } for t in targets],
    }


def write_pseudo_masks(path, entries: list[dict]) -> None:
    entries = sorted(entries, key=lambda e: e["image_id"])
    Path(path).write_text(json.dumps(entries, indent=2, sort_keys=True))


def load_pseudo_masks(path) -> list[dict]:
    return json.loads(Path(path).read_text())


def entry_to_targets(entry: dict) -> list[PseudoTarget]:
    """Rebuild in-memory targets from one stored entry."""
    out = []
    for t in entry["targets"]:
        mask = mk.rle_from_obj(t["rle"])
        out.append(PseudoTarget(class_id=int(t["class_id"]), proposal_index=-1,
                                mask=mask, peak=tuple(t["peak"]),
                                peak_value=float(t["peak_value"])))
    return out


def targets_as_predictions(image_id: str, targets) -> list[dict]:
    """Present sampled targets as scored predictions for evaluation.

    The score is the sigmoid of the peak activation, so stronger peaks
    rank their masks higher.
    """
    return [{
        "image_id": image_id,
        "class_id": t.class_id,
        "score": float(nn.sigmoid(t.peak_value)),
        "mask": t.mask,
    } for t in targets]
