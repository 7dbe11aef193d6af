"""Weakly supervised instance segmentation on synthetic desk-scale scenes.

Train a peak-based classifier from image-level labels, convert its
response peaks plus an object-proposal gallery into pseudo instance
masks, train a detect-then-segment model on those masks, and refine
predictions by swapping in the best-overlapping proposal.
"""

from .classifier import (build_classifier, find_peaks, forward_cam,
                         multilabel_loss, peak_score, train_classifier)
from .config import PipelineConfig, default_config, load_config
from .errors import ConfigError, PrerequisiteError, TrainingDiverged
from .masks import Box, area, bbox, iou, rle_decode, rle_encode
from .metrics import (abo, average_precision, count_mae, evaluate,
                      greedy_match, map_at)
from .pipeline import run_stage
from .pseudo import build_pseudo_targets, sample_proposal
from .scenes import SceneConfig, generate_scene
from .segmenter import (build_segmenter, nms, predict, refine_predictions,
                        segmentation_loss, train_segmenter)

__version__ = "0.1.0"

__all__ = [
    "Box", "ConfigError", "PipelineConfig", "PrerequisiteError",
    "SceneConfig", "TrainingDiverged", "abo", "area", "average_precision",
    "bbox", "build_classifier", "build_pseudo_targets", "build_segmenter",
    "count_mae", "default_config", "evaluate", "find_peaks", "forward_cam",
    "generate_scene", "greedy_match", "iou", "load_config", "map_at",
    "multilabel_loss", "nms", "peak_score", "predict", "refine_predictions",
    "rle_decode", "rle_encode", "run_stage", "sample_proposal",
    "segmentation_loss", "train_classifier", "train_segmenter",
]
