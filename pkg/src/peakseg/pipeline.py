"""Stage orchestration: artifacts, provenance hashes, prerequisites.

Each stage reads its inputs from a run directory, writes its outputs
there, and records a manifest with its content hash and its parents'
hashes. A stage refuses to run when a prerequisite is missing, and
refuses stale parents (hash mismatch against the current config) unless
explicitly allowed. Ground-truth instance reads are counted per stage so
the weak-supervision contract can be audited after the fact.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import classifier as clf
from . import metrics as M
from . import pseudo as ps
from . import segmenter as seg
from .config import (PipelineConfig, config_hash, config_to_dict, stage_hash,
                     stage_seed)
from .errors import PrerequisiteError, TrainingDiverged
from .scenes import GtAccessCounter, build_dataset, load_split

STAGES = ("generate", "train-classifier", "make-pseudo", "train-segmenter",
          "predict", "evaluate", "report")


class RunPaths:
    def __init__(self, out):
        self.root = Path(out)
        self.dataset = self.root / "dataset"
        self.checkpoints = self.root / "checkpoints"
        self.manifests = self.root / "manifests"
        self.classifier_ckpt = self.checkpoints / "classifier.npz"
        self.segmenter_ckpt = self.checkpoints / "segmenter.npz"
        self.pseudo_masks = self.root / "pseudo_masks.json"
        self.eval_dir = self.root / "eval"
        self.report_dir = self.root / "report"

    def split_dir(self, split: str) -> Path:
        return self.dataset / split

    def predict_dir(self, split: str) -> Path:
        return self.root / "predict" / split

    def manifest(self, stage: str) -> Path:
        return self.manifests / f"{stage}.json"


def expected_hashes(config: PipelineConfig) -> dict[str, str]:
    """Provenance chain implied by the current configuration."""
    c = config
    h: dict[str, str] = {}
    h["generate"] = stage_hash("generate", {
        "dataset": asdict(c.dataset), "seed": c.seed}, [])
    h["train-classifier"] = stage_hash("train-classifier", {
        "classifier": asdict(c.classifier),
        "seed": stage_seed(c.seed, "classifier")}, [h["generate"]])
    h["make-pseudo"] = stage_hash("make-pseudo", {
        "pseudo": asdict(c.pseudo), "window": c.classifier.window,
        "seed": stage_seed(c.seed, "pseudo")},
        [h["generate"], h["train-classifier"]])
    train_params = {k: v for k, v in asdict(c.segmenter).items()
                    if k not in ("score_min", "mask_threshold", "nms_iou")}
    h["train-segmenter"] = stage_hash("train-segmenter", {
        "segmenter": train_params,
        "seed": stage_seed(c.seed, "segmenter")},
        [h["generate"], h["train-classifier"], h["make-pseudo"]])
    h["predict"] = stage_hash("predict", {
        "score_min": c.segmenter.score_min,
        "mask_threshold": c.segmenter.mask_threshold,
        "nms_iou": c.segmenter.nms_iou}, [h["train-segmenter"]])
    h["evaluate"] = stage_hash("evaluate", {},
                               [h["generate"], h["make-pseudo"], h["predict"]])
    h["report"] = stage_hash("report", {}, [h["evaluate"]])
    return h


_PARENTS = {
    "generate": (),
    "train-classifier": ("generate",),
    "make-pseudo": ("generate", "train-classifier"),
    "train-segmenter": ("generate", "train-classifier", "make-pseudo"),
    "predict": ("train-segmenter",),
    "evaluate": ("generate", "make-pseudo", "predict"),
    "report": ("evaluate",),
}


def _read_manifest(paths: RunPaths, stage: str) -> dict | None:
    path = paths.manifest(stage)
    if not path.exists():
        return None
    return json.loads(path.read_text())


def check_prerequisites(stage: str, config: PipelineConfig, paths: RunPaths,
                        allow_stale: bool = False) -> dict[str, str]:
    """Verify parent stages ran and are current; return their hashes."""
    expected = expected_hashes(config)
    parent_hashes = {}
    for parent in _PARENTS[stage]:
        manifest = _read_manifest(paths, parent)
        if manifest is None:
            raise PrerequisiteError(
                f"stage {stage!r} needs {parent!r}; run \"{parent}\" first")
        if manifest["hash"] != expected[parent] and not allow_stale:
            raise PrerequisiteError(
                f"artifact of stage {parent!r} is stale for the current "
                f"configuration; rerun \"{parent}\" or pass --allow-stale")
        parent_hashes[parent] = manifest["hash"]
    return parent_hashes


def _write_manifest(paths: RunPaths, stage: str, config: PipelineConfig,
                    parent_hashes: dict[str, str], extra: dict) -> dict:
    manifest = {
        "stage": stage,
        "hash": expected_hashes(config)[stage],
        "parents": parent_hashes,
        "config_hash": config_hash(config),
    }
    manifest.update(extra)
    paths.manifests.mkdir(parents=True, exist_ok=True)
    paths.manifest(stage).write_text(json.dumps(manifest, indent=2,
                                                sort_keys=True))
    return manifest


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def run_generate(config: PipelineConfig, paths: RunPaths,
                 allow_stale: bool = False) -> dict:
    config.validate()
    parent_hashes = check_prerequisites("generate", config, paths, allow_stale)
    paths.root.mkdir(parents=True, exist_ok=True)
    (paths.root / "config.json").write_text(
        json.dumps(config_to_dict(config), indent=2, sort_keys=True))
    scene_cfg = config.scene_config()
    build_dataset(scene_cfg, config.dataset.n_train, config.dataset.n_val,
                  paths.dataset)
    return _write_manifest(paths, "generate", config, parent_hashes, {
        "n_train": config.dataset.n_train,
        "n_val": config.dataset.n_val,
        "gt_accesses": 0,
    })


def run_train_classifier(config: PipelineConfig, paths: RunPaths,
                         allow_stale: bool = False) -> dict:
    config.validate()
    parent_hashes = check_prerequisites("train-classifier", config, paths,
                                        allow_stale)
    counter = GtAccessCounter()
    records = load_split(paths.split_dir("train"), counter)
    c = config.classifier
    model, history = clf.train_classifier(
        records, config.dataset.num_classes, window=c.window, lr=c.lr,
        momentum=c.momentum, epochs=c.epochs, batch_size=c.batch_size,
        seed=stage_seed(config.seed, "classifier"))
    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    clf.save_classifier(paths.classifier_ckpt, model, extra={
        "window": c.window,
        "stage_hash": expected_hashes(config)["train-classifier"],
    })
    final_loss = history["loss"][-1] if history["loss"] else None
    return _write_manifest(paths, "train-classifier", config, parent_hashes, {
        "epochs": c.epochs,
        "final_loss": final_loss,
        "loss_history": history["loss"],
        "gt_accesses": counter.count,
    })


def run_make_pseudo(config: PipelineConfig, paths: RunPaths,
                    allow_stale: bool = False) -> dict:
    config.validate()
    parent_hashes = check_prerequisites("make-pseudo", config, paths,
                                        allow_stale)
    counter = GtAccessCounter()
    records = load_split(paths.split_dir("train"), counter)
    model, _ = clf.load_classifier(paths.classifier_ckpt)
    seed = stage_seed(config.seed, "pseudo")
    entries = []
    totals = {"peaks_total": 0, "peaks_kept": 0,
              "peaks_skipped_no_candidate": 0, "targets": 0}
    for index, record in enumerate(records):
        cams = clf.forward_cam(model, record.image)
        rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
        targets, diag = ps.build_pseudo_targets(
            record, cams, rng, stride=clf.CAM_STRIDE,
            window=config.classifier.window, tau=config.pseudo.tau,
            max_peaks=config.pseudo.max_peaks)
        entries.append(ps.targets_to_entry(record.image_id, targets))
        for key in ("peaks_total", "peaks_kept", "peaks_skipped_no_candidate"):
            totals[key] += diag[key]
        totals["targets"] += len(targets)
    ps.write_pseudo_masks(paths.pseudo_masks, entries)
    return _write_manifest(paths, "make-pseudo", config, parent_hashes, {
        **totals,
        "gt_accesses": counter.count,
    })


def run_train_segmenter(config: PipelineConfig, paths: RunPaths,
                        allow_stale: bool = False) -> dict:
    config.validate()
    parent_hashes = check_prerequisites("train-segmenter", config, paths,
                                        allow_stale)
    counter = GtAccessCounter()
    records = load_split(paths.split_dir("train"), counter)
    s = config.segmenter
    if s.freeze_pseudo_masks:
        by_id = {e["image_id"]: ps.entry_to_targets(e)
                 for e in ps.load_pseudo_masks(paths.pseudo_masks)}

        def target_fn(record, rng):
            return by_id.get(record.image_id, [])
    else:
        model, _ = clf.load_classifier(paths.classifier_ckpt)
        candidates = {}
        for record in records:
            cams = clf.forward_cam(model, record.image)
            cands, _ = ps.extract_peak_candidates(
                record, cams, stride=clf.CAM_STRIDE,
                window=config.classifier.window, tau=config.pseudo.tau,
                max_peaks=config.pseudo.max_peaks)
            candidates[record.image_id] = cands

        def target_fn(record, rng):
            return ps.sample_targets(candidates[record.image_id],
                                     record.proposals, rng)

    model, history = seg.train_segmenter(
        records, target_fn, config.dataset.num_classes, lr=s.lr,
        momentum=s.momentum, epochs=s.epochs, roi_per_image=s.roi_per_image,
        jitter_per_target=s.jitter_per_target,
        seed=stage_seed(config.seed, "segmenter"))
    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    seg.save_segmenter(paths.segmenter_ckpt, model, extra={
        "stage_hash": expected_hashes(config)["train-segmenter"],
    })
    final_loss = history["loss"][-1] if history["loss"] else None
    return _write_manifest(paths, "train-segmenter", config, parent_hashes, {
        "epochs": s.epochs,
        "final_loss": final_loss,
        "loss_history": {k: history[k] for k in ("loss", "cls", "box", "mask")},
        "skipped_images": history["skipped"],
        "gt_accesses": counter.count,
    })


def run_predict(config: PipelineConfig, paths: RunPaths,
                allow_stale: bool = False) -> dict:
    config.validate()
    parent_hashes = check_prerequisites("predict", config, paths, allow_stale)
    model, _ = seg.load_segmenter(paths.segmenter_ckpt)
    s = config.segmenter
    counts = {}
    counter = GtAccessCounter()
    for split in ("train", "val"):
        records = load_split(paths.split_dir(split), counter)
        raw, refined = [], []
        for record in records:
            preds = seg.predict(model, record.image, record.proposals,
                                score_min=s.score_min, nms_iou=s.nms_iou,
                                mask_threshold=s.mask_threshold)
            for p in preds:
                p["image_id"] = record.image_id
            raw.extend(preds)
            for p in seg.refine_predictions(preds, record.proposals):
                refined.append(p)
        out_dir = paths.predict_dir(split)
        out_dir.mkdir(parents=True, exist_ok=True)
        M.save_predictions(out_dir / "predictions.json", raw)
        M.save_predictions(out_dir / "predictions_refined.json", refined)
        counts[split] = {"predictions": len(raw), "refined": len(refined)}
    return _write_manifest(paths, "predict", config, parent_hashes, {
        "counts": counts,
        "gt_accesses": counter.count,
    })


def _pseudo_as_predictions(paths: RunPaths) -> list[dict]:
    preds = []
    for entry in ps.load_pseudo_masks(paths.pseudo_masks):
        targets = ps.entry_to_targets(entry)
        preds.extend(ps.targets_as_predictions(entry["image_id"], targets))
    return preds


def run_evaluate(config: PipelineConfig, paths: RunPaths,
                 allow_stale: bool = False) -> dict:
    config.validate()
    parent_hashes = check_prerequisites("evaluate", config, paths, allow_stale)
    num_classes = config.dataset.num_classes
    gts = {}
    for split in ("train", "val"):
        records = load_split(paths.split_dir(split), GtAccessCounter())
        gts[split] = M.gts_from_records(records)

    artifacts = {
        ("pseudo_masks", "train"): _pseudo_as_predictions(paths),
        ("segmenter", "train"): M.load_predictions(
            paths.predict_dir("train") / "predictions.json"),
        ("segmenter", "val"): M.load_predictions(
            paths.predict_dir("val") / "predictions.json"),
        ("segmenter_refined", "train"): M.load_predictions(
            paths.predict_dir("train") / "predictions_refined.json"),
        ("segmenter_refined", "val"): M.load_predictions(
            paths.predict_dir("val") / "predictions_refined.json"),
    }
    results: dict[str, dict] = {}
    rows = []
    for (name, split), preds in artifacts.items():
        report = M.evaluate(preds, gts[split], num_classes)
        _assert_finite_report(report, f"{name}/{split}")
        results.setdefault(name, {})[split] = report
        rows.append(M.report_row(name, split, report))

    paths.eval_dir.mkdir(parents=True, exist_ok=True)
    plots_dir = paths.eval_dir / "plots"
    plots_dir.mkdir(exist_ok=True)
    report = {
        "config_hash": config_hash(config),
        "stage_hashes": expected_hashes(config),
        "num_classes": num_classes,
        "results": results,
    }
    M.write_report(paths.eval_dir / "report.json", report)
    M.write_tables(paths.eval_dir / "tables.csv", rows)
    M.plot_pr_curves(artifacts[("segmenter", "val")], gts["val"], num_classes,
                     plots_dir / "pr_segmenter_val.png")
    M.plot_pr_curves(artifacts[("segmenter_refined", "val")], gts["val"],
                     num_classes, plots_dir / "pr_refined_val.png")
    M.plot_breakdowns(results["segmenter"]["val"],
                      plots_dir / "breakdowns_val.png")
    return _write_manifest(paths, "evaluate", config, parent_hashes, {
        "artifacts": sorted(f"{n}/{s}" for n, s in artifacts),
    })


def _assert_finite_report(report: dict, where: str) -> None:
    def walk(node):
        if isinstance(node, dict):
            for v in node.values():
                walk(v)
        elif isinstance(node, float) and not np.isfinite(node):
            raise TrainingDiverged(f"evaluation of {where} produced {node}")

    walk(report)


def run_report(config: PipelineConfig, paths: RunPaths,
               allow_stale: bool = False) -> dict:
    config.validate()
    parent_hashes = check_prerequisites("report", config, paths, allow_stale)
    eval_report = json.loads((paths.eval_dir / "report.json").read_text())
    results = eval_report["results"]
    rows = []
    comparison = []
    for name in ("pseudo_masks", "segmenter", "segmenter_refined"):
        entry = {"name": name}
        for split in ("train", "val"):
            report = results.get(name, {}).get(split)
            if report is None:
                entry[split] = None
                continue
            entry[split] = {
                "map": report["map"],
                "abo": report["abo"],
                "count_mae": report["count_mae"],
            }
            rows.append(M.report_row(name, split, report))
        comparison.append(entry)
    paths.report_dir.mkdir(parents=True, exist_ok=True)
    summary = {
        "config_hash": eval_report["config_hash"],
        "comparison": comparison,
    }
    (paths.report_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True))
    M.write_tables(paths.report_dir / "summary.csv", rows)
    _plot_comparison(comparison, paths.report_dir / "comparison.png")
    return _write_manifest(paths, "report", config, parent_hashes, {
        "rows": [r["name"] + "/" + r["split"] for r in rows],
    })


def _plot_comparison(comparison: list[dict], path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [c["name"] for c in comparison]
    train_vals = [(c["train"] or {}).get("map", {}).get("0.5") or 0.0
                  for c in comparison]
    val_vals = [(c["val"] or {}).get("map", {}).get("0.5") for c in comparison]
    xs = np.arange(len(names))
    width = 0.38
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(xs - width / 2, train_vals, width, label="train", color="#4878a8")
    ax.bar(xs + width / 2, [v or 0.0 for v in val_vals], width, label="val",
           color="#e09048")
    ax.set_xticks(xs)
    ax.set_xticklabels(names)
    ax.set_ylabel("mAP at IoU 0.5")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


_RUNNERS = {
    "generate": run_generate,
    "train-classifier": run_train_classifier,
    "make-pseudo": run_make_pseudo,
    "train-segmenter": run_train_segmenter,
    "predict": run_predict,
    "evaluate": run_evaluate,
    "report": run_report,
}


def run_stage(stage: str, config: PipelineConfig,
              allow_stale: bool = False) -> dict:
    paths = RunPaths(config.out)
    if stage == "all":
        manifest = None
        for name in STAGES:
            manifest = _RUNNERS[name](config, paths, allow_stale)
        return manifest
    return _RUNNERS[stage](config, paths, allow_stale)
