"""Per-instance RF-CAM vs Grad-CAM comparison and bundle-level detection runs.

The dissimilarity score is a masked, rounded MSE between the two normalized
maps, reported in percentage units: only pixels where either map exceeds the
mask threshold participate, and values above the threshold round to 1.0
first so near-saturated pixels do not register as disagreement.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from rfcam.errors import ValidationError
from rfcam.gbdt import TreeEnsemble
from rfcam.saliency import (
    GRAD_CAM,
    RF_CAM,
    SaliencyMap,
    analytic_head_gradients,
    build_phi,
    channel_means,
    normalize_map,
    pool_gradients,
    render_overlay,
    upscale_map,
    weighted_activation_map,
)
from rfcam.tensor_store import ImageEntry, TensorBundle
from rfcam.treeshap import ShapAttribution, shap_for_instance

log = logging.getLogger("rfcam.detector")

STATUSES = ("pending", "confirmed", "rejected", "diagnostic", "auto_flagged")

# Upscale factor when the bundle does not declare an input image size
# (stride-32 backbone convention).
DEFAULT_UPSCALE = 32

TOP_FEATURE_MODES = ("grad_mean", "shap_mean")


@dataclass(frozen=True)
class DetectionConfig:
    mask_threshold: float = 0.78
    mse_threshold: float = 15.0  # theta
    score_scale: float = 100.0  # percentage units
    top_feature_mode: str = "grad_mean"
    auto_flag_top_n: int = 10

    def validate(self) -> None:
        if not 0.0 < self.mask_threshold < 1.0:
            raise ValidationError(f"mask_threshold must be in (0, 1), got {self.mask_threshold}")
        if self.mse_threshold < 0.0:
            raise ValidationError(f"mse_threshold must be >= 0, got {self.mse_threshold}")
        if self.top_feature_mode not in TOP_FEATURE_MODES:
            raise ValidationError(f"top_feature_mode must be one of {TOP_FEATURE_MODES}")

    def to_json_dict(self) -> dict:
        return {
            "mask_threshold": self.mask_threshold,
            "mse_threshold": self.mse_threshold,
            "score_scale": self.score_scale,
            "top_feature_mode": self.top_feature_mode,
            "auto_flag_top_n": self.auto_flag_top_n,
        }


@dataclass
class DetectionRecord:
    instance_id: str
    predicted_class: int
    true_class: int
    dissimilarity: float
    flagged: bool
    status: str
    top_feature: int
    shap: Optional[ShapAttribution] = None
    map_paths: dict = field(default_factory=dict)
    warning: Optional[str] = None

    def to_json_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "predicted_class": self.predicted_class,
            "true_class": self.true_class,
            "dissimilarity": self.dissimilarity,
            "flagged": self.flagged,
            "status": self.status,
            "top_feature": self.top_feature,
            "shap": None if self.shap is None else {
                "alpha0": self.shap.alpha0,
                "alpha": self.shap.alpha.tolist(),
            },
            "map_paths": self.map_paths,
            "warning": self.warning,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DetectionRecord":
        shap = None
        if doc.get("shap") is not None:
            shap = ShapAttribution(
                alpha=np.asarray(doc["shap"]["alpha"], dtype=np.float64),
                alpha0=float(doc["shap"]["alpha0"]),
                class_index=doc["predicted_class"],
                instance_id=doc["instance_id"],
            )
        return cls(
            instance_id=doc["instance_id"],
            predicted_class=doc["predicted_class"],
            true_class=doc["true_class"],
            dissimilarity=doc["dissimilarity"],
            flagged=doc["flagged"],
            status=doc["status"],
            top_feature=doc["top_feature"],
            shap=shap,
            map_paths=doc.get("map_paths") or {},
            warning=doc.get("warning"),
        )


def dissimilarity(rf: SaliencyMap, gc: SaliencyMap, config: DetectionConfig = DetectionConfig()) -> float:
    """Masked, rounded MSE between two normalized maps, in percentage units.

    Mask: pixels where either map exceeds the mask threshold. Values above
    the threshold are rounded to 1.0 in both maps before squaring. An empty
    mask scores 0 (no confident region anywhere means no evidence of
    disagreement).
    """
    if rf.data.shape != gc.data.shape:
        raise ValidationError(f"map resolutions differ: {rf.data.shape} vs {gc.data.shape}")
    for name, m in (("rf", rf), ("gc", gc)):
        if m.data.size and (m.data.min() < 0.0 or m.data.max() > 1.0 + 1e-9):
            raise ValidationError(f"{name} map is not normalized to [0, 1]")
    t = config.mask_threshold
    mask = (rf.data > t) | (gc.data > t)
    if not mask.any():
        return 0.0
    rf_r = np.where(rf.data > t, 1.0, rf.data)
    gc_r = np.where(gc.data > t, 1.0, gc.data)
    diff = rf_r[mask] - gc_r[mask]
    return config.score_scale * float(np.mean(diff * diff))


def _gradient_weights(bundle: TensorBundle, entry: ImageEntry, Z: int) -> np.ndarray:
    if bundle.manifest.gradient_mode == "analytic_head":
        return analytic_head_gradients(bundle.head_weights(), entry.predicted_label, Z)
    return pool_gradients(bundle.gradients(entry.id))


def _load_source_image(bundle: TensorBundle, entry: ImageEntry) -> Optional[Image.Image]:
    if entry.image_path is None:
        return None
    return Image.open(bundle.root_path / entry.image_path)


@dataclass
class InstanceDetection:
    record: DetectionRecord
    rf_png: Optional[bytes]
    gc_png: Optional[bytes]


def detect_instance(
    bundle: TensorBundle,
    entry: ImageEntry,
    model: Optional[TreeEnsemble],
    config: DetectionConfig = DetectionConfig(),
) -> InstanceDetection:
    """Run the full per-instance pipeline: weights, phi, attributions, maps, score."""
    try:
        return _detect_instance(bundle, entry, model, config)
    except Exception as exc:
        exc.args = (f"instance {entry.id!r}: {exc}",) + exc.args[1:]
        raise


def _detect_instance(
    bundle: TensorBundle,
    entry: ImageEntry,
    model: Optional[TreeEnsemble],
    config: DetectionConfig,
) -> InstanceDetection:
    acts = bundle.activations(entry.id).astype(np.float64)
    K, H, W = acts.shape
    weights = _gradient_weights(bundle, entry, H * W)
    means = channel_means(acts)

    if config.top_feature_mode == "grad_mean":
        top_feature = int(np.argmax(weights * means))
    else:
        top_feature = -1  # filled after attribution below

    correct = entry.predicted_label == entry.true_label
    target = bundle.manifest.input_image_size or (H * DEFAULT_UPSCALE, W * DEFAULT_UPSCALE)
    image = _load_source_image(bundle, entry)

    gc_raw = weighted_activation_map(weights, acts, GRAD_CAM, entry.predicted_label)
    gc_norm = normalize_map(gc_raw)
    gc_png = render_overlay(upscale_map(gc_norm, target), image)

    if model is None or not model.has_splits:
        # a surrogate that never split (one-sided or inseparable labels)
        # carries no robust-feature signal, so the instance cannot be assessed
        reason = "no surrogate model" if model is None else "degenerate surrogate (no splits)"
        log.warning("%s for class %d; instance %s is diagnostic-only",
                    reason, entry.predicted_label, entry.id)
        record = DetectionRecord(
            instance_id=entry.id,
            predicted_class=entry.predicted_label,
            true_class=entry.true_label,
            dissimilarity=0.0,
            flagged=False,
            status="diagnostic",
            top_feature=max(top_feature, 0),
            warning=f"{reason} for predicted class {entry.predicted_label}",
        )
        return InstanceDetection(record=record, rf_png=None, gc_png=gc_png)

    phi = build_phi(weights, means)
    attribution = shap_for_instance(model, phi, instance_id=entry.id)
    if config.top_feature_mode == "shap_mean":
        top_feature = int(np.argmax(attribution.alpha * means))

    rf_raw = weighted_activation_map(attribution.alpha, acts, RF_CAM, entry.predicted_label)
    rf_norm = normalize_map(rf_raw)
    rf_png = render_overlay(upscale_map(rf_norm, target), image)

    score = dissimilarity(rf_norm, gc_norm, config)
    record = DetectionRecord(
        instance_id=entry.id,
        predicted_class=entry.predicted_label,
        true_class=entry.true_label,
        dissimilarity=score,
        flagged=bool(score > config.mse_threshold and correct),
        status="pending" if correct else "diagnostic",
        top_feature=top_feature,
        shap=attribution,
    )
    return InstanceDetection(record=record, rf_png=rf_png, gc_png=gc_png)


def detect_bundle(
    bundle: TensorBundle,
    models: dict[int, TreeEnsemble],
    config: DetectionConfig = DetectionConfig(),
    out_dir: Optional[str | Path] = None,
    parallelism: int = 1,
    config_echo: Optional[dict] = None,
) -> tuple[list[DetectionRecord], dict]:
    """Detect every test-split entry; returns (records, run report).

    Records are ordered by instance id. Per-instance failures become
    diagnostic records with a warning instead of aborting the batch. When
    ``out_dir`` is given, heatmaps are written under ``out_dir/heatmaps``.
    """
    config.validate()
    entries = sorted(bundle.entries_for_split("test"), key=lambda e: e.id)
    heat_dir = None
    if out_dir is not None:
        heat_dir = Path(out_dir) / "heatmaps"
        heat_dir.mkdir(parents=True, exist_ok=True)

    def run_one(entry: ImageEntry) -> InstanceDetection:
        try:
            return detect_instance(bundle, entry, models.get(entry.predicted_label), config)
        except Exception as exc:  # recorded, never aborts the batch
            log.warning("detection failed: %s", exc)
            record = DetectionRecord(
                instance_id=entry.id,
                predicted_class=entry.predicted_label,
                true_class=entry.true_label,
                dissimilarity=0.0,
                flagged=False,
                status="diagnostic",
                top_feature=0,
                warning=str(exc),
            )
            return InstanceDetection(record=record, rf_png=None, gc_png=None)

    if parallelism > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            detections = list(pool.map(run_one, entries))
    else:
        detections = [run_one(e) for e in entries]

    records = []
    for det in detections:
        if heat_dir is not None:
            rel = {}
            if det.rf_png is not None:
                rf_path = heat_dir / f"{det.record.instance_id}_rf.png"
                rf_path.write_bytes(det.rf_png)
                rel["rf_cam"] = f"heatmaps/{rf_path.name}"
            if det.gc_png is not None:
                gc_path = heat_dir / f"{det.record.instance_id}_gc.png"
                gc_path.write_bytes(det.gc_png)
                rel["grad_cam"] = f"heatmaps/{gc_path.name}"
            det.record.map_paths = rel
        records.append(det.record)

    report = build_run_report(bundle, models, records, config, config_echo)
    return records, report


def build_run_report(
    bundle: TensorBundle,
    models: dict[int, TreeEnsemble],
    records: list[DetectionRecord],
    config: DetectionConfig,
    config_echo: Optional[dict] = None,
) -> dict:
    """Per-class and overall flag rates plus surrogate accuracies (JSON-ready)."""
    per_class = []
    weighted_num = weighted_den = 0.0
    macro_accs = []
    for c in range(bundle.manifest.num_classes):
        recs = [r for r in records if r.predicted_class == c]
        n_test = len(recs)
        n_correct = sum(1 for r in recs if r.predicted_class == r.true_class)
        n_flagged = sum(1 for r in recs if r.flagged)
        model = models.get(c)
        metrics = model.metrics if model is not None else {}
        test_acc = metrics.get("test_accuracy")
        n_lsm_test = metrics.get("n_test") or 0
        if test_acc is not None and not np.isnan(test_acc) and n_lsm_test:
            macro_accs.append(test_acc)
            weighted_num += test_acc * n_lsm_test
            weighted_den += n_lsm_test
        per_class.append({
            "class_index": c,
            "class_name": bundle.manifest.class_names[c],
            "n_test": n_test,
            "n_correct": n_correct,
            "n_flagged": n_flagged,
            "flag_rate_test": n_flagged / n_test if n_test else 0.0,
            "flag_rate_correct": n_flagged / n_correct if n_correct else 0.0,
            "surrogate_available": model is not None,
            "lsm_train_accuracy": metrics.get("train_accuracy"),
            "lsm_test_accuracy": test_acc,
        })

    n_test = len(records)
    n_correct = sum(1 for r in records if r.predicted_class == r.true_class)
    n_flagged = sum(1 for r in records if r.flagged)
    return {
        "config": config_echo or {"detection": config.to_json_dict()},
        "overall": {
            "n_test": n_test,
            "n_correct": n_correct,
            "n_flagged": n_flagged,
            "flag_rate_test": n_flagged / n_test if n_test else 0.0,
            "flag_rate_correct": n_flagged / n_correct if n_correct else 0.0,
            "lsm_macro_avg_accuracy": float(np.mean(macro_accs)) if macro_accs else None,
            "lsm_weighted_avg_accuracy": weighted_num / weighted_den if weighted_den else None,
        },
        "per_class": per_class,
    }


def write_records(path: str | Path, records: list[DetectionRecord]) -> None:
    """JSON-lines, one record per line, stable field order."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json_dict()) + "\n")


def read_records(path: str | Path) -> list[DetectionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(DetectionRecord.from_json_dict(json.loads(line)))
    return records


def write_report(path: str | Path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
