"""Orchestration helpers tying the bundle, surrogates, and detector together."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from rfcam.detector import (
    DetectionConfig,
    detect_bundle,
    write_records,
    write_report,
)
from rfcam.errors import NotFoundError
from rfcam.gbdt import BoostConfig, TreeEnsemble, build_misclassification_labels, train_lsm
from rfcam.saliency import analytic_head_gradients, build_phi, channel_means, pool_gradients
from rfcam.tensor_store import ImageEntry, TensorBundle

log = logging.getLogger("rfcam.pipeline")

SURROGATE_DIR = "surrogates"


def compute_phi(bundle: TensorBundle, entry: ImageEntry) -> np.ndarray:
    """Surrogate features for one entry: unit gradients plus unit mean activations."""
    acts = bundle.activations(entry.id).astype(np.float64)
    K, H, W = acts.shape
    if bundle.manifest.gradient_mode == "analytic_head":
        weights = analytic_head_gradients(bundle.head_weights(), entry.predicted_label, H * W)
    else:
        weights = pool_gradients(bundle.gradients(entry.id))
    return build_phi(weights, channel_means(acts))


def build_phi_table(bundle: TensorBundle) -> dict[str, np.ndarray]:
    return {entry.id: compute_phi(bundle, entry) for entry in bundle.images}


def train_surrogates(
    bundle: TensorBundle,
    config: BoostConfig = BoostConfig(),
    phi_table: dict[str, np.ndarray] | None = None,
) -> dict[int, TreeEnsemble]:
    """Train one surrogate per class that has training entries."""
    if phi_table is None:
        phi_table = build_phi_table(bundle)
    label_sets = build_misclassification_labels(bundle)
    models: dict[int, TreeEnsemble] = {}
    for c in range(bundle.manifest.num_classes):
        train_ex = [(phi_table[i], lbl) for i, lbl in label_sets[c]["train"]]
        test_ex = [(phi_table[i], lbl) for i, lbl in label_sets[c]["test"]]
        if not train_ex:
            log.warning("class %d has no training entries; surrogate unavailable", c)
            continue
        models[c] = train_lsm(c, train_ex, config, test_examples=test_ex)
        log.info(
            "class %d surrogate: train acc %.4f, test acc %s",
            c,
            models[c].metrics["train_accuracy"],
            models[c].metrics["test_accuracy"],
        )
    return models


def save_surrogates(models: dict[int, TreeEnsemble], out_dir: str | Path) -> None:
    out_dir = Path(out_dir) / SURROGATE_DIR
    out_dir.mkdir(parents=True, exist_ok=True)
    for c, model in sorted(models.items()):
        model.save(out_dir / f"class_{c}.lsm.json")


def load_surrogates(out_dir: str | Path) -> dict[int, TreeEnsemble]:
    sur_dir = Path(out_dir) / SURROGATE_DIR
    if not sur_dir.is_dir():
        raise NotFoundError(f"surrogates not found under {sur_dir}")
    models: dict[int, TreeEnsemble] = {}
    for path in sorted(sur_dir.glob("class_*.lsm.json")):
        model = TreeEnsemble.load(path)
        models[model.class_index] = model
    if not models:
        raise NotFoundError(f"surrogates not found under {sur_dir}")
    return models


def run_detection(
    bundle: TensorBundle,
    models: dict[int, TreeEnsemble],
    config: DetectionConfig,
    out_dir: str | Path,
    parallelism: int = 1,
    config_echo: dict | None = None,
):
    """Detect the bundle's test split and write records.jsonl / report.json / heatmaps."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, report = detect_bundle(
        bundle, models, config, out_dir=out_dir, parallelism=parallelism, config_echo=config_echo
    )
    write_records(out_dir / "records.jsonl", records)
    write_report(out_dir / "report.json", report)
    return records, report
