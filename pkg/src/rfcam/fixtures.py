"""Synthetic tensor bundles with planted core/spurious channel structure.

Stands in for real classifier exports: every class owns disjoint core and
spurious channels, activations are Gaussian blobs at per-instance object
and background locations, and the analytic GAP+linear head scores each
class from its own channels. Misclassifications arise organically when an
instance's core evidence is attenuated and a competing class's channels
fire (a secondary object), which gives the surrogate models a learnable
correctness signal. Ground truth records which instances rely on their
spurious channels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rfcam.detector import DetectionRecord
from rfcam.errors import ValidationError
from rfcam.tensor_store import (
    HeadWeights,
    ImageEntry,
    Manifest,
    TensorBundle,
    load_bundle,
    write_bundle_manifest,
    write_tensor,
)


@dataclass(frozen=True)
class FixtureSpec:
    num_classes: int = 4
    channels: int = 64
    map_size: int = 7  # H = W
    core_channels_per_class: int = 3
    spurious_channels_per_class: int = 2
    train_per_class: int = 200
    test_per_class: int = 60
    spurious_fraction: float = 0.3
    noise_sigma: float = 0.05
    seed: int = 0
    blob_peak: float = 1.0
    blob_width: float = 1.5
    attenuated_core_peak: float = 0.3  # mean; actual peak drawn U(0, 2x)
    core_weight: float = 1.0
    spurious_weight: float = 0.8
    co_fire_prob: float = 0.5  # chance of a competing-class secondary object
    co_fire_peak_range: tuple[float, float] = (0.5, 1.0)
    min_blob_separation: float = 3.0

    def validate(self) -> None:
        per_class = self.core_channels_per_class + self.spurious_channels_per_class
        if per_class * self.num_classes > self.channels:
            raise ValidationError(
                f"channel budget exceeded: {per_class} x {self.num_classes} > {self.channels}"
            )
        if not 0.0 <= self.spurious_fraction <= 1.0:
            raise ValidationError("spurious_fraction must be in [0, 1]")
        if self.num_classes < 2:
            raise ValidationError("need at least two classes")

    def core_channels(self, c: int) -> list[int]:
        per = self.core_channels_per_class + self.spurious_channels_per_class
        return list(range(c * per, c * per + self.core_channels_per_class))

    def spurious_channels(self, c: int) -> list[int]:
        per = self.core_channels_per_class + self.spurious_channels_per_class
        start = c * per + self.core_channels_per_class
        return list(range(start, start + self.spurious_channels_per_class))


@dataclass
class FixtureGroundTruth:
    is_spurious_reliant: dict[str, bool]
    class_channels: dict[int, dict[str, list[int]]]

    def to_json_dict(self) -> dict:
        return {
            "instances": {k: {"is_spurious_reliant": v} for k, v in self.is_spurious_reliant.items()},
            "classes": {str(c): ch for c, ch in self.class_channels.items()},
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "FixtureGroundTruth":
        return cls(
            is_spurious_reliant={
                k: bool(v["is_spurious_reliant"]) for k, v in doc["instances"].items()
            },
            class_channels={int(c): ch for c, ch in doc["classes"].items()},
        )

    @classmethod
    def load(cls, path: str | Path) -> "FixtureGroundTruth":
        return cls.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _blob(size: int, center: tuple[float, float], peak: float, width: float) -> np.ndarray:
    ii, jj = np.mgrid[0:size, 0:size].astype(np.float64)
    d2 = (ii - center[0]) ** 2 + (jj - center[1]) ** 2
    return peak * np.exp(-d2 / (2.0 * width * width))


def _place_locations(rng: np.random.Generator, size: int, count: int, separation: float) -> list[tuple[float, float]]:
    """Uniform continuous blob centers with pairwise minimum separation."""
    placed: list[tuple[float, float]] = []
    for _ in range(count):
        best, best_gap = None, -1.0
        for _ in range(100):
            cand = (float(rng.uniform(0, size - 1)), float(rng.uniform(0, size - 1)))
            gap = min(
                (math.dist(cand, p) for p in placed),
                default=float("inf"),
            )
            if gap >= separation:
                best = cand
                break
            if gap > best_gap:
                best, best_gap = cand, gap
        placed.append(best)  # type: ignore[arg-type]
    return placed


def build_head(spec: FixtureSpec) -> HeadWeights:
    weights = np.zeros((spec.num_classes, spec.channels))
    for c in range(spec.num_classes):
        weights[c, spec.core_channels(c)] = spec.core_weight
        weights[c, spec.spurious_channels(c)] = spec.spurious_weight
    return HeadWeights(weight_matrix=weights, bias=np.zeros(spec.num_classes))


def fixture_gen(spec: FixtureSpec, out: str | Path) -> tuple[TensorBundle, FixtureGroundTruth]:
    """Generate a bundle under ``out``; returns the loaded bundle and ground truth.

    All randomness comes from one counter-based generator (Philox) keyed by
    ``spec.seed``, so identical specs produce byte-identical bundles.
    """
    spec.validate()
    out = Path(out)
    tensors = out / "tensors"
    tensors.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    head = build_head(spec)

    entries: list[ImageEntry] = []
    reliant: dict[str, bool] = {}
    size = spec.map_size

    for c in range(spec.num_classes):
        for split, count in (("train", spec.train_per_class), ("test", spec.test_per_class)):
            n_spurious = round(spec.spurious_fraction * count)
            roles = np.zeros(count, dtype=bool)
            roles[:n_spurious] = True
            rng.shuffle(roles)
            for i in range(count):
                entry_id = f"c{c}_{split}_{i:04d}"
                is_reliant = bool(roles[i])
                obj_loc, bg_loc, fg_loc = _place_locations(rng, size, 3, spec.min_blob_separation)

                acts = np.zeros((spec.channels, size, size))
                if is_reliant:
                    for k in spec.spurious_channels(c):
                        acts[k] += _blob(size, bg_loc, spec.blob_peak, spec.blob_width)
                    core_peak = float(rng.uniform(0.0, 2.0 * spec.attenuated_core_peak))
                    for k in spec.core_channels(c):
                        acts[k] += _blob(size, obj_loc, core_peak, spec.blob_width)
                else:
                    for k in spec.core_channels(c):
                        acts[k] += _blob(size, obj_loc, spec.blob_peak, spec.blob_width)
                if rng.random() < spec.co_fire_prob:
                    other = int(rng.integers(spec.num_classes - 1))
                    other += other >= c
                    peak = float(rng.uniform(*spec.co_fire_peak_range))
                    for k in spec.core_channels(other):
                        acts[k] += _blob(size, fg_loc, peak, spec.blob_width)

                acts += rng.normal(0.0, spec.noise_sigma, acts.shape)
                np.clip(acts, 0.0, None, out=acts)

                # predict from the float32 tensor exactly as a consumer will read it
                stored = acts.astype(np.float32).astype(np.float64)
                scores = head.weight_matrix @ stored.mean(axis=(1, 2)) + head.bias
                predicted = int(np.argmax(scores))

                rel_path = f"tensors/{entry_id}.scdt"
                write_tensor(out / rel_path, acts.shape, acts.astype(np.float32))
                entries.append(ImageEntry(
                    id=entry_id,
                    true_label=c,
                    predicted_label=predicted,
                    activation_path=rel_path,
                    split=split,
                ))
                reliant[entry_id] = is_reliant

    manifest = Manifest(
        format_version=1,
        num_classes=spec.num_classes,
        channels=spec.channels,
        map_height=size,
        map_width=size,
        gradient_mode="analytic_head",
        class_names=tuple(f"class_{c}" for c in range(spec.num_classes)),
        head_weights_path="head.json",
        input_image_size=(size * 16, size * 16),
    )
    (out / "head.json").write_text(json.dumps(head.to_json_dict()) + "\n", encoding="utf-8")
    write_bundle_manifest(out, manifest, entries)

    truth = FixtureGroundTruth(
        is_spurious_reliant=reliant,
        class_channels={
            c: {"core": spec.core_channels(c), "spurious": spec.spurious_channels(c)}
            for c in range(spec.num_classes)
        },
    )
    (out / "ground_truth.json").write_text(
        json.dumps(truth.to_json_dict(), indent=1) + "\n", encoding="utf-8"
    )
    return load_bundle(out), truth


def score_detection(records: list[DetectionRecord], truth: FixtureGroundTruth) -> dict:
    """Recall/precision of flagging against planted ground truth, plus flag rate.

    Both rates condition on correctly classified test instances (flagging
    only applies there). Zero denominators report 1.0 with a marker.
    """
    unknown = [r.instance_id for r in records if r.instance_id not in truth.is_spurious_reliant]
    if unknown:
        raise ValidationError(f"records not covered by ground truth: {unknown[:3]}")

    correct = [r for r in records if r.predicted_class == r.true_class]
    relevant = [r for r in correct if truth.is_spurious_reliant[r.instance_id]]
    flagged = [r for r in correct if r.flagged]
    hits = [r for r in flagged if truth.is_spurious_reliant[r.instance_id]]

    out = {
        "recall": len(hits) / len(relevant) if relevant else 1.0,
        "precision": len(hits) / len(flagged) if flagged else 1.0,
        "flag_rate": len(flagged) / len(correct) if correct else 0.0,
        "n_correct": len(correct),
        "n_spurious_reliant_correct": len(relevant),
        "n_flagged": len(flagged),
        "n_true_positives": len(hits),
    }
    if not relevant:
        out["recall_zero_denominator"] = True
    if not flagged:
        out["precision_zero_denominator"] = True
    return out
