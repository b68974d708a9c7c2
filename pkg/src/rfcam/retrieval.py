"""Neural-feature retrieval: rank same-class instances by one channel's activation.

A confirmed spurious correlation names its most-activating channel; other
instances of the predicted class whose mean activation on that channel is
high are likely the same correlation, so they can be auto-flagged without
re-review.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

from rfcam.detector import DetectionRecord
from rfcam.errors import ValidationError
from rfcam.saliency import channel_means
from rfcam.tensor_store import TensorBundle


@dataclass(frozen=True)
class RetrievalResult:
    ranked: list[tuple[str, float]]  # (instance_id, mean activation), non-increasing
    query_instance: str
    feature: int
    class_index: int


def similar_instances(
    bundle: TensorBundle,
    class_index: int,
    feature: int,
    query_id: str,
    n: int,
    candidate_ids: Optional[Iterable[str]] = None,
) -> RetrievalResult:
    """Top-n same-predicted-class instances by mean activation of ``feature``.

    The query instance is excluded. ``candidate_ids`` optionally restricts
    the pool (the review service passes the ids that have detection
    records); by default every bundle entry is a candidate. Ties break by
    instance id.
    """
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    if not 0 <= class_index < bundle.manifest.num_classes:
        raise ValidationError(f"unknown class {class_index}")
    if not 0 <= feature < bundle.manifest.channels:
        raise ValidationError(f"feature {feature} outside [0, {bundle.manifest.channels})")
    pool = None if candidate_ids is None else set(candidate_ids)
    scored = []
    for entry in bundle.images:
        if entry.predicted_label != class_index or entry.id == query_id:
            continue
        if pool is not None and entry.id not in pool:
            continue
        score = float(channel_means(bundle.activations(entry.id))[feature])
        scored.append((entry.id, score))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return RetrievalResult(
        ranked=scored[:n],
        query_instance=query_id,
        feature=feature,
        class_index=class_index,
    )


def auto_flag(records: dict[str, DetectionRecord], result: RetrievalResult, top_n: int) -> list[str]:
    """Transition pending records among the top-n retrieved to auto_flagged.

    Confirmed and rejected records are never overwritten; re-running is a
    no-op. Returns the ids that transitioned.
    """
    updated = []
    for instance_id, _ in result.ranked[:top_n]:
        record = records.get(instance_id)
        if record is not None and record.status == "pending":
            record.status = "auto_flagged"
            updated.append(instance_id)
    return updated
