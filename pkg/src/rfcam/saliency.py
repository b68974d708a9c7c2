"""Saliency building blocks shared by the Grad-CAM and RF-CAM paths.

Channel weights come from gradient pooling (or analytically from a
GAP+linear head), surrogate features from unit-normalized weights plus
unit-normalized channel means, and both saliency flavors from one
weighted-activation kernel followed by ReLU.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from PIL import Image

from rfcam.errors import ValidationError
from rfcam.tensor_store import HeadWeights

ZERO_NORM_EPS = 1e-12

GRAD_CAM = "grad_cam"
RF_CAM = "rf_cam"


@dataclass(frozen=True)
class SaliencyMap:
    data: np.ndarray  # (H, W), float64, >= 0 after the ReLU kernel
    kind: str
    class_index: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{what} contains non-finite values")


def channel_means(activations: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean of a (K, H, W) activation tensor."""
    activations = np.asarray(activations, dtype=np.float64)
    if activations.ndim != 3:
        raise ValidationError(f"expected (K, H, W) tensor, got shape {activations.shape}")
    _require_finite(activations, "activation tensor")
    return activations.mean(axis=(1, 2))


def pool_gradients(grad_tensor: np.ndarray) -> np.ndarray:
    """Global-average-pool a (K, H, W) gradient tensor into per-channel weights."""
    grad_tensor = np.asarray(grad_tensor, dtype=np.float64)
    if grad_tensor.ndim != 3:
        raise ValidationError(f"expected (K, H, W) tensor, got shape {grad_tensor.shape}")
    _require_finite(grad_tensor, "gradient tensor")
    return grad_tensor.mean(axis=(1, 2))


def analytic_head_gradients(head: HeadWeights, class_index: int, Z: int) -> np.ndarray:
    """Pooled gradients of a GAP+linear head for one class: W[c, k] / Z.

    The head's class score is sum_k W[c,k] * mean(A^k) + b_c, so every
    spatial position contributes the same derivative W[c,k]/Z and pooling
    leaves it unchanged.
    """
    if Z < 1:
        raise ValidationError(f"Z must be >= 1, got {Z}")
    num_classes = head.weight_matrix.shape[0]
    if not 0 <= class_index < num_classes:
        raise ValidationError(f"class_index {class_index} outside [0, {num_classes})")
    return np.asarray(head.weight_matrix[class_index], dtype=np.float64) / float(Z)


def unit_normalize(v: np.ndarray) -> np.ndarray:
    """L2-normalize a vector; vectors with negligible norm pass through as zero."""
    v = np.asarray(v, dtype=np.float64)
    _require_finite(v, "vector")
    norm = float(np.linalg.norm(v))
    if norm <= ZERO_NORM_EPS:
        return np.zeros_like(v)
    return v / norm


def build_phi(weights: np.ndarray, means: np.ndarray) -> np.ndarray:
    """Surrogate feature vector: unit-normalized weights plus unit-normalized means."""
    weights = np.asarray(weights, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    if weights.shape != means.shape:
        raise ValidationError(f"length mismatch: weights {weights.shape} vs means {means.shape}")
    return unit_normalize(weights) + unit_normalize(means)


def weighted_activation_map(
    coeffs: np.ndarray,
    activations: np.ndarray,
    kind: str = GRAD_CAM,
    class_index: int = -1,
) -> SaliencyMap:
    """ReLU of the coefficient-weighted sum of activation channels (un-normalized)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    activations = np.asarray(activations, dtype=np.float64)
    if activations.ndim != 3 or coeffs.shape != (activations.shape[0],):
        raise ValidationError(
            f"coeffs shape {coeffs.shape} does not match activations {activations.shape}"
        )
    data = np.maximum(np.tensordot(coeffs, activations, axes=1), 0.0)
    return SaliencyMap(data=data, kind=kind, class_index=class_index)


def normalize_map(m: SaliencyMap) -> SaliencyMap:
    """Scale a non-negative map by its maximum into [0, 1]; all-zero maps pass through."""
    peak = float(m.data.max()) if m.data.size else 0.0
    if peak <= 0.0:
        return m
    return replace(m, data=m.data / peak)


def upscale_map(m: SaliencyMap, target: tuple[int, int]) -> SaliencyMap:
    """Bilinear corner-aligned upscale to ``target`` (height, width)."""
    src_h, src_w = m.data.shape
    dst_h, dst_w = int(target[0]), int(target[1])
    if dst_h < src_h or dst_w < src_w:
        raise ValidationError(f"target {target} smaller than source {(src_h, src_w)}")
    if (dst_h, dst_w) == (src_h, src_w):
        return m

    def grid(dst: int, src: int) -> np.ndarray:
        if dst == 1 or src == 1:
            return np.zeros(dst)
        return np.arange(dst) * (src - 1) / (dst - 1)

    ys, xs = grid(dst_h, src_h), grid(dst_w, src_w)
    y0 = np.minimum(ys.astype(int), src_h - 1)
    x0 = np.minimum(xs.astype(int), src_w - 1)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    d = m.data
    out = (
        d[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
        + d[np.ix_(y0, x1)] * (1 - wy) * wx
        + d[np.ix_(y1, x0)] * wy * (1 - wx)
        + d[np.ix_(y1, x1)] * wy * wx
    )
    return replace(m, data=out)


def _ramp_rgb(values: np.ndarray) -> np.ndarray:
    """Map [0,1] intensities through the fixed blue -> green -> red ramp."""
    v = np.clip(values, 0.0, 1.0)
    t_lo = np.clip(v / 0.5, 0.0, 1.0)
    t_hi = np.clip((v - 0.5) / 0.5, 0.0, 1.0)
    r = 255.0 * t_hi
    g = 255.0 * np.where(v <= 0.5, t_lo, 1.0 - t_hi)
    b = 255.0 * np.where(v <= 0.5, 1.0 - t_lo, 0.0)
    return np.stack([r, g, b], axis=-1).round().astype(np.uint8)


def render_overlay(m: SaliencyMap, image: Optional[Image.Image] = None) -> bytes:
    """Render a normalized map to PNG bytes, optionally alpha-blended over an image.

    Output bytes are deterministic for identical inputs.
    """
    heat = _ramp_rgb(m.data)
    if image is not None:
        h, w = m.data.shape
        base = np.asarray(
            image.convert("RGB").resize((w, h), Image.BILINEAR), dtype=np.float64
        )
        blended = 0.5 * heat.astype(np.float64) + 0.5 * base
        heat = blended.round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(heat, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()
