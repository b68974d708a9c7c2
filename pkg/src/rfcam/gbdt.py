"""Per-class local surrogate models: boosted decision trees on correctness labels.

Second-order gradient boosting with logistic loss and exact greedy split
search. Covers (per-node hessian sums) are recorded at training time; the
Shapley attribution path consumes them as conditional-expectation weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from rfcam.errors import FormatError, ValidationError
from rfcam.tensor_store import TensorBundle

BASE_SCORE_CLAMP = 10.0
MIN_SPLIT_GAIN = 1e-12


@dataclass(frozen=True)
class BoostConfig:
    num_rounds: int = 50
    max_depth: int = 4
    learning_rate: float = 0.1
    min_child_cover: float = 1.0
    l2_regularization: float = 1.0
    seed: int = 0
    positive_class_weight: float = 1.0

    def validate(self) -> None:
        if self.num_rounds < 1:
            raise ValidationError(f"num_rounds must be >= 1, got {self.num_rounds}")
        if self.max_depth < 1:
            raise ValidationError(f"max_depth must be >= 1, got {self.max_depth}")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValidationError(f"learning_rate must be in (0, 1], got {self.learning_rate}")
        if self.positive_class_weight <= 0:
            raise ValidationError("positive_class_weight must be positive")

    def to_json_dict(self) -> dict:
        return {
            "num_rounds": self.num_rounds,
            "max_depth": self.max_depth,
            "learning_rate": self.learning_rate,
            "min_child_cover": self.min_child_cover,
            "l2_regularization": self.l2_regularization,
            "seed": self.seed,
            "positive_class_weight": self.positive_class_weight,
        }


@dataclass
class TreeNode:
    feature_index: Optional[int]  # None marks a leaf
    threshold: float
    left: int
    right: int
    leaf_value: float
    cover: float

    @property
    def is_leaf(self) -> bool:
        return self.feature_index is None


@dataclass
class TreeEnsemble:
    trees: list[list[TreeNode]]
    base_score: float
    class_index: int
    feature_count: int
    training_config: BoostConfig
    metrics: dict = field(default_factory=dict)

    @property
    def has_splits(self) -> bool:
        """False when every tree is a lone leaf (no attributable signal)."""
        return any(node.feature_index is not None for tree in self.trees for node in tree)

    def validate(self) -> None:
        for t, tree in enumerate(self.trees):
            if not tree:
                raise ValidationError(f"tree {t} is empty")
            for i, node in enumerate(tree):
                if node.is_leaf:
                    if not math.isfinite(node.leaf_value):
                        raise ValidationError(f"tree {t}, node {i}: non-finite leaf value")
                    continue
                if not 0 <= node.feature_index < self.feature_count:
                    raise ValidationError(
                        f"tree {t}, node {i}: feature {node.feature_index} "
                        f"outside [0, {self.feature_count})"
                    )
                if not math.isfinite(node.threshold):
                    raise ValidationError(f"tree {t}, node {i}: non-finite threshold")
                if not (0 <= node.left < len(tree) and 0 <= node.right < len(tree)):
                    raise ValidationError(f"tree {t}, node {i}: child index out of range")
                kids = tree[node.left].cover + tree[node.right].cover
                if abs(node.cover - kids) > 1e-6:
                    raise ValidationError(
                        f"tree {t}, node {i}: cover {node.cover} != children sum {kids}"
                    )

    def to_json(self) -> str:
        doc = {
            "format": "lsm",
            "version": 1,
            "class_index": self.class_index,
            "feature_count": self.feature_count,
            "base_score": self.base_score,
            "config": self.training_config.to_json_dict(),
            "metrics": self.metrics,
            "trees": [
                [
                    {
                        "feature_index": n.feature_index,
                        "threshold": None if n.is_leaf else n.threshold,
                        "left": None if n.is_leaf else n.left,
                        "right": None if n.is_leaf else n.right,
                        "leaf_value": n.leaf_value if n.is_leaf else None,
                        "cover": n.cover,
                    }
                    for n in tree
                ]
                for tree in self.trees
            ],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TreeEnsemble":
        doc = json.loads(text)
        if doc.get("format") != "lsm" or doc.get("version") != 1:
            raise FormatError("not a v1 .lsm.json document")
        trees = [
            [
                TreeNode(
                    feature_index=n["feature_index"],
                    threshold=n["threshold"] if n["threshold"] is not None else math.nan,
                    left=n["left"] if n["left"] is not None else -1,
                    right=n["right"] if n["right"] is not None else -1,
                    leaf_value=n["leaf_value"] if n["leaf_value"] is not None else 0.0,
                    cover=n["cover"],
                )
                for n in tree
            ]
            for tree in doc["trees"]
        ]
        model = cls(
            trees=trees,
            base_score=doc["base_score"],
            class_index=doc["class_index"],
            feature_count=doc["feature_count"],
            training_config=BoostConfig(**doc["config"]),
            metrics=doc.get("metrics", {}),
        )
        model.validate()
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TreeEnsemble":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _eval_tree(tree: list[TreeNode], x: np.ndarray) -> float:
    node = tree[0]
    while not node.is_leaf:
        node = tree[node.left] if x[node.feature_index] < node.threshold else tree[node.right]
    return node.leaf_value


def predict_margin(model: TreeEnsemble, phi: np.ndarray) -> float:
    """Raw log-odds for one feature vector: base score plus per-tree leaf values."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (model.feature_count,):
        raise ValidationError(f"phi has shape {phi.shape}, expected ({model.feature_count},)")
    total = model.base_score
    for tree in model.trees:
        total += _eval_tree(tree, phi)
    return total


def predict_proba(model: TreeEnsemble, phi: np.ndarray) -> float:
    return 1.0 / (1.0 + math.exp(-predict_margin(model, phi)))


def _best_split(
    X: np.ndarray,
    grad: np.ndarray,
    hess: np.ndarray,
    idx: np.ndarray,
    config: BoostConfig,
) -> Optional[tuple[int, float, float]]:
    """Exact greedy search over all features and unique-value midpoints.

    Returns (feature, threshold, gain) or None. Scan order (feature
    ascending, threshold ascending) with strictly-greater comparisons makes
    tie-breaking deterministic: lowest feature index, then lowest threshold.
    """
    lam = config.l2_regularization
    g_total = grad[idx].sum()
    h_total = hess[idx].sum()
    parent_score = g_total * g_total / (h_total + lam)

    best: Optional[tuple[int, float, float]] = None
    for f in range(X.shape[1]):
        vals = X[idx, f]
        order = np.argsort(vals, kind="stable")
        sv = vals[order]
        boundaries = np.flatnonzero(np.diff(sv) > 0)
        if boundaries.size == 0:
            continue
        gc = np.cumsum(grad[idx][order])
        hc = np.cumsum(hess[idx][order])
        gl, hl = gc[boundaries], hc[boundaries]
        gr, hr = g_total - gl, h_total - hl
        ok = (hl >= config.min_child_cover) & (hr >= config.min_child_cover)
        if not ok.any():
            continue
        gains = np.where(
            ok,
            0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent_score),
            -np.inf,
        )
        j = int(np.argmax(gains))
        gain = float(gains[j])
        if gain > MIN_SPLIT_GAIN and (best is None or gain > best[2]):
            a, b = float(sv[boundaries[j]]), float(sv[boundaries[j] + 1])
            thr = (a + b) / 2.0
            if thr <= a:  # adjacent floats can round the midpoint down
                thr = b
            best = (f, thr, gain)
    return best


def _build_tree(
    X: np.ndarray,
    grad: np.ndarray,
    hess: np.ndarray,
    config: BoostConfig,
) -> list[TreeNode]:
    nodes: list[TreeNode] = []

    def grow(idx: np.ndarray, depth: int) -> int:
        g = grad[idx].sum()
        h = hess[idx].sum()
        pos = len(nodes)
        split = None
        if depth < config.max_depth and idx.size >= 2:
            split = _best_split(X, grad, hess, idx, config)
        if split is None:
            value = -config.learning_rate * g / (h + config.l2_regularization)
            nodes.append(TreeNode(None, math.nan, -1, -1, value, float(h)))
            return pos
        f, thr, _ = split
        nodes.append(TreeNode(f, thr, -1, -1, 0.0, float(h)))
        mask = X[idx, f] < thr
        left = grow(idx[mask], depth + 1)
        right = grow(idx[~mask], depth + 1)
        nodes[pos].left = left
        nodes[pos].right = right
        return pos

    grow(np.arange(X.shape[0]), 0)
    return nodes


def train_lsm(
    class_index: int,
    train_examples: Sequence[tuple[np.ndarray, int]],
    config: BoostConfig = BoostConfig(),
    test_examples: Sequence[tuple[np.ndarray, int]] = (),
) -> TreeEnsemble:
    """Train one per-class surrogate on (phi, correctness-label) pairs.

    Label 1 means the original classifier was correct. If every label is
    identical the ensemble degenerates to base_score alone (zero trees).
    """
    config.validate()
    if len(train_examples) == 0:
        raise ValidationError("train_lsm needs at least one example")
    X = np.asarray([phi for phi, _ in train_examples], dtype=np.float64)
    y = np.asarray([label for _, label in train_examples], dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError("feature vectors must share one length")

    w = np.where(y == 1.0, config.positive_class_weight, 1.0)
    pos, neg = float((w * y).sum()), float((w * (1.0 - y)).sum())
    if neg == 0.0:
        base = BASE_SCORE_CLAMP
    elif pos == 0.0:
        base = -BASE_SCORE_CLAMP
    else:
        base = float(np.clip(math.log(pos / neg), -BASE_SCORE_CLAMP, BASE_SCORE_CLAMP))

    model = TreeEnsemble(
        trees=[],
        base_score=base,
        class_index=class_index,
        feature_count=X.shape[1],
        training_config=config,
    )

    degenerate = pos == 0.0 or neg == 0.0
    loss_curve: list[float] = []
    if not degenerate:
        margins = np.full(X.shape[0], base)
        for _ in range(config.num_rounds):
            p = np.clip(1.0 / (1.0 + np.exp(-margins)), 1e-15, 1.0 - 1e-15)
            grad = (p - y) * w
            hess = p * (1.0 - p) * w
            tree = _build_tree(X, grad, hess, config)
            model.trees.append(tree)
            margins += np.array([_eval_tree(tree, row) for row in X])
            p = np.clip(1.0 / (1.0 + np.exp(-margins)), 1e-15, 1.0 - 1e-15)
            loss_curve.append(float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean()))

    model.metrics = {
        "train_accuracy": _accuracy(model, train_examples),
        "test_accuracy": _accuracy(model, test_examples) if len(test_examples) else None,
        "n_train": len(train_examples),
        "n_test": len(test_examples),
        "train_loss_curve": loss_curve,
    }
    return model


def _accuracy(model: TreeEnsemble, examples: Sequence[tuple[np.ndarray, int]]) -> float:
    if len(examples) == 0:
        return float("nan")
    hits = sum(
        1 for phi, label in examples if (predict_margin(model, np.asarray(phi)) > 0.0) == bool(label)
    )
    return hits / len(examples)


def build_misclassification_labels(
    bundle: TensorBundle,
) -> dict[int, dict[str, list[tuple[str, int]]]]:
    """Group bundle entries by true class with correctness labels (1 = correct).

    Returns {class_index: {"train": [(entry_id, label)], "test": [...]}} in
    bundle entry order.
    """
    out: dict[int, dict[str, list[tuple[str, int]]]] = {
        c: {"train": [], "test": []} for c in range(bundle.manifest.num_classes)
    }
    for entry in bundle.images:
        label = 1 if entry.predicted_label == entry.true_label else 0
        out[entry.true_label][entry.split].append((entry.id, label))
    return out
