import math
from pathlib import Path

import numpy as np
import pytest

from oracles import eval_margin_pathwalk, random_ensemble
from rfcam.errors import ValidationError
from rfcam.gbdt import (
    BoostConfig,
    TreeEnsemble,
    TreeNode,
    build_misclassification_labels,
    predict_margin,
    predict_proba,
    train_lsm,
)
from rfcam.tensor_store import ImageEntry, Manifest, TensorBundle


def _stump(feature=0, threshold=0.0, left_value=-1.0, right_value=1.0, covers=(30.0, 10.0)):
    return [
        TreeNode(feature, threshold, 1, 2, 0.0, covers[0] + covers[1]),
        TreeNode(None, math.nan, -1, -1, left_value, covers[0]),
        TreeNode(None, math.nan, -1, -1, right_value, covers[1]),
    ]


def _ensemble(trees, base=0.0, k=4):
    return TreeEnsemble(trees=trees, base_score=base, class_index=0,
                        feature_count=k, training_config=BoostConfig())


class TestPredict:
    def test_empty_ensemble_margin_zero(self):
        model = _ensemble([], base=0.0)
        phi = np.zeros(4)
        assert predict_margin(model, phi) == 0.0
        assert predict_proba(model, phi) == 0.5

    def test_single_stump_path(self):
        model = _ensemble([_stump()], base=0.25)
        phi = np.zeros(4)
        phi[0] = 5.0
        assert predict_margin(model, phi) == 0.25 + 1.0
        phi[0] = -5.0
        assert predict_margin(model, phi) == 0.25 - 1.0

    def test_matches_pathwalk_oracle(self):
        r = np.random.default_rng(11)
        for _ in range(20):
            model = random_ensemble(r, feature_count=6)
            x = r.standard_normal(6)
            assert predict_margin(model, x) == eval_margin_pathwalk(model, x)

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            predict_margin(_ensemble([]), np.zeros(3))


class TestTraining:
    def test_all_labels_identical_degenerates(self):
        X = np.random.default_rng(0).standard_normal((20, 3))
        examples = [(x, 1) for x in X]
        model = train_lsm(0, examples)
        assert model.trees == []
        assert predict_proba(model, X[0]) > 0.99
        negatives = train_lsm(0, [(x, 0) for x in X])
        assert negatives.trees == []
        assert predict_proba(negatives, X[0]) < 0.01

    def test_linearly_separable_one_feature(self):
        xs = np.linspace(-1.0, 1.0, 100)
        train = [(np.array([x]), int(x > 0)) for x in xs]
        test = [(np.array([x]), int(x > 0)) for x in np.linspace(-0.95, 0.95, 50)]
        model = train_lsm(0, train, BoostConfig(), test_examples=test)
        assert model.metrics["test_accuracy"] == 1.0

    def test_empty_input_rejected(self):
        with pytest.raises(ValidationError):
            train_lsm(0, [])

    def test_deterministic_serialized_form(self):
        r = np.random.default_rng(12)
        X = r.standard_normal((60, 5))
        y = (X[:, 0] + 0.3 * r.standard_normal(60) > 0).astype(int)
        examples = [(x, int(lbl)) for x, lbl in zip(X, y)]
        cfg = BoostConfig(num_rounds=10)
        m1 = train_lsm(2, examples, cfg)
        m2 = train_lsm(2, examples, cfg)
        assert m1.to_json() == m2.to_json()

    def test_monotone_training_loss(self):
        r = np.random.default_rng(13)
        X = r.standard_normal((80, 4))
        y = ((X[:, 0] + X[:, 1] > 0) ^ (r.random(80) < 0.1)).astype(int)
        model = train_lsm(0, [(x, int(lbl)) for x, lbl in zip(X, y)], BoostConfig(num_rounds=25))
        curve = model.metrics["train_loss_curve"]
        assert len(curve) == 25
        assert all(b <= a + 1e-12 for a, b in zip(curve, curve[1:]))

    def test_margin_piecewise_constant(self):
        r = np.random.default_rng(14)
        X = r.standard_normal((50, 3))
        y = (X[:, 1] > 0.2).astype(int)
        model = train_lsm(0, [(x, int(lbl)) for x, lbl in zip(X, y)], BoostConfig(num_rounds=5))
        thresholds = {
            n.threshold for tree in model.trees for n in tree if n.feature_index is not None
        }
        x = X[7].copy()
        base = predict_margin(model, x)
        eps = min(abs(t - v) for t in thresholds for v in x) / 4 + 1e-12
        for f in range(3):
            bumped = x.copy()
            bumped[f] += min(eps, 1e-9)
            assert predict_margin(model, bumped) == base

    def test_parent_cover_equals_children_sum(self):
        r = np.random.default_rng(15)
        X = r.standard_normal((70, 4))
        y = (X[:, 2] > 0).astype(int)
        model = train_lsm(0, [(x, int(lbl)) for x, lbl in zip(X, y)], BoostConfig(num_rounds=8))
        for tree in model.trees:
            for node in tree:
                if node.feature_index is not None:
                    kids = tree[node.left].cover + tree[node.right].cover
                    assert abs(node.cover - kids) <= 1e-6
                assert node.cover > 0.0

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            BoostConfig(num_rounds=0).validate()
        with pytest.raises(ValidationError):
            BoostConfig(learning_rate=1.5).validate()
        with pytest.raises(ValidationError):
            BoostConfig(max_depth=0).validate()


class TestSerialization:
    def test_round_trip_preserves_predictions_exactly(self, tmp_path):
        r = np.random.default_rng(16)
        X = r.standard_normal((100, 6))
        y = (X[:, 0] * X[:, 3] > 0).astype(int)
        model = train_lsm(1, [(x, int(lbl)) for x, lbl in zip(X, y)], BoostConfig(num_rounds=12))
        path = tmp_path / "class_1.lsm.json"
        model.save(path)
        back = TreeEnsemble.load(path)
        probe = r.standard_normal((1000, 6))
        for row in probe:
            assert predict_margin(back, row) == predict_margin(model, row)

    def test_rejects_foreign_document(self, tmp_path):
        path = tmp_path / "x.lsm.json"
        path.write_text('{"format": "other", "version": 1}')
        from rfcam.errors import FormatError

        with pytest.raises(FormatError):
            TreeEnsemble.load(path)

    def test_rejects_out_of_range_feature_index(self, tmp_path):
        model = _ensemble([_stump(feature=2)], k=4)
        path = tmp_path / "ok.lsm.json"
        model.save(path)
        doc = path.read_text().replace('"feature_index": 2', '"feature_index": 9')
        bad = tmp_path / "bad.lsm.json"
        bad.write_text(doc)
        with pytest.raises(ValidationError, match="feature 9"):
            TreeEnsemble.load(bad)

    def test_rejects_inconsistent_covers(self, tmp_path):
        model = _ensemble([_stump(covers=(30.0, 10.0))], k=4)
        path = tmp_path / "ok.lsm.json"
        model.save(path)
        doc = path.read_text().replace('"cover": 40.0', '"cover": 41.0')
        bad = tmp_path / "bad.lsm.json"
        bad.write_text(doc)
        with pytest.raises(ValidationError, match="cover"):
            TreeEnsemble.load(bad)


class TestMisclassificationLabels:
    def _bundle(self, rows):
        entries = [
            ImageEntry(f"e{i}", t, p, f"tensors/e{i}.scdt", gradient_path=f"tensors/g{i}.scdt",
                       split=s)
            for i, (t, p, s) in enumerate(rows)
        ]
        manifest = Manifest(1, 8, 2, 2, 2, "precomputed", tuple(f"c{i}" for i in range(8)))
        return TensorBundle(root_path=Path("unused"), manifest=manifest, images=entries)

    def test_correct_entry_labeled_one(self):
        sets = build_misclassification_labels(self._bundle([(3, 3, "train")]))
        assert sets[3]["train"] == [("e0", 1)]

    def test_misclassified_entry_labeled_zero_under_true_class(self):
        sets = build_misclassification_labels(self._bundle([(3, 7, "train")]))
        assert sets[3]["train"] == [("e0", 0)]
        assert sets[7]["train"] == []

    def test_counts_partition_bundle(self):
        r = np.random.default_rng(17)
        rows = [
            (int(r.integers(8)), int(r.integers(8)), "train" if r.random() < 0.7 else "test")
            for _ in range(200)
        ]
        bundle = self._bundle(rows)
        sets = build_misclassification_labels(bundle)
        total = sum(len(v["train"]) + len(v["test"]) for v in sets.values())
        assert total == 200
        for c in range(8):
            expected = sum(1 for t, _, _ in rows if t == c)
            assert len(sets[c]["train"]) + len(sets[c]["test"]) == expected
