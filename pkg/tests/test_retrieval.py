import numpy as np
import pytest

from rfcam.detector import DetectionRecord
from rfcam.errors import ValidationError
from rfcam.retrieval import auto_flag, similar_instances
from rfcam.saliency import channel_means
from rfcam.tensor_store import ImageEntry, Manifest, load_bundle, write_bundle_manifest, write_tensor


def _tiny_bundle(tmp_path, means_by_id, order=None):
    """Bundle with 1x(2x2) single-channel... actually K=2 tensors with chosen channel-0 means."""
    (tmp_path / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for entry_id, mean in means_by_id.items():
        data = np.zeros((2, 2, 2), dtype=np.float32)
        data[0] = mean
        data[1] = 0.5
        write_tensor(tmp_path / f"tensors/{entry_id}.scdt", data.shape, data)
        write_tensor(tmp_path / f"tensors/{entry_id}_g.scdt", data.shape, np.ones_like(data))
        entries.append(ImageEntry(entry_id, 0, 0, f"tensors/{entry_id}.scdt",
                                  gradient_path=f"tensors/{entry_id}_g.scdt", split="test"))
    if order:
        entries.sort(key=lambda e: order.index(e.id))
    manifest = Manifest(1, 2, 2, 2, 2, "precomputed", ("a", "b"))
    write_bundle_manifest(tmp_path, manifest, entries)
    return load_bundle(tmp_path)


class TestSimilarInstances:
    def test_ordering(self, tmp_path):
        bundle = _tiny_bundle(tmp_path, {"q": 0.5, "hi": 0.9, "lo": 0.1})
        result = similar_instances(bundle, 0, 0, "q", 2)
        assert [i for i, _ in result.ranked] == ["hi", "lo"]
        assert result.ranked[0][1] == pytest.approx(0.9, abs=1e-6)

    def test_truncation_boundary(self, tmp_path):
        bundle = _tiny_bundle(tmp_path, {"q": 0.5, "x": 0.9, "y": 0.1})
        result = similar_instances(bundle, 0, 0, "q", 10)
        assert len(result.ranked) == 2

    def test_query_excluded(self, tmp_path):
        bundle = _tiny_bundle(tmp_path, {"q": 0.9, "x": 0.5})
        result = similar_instances(bundle, 0, 0, "q", 5)
        assert all(i != "q" for i, _ in result.ranked)

    def test_scores_equal_channel_means_path(self, tmp_path):
        bundle = _tiny_bundle(tmp_path, {"q": 0.5, "x": 0.7321})
        result = similar_instances(bundle, 0, 0, "q", 1)
        expected = channel_means(bundle.activations("x"))[0]
        assert abs(result.ranked[0][1] - expected) <= 1e-12

    def test_stable_under_candidate_permutation(self, tmp_path):
        means = {"a": 0.3, "b": 0.3, "c": 0.8, "q": 0.1}
        b1 = _tiny_bundle(tmp_path / "one", means)
        b2 = _tiny_bundle(tmp_path / "two", means, order=["q", "c", "b", "a"])
        r1 = similar_instances(b1, 0, 0, "q", 3)
        r2 = similar_instances(b2, 0, 0, "q", 3)
        assert r1.ranked == r2.ranked
        # ties broken lexicographically
        assert [i for i, _ in r1.ranked][1:] == ["a", "b"]

    def test_candidate_filter(self, tmp_path):
        bundle = _tiny_bundle(tmp_path, {"q": 0.5, "x": 0.9, "y": 0.8})
        result = similar_instances(bundle, 0, 0, "q", 5, candidate_ids={"y"})
        assert [i for i, _ in result.ranked] == ["y"]

    def test_validation(self, tmp_path):
        bundle = _tiny_bundle(tmp_path, {"q": 0.5, "x": 0.9})
        with pytest.raises(ValidationError):
            similar_instances(bundle, 9, 0, "q", 1)
        with pytest.raises(ValidationError):
            similar_instances(bundle, 0, 5, "q", 1)
        with pytest.raises(ValidationError):
            similar_instances(bundle, 0, 0, "q", 0)

    def test_planted_spurious_channel_retrieves_planted_instances(self, small_run):
        record = small_run.flagged_reliant_record()
        result = similar_instances(
            small_run.bundle,
            record.predicted_class,
            record.top_feature,
            record.instance_id,
            10,
        )
        assert len(result.ranked) == 10
        scores = [s for _, s in result.ranked]
        assert scores == sorted(scores, reverse=True)
        planted = sum(
            1 for i, _ in result.ranked if small_run.truth.is_spurious_reliant[i]
        )
        assert planted >= 8  # >= 80% of top-10


def _record(instance_id, status="pending"):
    return DetectionRecord(
        instance_id=instance_id, predicted_class=0, true_class=0,
        dissimilarity=50.0, flagged=True, status=status, top_feature=0,
    )


class TestAutoFlag:
    def _result(self, ids):
        from rfcam.retrieval import RetrievalResult

        return RetrievalResult(
            ranked=[(i, 1.0 - k * 0.01) for k, i in enumerate(ids)],
            query_instance="q", feature=0, class_index=0,
        )

    def test_pending_targets_flagged_then_idempotent(self):
        store = {f"i{k}": _record(f"i{k}") for k in range(5)}
        result = self._result(list(store))
        assert len(auto_flag(store, result, 5)) == 5
        assert all(r.status == "auto_flagged" for r in store.values())
        assert auto_flag(store, result, 5) == []

    def test_confirmed_never_overwritten(self):
        store = {"a": _record("a", "confirmed"), "b": _record("b", "rejected")}
        assert auto_flag(store, self._result(["a", "b"]), 5) == []
        assert store["a"].status == "confirmed"
        assert store["b"].status == "rejected"

    def test_top_n_limits_updates(self):
        store = {f"i{k}": _record(f"i{k}") for k in range(5)}
        updated = auto_flag(store, self._result(list(store)), 2)
        assert len(updated) == 2

    def test_end_to_end_confirmation_flags_similar(self, small_run):
        record = small_run.flagged_reliant_record()
        result = similar_instances(
            small_run.bundle, record.predicted_class, record.top_feature,
            record.instance_id, 10, candidate_ids=set(small_run.by_id),
        )
        store = {r.instance_id: _copy_record(r) for r in small_run.records}
        updated = auto_flag(store, result, 10)
        assert len(updated) >= 3
        assert all(small_run.truth.is_spurious_reliant[i] for i in updated[:3])


def _copy_record(r):
    import copy

    return copy.deepcopy(r)
