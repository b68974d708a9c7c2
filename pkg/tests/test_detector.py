import copy
import json

import numpy as np
import pytest

from rfcam.detector import (
    DetectionConfig,
    DetectionRecord,
    detect_bundle,
    detect_instance,
    dissimilarity,
    read_records,
    write_records,
)
from rfcam.errors import ValidationError
from rfcam.saliency import GRAD_CAM, RF_CAM, SaliencyMap


def _map(values, kind=RF_CAM):
    return SaliencyMap(np.asarray(values, dtype=np.float64), kind, 0)


class TestDissimilarity:
    def test_identical_maps_score_zero(self):
        m = _map([[0.9, 0.2], [0.0, 1.0]])
        assert dissimilarity(m, _map(m.data.copy(), GRAD_CAM)) == 0.0

    def test_hand_computed_2x2_case(self):
        rf = _map([[0.9, 0.0], [0.0, 0.0]])
        gc = _map([[0.1, 0.0], [0.0, 0.0]], GRAD_CAM)
        score = dissimilarity(rf, gc)
        # mask = {pixel 0}; rf pixel rounds to 1.0; 100 * (1.0 - 0.1)^2
        assert score == 100.0 * (1.0 - 0.1) ** 2
        assert score == 81.0
        assert score > DetectionConfig().mse_threshold

    def test_rounding_tolerance_case(self):
        rf = _map([[0.9, 0.0], [0.0, 0.0]])
        gc = _map([[0.85, 0.0], [0.0, 0.0]], GRAD_CAM)
        assert dissimilarity(rf, gc) == 0.0

    def test_empty_mask_scores_zero(self):
        rf = _map([[0.5, 0.3], [0.1, 0.78]])
        gc = _map([[0.0, 0.7], [0.2, 0.5]], GRAD_CAM)
        assert dissimilarity(rf, gc) == 0.0

    def test_symmetric(self, rng):
        a = _map(rng.random((5, 5)))
        b = _map(rng.random((5, 5)), GRAD_CAM)
        assert dissimilarity(a, b) == dissimilarity(b, a)

    def test_bounded_0_100(self, rng):
        for _ in range(50):
            a = _map(rng.random((4, 4)))
            b = _map(rng.random((4, 4)), GRAD_CAM)
            score = dissimilarity(a, b)
            assert 0.0 <= score <= 100.0

    def test_invariant_to_masked_out_pixels(self, rng):
        cfg = DetectionConfig()
        a = rng.random((6, 6)) * 0.5  # everything below threshold
        b = rng.random((6, 6)) * 0.5
        a[0, 0] = 0.95
        base = dissimilarity(_map(a), _map(b, GRAD_CAM), cfg)
        a2, b2 = a.copy(), b.copy()
        both_low = (a2 <= cfg.mask_threshold) & (b2 <= cfg.mask_threshold)
        a2[both_low] = 0.0
        b2[both_low] = cfg.mask_threshold
        assert dissimilarity(_map(a2), _map(b2, GRAD_CAM), cfg) == base

    def test_equal_after_rounding_scores_zero(self):
        rf = _map([[0.9, 0.4], [0.81, 0.0]])
        gc = _map([[0.98, 0.4], [0.89, 0.0]], GRAD_CAM)
        assert dissimilarity(rf, gc) == 0.0

    def test_resolution_mismatch(self):
        with pytest.raises(ValidationError):
            dissimilarity(_map(np.zeros((2, 2))), _map(np.zeros((3, 3)), GRAD_CAM))

    def test_unnormalized_rejected(self):
        with pytest.raises(ValidationError):
            dissimilarity(_map([[2.0]]), _map([[0.5]], GRAD_CAM))

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            DetectionConfig(mask_threshold=1.5).validate()
        with pytest.raises(ValidationError):
            DetectionConfig(mse_threshold=-1.0).validate()
        with pytest.raises(ValidationError):
            DetectionConfig(top_feature_mode="other").validate()


class TestDetectInstance:
    def test_planted_spurious_instance_flagged(self, small_run):
        record = small_run.flagged_reliant_record()
        assert record.status == "pending"
        assert record.dissimilarity > small_run.config.mse_threshold
        # its top feature is one of the class's planted spurious channels
        spurious = small_run.truth.class_channels[record.predicted_class]["spurious"]
        assert record.top_feature in spurious

    def test_core_reliant_instances_not_flagged(self, small_run):
        clean_correct = [
            r for r in small_run.records
            if r.predicted_class == r.true_class
            and not small_run.truth.is_spurious_reliant[r.instance_id]
        ]
        assert clean_correct
        flagged = [r for r in clean_correct if r.flagged]
        assert len(flagged) <= max(1, len(clean_correct) // 10)

    def test_misclassified_is_diagnostic_with_maps(self, small_run):
        diag = [r for r in small_run.records if r.predicted_class != r.true_class]
        assert diag
        for r in diag:
            assert r.status == "diagnostic"
            assert not r.flagged
        with_model = [r for r in diag if r.warning is None]
        assert with_model
        assert all("rf_cam" in r.map_paths and "grad_cam" in r.map_paths for r in with_model)

    def test_flagged_implies_correct(self, small_run):
        for r in small_run.records:
            if r.flagged:
                assert r.predicted_class == r.true_class

    def test_missing_surrogate_yields_diagnostic_warning(self, small_run):
        entry = small_run.bundle.entries_for_split("test")[0]
        det = detect_instance(small_run.bundle, entry, None, small_run.config)
        assert det.record.status == "diagnostic"
        assert det.record.warning is not None
        assert det.rf_png is None and det.gc_png is not None

    def test_heatmap_files_written(self, small_run):
        record = small_run.flagged_reliant_record()
        for key in ("rf_cam", "grad_cam"):
            path = small_run.out_dir / record.map_paths[key]
            assert path.exists()
            assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


class TestDetectBundle:
    def test_records_sorted_by_instance_id(self, small_run):
        ids = [r.instance_id for r in small_run.records]
        assert ids == sorted(ids)

    def test_one_record_per_test_entry(self, small_run):
        assert len(small_run.records) == len(small_run.bundle.entries_for_split("test"))

    def test_report_counts_consistent(self, small_run):
        rep = small_run.report
        assert rep["overall"]["n_test"] == len(small_run.records)
        per_class_flagged = sum(row["n_flagged"] for row in rep["per_class"])
        assert per_class_flagged == rep["overall"]["n_flagged"]
        assert rep["overall"]["lsm_macro_avg_accuracy"] >= 0.9

    def test_parallel_matches_serial(self, small_run):
        records, _ = detect_bundle(
            small_run.bundle, small_run.models, small_run.config, parallelism=4
        )
        assert [r.to_json_dict() for r in records] == [
            {**r.to_json_dict(), "map_paths": {}} for r in small_run.records
        ]

    def test_empty_test_split(self, small_run, tmp_path):
        import rfcam.tensor_store as ts

        bundle = ts.load_bundle(small_run.bundle_dir)
        bundle.images = [e for e in bundle.images if e.split == "train"]
        bundle.__post_init__()
        records, report = detect_bundle(bundle, small_run.models, small_run.config)
        assert records == []
        assert report["overall"]["n_test"] == 0
        assert report["overall"]["flag_rate_test"] == 0.0


class TestRecordsIO:
    def test_round_trip(self, small_run, tmp_path):
        path = tmp_path / "records.jsonl"
        write_records(path, small_run.records)
        back = read_records(path)
        assert len(back) == len(small_run.records)
        for a, b in zip(back, small_run.records):
            assert a.to_json_dict() == b.to_json_dict()

    def test_stable_field_order(self, small_run, tmp_path):
        path = tmp_path / "records.jsonl"
        write_records(path, small_run.records[:1])
        doc = json.loads(path.read_text().splitlines()[0])
        assert list(doc)[:7] == [
            "instance_id", "predicted_class", "true_class", "dissimilarity",
            "flagged", "status", "top_feature",
        ]

    def test_deterministic_bytes(self, small_run, tmp_path):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_records(p1, small_run.records)
        write_records(p2, copy.deepcopy(small_run.records))
        assert p1.read_bytes() == p2.read_bytes()


def test_status_values_are_known(small_run):
    from rfcam.detector import STATUSES

    assert {r.status for r in small_run.records} <= set(STATUSES)
