import json

import numpy as np
import pytest

from occlumask.detections import Detection, DetectionSet, serialize_detections
from occlumask.harness.data import DatasetManifest, read_dataset, write_dataset
from occlumask.harness.experiment import (
    ConfigError,
    Experiment,
    ExperimentConfig,
    degrade_detections,
    parse_sweep_values,
    run_eval,
    sweep,
)
from occlumask.harness.synthetic import class_params, generate_synthetic_landmarks
from occlumask.harness.tables import ResultRow, ResultsTable, pivot_backbone, pivot_mask_ratio
from occlumask.imagecore import encode_image
from occlumask.occlusion import mask_for
from occlumask.rng import stream

SMALL = ExperimentConfig(classes=3, train_per_class=6, test_per_class=2, epochs=10,
                         batch_size=8, variants=("original", "augmented2"))


class TestSynthetic:
    def test_counts(self):
        manifest, samples = generate_synthetic_landmarks(8, 40, 10, 32, 0)
        assert manifest.count("train") == 320 and manifest.count("test") == 80
        assert len(samples) == 400

    def test_deterministic(self):
        _, a = generate_synthetic_landmarks(3, 2, 1, 48, 5)
        _, b = generate_synthetic_landmarks(3, 2, 1, 48, 5)
        assert [encode_image(s.image) for s in a] == [encode_image(s.image) for s in b]

    def test_same_class_differs_in_bytes(self):
        _, samples = generate_synthetic_landmarks(2, 3, 0, 48, 0)
        same = [s for s in samples if s.label == 1]
        assert len({encode_image(s.image) for s in same}) == 3

    def test_class_parameters(self):
        for c in range(6):
            p = class_params(c, 6)
            assert p["angle_deg"] == pytest.approx(c * 30.0) and p["cycles"] == 4 + c

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            generate_synthetic_landmarks(1, 2, 2, 32, 0)


class TestDatasetIO:
    def test_roundtrip_with_groundtruth(self, tmp_path):
        exp = Experiment(SMALL, 0)
        variants = exp.variant("augmented2")[:5]
        manifest = write_dataset(tmp_path, variants)
        assert DatasetManifest.from_jsonl((tmp_path / "manifest.jsonl").read_bytes()) == manifest
        back = read_dataset(tmp_path)
        assert [s.image_id for s in back] == [s.image_id for s in variants]
        for a, b in zip(variants, back):
            assert a.image == b.image and a.label == b.label
            gt_a, gt_b = a.groundtruth.items[0], b.groundtruth.items[0]
            assert gt_a.box == gt_b.box and gt_a.get_mask() == gt_b.get_mask()

    def test_split_filter(self, tmp_path):
        _, samples = generate_synthetic_landmarks(2, 2, 1, 16, 0)
        write_dataset(tmp_path, samples)
        assert len(read_dataset(tmp_path, split="test")) == 2


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(mask_ratios=(0,)), dict(mask_ratios=(101,)), dict(seeds=()),
                                    dict(backbone="resnet"), dict(detection_source="file"),
                                    dict(variants=("augmented9",)), dict(epochs=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ExperimentConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="colour"):
            ExperimentConfig.from_dict({"colour": "red"})

    def test_json_lists_become_tuples(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seeds": [1, 2], "mask_ratios": [30, 70]}))
        cfg = ExperimentConfig.from_json(path)
        assert cfg.seeds == (1, 2) and cfg.mask_ratios == (30, 70)

    def test_policy_override_with_base(self):
        cfg = ExperimentConfig(variants=("original", "big"),
                               policies={"big": {"base": "augmented2", "scale_range": [0.7, 0.9]}})
        pol = cfg.policy("big")
        assert pol.name == "big" and pol.scale_range == (0.7, 0.9) and pol.x_mode == "center"

    @pytest.mark.parametrize("dim,values", [("mask_ratio", "0,30"), ("backbone", "toy,resnet"),
                                            ("detector_source", "oracle,yolo"), ("depth", "1"),
                                            ("mask_ratio", "")])
    def test_bad_sweep_values(self, dim, values):
        with pytest.raises(ConfigError):
            parse_sweep_values(dim, values)


class TestDegrade:
    def test_drops_masks_and_is_seeded(self):
        mask_ds = DetectionSet(10, 10, tuple(Detection("person", 1.0, (1, 1, 5, 5)) for _ in range(30)))
        a = degrade_detections(mask_ds, 0.1, 0.2, stream(0))
        b = degrade_detections(mask_ds, 0.1, 0.2, stream(0))
        assert a == b and 0 < len(a) < 30
        assert all(d.mask is None and 0.5 <= d.score <= 1.0 for d in a)

    def test_zero_noise_keeps_boxes(self):
        ds = DetectionSet(10, 10, (Detection("car", 0.9, (1, 2, 3, 4)),))
        out = degrade_detections(ds, 0.0, 0.0, stream(1))
        assert out.items[0].box == pytest.approx((1, 2, 3, 4))


class TestRunEval:
    @pytest.fixture(scope="class")
    @staticmethod
    def table():
        return run_eval(SMALL.replace(mask_ratios=(30, 70)))

    def test_row_structure(self, table):
        assert len(table) == 2 * (2 + 1)
        for v in ("original", "augmented2"):
            rows = table.select(variant=v)
            assert [r.mask_ratio for r in rows] == [None, 30, 70]
            assert [r.masking for r in rows] == [False, True, True]
            assert all(r.n == 6 * (20 if v == "augmented2" else 1) for r in rows)

    def test_original_has_no_occluders(self, table):
        accs = {r.accuracy for r in table.select(variant="original")}
        assert len(accs) == 1

    def test_empty_detections_are_a_no_op(self, tmp_path):
        path = tmp_path / "none.json"
        path.write_bytes(serialize_detections({}))
        cfg = SMALL.replace(detection_source="file", detections_path=str(path), variants=("augmented2",))
        exp = Experiment(cfg, 0)
        samples = exp.variant("augmented2")
        keeps = [exp.keep_set(s, 70, "file") for s in samples]
        assert keeps == [None] * len(samples)
        masked = exp.features(samples, keeps)
        clean = np.stack([exp.feature(s, None) for s in samples])
        assert masked.tobytes() == clean.tobytes()
        assert exp.missing_detections == {s.image_id for s in samples}

    def test_file_source_reports_missing(self, tmp_path):
        exp = Experiment(SMALL, 0)
        samples = exp.variant("augmented2")
        present = {s.image_id: s.groundtruth for s in samples[:7]}
        path = tmp_path / "d.json"
        path.write_bytes(serialize_detections(present))
        cfg = SMALL.replace(detection_source="file", detections_path=str(path), variants=("augmented2",))
        table = run_eval(cfg)
        assert table.notes["missing_detections"] == len(samples) - 7

    def test_file_source_with_groundtruth_boxes_equals_oracle_box(self, tmp_path):
        exp = Experiment(SMALL, 0)
        sets = {s.image_id: DetectionSet(s.groundtruth.source_width, s.groundtruth.source_height,
                                         tuple(Detection(d.category, d.score, d.box)
                                               for d in s.groundtruth.items))
                for s in exp.variant("augmented2")}
        path = tmp_path / "d.json"
        path.write_bytes(serialize_detections(sets))
        base = SMALL.replace(variants=("augmented2",))
        oracle = run_eval(base.replace(detection_source="oracle-box"))
        from_file = run_eval(base.replace(detection_source="file", detections_path=str(path)))
        assert [r.accuracy for r in oracle.rows] == [r.accuracy for r in from_file.rows]
        assert from_file.notes["missing_detections"] == 0

    def test_thread_count_does_not_change_results(self):
        one = run_eval(SMALL.replace(threads=1)).to_tsv()
        four = run_eval(SMALL.replace(threads=4)).to_tsv()
        assert one == four

    def test_features_match_clean_when_kept_patches_are_untouched(self):
        # At ratio 1 a 16x16 patch needs >= 3 occluder pixels to be dropped, so
        # only images whose kept patches are all untouched are bitwise-equal.
        exp = Experiment(SMALL, 1)
        clean = {s.image_id: s for s in exp.variant("original")}
        equal = 0
        for s in exp.variant("augmented2")[:40]:
            keep = exp.keep_set(s, 1, "oracle")
            cov, _ = mask_for(exp.grid_detections(s, "oracle"), exp.grid, 1, True)
            kept = np.arange(exp.grid.num_patches) if keep is None else np.array(keep)
            untouched = not cov.covered[kept].any()
            same = exp.feature(s, keep).tobytes() == exp.feature(clean[s.base_image_id], keep).tobytes()
            assert same == untouched
            equal += same
        assert equal > 0

    def test_clean_accuracy_above_chance_floor(self):
        cfg = ExperimentConfig(variants=("original",), seeds=(0, 1, 2))
        (row,) = run_eval(cfg).select(masking=False)
        assert row.accuracy >= 3 / 8
        assert row.n == 240


class TestSweep:
    def test_single_value_equals_run_eval(self):
        cfg = SMALL.replace(mask_ratios=(50,))
        swept = sweep(cfg, "mask_ratio", [50])
        full = run_eval(cfg)
        assert swept.rows == [r for r in full.rows if r.masking]

    def test_mask_ratio_pivot(self):
        table = sweep(SMALL, "mask_ratio", (30, 50, 70, 100))
        header, body = pivot_mask_ratio(table, (30, 50, 70, 100))
        assert header == ["variant", "30 %", "50 %", "70 %", "100 %"]
        assert [row[0] for row in body] == ["original", "augmented2"]

    def test_backbone_pivot(self):
        cfg = SMALL.replace(classes=2, train_per_class=3, test_per_class=1, variants=("augmented2",))
        table = sweep(cfg, "backbone", ("toy-s", "toy-b"))
        header, body = pivot_backbone(table, ("toy-s", "toy-b"))
        assert header == ["backbone", "augmented2 w/ masking", "augmented2 w/o masking"]
        assert [row[0] for row in body] == ["toy-s", "toy-b"]

    def test_detector_rows(self):
        table = sweep(SMALL.replace(variants=("augmented2",)), "detector_source",
                      ("oracle", "oracle-box", "degraded"))
        assert [r.detector for r in table.rows] == ["oracle", "oracle-box", "degraded"]


class TestTables:
    def test_row_validation(self):
        with pytest.raises(ValueError):
            ResultRow("v", "b", "d", True, 70, 1.5, 3)
        with pytest.raises(ValueError):
            ResultRow("v", "b", "d", True, 70, 0.5, 0)

    def test_tsv(self):
        t = ResultsTable([ResultRow("original", "toy", "oracle", False, None, 0.5, 4)])
        assert t.to_tsv().splitlines() == [
            "variant\tbackbone\tdetector\tmasking\tmask_ratio\taccuracy\tn",
            "original\ttoy\toracle\toff\t-\t0.500000\t4",
        ]
