"""Metric arithmetic tests: hand-enumerated confusion, published table
cross-checks, zero-denominator handling, aggregation semantics."""

import numpy as np
import pytest

from sealand.data import LAND, SEA, synth_generate, save_labeled, write_manifest, read_manifest
from sealand.metrics import (
    ConfusionCounts,
    confusion,
    evaluate_set,
    f1,
    land_precision_recall,
    overall_precision_recall,
)


def hand_case():
    # 16 pixels: gt splits 8 land / 8 sea; prediction misses 1 land and 2 sea
    gt = np.array([[0] * 4, [0] * 4, [255] * 4, [255] * 4], dtype=np.uint8)
    pred = np.array(
        [[0, 0, 0, 0], [0, 0, 0, 255], [0, 0, 255, 255], [255] * 4],
        dtype=np.uint8,
    )
    return pred, gt


class TestConfusion:
    def test_hand_enumerated_counts(self):
        c = confusion(*hand_case())
        assert (c.tp_land, c.fn_land, c.fp_land, c.tp_sea) == (7, 1, 2, 6)
        assert c.total == 16

    def test_perfect_prediction(self):
        gt = hand_case()[1]
        c = confusion(gt, gt)
        assert c.fp_land == c.fn_land == c.fp_sea == c.fn_sea == 0

    def test_complement_has_no_hits(self):
        gt = hand_case()[1]
        c = confusion(255 - gt, gt)
        assert c.tp_land == c.tp_sea == 0

    def test_rejects_extent_mismatch(self):
        with pytest.raises(ValueError):
            confusion(np.zeros((2, 2), np.uint8), np.zeros((2, 3), np.uint8))

    def test_rejects_gray_values(self):
        with pytest.raises(ValueError):
            confusion(np.full((2, 2), 7, np.uint8), np.zeros((2, 2), np.uint8))

    def test_merge_is_fieldwise_sum(self):
        c = confusion(*hand_case())
        d = (c + c).validate()
        assert d.tp_land == 14 and d.total == 32


class TestRatios:
    def test_hand_case_ratios(self):
        c = confusion(*hand_case())
        lp, lr = land_precision_recall(c)
        assert lp == pytest.approx(7 / 9)
        assert lr == pytest.approx(7 / 8)
        op, or_ = overall_precision_recall(c)
        assert op == or_ == pytest.approx(13 / 16)

    def test_degenerate_denominators_are_none(self):
        all_sea = np.full((4, 4), SEA, np.uint8)
        lp, lr = land_precision_recall(confusion(all_sea, all_sea))
        assert lp is None and lr is None

    def test_op_equals_or_on_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            pred = rng.choice([LAND, SEA], (9, 13)).astype(np.uint8)
            gt = rng.choice([LAND, SEA], (9, 13)).astype(np.uint8)
            op, or_ = overall_precision_recall(confusion(pred, gt))
            assert op == or_

    def test_label_swap_exchanges_class_metrics(self):
        pred, gt = hand_case()
        c = confusion(pred, gt)
        s = confusion(255 - pred, 255 - gt)
        assert (s.tp_land, s.fp_land, s.fn_land) == (c.tp_sea, c.fp_sea, c.fn_sea)
        assert overall_precision_recall(s)[0] == overall_precision_recall(c)[0]


class TestF1:
    def test_published_rows_within_tolerance(self):
        rows = [
            (98.90, 99.76, 99.32),
            (96.02, 96.02, 96.02),
            (91.73, 99.35, 95.39),
            (64.74, 98.94, 78.27),
        ]
        for p, r, expect in rows:
            assert abs(f1(p, r) - expect) <= 0.05, (p, r)

    def test_bounded_by_arguments(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            p, r = rng.uniform(0.01, 1.0, 2)
            v = f1(p, r)
            assert min(p, r) - 1e-12 <= v <= max(p, r) + 1e-12

    def test_undefined_inputs_propagate(self):
        assert f1(None, 0.5) is None
        assert f1(0.5, None) is None
        assert f1(0.0, 0.0) is None


class TestEvaluateSet:
    def make_set(self, tmp_path, n, size=64):
        pairs = []
        for i in range(n):
            img = synth_generate(50 + i, size, size)
            ip, mp = tmp_path / f"e{i}.png", tmp_path / f"e{i}_m.png"
            save_labeled(img, ip, mp)
            pairs.append((ip, mp))
        write_manifest(tmp_path / "eval.tsv", pairs)
        return read_manifest(tmp_path / "eval.tsv")

    def test_ground_truth_scores_one(self, tmp_path):
        manifest = self.make_set(tmp_path, 2)
        report = evaluate_set(lambda img: img.mask, manifest)
        for key in ("lp", "lr", "op", "or_", "f1"):
            assert report.overall[key] == 1.0
        assert len(report.rows) == 2

    def test_single_image_aggregate_matches_row(self, tmp_path):
        manifest = self.make_set(tmp_path, 1)

        def noisy(img):
            pred = img.mask.copy()
            pred[:4] = SEA
            return pred

        report = evaluate_set(noisy, manifest)
        row = dict(report.rows[0], name="overall")
        assert row == report.overall

    def test_aggregate_pools_counts_not_means(self, tmp_path):
        manifest = self.make_set(tmp_path, 2)
        calls = {"n": 0}

        def uneven(img):
            calls["n"] += 1
            if calls["n"] == 1:
                return img.mask  # perfect on the first image
            pred = img.mask.copy()
            pred[: pred.shape[0] // 2] = SEA  # badly wrong on the second
            return pred

        report = evaluate_set(uneven, manifest)
        macro = (report.rows[0]["f1"] + report.rows[1]["f1"]) / 2
        assert report.overall["f1"] != pytest.approx(macro, abs=1e-6)
        assert report.overall["pixels"] == sum(r["pixels"] for r in report.rows)

    def test_empty_manifest_rejected(self, tmp_path):
        (tmp_path / "none.tsv").write_text("# empty\n")
        with pytest.raises(ValueError):
            evaluate_set(lambda img: img.mask, read_manifest(tmp_path / "none.tsv"))

    def test_report_serialization(self, tmp_path):
        manifest = self.make_set(tmp_path, 1)
        report = evaluate_set(lambda img: np.full_like(img.mask, SEA), manifest)
        text = report.table()
        assert "n/a" in text and "overall" in text
        blob = report.to_json()
        assert '"lp": null' in blob
