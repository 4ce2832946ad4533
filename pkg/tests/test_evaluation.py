import json
from pathlib import Path

import numpy as np
import pytest

from matrec.backbone import toy_backbone
from matrec.catalog import ClassCatalog, default_catalog
from matrec.dataset import make_splits, scan_dataset
from matrec.evaluation import (ConfusionMatrix, EvalError, EvalReport,
                               emit_report, evaluate, illumination_eval,
                               report_from_confusion)
from matrec.head import Head, canonical_head_spec
from matrec.rng import stream_rng
from matrec.train import partition_samples

FIXTURES = Path(__file__).parent / "fixtures"


def load_reference_confusion():
    d = json.loads((FIXTURES / "confusion_vgg_five.json").read_text())
    return ConfusionMatrix.from_dict(d)


class TestReferenceConfusion:
    def test_trace_total_accuracy(self):
        cm = load_reference_confusion()
        assert cm.trace == 185
        assert cm.total == 189
        assert round(cm.accuracy_percent, 4) == 97.8836

    def test_eleven_material_classes(self):
        cm = load_reference_confusion()
        assert len(cm.class_names) == 11
        assert set(cm.class_names) == {
            "clay-hollow-block", "asphalt", "concrete-block", "wood",
            "soil-vegetation", "brick", "cement-granular", "stone",
            "gravel", "paving", "sand"}

    def test_report_accounting_on_fixture(self):
        cm = load_reference_confusion()
        report = report_from_confusion(cm, {"tta": True})
        assert report.accuracy_percent == cm.accuracy_percent
        assert sum(r["support"] for r in report.per_class) == 189


class TestConfusionMatrix:
    def test_from_pairs_tally(self):
        pairs = [(0, 0), (0, 1), (1, 1), (1, 1), (2, 0)]
        cm = ConfusionMatrix.from_pairs(["a", "b", "c"], pairs)
        assert cm.counts.tolist() == [[1, 1, 0], [0, 2, 0], [1, 0, 0]]
        assert cm.trace == 3 and cm.total == 5

    def test_always_first_class_on_balanced_set(self):
        pairs = [(0, 0)] * 25 + [(1, 0)] * 25
        cm = ConfusionMatrix.from_pairs(["x", "y"], pairs)
        assert cm.accuracy_percent == 50.0

    def test_metrics_match_independent_tally(self):
        rng = stream_rng(0, "cm")
        names = ["a", "b", "c", "d"]
        pairs = [(int(rng.integers(0, 4)), int(rng.integers(0, 4)))
                 for _ in range(50)]
        cm = ConfusionMatrix.from_pairs(names, pairs)
        metrics = {m["class"]: m for m in cm.per_class_metrics()}
        for i, name in enumerate(names):
            tp = sum(1 for a, p in pairs if a == i and p == i)
            actual_n = sum(1 for a, _ in pairs if a == i)
            predicted_n = sum(1 for _, p in pairs if p == i)
            m = metrics[name]
            assert m["support"] == actual_n
            if predicted_n:
                assert m["precision"] == pytest.approx(tp / predicted_n)
            else:
                assert m["precision"] is None
            if actual_n:
                assert m["recall"] == pytest.approx(tp / actual_n)
            else:
                assert m["recall"] is None

    def test_zero_division_reported_as_none(self):
        cm = ConfusionMatrix.empty(["a", "b"])
        cm.add(0, 0)
        m = {r["class"]: r for r in cm.per_class_metrics()}
        assert m["b"]["precision"] is None
        assert m["b"]["recall"] is None
        assert m["b"]["f1"] is None

    def test_empty_accuracy_fatal(self):
        with pytest.raises(EvalError, match="empty"):
            ConfusionMatrix.empty(["a"]).accuracy_percent

    def test_accounting_guard_trips(self):
        cm = ConfusionMatrix.from_pairs(["a", "b"], [(0, 0), (1, 0)])
        report = report_from_confusion(cm, {"tta": False})
        report.accuracy_percent = 99.0
        from matrec.evaluation import _check_accounting
        with pytest.raises(EvalError, match="trace/total"):
            _check_accounting(report)


@pytest.fixture(scope="module")
def eval_setup(synth_root, synth_catalog):
    manifest = scan_dataset(synth_root, synth_catalog)
    splits = make_splits(manifest, seed=0)
    backbone = toy_backbone(seed=0, channels=4)
    spec = canonical_head_spec("resnet152", out_classes=3,
                               flatten_in=backbone.spec.feature_dim)
    head = Head.build(spec, seed=1)
    samples = partition_samples(manifest, splits, "test")
    return samples, backbone, head, synth_catalog


class TestEvaluate:
    def test_report_well_formed(self, eval_setup):
        samples, backbone, head, catalog = eval_setup
        report = evaluate(samples, backbone, head, catalog)
        assert report.confusion.total == len(samples)
        assert 0 <= report.accuracy_percent <= 100
        assert report.protocol == {"tta": False, "illumination": False,
                                   "seed": None}
        assert report.skipped == []

    def test_empty_partition_fatal(self, eval_setup):
        _, backbone, head, catalog = eval_setup
        with pytest.raises(EvalError, match="empty"):
            evaluate([], backbone, head, catalog)

    def test_outlier_in_eval_set_fatal(self, eval_setup):
        samples, backbone, head, catalog = eval_setup
        cat = ClassCatalog(materials=catalog.materials, has_outlier=True)
        poisoned = samples + [{"id": "outlier/x.png", "path": "/nope.png",
                               "label": cat.outlier_index}]
        with pytest.raises(EvalError, match="outlier record"):
            evaluate(poisoned, backbone, head, cat)

    def test_unreadable_image_skipped_with_warning(self, eval_setup,
                                                   tmp_path):
        samples, backbone, head, catalog = eval_setup
        bad = tmp_path / "gone.png"
        bad.write_bytes(b"junk")
        warnings = []
        report = evaluate(samples + [{"id": "x/gone.png", "path": str(bad),
                                      "label": 0}],
                          backbone, head, catalog, warn=warnings.append)
        assert len(report.skipped) == 1
        assert report.confusion.total == len(samples)
        assert warnings and "gone.png" in warnings[0]


class TestIlluminationEval:
    def test_same_seed_identical_digest(self, eval_setup):
        samples, backbone, head, catalog = eval_setup
        r1 = illumination_eval(samples, backbone, head, catalog, seed=5)
        r2 = illumination_eval(samples, backbone, head, catalog, seed=5)
        assert r1.content_digest() == r2.content_digest()
        assert r1.protocol == {"tta": False, "illumination": True, "seed": 5}

    def test_identity_params_match_clean_eval(self, eval_setup):
        samples, backbone, head, catalog = eval_setup
        clean = evaluate(samples, backbone, head, catalog)
        ident = illumination_eval(samples, backbone, head, catalog,
                                  params_override=(1.0, 1.0, 1.0))
        assert np.array_equal(clean.confusion.counts, ident.confusion.counts)


class TestEmission:
    def _report(self):
        cm = load_reference_confusion()
        return report_from_confusion(cm, {"tta": True, "illumination": False,
                                          "seed": None},
                                     checkpoint_digest="abc123",
                                     timestamp="2026-01-01T00:00:00+00:00")

    def test_json_roundtrip(self, tmp_path):
        report = self._report()
        emit_report(report, tmp_path)
        loaded = EvalReport.from_dict(
            json.loads((tmp_path / "report.json").read_text()))
        assert loaded.content_digest() == report.content_digest()

    def test_digest_ignores_timestamp(self):
        r1 = self._report()
        r2 = self._report()
        r2.timestamp = "2026-02-02T00:00:00+00:00"
        assert r1.content_digest() == r2.content_digest()

    def test_csv_grid_dimensions(self, tmp_path):
        emit_report(self._report(), tmp_path)
        lines = (tmp_path / "confusion.csv").read_text().strip().split("\n")
        assert len(lines) == 12  # header + 11 class rows
        assert all(len(line.split(",")) == 12 for line in lines)
        assert lines[1].split(",")[1] == "12"  # first diagonal cell

    def test_markdown_mentions_accuracy(self, tmp_path):
        emit_report(self._report(), tmp_path)
        md = (tmp_path / "report.md").read_text()
        assert "97.8836%" in md
        assert "| brick |" in md
