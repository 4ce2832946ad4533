"""Export pipeline tests: shape conformance, parity, manifest contents,
and the abort-before-write guarantee.

Structural correctness (does the re-emitted graph compute the same
function as the source framework?) is weight-independent, so these tests
run on randomly initialized trunks and need no checkpoint downloads.
"""

import json

import numpy as np
import pytest

from matrec.backbone import KNOWN_OUTPUT_SHAPES, load_backbone
from matrec.onnx_graph import load_model

from backbone_export.export import (EXPORT_NAMES, RECIPES,
                                    build_source_model, export)
from backbone_export.torch_export import ExportError
from backbone_export.verify import (PARITY_THRESHOLD, probe_images, verify,
                                    verify_backbone)

ALL_NAMES = ("vgg16", "resnet152", "densenet121", "nasnet-mobile")


@pytest.fixture(scope="module")
def densenet_model():
    return build_source_model("densenet121", pretrained=False)


@pytest.fixture(scope="module")
def densenet_export(densenet_model, tmp_path_factory):
    out = tmp_path_factory.mktemp("densenet-export")
    graph_file, manifest_file = export("densenet121", out, pretrained=False,
                                       model=densenet_model)
    return graph_file, manifest_file


class TestParity:
    @pytest.mark.parametrize("name", ALL_NAMES)
    def test_exported_features_match_source_framework(self, name):
        report = verify_backbone(name, n_images=1)
        assert tuple(report["output_shape"]) == KNOWN_OUTPUT_SHAPES[name]
        assert report["max_abs_diff"] < PARITY_THRESHOLD
        assert report["passed"]

    def test_tampered_manifest_preprocessing_fails_parity(
            self, densenet_model, densenet_export, tmp_path):
        graph_file, manifest_file = densenet_export
        doc = json.loads(manifest_file.read_text())
        doc["preprocessing"]["mean"] = [0.0, 0.0, 0.0]
        bad_manifest = tmp_path / "densenet121.manifest.json"
        bad_manifest.write_text(json.dumps(doc))
        report = verify(graph_file, bad_manifest, images=probe_images(1),
                        model=densenet_model, name="densenet121")
        assert not report["passed"]
        assert report["max_abs_diff"] > PARITY_THRESHOLD


class TestExportedArtifacts:
    def test_manifest_fields(self, densenet_export):
        _, manifest_file = densenet_export
        doc = json.loads(manifest_file.read_text())
        assert doc["name"] == "densenet121"
        assert doc["input_side"] == 224
        assert tuple(doc["output_shape"]) == (7, 7, 1024)
        assert doc["opset"] == 13
        assert "randomly initialized" in doc["source_note"]
        assert doc["frozen_fraction_paper"] == pytest.approx(0.54)
        assert doc["frozen_fraction_here"] == 1.0
        recipe = RECIPES["densenet121"]
        assert doc["preprocessing"]["scale"] == pytest.approx(recipe.scale)
        assert doc["preprocessing"]["mean"] == pytest.approx(list(recipe.mean))
        assert doc["preprocessing"]["std"] == pytest.approx(list(recipe.std))

    def test_graph_loads_and_extracts(self, densenet_export):
        graph_file, manifest_file = densenet_export
        handle = load_backbone(graph_file, manifest_file)
        batch = probe_images(1)
        feats = handle.extract(batch)
        assert feats.shape == (1, 7, 7, 1024)
        assert np.isfinite(feats).all()

    def test_graph_has_single_input_and_output(self, densenet_export):
        graph_file, _ = densenet_export
        graph = load_model(graph_file)
        assert len(graph.inputs) == 1
        assert len(graph.outputs) == 1


class TestAbortPath:
    def test_shape_probe_mismatch_writes_nothing(self, densenet_model,
                                                 tmp_path):
        out = tmp_path / "truncated"
        with pytest.raises(ExportError, match="nothing written"):
            export("densenet121", out, pretrained=False,
                   model=densenet_model, truncate_early=True)
        assert not out.exists() or not any(out.iterdir())

    def test_unknown_name_rejected(self, tmp_path):
        with pytest.raises(ExportError, match="unknown backbone"):
            export("alexnet", tmp_path)
        with pytest.raises(ExportError, match="unknown backbone"):
            build_source_model("alexnet")

    def test_export_names_cover_all_known_shapes(self):
        assert set(EXPORT_NAMES) == set(KNOWN_OUTPUT_SHAPES)
