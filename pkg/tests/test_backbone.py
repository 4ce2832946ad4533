import numpy as np
import pytest

from matrec.backbone import (BackboneError, BackboneSpec, KNOWN_OUTPUT_SHAPES,
                             PAPER_FROZEN_FRACTIONS, PreprocessRecipe,
                             flatten_features, load_backbone, preprocess,
                             toy_backbone)
from matrec.jsonio import write_canonical_json
from matrec.onnx_graph import OnnxGraph, OnnxNode, save_model
from matrec.rng import stream_rng


class TestPreprocess:
    def test_symmetric_unit_recipe(self):
        recipe = PreprocessRecipe(scale=1 / 255.0, mean=(0.5, 0.5, 0.5),
                                  std=(0.5, 0.5, 0.5))
        batch = np.full((1, 2, 2, 3), 255, dtype=np.uint8)
        out = preprocess(batch, recipe)
        assert np.allclose(out, 1.0)   # (255/255 - 0.5) / 0.5
        assert np.allclose(preprocess(np.zeros_like(batch), recipe), -1.0)

    def test_per_channel_mean_std(self):
        recipe = PreprocessRecipe(scale=1 / 255.0,
                                  mean=(0.485, 0.456, 0.406),
                                  std=(0.229, 0.224, 0.225))
        batch = np.zeros((1, 1, 1, 3), dtype=np.uint8)
        out = preprocess(batch, recipe)[0, 0, 0]
        expected = [-0.485 / 0.229, -0.456 / 0.224, -0.406 / 0.225]
        assert np.allclose(out, expected, atol=1e-6)

    def test_bgr_swaps_channels(self):
        batch = np.zeros((1, 1, 1, 3), dtype=np.uint8)
        batch[..., 0] = 10  # R
        out = preprocess(batch, PreprocessRecipe(channel_order="BGR"))
        assert out[0, 0, 0, 2] == 10 and out[0, 0, 0, 0] == 0

    def test_bad_shapes(self):
        with pytest.raises(BackboneError, match="batch"):
            preprocess(np.zeros((2, 2, 3)), PreprocessRecipe())
        with pytest.raises(BackboneError):
            PreprocessRecipe(channel_order="GBR")
        with pytest.raises(BackboneError):
            PreprocessRecipe(mean=(0.0, 0.0))


class TestBackboneSpec:
    def test_known_feature_dims(self):
        dims = {}
        for name, shape in KNOWN_OUTPUT_SHAPES.items():
            spec = BackboneSpec(name=name, input_side=224, output_shape=shape,
                                preprocessing=PreprocessRecipe())
            dims[name] = spec.feature_dim
        assert dims == {"vgg16": 25088, "resnet152": 100352,
                        "densenet121": 50176, "nasnet-mobile": 51744}

    def test_roundtrip(self, tmp_path):
        spec = BackboneSpec(
            name="resnet152", input_side=224, output_shape=(7, 7, 2048),
            preprocessing=PreprocessRecipe(scale=1 / 255.0,
                                           mean=(0.485, 0.456, 0.406),
                                           std=(0.229, 0.224, 0.225)),
            opset=13, source_note="test",
            frozen_fraction_paper=0.71, frozen_fraction_here=1.0)
        spec.save(tmp_path / "m.json")
        assert BackboneSpec.load(tmp_path / "m.json") == spec

    def test_unpinned_opset_fatal(self, tmp_path):
        d = BackboneSpec(name="x", input_side=8, output_shape=(1, 1, 1),
                         preprocessing=PreprocessRecipe()).to_dict()
        del d["opset"]
        write_canonical_json(tmp_path / "m.json", d)
        with pytest.raises(BackboneError, match="opset"):
            BackboneSpec.load(tmp_path / "m.json")

    def test_paper_fraction_metadata(self):
        assert PAPER_FROZEN_FRACTIONS == {"vgg16": 1.0, "resnet152": 0.71,
                                          "densenet121": 0.54,
                                          "nasnet-mobile": 0.06}


class TestToyBackbone:
    def test_shape_and_determinism(self):
        b1 = toy_backbone(seed=3, channels=6)
        b2 = toy_backbone(seed=3, channels=6)
        x = stream_rng(0, "img").integers(0, 256, (2, 224, 224, 3)).astype(np.uint8)
        f1, f2 = b1.extract(x), b2.extract(x)
        assert f1.shape == (2, 7, 7, 6)
        assert np.array_equal(f1, f2)

    def test_seed_changes_features(self):
        x = stream_rng(0, "img").integers(0, 256, (1, 224, 224, 3)).astype(np.uint8)
        assert not np.array_equal(toy_backbone(0, 4).extract(x),
                                  toy_backbone(1, 4).extract(x))

    def test_midgray_input_gives_zero_features(self):
        # preprocessing maps 127.5 to 0 and the linear map has no bias;
        # use the closest uint8 values and check near-zero
        b = toy_backbone(seed=0, channels=4)
        lo = np.full((1, 224, 224, 3), 127, dtype=np.uint8)
        hi = np.full((1, 224, 224, 3), 128, dtype=np.uint8)
        mid = (b.extract(lo) + b.extract(hi)) / 2
        assert np.abs(mid).max() < 1e-5

    def test_indivisible_input_side_fatal(self):
        b = toy_backbone(seed=0, channels=4)
        with pytest.raises(BackboneError, match="divisible"):
            b.extract(np.zeros((1, 100, 100, 3), dtype=np.uint8))

    def test_bad_channels(self):
        with pytest.raises(BackboneError):
            toy_backbone(seed=0, channels=0)


def write_tiny_onnx_backbone(tmp_path, out_channels=2, declared_shape=None):
    """8x8 input conv trunk: conv1x1 (3->C) then 2x2 average pool."""
    rng = stream_rng(5, "tinybb")
    g = OnnxGraph(
        name="tiny-trunk",
        nodes=[
            OnnxNode("Conv", ["input", "w"], ["c"],
                     attrs={"kernel_shape": [1, 1]}),
            OnnxNode("AveragePool", ["c"], ["features"],
                     attrs={"kernel_shape": [2, 2], "strides": [2, 2]}),
        ],
        initializers={"w": rng.standard_normal(
            (out_channels, 3, 1, 1)).astype(np.float32)},
        inputs=[("input", (None, 3, 8, 8))],
        outputs=[("features", (None, out_channels, 4, 4))],
    )
    graph_file = tmp_path / "tiny.onnx"
    save_model(g, graph_file)
    spec = BackboneSpec(
        name="tiny", input_side=8,
        output_shape=declared_shape or (4, 4, out_channels),
        preprocessing=PreprocessRecipe(scale=1 / 255.0, mean=(0.5, 0.5, 0.5),
                                       std=(0.5, 0.5, 0.5)),
        opset=13)
    manifest_file = tmp_path / "tiny.manifest.json"
    spec.save(manifest_file)
    return graph_file, manifest_file


class TestOnnxBackbone:
    def test_load_and_extract(self, tmp_path):
        graph_file, manifest_file = write_tiny_onnx_backbone(tmp_path)
        handle = load_backbone(graph_file, manifest_file)
        x = stream_rng(1, "img").integers(0, 256, (3, 8, 8, 3)).astype(np.uint8)
        feats = handle.extract(x)
        assert feats.shape == (3, 4, 4, 2)
        assert np.all(np.isfinite(feats))

    def test_probe_shape_mismatch_fatal(self, tmp_path):
        graph_file, manifest_file = write_tiny_onnx_backbone(
            tmp_path, declared_shape=(7, 7, 512))
        with pytest.raises(BackboneError, match="declared"):
            load_backbone(graph_file, manifest_file)

    def test_extract_matches_manual_math(self, tmp_path):
        graph_file, manifest_file = write_tiny_onnx_backbone(tmp_path)
        handle = load_backbone(graph_file, manifest_file)
        x = stream_rng(2, "img").integers(0, 256, (1, 8, 8, 3)).astype(np.uint8)
        pre = (x.astype(np.float32) / 255.0 - 0.5) / 0.5
        w = handle.graph.initializers["w"].reshape(2, 3)
        conv = np.einsum("nhwc,mc->nhwm", pre, w)
        pooled = conv.reshape(1, 4, 2, 4, 2, 2).mean(axis=(2, 4))
        assert np.abs(handle.extract(x) - pooled).max() < 1e-5


class TestFlatten:
    def test_row_major_order(self):
        feats = np.arange(2 * 3 * 4 * 5, dtype=np.float32).reshape(2, 3, 4, 5)
        flat = flatten_features(feats)
        assert flat.shape == (2, 60)
        assert np.array_equal(flat[0], np.arange(60))
