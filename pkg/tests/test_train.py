import numpy as np
import pytest

from matrec.backbone import toy_backbone
from matrec.catalog import ClassCatalog, default_catalog
from matrec.dataset import make_splits, scan_dataset
from matrec.head import Head, HeadError, HeadSpec, canonical_head_spec
from matrec.optim import Adam
from matrec.rng import stream_rng
from matrec.train import (TrainConfig, TrainError, fit_features,
                          load_checkpoint, partition_samples, save_checkpoint,
                          train_head)


class TestAdam:
    def test_toy_quadratic_converges(self):
        params = {"x": np.array([0.0])}
        opt = Adam(lr=0.1)
        for _ in range(500):
            opt.step(params, {"x": 2 * (params["x"] - 3.0)})
        assert abs(params["x"][0] - 3.0) < 1e-2

    def test_zero_grad_zero_state_is_noop(self):
        params = {"x": np.array([1.5, -2.0])}
        Adam(lr=0.1).step(params, {"x": np.zeros(2)})
        assert np.array_equal(params["x"], [1.5, -2.0])

    def test_bad_lr(self):
        with pytest.raises(ValueError):
            Adam(lr=0.0)


class TestFitFeatures:
    def test_memorizes_separable_features(self):
        rng = stream_rng(0, "fit")
        n_per, dim, classes = 8, 20, 4
        centers = rng.standard_normal((classes, dim)) * 3
        X = np.concatenate([
            centers[c] + 0.1 * rng.standard_normal((n_per, dim))
            for c in range(classes)]).astype(np.float32)
        y = np.repeat(np.arange(classes), n_per)
        spec = canonical_head_spec("resnet152", out_classes=classes,
                                   flatten_in=dim)
        head = Head.build(spec, seed=0)
        epochs = fit_features(head, X, y, TrainConfig(lr=1e-2, seed=0), 500)
        assert epochs < 500
        probs, _ = head.forward(X, mode="infer")
        assert np.all(probs.argmax(axis=1) == y)


@pytest.fixture(scope="module")
def trained_setup(synth_root, synth_catalog):
    manifest = scan_dataset(synth_root, synth_catalog)
    splits = make_splits(manifest, seed=0)
    backbone = toy_backbone(seed=0, channels=4)
    return manifest, splits, backbone


class TestTrainHead:
    def _spec(self, backbone, classes=3):
        return canonical_head_spec("resnet152", out_classes=classes,
                                   flatten_in=backbone.spec.feature_dim)

    def test_learns_synthetic_classes(self, trained_setup):
        manifest, splits, backbone = trained_setup
        cfg = TrainConfig(lr=1e-2, batch_size=16, max_epochs=15, patience=5,
                          seed=0)
        head, history = train_head(self._spec(backbone), backbone, manifest,
                                   splits, None, cfg, augment_on=True)
        assert not history.diverged
        assert history.epochs[-1]["val_acc"] >= 0.9
        assert 1 <= history.best_epoch <= len(history.epochs)

    def test_same_seed_identical_history(self, trained_setup):
        manifest, splits, backbone = trained_setup
        cfg = TrainConfig(lr=1e-2, batch_size=16, max_epochs=4, patience=10,
                          seed=7)
        _, h1 = train_head(self._spec(backbone), backbone, manifest, splits,
                           None, cfg)
        _, h2 = train_head(self._spec(backbone), backbone, manifest, splits,
                           None, cfg)
        assert h1.to_dict() == h2.to_dict()

    def test_patience_stops_on_flat_validation(self, tmp_path):
        # all-black images: the toy backbone maps zero input to zero
        # features, so validation accuracy cannot move off its tie-break
        from PIL import Image
        materials = ("a", "b", "c")
        for name in materials:
            d = tmp_path / name
            d.mkdir()
            for i in range(10):
                Image.fromarray(np.zeros((224, 224, 3), dtype=np.uint8)
                                ).save(d / f"{i}.png")
        catalog = ClassCatalog(materials=materials)
        manifest = scan_dataset(tmp_path, catalog)
        splits = make_splits(manifest, seed=0)
        backbone = toy_backbone(seed=0, channels=4)
        cfg = TrainConfig(lr=1e-3, batch_size=8, max_epochs=50, patience=5,
                          seed=0)
        _, history = train_head(self._spec(backbone), backbone, manifest,
                                splits, None, cfg, augment_on=False)
        assert history.best_epoch == 1
        assert len(history.epochs) == 1 + cfg.patience

    def test_cached_variants_match_config(self, trained_setup):
        manifest, splits, backbone = trained_setup
        cfg = TrainConfig(lr=1e-2, batch_size=16, max_epochs=4, patience=10,
                          seed=3, cache_variants=2)
        head, history = train_head(self._spec(backbone), backbone, manifest,
                                   splits, None, cfg, augment_on=True)
        assert len(history.epochs) == 4
        assert not history.diverged

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_flagged_not_raised(self, trained_setup):
        manifest, splits, backbone = trained_setup
        spec = canonical_head_spec("vgg16", out_classes=3, hidden=32,
                                   flatten_in=backbone.spec.feature_dim)
        cfg = TrainConfig(lr=1e30, batch_size=16, max_epochs=5, patience=10,
                          seed=0)
        _, history = train_head(spec, backbone, manifest, splits, None, cfg,
                                augment_on=False)
        assert history.diverged

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_params_raise_head_error(self):
        spec = HeadSpec("t", 4, (("dense", 3), ("softmax",)), 3)
        head = Head.build(spec, seed=0)
        head.params["0:dense/W"][:] = np.inf
        with pytest.raises(HeadError, match="non-finite"):
            head.loss_and_grad(np.ones((2, 4), dtype=np.float32),
                               np.array([0, 1]), rng=stream_rng(0, "d"))


class TestPartitionSamples:
    def test_labels_and_paths_resolve(self, trained_setup):
        manifest, splits, _ = trained_setup
        samples = partition_samples(manifest, splits, "train")
        assert len(samples) == len(splits.train)
        import os
        assert all(os.path.exists(s["path"]) for s in samples)
        assert {s["label"] for s in samples} == {0, 1, 2}

    def test_outliers_resolve_to_source_dir(self, synth_root, synth_catalog,
                                            outlier_dir):
        manifest = scan_dataset(synth_root, synth_catalog)
        cat = ClassCatalog(materials=synth_catalog.materials, has_outlier=True)
        from matrec.dataset import attach_outliers
        splits = attach_outliers(make_splits(manifest, seed=0), outlier_dir,
                                 cat)
        samples = partition_samples(manifest, splits, "train")
        outlier_samples = [s for s in samples if s["label"] == cat.outlier_index]
        assert len(outlier_samples) == 10
        import os
        assert all(os.path.exists(s["path"]) for s in outlier_samples)


class TestCheckpoint:
    def _head(self):
        spec = canonical_head_spec("resnet152", out_classes=11, flatten_in=8)
        return Head.build(spec, seed=9)

    def test_roundtrip_bit_identical(self, tmp_path):
        head = self._head()
        path = tmp_path / "h.ckpt"
        save_checkpoint(head, default_catalog(), path, extra={"note": "x"})
        loaded, header = load_checkpoint(path)
        assert loaded.spec == head.spec
        assert sorted(loaded.params) == sorted(head.params)
        for k in head.params:
            assert np.array_equal(loaded.params[k], head.params[k])
        assert header["extra"] == {"note": "x"}
        assert header["catalog"]["materials"][0] == "sandstorm"

    def test_truncation_fatal(self, tmp_path):
        head = self._head()
        path = tmp_path / "h.ckpt"
        save_checkpoint(head, default_catalog(), path)
        data = path.read_bytes()
        path.write_bytes(data[:-20])
        with pytest.raises(TrainError, match="digest mismatch|truncated"):
            load_checkpoint(path)

    def test_bitflip_fatal(self, tmp_path):
        head = self._head()
        path = tmp_path / "h.ckpt"
        save_checkpoint(head, default_catalog(), path)
        data = bytearray(path.read_bytes())
        data[-3] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(TrainError, match="digest mismatch"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\0" * 40)
        with pytest.raises(TrainError, match="magic"):
            load_checkpoint(path)

    def test_catalog_class_mismatch(self, tmp_path):
        head = self._head()  # 11 outputs
        path = tmp_path / "h.ckpt"
        save_checkpoint(head, default_catalog(), path)
        with pytest.raises(TrainError, match="12"):
            load_checkpoint(path, catalog=default_catalog(with_outlier=True))
