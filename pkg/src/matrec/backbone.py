"""Frozen feature-extraction backbones.

Two kinds of handle share one interface:
  * OnnxBackbone - a serialized convolutional trunk plus a JSON manifest
    declaring its preprocessing recipe and output shape; a probe inference
    at load time must match the declared shape exactly.
  * ToyBackbone  - a seeded random linear map from 8x8-pooled image
    patches to (7, 7, C) features, so the whole pipeline runs offline.

Handles are immutable after load and safe for concurrent inference.
"""

from dataclasses import dataclass

import numpy as np

from .jsonio import read_json, write_canonical_json
from .onnx_graph import GraphExecutor, load_model

# Informational: the published partial-freeze ratios. This implementation
# freezes everything (fraction 1.0) and records the difference as metadata.
PAPER_FROZEN_FRACTIONS = {"resnet152": 0.71, "densenet121": 0.54,
                          "nasnet-mobile": 0.06, "vgg16": 1.0}

KNOWN_OUTPUT_SHAPES = {
    "vgg16": (7, 7, 512),
    "resnet152": (7, 7, 2048),
    "densenet121": (7, 7, 1024),
    "nasnet-mobile": (7, 7, 1056),
}


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessRecipe:
    scale: float = 1.0
    mean: tuple = (0.0, 0.0, 0.0)
    std: tuple = (1.0, 1.0, 1.0)
    channel_order: str = "RGB"

    def __post_init__(self):
        if self.channel_order not in ("RGB", "BGR"):
            raise BackboneError(f"bad channel order {self.channel_order!r}")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise BackboneError("mean/std must have 3 entries")

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "mean": list(self.mean),
            "std": list(self.std),
            "channel_order": self.channel_order,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessRecipe":
        return cls(scale=float(d["scale"]), mean=tuple(d["mean"]),
                   std=tuple(d["std"]), channel_order=d["channel_order"])


IDENTITY_RECIPE = PreprocessRecipe()


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    input_side: int
    output_shape: tuple              # (7, 7, C), channels-last
    preprocessing: PreprocessRecipe
    opset: int = 13
    source_note: str = ""
    frozen_fraction_paper: float = 1.0
    frozen_fraction_here: float = 1.0

    @property
    def feature_dim(self) -> int:
        h, w, c = self.output_shape
        return h * w * c

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_side": self.input_side,
            "output_shape": list(self.output_shape),
            "preprocessing": self.preprocessing.to_dict(),
            "opset": self.opset,
            "source_note": self.source_note,
            "frozen_fraction_paper": self.frozen_fraction_paper,
            "frozen_fraction_here": self.frozen_fraction_here,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(
            name=d["name"],
            input_side=int(d["input_side"]),
            output_shape=tuple(d["output_shape"]),
            preprocessing=PreprocessRecipe.from_dict(d["preprocessing"]),
            opset=int(d["opset"]),
            source_note=d.get("source_note", ""),
            frozen_fraction_paper=float(
                d.get("frozen_fraction_paper",
                      PAPER_FROZEN_FRACTIONS.get(d["name"], 1.0))),
            frozen_fraction_here=float(d.get("frozen_fraction_here", 1.0)),
        )

    def save(self, path):
        write_canonical_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "BackboneSpec":
        d = read_json(path)
        if "opset" not in d:
            raise BackboneError(f"manifest {path} does not pin an opset")
        return cls.from_dict(d)


def preprocess(batch, recipe: PreprocessRecipe) -> np.ndarray:
    """(x * scale - mean) / std per channel; output float32 channels-last."""
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[3] != 3:
        raise BackboneError(f"expected (n, H, W, 3) batch, got {batch.shape}")
    x = batch.astype(np.float32)
    if recipe.channel_order == "BGR":
        x = x[..., ::-1]
    x = x * np.float32(recipe.scale)
    mean = np.asarray(recipe.mean, dtype=np.float32)
    std = np.asarray(recipe.std, dtype=np.float32)
    return (x - mean) / std


class ToyBackbone:
    """Seeded random linear map: 8x8 average-pooled patches -> (7,7,C).

    Linear with no bias, so zero input gives zero features; cheap and
    fully deterministic, which makes the complete pipeline testable
    without any serialized graph.
    """

    POOL_GRID = 8

    def __init__(self, seed: int, channels: int = 16, input_side: int = 224):
        if channels < 1:
            raise BackboneError("channels must be >= 1")
        self.spec = BackboneSpec(
            name="toy",
            input_side=input_side,
            output_shape=(7, 7, channels),
            preprocessing=PreprocessRecipe(scale=1.0 / 255.0,
                                           mean=(0.5, 0.5, 0.5),
                                           std=(0.5, 0.5, 0.5)),
            source_note=f"toy backbone, seed={seed}",
        )
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([int(seed), 0x544F59])))
        in_dim = self.POOL_GRID * self.POOL_GRID * 3
        out_dim = 7 * 7 * channels
        self.weight = (rng.standard_normal((in_dim, out_dim))
                       / np.sqrt(in_dim)).astype(np.float32)

    def extract(self, batch) -> np.ndarray:
        x = preprocess(batch, self.spec.preprocessing)
        n, H, W, _ = x.shape
        g = self.POOL_GRID
        if H % g or W % g:
            raise BackboneError(f"input side must be divisible by {g}")
        pooled = x.reshape(n, g, H // g, g, W // g, 3).mean(axis=(2, 4))
        flat = pooled.reshape(n, -1)
        feats = flat @ self.weight
        return feats.reshape((n,) + self.spec.output_shape)


def toy_backbone(seed: int, channels: int = 16) -> ToyBackbone:
    return ToyBackbone(seed=seed, channels=channels)


class OnnxBackbone:
    """A loaded serialized trunk; extraction is stateless and frozen."""

    def __init__(self, graph, spec: BackboneSpec):
        self.graph = graph
        self.spec = spec
        self.executor = GraphExecutor(graph)
        if len(graph.inputs) != 1 or len(graph.outputs) != 1:
            raise BackboneError(
                f"expected exactly one graph input and output, got "
                f"{[n for n, _ in graph.inputs]} -> {[n for n, _ in graph.outputs]}")
        self.input_name = graph.inputs[0][0]
        self.output_name = graph.outputs[0][0]

    def extract(self, batch, dtype=np.float32) -> np.ndarray:
        x = preprocess(batch, self.spec.preprocessing)
        nchw = np.ascontiguousarray(x.transpose(0, 3, 1, 2))
        out = self.executor.run({self.input_name: nchw}, dtype=dtype)[self.output_name]
        feats = out.transpose(0, 2, 3, 1)  # back to channels-last
        expected = (batch.shape[0],) + self.spec.output_shape
        if feats.shape != expected:
            raise BackboneError(
                f"feature shape {feats.shape} does not match declared {expected}")
        if not np.all(np.isfinite(feats)):
            raise BackboneError("non-finite features from backbone")
        return np.ascontiguousarray(feats)


def load_backbone(graph_file, manifest_file) -> OnnxBackbone:
    """Load graph + manifest and probe with a zero input.

    The probe output must match the manifest's declared shape exactly;
    a mismatch is fatal and reports declared vs observed.
    """
    spec = BackboneSpec.load(manifest_file)
    graph = load_model(graph_file)
    handle = OnnxBackbone(graph, spec)
    probe = np.zeros((1, spec.input_side, spec.input_side, 3), dtype=np.uint8)
    try:
        feats = handle.extract(probe)
    except BackboneError as exc:
        raise BackboneError(f"probe inference failed for {graph_file}: {exc}") from exc
    observed = feats.shape[1:]
    if tuple(observed) != tuple(spec.output_shape):
        raise BackboneError(
            f"declared output shape {tuple(spec.output_shape)} but probe "
            f"produced {tuple(observed)}")
    return handle


def flatten_features(feats: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(feats.reshape(feats.shape[0], -1))
