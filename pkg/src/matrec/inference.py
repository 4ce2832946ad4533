"""Prediction paths: single image, five-crop averaging, outlier-excluded argmax.

The outlier class is a training-time regularizer only; at prediction time
the argmax is always restricted to material classes (the second-highest
rule, generalized: drop the outlier entry, then argmax).
"""

from dataclasses import dataclass

import numpy as np

from .augment import load_rgb, resize_to_input
from .backbone import flatten_features
from .catalog import ClassCatalog


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class TtaConfig:
    enabled: bool = False
    corner_fraction: float = 0.75   # per dimension
    segments: int = 5               # full image + 4 corners

    def __post_init__(self):
        if not 0 < self.corner_fraction < 1:
            raise InferenceError("corner_fraction must be in (0, 1)")
        if self.segments != 5:
            raise InferenceError("five-crop scheme uses exactly 5 segments")

    def to_dict(self) -> dict:
        return {"enabled": self.enabled,
                "corner_fraction": self.corner_fraction,
                "segments": self.segments}

    @classmethod
    def from_dict(cls, d: dict) -> "TtaConfig":
        return cls(enabled=bool(d.get("enabled", False)),
                   corner_fraction=float(d.get("corner_fraction", 0.75)),
                   segments=int(d.get("segments", 5)))


@dataclass(frozen=True)
class PredictionVector:
    probs: tuple
    predicted_index: int
    tta_used: bool

    def to_dict(self) -> dict:
        return {"probs": [float(p) for p in self.probs],
                "predicted_index": self.predicted_index,
                "tta_used": self.tta_used}


def five_crop(image, fraction: float = 0.75):
    """[full, top-left, top-right, bottom-left, bottom-right] segments.

    Corner crops are floor(fraction*H) x floor(fraction*W), anchored at
    their corners; the downstream resize brings all five to input size.
    """
    image = np.asarray(image)
    H, W = image.shape[:2]
    if H < 2 or W < 2:
        raise InferenceError(f"degenerate image {H}x{W}")
    ch = int(np.floor(fraction * H))
    cw = int(np.floor(fraction * W))
    return [
        image,
        image[:ch, :cw],
        image[:ch, W - cw:],
        image[H - ch:, :cw],
        image[H - ch:, W - cw:],
    ]


def material_argmax(probs, catalog: ClassCatalog) -> int:
    """Best material class, ignoring the outlier entry when present.

    Ties break toward the lowest class index (np.argmax convention).
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (catalog.total_classes,):
        raise InferenceError(
            f"expected {catalog.total_classes} probabilities, got {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise InferenceError("non-finite probabilities")
    n_materials = len(catalog.materials)
    return int(np.argmax(probs[:n_materials]))


def _probs_for_batch(batch_uint8, backbone, head) -> np.ndarray:
    feats = flatten_features(backbone.extract(batch_uint8))
    if feats.shape[1] != head.spec.flatten_in:
        raise InferenceError(
            f"backbone features of width {feats.shape[1]} do not match head "
            f"flatten_in {head.spec.flatten_in}")
    probs, _ = head.forward(feats, mode="infer")
    return probs


def predict_image(image, backbone, head, catalog: ClassCatalog,
                  tta: TtaConfig = TtaConfig()) -> PredictionVector:
    """Deterministic prediction for a decoded RGB image."""
    side = backbone.spec.input_side
    if tta.enabled:
        crops = five_crop(image, tta.corner_fraction)
        batch = np.stack([resize_to_input(c, side) for c in crops])
        probs = _probs_for_batch(batch, backbone, head).mean(axis=0)
    else:
        batch = resize_to_input(image, side)[None]
        probs = _probs_for_batch(batch, backbone, head)[0]
    return PredictionVector(
        probs=tuple(float(p) for p in probs),
        predicted_index=material_argmax(probs, catalog),
        tta_used=tta.enabled,
    )


def predict_file(path, backbone, head, catalog: ClassCatalog,
                 tta: TtaConfig = TtaConfig()) -> PredictionVector:
    return predict_image(load_rgb(path), backbone, head, catalog, tta)
