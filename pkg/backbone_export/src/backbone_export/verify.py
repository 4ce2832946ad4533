"""Parity verification: exported graph vs the source framework.

The exported side goes through the primary package's loader (manifest
preprocessing included), the reference side through the framework-native
trunk with the documented preprocessing - so a wrong manifest shows up
as a parity failure, not just a shape problem. Both sides run in double
precision over float32-representable weights, keeping genuine conversion
errors far above numerical noise.
"""

import tempfile

import numpy as np

from matrec.backbone import load_backbone, preprocess
from matrec.rng import stream_rng

from .export import RECIPES, build_source_model, export
from .torch_export import TORCH_BUILDERS, ExportError

PARITY_THRESHOLD = 1e-4


def probe_images(n: int = 3, side: int = 224, seed: int = 0) -> np.ndarray:
    rng = stream_rng(seed, "parity-probes")
    return rng.integers(0, 256, (n, side, side, 3)).astype(np.uint8)


def reference_features(name: str, model, batch_uint8) -> np.ndarray:
    """Framework-native features, channels-last, float64."""
    pre = preprocess(batch_uint8, RECIPES[name]).astype(np.float64)
    if name in TORCH_BUILDERS:
        import torch

        model = model.double().eval()
        x = torch.from_numpy(np.ascontiguousarray(pre.transpose(0, 3, 1, 2)))
        with torch.no_grad():
            if name == "vgg16":
                out = model.features(x)
            elif name == "resnet152":
                h = model.maxpool(model.relu(model.bn1(model.conv1(x))))
                for stage in (model.layer1, model.layer2, model.layer3,
                              model.layer4):
                    h = stage(h)
                out = h
            elif name == "densenet121":
                out = torch.relu(model.features(x))
            else:
                raise ExportError(f"no torch reference for {name!r}")
        return out.numpy().transpose(0, 2, 3, 1)
    # keras trunk is already channels-last
    return np.asarray(model(pre), dtype=np.float64)


def verify(graph_file, manifest_file, images=None, model=None,
           name=None) -> dict:
    """Report-only parity check; `pass` reflects the 1e-4 threshold."""
    handle = load_backbone(graph_file, manifest_file)
    name = name or handle.spec.name
    if model is None:
        model = build_source_model(name, pretrained=True,
                                   float64=(name == "nasnet-mobile"))
    if images is None:
        images = probe_images()
    diffs = []
    for img in images:
        batch = img[None]
        exported = handle.extract(batch, dtype=np.float64)
        ref = reference_features(name, model, batch)
        if exported.shape != ref.shape:
            raise ExportError(
                f"{name}: exported features {exported.shape} vs source "
                f"framework {ref.shape}")
        diffs.append(float(np.abs(exported - ref).max()))
    max_diff = max(diffs)
    return {
        "name": name,
        "output_shape": tuple(handle.spec.output_shape),
        "images": len(diffs),
        "per_image_max_abs_diff": diffs,
        "max_abs_diff": max_diff,
        "threshold": PARITY_THRESHOLD,
        "passed": max_diff <= PARITY_THRESHOLD,
    }


def verify_backbone(name: str, pretrained: bool = False, n_images: int = 3,
                    out_dir=None) -> dict:
    """Export `name` (fresh weights unless pretrained) and verify parity
    against the very model instance the export came from."""
    model = build_source_model(name, pretrained,
                               float64=(name == "nasnet-mobile"))
    if out_dir is None:
        with tempfile.TemporaryDirectory() as tmp:
            graph_file, manifest_file = export(name, tmp, model=model)
            return verify(graph_file, manifest_file,
                          images=probe_images(n_images), model=model,
                          name=name)
    graph_file, manifest_file = export(name, out_dir, pretrained=pretrained,
                                       model=model)
    return verify(graph_file, manifest_file, images=probe_images(n_images),
                  model=model, name=name)
