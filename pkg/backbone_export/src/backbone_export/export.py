"""Export orchestration: build, probe, then write graph + manifest.

The probe inference runs before anything touches disk; a shape mismatch
aborts the export with nothing written.
"""

from pathlib import Path

import numpy as np

from matrec.backbone import (KNOWN_OUTPUT_SHAPES, PAPER_FROZEN_FRACTIONS,
                             BackboneSpec, PreprocessRecipe)
from matrec.onnx_graph import GraphExecutor, save_model

from .keras_export import build_nasnet_mobile, load_keras_model
from .torch_export import TORCH_BUILDERS, ExportError, load_torch_model

OPSET = 13

# Documented preprocessing of each weight source: torchvision models use
# the ImageNet channel statistics; keras NASNet maps pixels to [-1, 1].
TORCHVISION_RECIPE = PreprocessRecipe(
    scale=1 / 255.0, mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225))
NASNET_RECIPE = PreprocessRecipe(
    scale=1 / 255.0, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))

RECIPES = {
    "vgg16": TORCHVISION_RECIPE,
    "resnet152": TORCHVISION_RECIPE,
    "densenet121": TORCHVISION_RECIPE,
    "nasnet-mobile": NASNET_RECIPE,
}

PROVENANCE = {
    "vgg16": "torchvision vgg16 IMAGENET1K_V1",
    "resnet152": "torchvision resnet152 IMAGENET1K_V1",
    "densenet121": "torchvision densenet121 IMAGENET1K_V1",
    "nasnet-mobile": "keras.applications NASNetMobile imagenet",
}

EXPORT_NAMES = tuple(RECIPES)


def build_source_model(name: str, pretrained: bool = True,
                       float64: bool = False):
    """The framework-native trunk the export and parity runs derive from."""
    if name in TORCH_BUILDERS:
        return load_torch_model(name, pretrained)
    if name == "nasnet-mobile":
        return load_keras_model(pretrained, float64=float64)
    raise ExportError(f"unknown backbone {name!r}; choose from "
                      f"{sorted(EXPORT_NAMES)}")


def build_graph(name: str, model, truncate_early: bool = False):
    if name in TORCH_BUILDERS:
        return TORCH_BUILDERS[name](model, truncate_early=truncate_early)
    if name == "nasnet-mobile":
        return build_nasnet_mobile(model, truncate_early=truncate_early)
    raise ExportError(f"unknown backbone {name!r}")


def probe_shape(graph) -> tuple:
    """Channels-last feature shape for one zero 224x224x3 input."""
    x = np.zeros((1, 3, 224, 224), dtype=np.float32)
    out = GraphExecutor(graph).run({graph.inputs[0][0]: x})
    feats = out[graph.outputs[0][0]]
    return tuple(feats.shape[2:]) + (feats.shape[1],)


def export(name: str, out_dir, pretrained: bool = True, model=None,
           truncate_early: bool = False):
    """Write NAME.onnx + NAME.manifest.json; returns the two paths.

    `truncate_early` deliberately cuts the trunk one block short so the
    probe-mismatch abort path is exercisable.
    """
    if name not in EXPORT_NAMES:
        raise ExportError(f"unknown backbone {name!r}; choose from "
                          f"{sorted(EXPORT_NAMES)}")
    if model is None:
        model = build_source_model(name, pretrained)
    graph = build_graph(name, model, truncate_early=truncate_early)

    expected = KNOWN_OUTPUT_SHAPES[name]
    observed = probe_shape(graph)
    if observed != expected:
        raise ExportError(
            f"{name}: probe produced {observed}, expected {expected}; "
            "aborting, nothing written")

    weight_note = (PROVENANCE[name] if pretrained
                   else f"randomly initialized ({PROVENANCE[name]} "
                        "weights not loaded)")
    spec = BackboneSpec(
        name=name,
        input_side=224,
        output_shape=expected,
        preprocessing=RECIPES[name],
        opset=OPSET,
        source_note=weight_note,
        frozen_fraction_paper=PAPER_FROZEN_FRACTIONS[name],
        frozen_fraction_here=1.0,
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    graph_path = out_dir / f"{name}.onnx"
    manifest_path = out_dir / f"{name}.manifest.json"
    save_model(graph, graph_path)
    spec.save(manifest_path)
    return graph_path, manifest_path
