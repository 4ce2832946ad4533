"""Structural converters for the three torchvision trunks.

Each converter walks a concrete torchvision module tree and re-emits it
node by node through GraphBuilder; nothing is traced or compiled, so the
result is readable and the truncation point is explicit.
"""

import numpy as np
import torch

from .builder import GraphBuilder


class ExportError(RuntimeError):
    pass


def _np(t) -> np.ndarray:
    return t.detach().cpu().numpy()


def _conv(b, x, m: "torch.nn.Conv2d"):
    ph, pw = (m.padding if isinstance(m.padding, tuple) else (m.padding,) * 2)
    return b.conv(x, _np(m.weight),
                  bias=_np(m.bias) if m.bias is not None else None,
                  strides=m.stride, pads=(ph, pw, ph, pw),
                  dilations=m.dilation, group=m.groups)


def _bn(b, x, m: "torch.nn.BatchNorm2d"):
    return b.batchnorm(x, _np(m.weight), _np(m.bias),
                       _np(m.running_mean), _np(m.running_var), m.eps)


def _maxpool(b, x, m: "torch.nn.MaxPool2d"):
    k = (m.kernel_size,) * 2 if isinstance(m.kernel_size, int) else m.kernel_size
    s = (m.stride,) * 2 if isinstance(m.stride, int) else m.stride
    p = (m.padding,) * 2 if isinstance(m.padding, int) else m.padding
    if m.ceil_mode:
        raise ExportError("ceil_mode pooling is not supported")
    return b.maxpool(x, k, s, pads=(p[0], p[1], p[0], p[1]))


def build_vgg16(model, truncate_early: bool = False):
    """All of `features`: thirteen 3x3 convolutions and five pools."""
    b = GraphBuilder("vgg16")
    x = b.input_name
    layers = list(model.features)
    if truncate_early:
        layers = layers[:-1]  # drop the final pool: spatial stays 14x14
    for m in layers:
        if isinstance(m, torch.nn.Conv2d):
            x = _conv(b, x, m)
        elif isinstance(m, torch.nn.ReLU):
            x = b.relu(x)
        elif isinstance(m, torch.nn.MaxPool2d):
            x = _maxpool(b, x, m)
        else:
            raise ExportError(f"unexpected vgg16 layer {type(m).__name__}")
    return b.finish(x, (None, 512, 7, 7))


def build_resnet152(model, truncate_early: bool = False):
    """Stem plus all four bottleneck stages, stopping before the pool/fc."""
    b = GraphBuilder("resnet152")
    x = _conv(b, b.input_name, model.conv1)
    x = _bn(b, x, model.bn1)
    x = b.relu(x)
    x = _maxpool(b, x, model.maxpool)
    stages = [model.layer1, model.layer2, model.layer3, model.layer4]
    if truncate_early:
        stages = stages[:-1]  # stop at 1024 channels, 14x14
    for stage in stages:
        for block in stage:
            identity = x
            h = b.relu(_bn(b, _conv(b, x, block.conv1), block.bn1))
            h = b.relu(_bn(b, _conv(b, h, block.conv2), block.bn2))
            h = _bn(b, _conv(b, h, block.conv3), block.bn3)
            if block.downsample is not None:
                identity = _bn(b, _conv(b, x, block.downsample[0]),
                               block.downsample[1])
            x = b.relu(b.add(h, identity))
    return b.finish(x, (None, 2048, 7, 7))


def build_densenet121(model, truncate_early: bool = False):
    """Stem, four dense blocks with transitions, final norm and relu."""
    b = GraphBuilder("densenet121")
    f = model.features
    x = _conv(b, b.input_name, f.conv0)
    x = b.relu(_bn(b, x, f.norm0))
    x = _maxpool(b, x, f.pool0)
    n_blocks = 3 if truncate_early else 4
    for i in range(1, n_blocks + 1):
        block = getattr(f, f"denseblock{i}")
        for layer in block.children():
            h = b.relu(_bn(b, x, layer.norm1))
            h = _conv(b, h, layer.conv1)
            h = b.relu(_bn(b, h, layer.norm2))
            h = _conv(b, h, layer.conv2)
            x = b.concat([x, h], axis=1)
        if i < n_blocks:
            t = getattr(f, f"transition{i}")
            x = b.relu(_bn(b, x, t.norm))
            x = _conv(b, x, t.conv)
            x = b.avgpool(x, (2, 2), (2, 2))
    x = b.relu(_bn(b, x, f.norm5))
    return b.finish(x, (None, 1024, 7, 7))


TORCH_BUILDERS = {
    "vgg16": build_vgg16,
    "resnet152": build_resnet152,
    "densenet121": build_densenet121,
}


def _calibrate_bn(model):
    """One training-mode pass so BatchNorm running stats match real
    activation statistics.

    Freshly initialized BatchNorm carries mean 0 / variance 1, which
    normalizes nothing; in a deep residual net the activations then grow
    to ~1e8 and drown an absolute parity threshold in float roundoff.
    A single forward pass with momentum 1 replaces the running stats with
    observed batch statistics, keeping activations in the same O(1)
    regime as a trained network.
    """
    bns = [m for m in model.modules()
           if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not bns:
        return
    for m in bns:
        m.momentum = 1.0
    rng = np.random.default_rng(0)
    probe = torch.from_numpy(
        rng.standard_normal((2, 3, 224, 224)).astype(np.float32))
    model.train()
    with torch.no_grad():
        model(probe)
    model.eval()


def load_torch_model(name: str, pretrained: bool):
    """Construct the torchvision model; eval mode, float32 weights."""
    import torchvision.models as tvm

    ctor = {"vgg16": tvm.vgg16, "resnet152": tvm.resnet152,
            "densenet121": tvm.densenet121}[name]
    if pretrained:
        try:
            model = ctor(weights="IMAGENET1K_V1")
        except Exception as exc:
            raise ExportError(
                f"pretrained weights for {name} are unavailable here "
                f"(torchvision IMAGENET1K_V1 checkpoint; download failed: "
                f"{exc}); re-run with --random-init for a structural "
                "export") from exc
    else:
        model = ctor(weights=None)
        _calibrate_bn(model)
    return model.eval()
