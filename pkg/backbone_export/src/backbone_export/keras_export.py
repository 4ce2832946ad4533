"""Structural converter for the keras NASNet-mobile trunk.

Walks the functional graph layer by layer (keras keeps `model.layers`
topologically ordered), translating NHWC layers into the interchange
graph's NCHW ops. 'same' padding is resolved into explicit asymmetric
pads from each layer's static input shape; SeparableConv2D becomes a
depthwise convolution followed by a pointwise one.
"""

import numpy as np

from .builder import GraphBuilder, same_pads
from .torch_export import ExportError


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _hw(tensor):
    """Static (H, W) of an NHWC keras tensor."""
    shape = tensor.shape
    return int(shape[1]), int(shape[2])


def _conv_pads(layer, in_hw, kernel, strides):
    if layer.padding == "same":
        return same_pads(in_hw, kernel, strides)
    if layer.padding == "valid":
        return (0, 0, 0, 0)
    raise ExportError(f"unsupported padding {layer.padding!r} on {layer.name}")


def _bn_params(layer):
    dim = int(layer.input.shape[-1])
    gamma = layer.gamma.numpy() if layer.gamma is not None else np.ones(dim)
    beta = layer.beta.numpy() if layer.beta is not None else np.zeros(dim)
    return (gamma, beta, layer.moving_mean.numpy(),
            layer.moving_variance.numpy(), layer.epsilon)


def build_nasnet_mobile(model, truncate_early: bool = False):
    import keras.layers as kl

    b = GraphBuilder("nasnet-mobile")
    values = {}  # id(keras tensor) -> graph value name

    layers = model.layers
    if truncate_early:
        layers = layers[:-1]  # drop the trailing activation: parity breaks

    last = b.input_name
    for layer in layers:
        if isinstance(layer, kl.InputLayer):
            values[id(layer.output)] = b.input_name
            continue
        node = layer._inbound_nodes[0]
        ins = [values[id(t)] for t in node.input_tensors]
        x = ins[0]
        in_hw = _hw(node.input_tensors[0])

        if isinstance(layer, kl.Conv2D) and not isinstance(
                layer, kl.SeparableConv2D):
            kernel = _pair(layer.kernel_size)
            strides = _pair(layer.strides)
            weights = layer.get_weights()
            w = weights[0].transpose(3, 2, 0, 1)  # HWCF -> FCHW
            bias = weights[1] if layer.use_bias else None
            out = b.conv(x, w, bias=bias, strides=strides,
                         pads=_conv_pads(layer, in_hw, kernel, strides),
                         dilations=_pair(layer.dilation_rate))
        elif isinstance(layer, kl.SeparableConv2D):
            kernel = _pair(layer.kernel_size)
            strides = _pair(layer.strides)
            weights = layer.get_weights()
            dw, pw = weights[0], weights[1]
            channels = dw.shape[2]
            mult = dw.shape[3]
            # depthwise (kh, kw, C, mult) -> (C*mult, 1, kh, kw)
            dw_w = dw.transpose(2, 3, 0, 1).reshape(
                channels * mult, 1, *kernel)
            out = b.conv(x, dw_w, strides=strides,
                         pads=_conv_pads(layer, in_hw, kernel, strides),
                         dilations=_pair(layer.dilation_rate),
                         group=channels)
            # pointwise (1, 1, C*mult, F) -> (F, C*mult, 1, 1)
            pw_w = pw.transpose(3, 2, 0, 1)
            bias = weights[2] if layer.use_bias else None
            out = b.conv(out, pw_w, bias=bias)
        elif isinstance(layer, kl.BatchNormalization):
            out = b.batchnorm(x, *_bn_params(layer))
        elif isinstance(layer, kl.Activation):
            name = getattr(layer.activation, "__name__", str(layer.activation))
            if name != "relu":
                raise ExportError(f"unsupported activation {name!r} "
                                  f"on {layer.name}")
            out = b.relu(x)
        elif isinstance(layer, kl.MaxPooling2D):
            kernel, strides = _pair(layer.pool_size), _pair(layer.strides)
            out = b.maxpool(x, kernel, strides,
                            pads=_conv_pads(layer, in_hw, kernel, strides))
        elif isinstance(layer, kl.AveragePooling2D):
            kernel, strides = _pair(layer.pool_size), _pair(layer.strides)
            out = b.avgpool(x, kernel, strides,
                            pads=_conv_pads(layer, in_hw, kernel, strides),
                            count_include_pad=False)
        elif isinstance(layer, kl.ZeroPadding2D):
            out = b.pad(x, layer.padding)
        elif isinstance(layer, kl.Cropping2D):
            out = b.crop(x, layer.cropping, in_hw)
        elif isinstance(layer, kl.Add):
            out = b.add(ins[0], ins[1])
        elif isinstance(layer, kl.Concatenate):
            if layer.axis not in (-1, 3):
                raise ExportError(f"unexpected concat axis {layer.axis}")
            out = b.concat(ins, axis=1)
        else:
            raise ExportError(
                f"unsupported layer {type(layer).__name__} ({layer.name})")
        values[id(node.output_tensors[0])] = out
        last = out

    return b.finish(last, (None, 1056, 7, 7))


def load_keras_model(pretrained: bool, float64: bool = False):
    """NASNetMobile without its classifier head, 224x224 input.

    With float64=True the model is built under a float64 policy and its
    weights are snapped to float32-representable values, so a float64
    reference run agrees with the float32-serialized export to roundoff.
    """
    import keras

    old_policy = keras.config.dtype_policy().name
    try:
        if float64:
            keras.config.set_dtype_policy("float64")
        try:
            model = keras.applications.NASNetMobile(
                include_top=False,
                weights="imagenet" if pretrained else None,
                input_shape=(224, 224, 3))
        except Exception as exc:
            if pretrained:
                raise ExportError(
                    "pretrained weights for nasnet-mobile are unavailable "
                    f"here (keras NASNet ImageNet checkpoint; {exc}); "
                    "re-run with --random-init for a structural export"
                ) from exc
            raise
    finally:
        keras.config.set_dtype_policy(old_policy)
    if float64:
        model.set_weights([w.astype(np.float32).astype(np.float64)
                           for w in model.get_weights()])
    return model
