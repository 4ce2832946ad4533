"""Incremental construction of matrec interchange graphs.

A thin stateful wrapper over the primary package's graph IR: callers feed
it layer parameters as numpy arrays and get back value names to chain
nodes together. All spatial attributes follow the interchange convention
(NCHW, pads ordered top/left/bottom/right).
"""

import numpy as np

from matrec.onnx_graph import OnnxGraph, OnnxNode


class GraphBuilder:
    def __init__(self, name: str, input_side: int = 224):
        self.graph_name = name
        self.nodes = []
        self.initializers = {}
        self.input_name = "input"
        self.input_shape = (None, 3, input_side, input_side)
        self._n = 0

    def _fresh(self, prefix: str) -> str:
        self._n += 1
        return f"{prefix}_{self._n}"

    def _init(self, prefix: str, arr) -> str:
        name = self._fresh(prefix)
        self.initializers[name] = np.ascontiguousarray(arr, dtype=np.float32)
        return name

    def _init_i64(self, prefix: str, values) -> str:
        name = self._fresh(prefix)
        self.initializers[name] = np.asarray(values, dtype=np.int64)
        return name

    def _emit(self, op: str, inputs, attrs=None) -> str:
        out = self._fresh(op.lower())
        self.nodes.append(OnnxNode(op, list(inputs), [out],
                                   name=out, attrs=attrs or {}))
        return out

    # ---- ops ------------------------------------------------------------

    def conv(self, x, weight, bias=None, strides=(1, 1), pads=(0, 0, 0, 0),
             dilations=(1, 1), group=1):
        """weight is (M, C/g, kh, kw); pads are (top, left, bottom, right)."""
        inputs = [x, self._init("w", weight)]
        if bias is not None:
            inputs.append(self._init("b", bias))
        return self._emit("Conv", inputs, {
            "kernel_shape": [int(weight.shape[2]), int(weight.shape[3])],
            "strides": [int(s) for s in strides],
            "pads": [int(p) for p in pads],
            "dilations": [int(d) for d in dilations],
            "group": int(group),
        })

    def batchnorm(self, x, gamma, beta, mean, var, epsilon):
        return self._emit("BatchNormalization", [
            x, self._init("g", gamma), self._init("be", beta),
            self._init("m", mean), self._init("v", var),
        ], {"epsilon": float(epsilon)})

    def relu(self, x):
        return self._emit("Relu", [x])

    def maxpool(self, x, kernel, strides, pads=(0, 0, 0, 0)):
        return self._emit("MaxPool", [x], {
            "kernel_shape": [int(k) for k in kernel],
            "strides": [int(s) for s in strides],
            "pads": [int(p) for p in pads],
        })

    def avgpool(self, x, kernel, strides, pads=(0, 0, 0, 0),
                count_include_pad=False):
        return self._emit("AveragePool", [x], {
            "kernel_shape": [int(k) for k in kernel],
            "strides": [int(s) for s in strides],
            "pads": [int(p) for p in pads],
            "count_include_pad": int(count_include_pad),
        })

    def add(self, a, b):
        return self._emit("Add", [a, b])

    def concat(self, xs, axis=1):
        return self._emit("Concat", list(xs), {"axis": int(axis)})

    def pad(self, x, pairs):
        """pairs: ((top, bottom), (left, right)) spatial zero padding."""
        (pt, pb), (pl, pr) = pairs
        pads = self._init_i64("p", [0, 0, pt, pl, 0, 0, pb, pr])
        return self._emit("Pad", [x, pads])

    def crop(self, x, pairs, in_hw):
        """pairs: ((top, bottom), (left, right)) to remove; in_hw (H, W)."""
        (ct, cb), (cl, cr) = pairs
        h, w = in_hw
        return self._emit("Slice", [
            x,
            self._init_i64("s", [ct, cl]),
            self._init_i64("e", [h - cb, w - cr]),
            self._init_i64("a", [2, 3]),
        ])

    # ---- finalize -------------------------------------------------------

    def finish(self, output_name: str, output_shape, opset: int = 13) -> OnnxGraph:
        return OnnxGraph(
            name=self.graph_name,
            nodes=self.nodes,
            initializers=self.initializers,
            inputs=[(self.input_name, self.input_shape)],
            outputs=[(output_name, output_shape)],
            opset=opset,
        )


def same_pads(in_hw, kernel, strides):
    """Asymmetric 'same' padding (extra cell goes bottom/right), per axis."""
    out = []
    for size, k, s in zip(in_hw, kernel, strides):
        span = max((int(np.ceil(size / s)) - 1) * s + k - size, 0)
        out.append((span // 2, span - span // 2))
    (pt, pb), (pl, pr) = out
    return pt, pl, pb, pr
