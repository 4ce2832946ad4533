"""Minimal ONNX interchange support: wire-format codec, graph IR, executor.

No ONNX runtime is bundled with the package's dependencies, so this module
speaks the ONNX protobuf wire format directly for the message subset a
frozen convolutional trunk needs (ModelProto / GraphProto / NodeProto /
AttributeProto / TensorProto / ValueInfoProto) and evaluates the pinned op
vocabulary with numpy:

    Conv, Relu, MaxPool, AveragePool, GlobalAveragePool,
    BatchNormalization, Add, Mul, Concat, Pad, Slice, Identity

Anything outside that vocabulary fails loudly with the node name.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class OnnxError(ValueError):
    pass


# ---------------------------------------------------------------------------
# protobuf wire primitives

def _enc_varint(value: int) -> bytes:
    if value < 0:
        value &= (1 << 64) - 1
    out = bytearray()
    while True:
        b = value & 0x7F
        value >>= 7
        if value:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _dec_varint(buf: memoryview, pos: int):
    result = 0
    shift = 0
    while True:
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            break
        shift += 7
        if shift > 70:
            raise OnnxError("malformed varint")
    return result, pos


def _signed64(value: int) -> int:
    return value - (1 << 64) if value >= (1 << 63) else value


def _tag(field: int, wire: int) -> bytes:
    return _enc_varint((field << 3) | wire)


def _f_varint(fieldno: int, value: int) -> bytes:
    return _tag(fieldno, 0) + _enc_varint(int(value))


def _f_bytes(fieldno: int, data: bytes) -> bytes:
    return _tag(fieldno, 2) + _enc_varint(len(data)) + data


def _f_str(fieldno: int, s: str) -> bytes:
    return _f_bytes(fieldno, s.encode("utf-8"))


def _f_float(fieldno: int, value: float) -> bytes:
    return _tag(fieldno, 5) + struct.pack("<f", value)


def _walk(buf: memoryview):
    """Yield (field_number, wire_type, value) over a message body."""
    pos = 0
    end = len(buf)
    while pos < end:
        key, pos = _dec_varint(buf, pos)
        fieldno, wire = key >> 3, key & 7
        if wire == 0:
            value, pos = _dec_varint(buf, pos)
        elif wire == 1:
            value = bytes(buf[pos:pos + 8])
            pos += 8
        elif wire == 2:
            length, pos = _dec_varint(buf, pos)
            value = buf[pos:pos + length]
            pos += length
        elif wire == 5:
            value = bytes(buf[pos:pos + 4])
            pos += 4
        else:
            raise OnnxError(f"unsupported wire type {wire}")
        yield fieldno, wire, value


def _packed_varints(value, wire):
    """Packed or unpacked repeated varint field."""
    if wire == 0:
        return [_signed64(value)]
    out = []
    pos = 0
    while pos < len(value):
        v, pos = _dec_varint(value, pos)
        out.append(_signed64(v))
    return out


# ---------------------------------------------------------------------------
# graph IR

TENSOR_FLOAT = 1
TENSOR_INT64 = 7

ATTR_FLOAT = 1
ATTR_INT = 2
ATTR_STRING = 3
ATTR_TENSOR = 4
ATTR_FLOATS = 6
ATTR_INTS = 7


@dataclass
class OnnxNode:
    op_type: str
    inputs: list
    outputs: list
    name: str = ""
    attrs: dict = field(default_factory=dict)


@dataclass
class OnnxGraph:
    name: str
    nodes: list                      # topologically ordered
    initializers: dict               # name -> ndarray
    inputs: list                     # [(name, shape tuple with None for dynamic)]
    outputs: list
    opset: int = 13
    producer: str = "matrec"


# ---------------------------------------------------------------------------
# serialization

def _tensor_bytes(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype in (np.float32, np.float64):
        dtype, raw = TENSOR_FLOAT, np.ascontiguousarray(arr, dtype="<f4").tobytes()
    elif arr.dtype in (np.int64, np.int32):
        dtype, raw = TENSOR_INT64, np.ascontiguousarray(arr, dtype="<i8").tobytes()
    else:
        raise OnnxError(f"unsupported tensor dtype {arr.dtype}")
    out = bytearray()
    for d in arr.shape:
        out += _f_varint(1, d)
    out += _f_varint(2, dtype)
    out += _f_str(8, name)
    out += _f_bytes(9, raw)
    return bytes(out)


def _attr_bytes(name: str, value) -> bytes:
    out = bytearray(_f_str(1, name))
    if isinstance(value, bool):
        value = int(value)
    if isinstance(value, int):
        out += _f_varint(3, value) + _f_varint(20, ATTR_INT)
    elif isinstance(value, float):
        out += _f_float(2, value) + _f_varint(20, ATTR_FLOAT)
    elif isinstance(value, str):
        out += _f_bytes(4, value.encode("utf-8")) + _f_varint(20, ATTR_STRING)
    elif isinstance(value, np.ndarray):
        out += _f_bytes(5, _tensor_bytes("", value)) + _f_varint(20, ATTR_TENSOR)
    elif isinstance(value, (list, tuple)) and all(isinstance(v, (int, np.integer)) for v in value):
        for v in value:
            out += _f_varint(8, int(v))
        out += _f_varint(20, ATTR_INTS)
    elif isinstance(value, (list, tuple)):
        for v in value:
            out += _f_float(7, float(v))
        out += _f_varint(20, ATTR_FLOATS)
    else:
        raise OnnxError(f"unsupported attribute value for {name!r}: {value!r}")
    return bytes(out)


def _value_info_bytes(name: str, shape) -> bytes:
    dims = bytearray()
    for d in shape:
        if d is None:
            dim = _f_str(2, "N")
        else:
            dim = _f_varint(1, int(d))
        dims += _f_bytes(1, dim)
    tensor_type = _f_varint(1, TENSOR_FLOAT) + _f_bytes(2, bytes(dims))
    type_proto = _f_bytes(1, tensor_type)
    return _f_str(1, name) + _f_bytes(2, type_proto)


def _node_bytes(node: OnnxNode) -> bytes:
    out = bytearray()
    for i in node.inputs:
        out += _f_str(1, i)
    for o in node.outputs:
        out += _f_str(2, o)
    if node.name:
        out += _f_str(3, node.name)
    out += _f_str(4, node.op_type)
    for aname in sorted(node.attrs):
        out += _f_bytes(5, _attr_bytes(aname, node.attrs[aname]))
    return bytes(out)


def graph_to_model_bytes(graph: OnnxGraph) -> bytes:
    g = bytearray()
    for node in graph.nodes:
        g += _f_bytes(1, _node_bytes(node))
    g += _f_str(2, graph.name)
    for name in sorted(graph.initializers):
        g += _f_bytes(5, _tensor_bytes(name, graph.initializers[name]))
    for name, shape in graph.inputs:
        g += _f_bytes(11, _value_info_bytes(name, shape))
    for name, shape in graph.outputs:
        g += _f_bytes(12, _value_info_bytes(name, shape))

    opset = _f_str(1, "") + _f_varint(2, graph.opset)
    model = bytearray()
    model += _f_varint(1, 8)  # IR version
    model += _f_str(2, graph.producer)
    model += _f_str(3, "0.1")
    model += _f_bytes(7, bytes(g))
    model += _f_bytes(8, bytes(opset))
    return bytes(model)


def save_model(graph: OnnxGraph, path):
    with open(path, "wb") as fh:
        fh.write(graph_to_model_bytes(graph))


# ---------------------------------------------------------------------------
# parsing

def _parse_tensor(buf) -> tuple:
    dims, data_type, name = [], TENSOR_FLOAT, ""
    raw = b""
    float_data, int64_data = [], []
    for fieldno, wire, value in _walk(buf):
        if fieldno == 1:
            dims += _packed_varints(value, wire)
        elif fieldno == 2:
            data_type = value
        elif fieldno == 8:
            name = bytes(value).decode("utf-8")
        elif fieldno == 9:
            raw = bytes(value)
        elif fieldno == 4:
            if wire == 5:
                float_data.append(struct.unpack("<f", value)[0])
            else:
                float_data += list(np.frombuffer(bytes(value), dtype="<f4"))
        elif fieldno == 7:
            int64_data += _packed_varints(value, wire)
    if data_type == TENSOR_FLOAT:
        arr = (np.frombuffer(raw, dtype="<f4") if raw
               else np.array(float_data, dtype=np.float32))
    elif data_type == TENSOR_INT64:
        arr = (np.frombuffer(raw, dtype="<i8") if raw
               else np.array(int64_data, dtype=np.int64))
    else:
        raise OnnxError(f"unsupported tensor data type {data_type} for {name!r}")
    return name, arr.reshape(dims).copy()


def _parse_attr(buf):
    name = ""
    atype = None
    fval = None
    ival = None
    sval = None
    tval = None
    ints, floats = [], []
    for fieldno, wire, value in _walk(buf):
        if fieldno == 1:
            name = bytes(value).decode("utf-8")
        elif fieldno == 20:
            atype = value
        elif fieldno == 2:
            fval = struct.unpack("<f", value)[0]
        elif fieldno == 3:
            ival = _signed64(value)
        elif fieldno == 4:
            sval = bytes(value).decode("utf-8")
        elif fieldno == 5:
            tval = _parse_tensor(value)[1]
        elif fieldno == 7:
            if wire == 5:
                floats.append(struct.unpack("<f", value)[0])
            else:
                floats += list(np.frombuffer(bytes(value), dtype="<f4"))
        elif fieldno == 8:
            ints += _packed_varints(value, wire)
    if atype == ATTR_INT or (atype is None and ival is not None):
        return name, ival
    if atype == ATTR_FLOAT or (atype is None and fval is not None):
        return name, fval
    if atype == ATTR_STRING or (atype is None and sval is not None):
        return name, sval
    if atype == ATTR_TENSOR or (atype is None and tval is not None):
        return name, tval
    if atype == ATTR_INTS or ints:
        return name, list(ints)
    if atype == ATTR_FLOATS or floats:
        return name, [float(f) for f in floats]
    raise OnnxError(f"cannot decode attribute {name!r}")


def _parse_node(buf) -> OnnxNode:
    node = OnnxNode(op_type="", inputs=[], outputs=[])
    for fieldno, wire, value in _walk(buf):
        if fieldno == 1:
            node.inputs.append(bytes(value).decode("utf-8"))
        elif fieldno == 2:
            node.outputs.append(bytes(value).decode("utf-8"))
        elif fieldno == 3:
            node.name = bytes(value).decode("utf-8")
        elif fieldno == 4:
            node.op_type = bytes(value).decode("utf-8")
        elif fieldno == 5:
            aname, avalue = _parse_attr(value)
            node.attrs[aname] = avalue
    return node


def _parse_value_info(buf):
    name = ""
    shape = []
    for fieldno, wire, value in _walk(buf):
        if fieldno == 1:
            name = bytes(value).decode("utf-8")
        elif fieldno == 2:
            for f2, _, v2 in _walk(value):
                if f2 != 1:
                    continue
                for f3, _, v3 in _walk(v2):      # TypeProto.Tensor
                    if f3 != 2:
                        continue
                    for f4, _, v4 in _walk(v3):  # TensorShapeProto
                        if f4 != 1:
                            continue
                        dim = None
                        for f5, _, v5 in _walk(v4):
                            if f5 == 1:
                                dim = v5
                        shape.append(dim)
    return name, tuple(shape)


def load_model(path) -> OnnxGraph:
    data = memoryview(Path(path).read_bytes())
    graph = None
    opset = 13
    producer = ""
    for fieldno, wire, value in _walk(data):
        if fieldno == 7:
            graph = value
        elif fieldno == 8:
            domain, version = "", None
            for f2, w2, v2 in _walk(value):
                if f2 == 1:
                    domain = bytes(v2).decode("utf-8")
                elif f2 == 2:
                    version = v2
            if domain in ("", "ai.onnx") and version is not None:
                opset = version
        elif fieldno == 2:
            producer = bytes(value).decode("utf-8")
    if graph is None:
        raise OnnxError(f"no graph found in {path}")

    nodes, initializers, inputs, outputs = [], {}, [], []
    name = ""
    for fieldno, wire, value in _walk(graph):
        if fieldno == 1:
            nodes.append(_parse_node(value))
        elif fieldno == 2:
            name = bytes(value).decode("utf-8")
        elif fieldno == 5:
            tname, arr = _parse_tensor(value)
            initializers[tname] = arr
        elif fieldno == 11:
            inputs.append(_parse_value_info(value))
        elif fieldno == 12:
            outputs.append(_parse_value_info(value))
    inputs = [(n, s) for n, s in inputs if n not in initializers]
    return OnnxGraph(name=name, nodes=nodes, initializers=initializers,
                     inputs=inputs, outputs=outputs, opset=opset,
                     producer=producer)


# ---------------------------------------------------------------------------
# execution

def _pair_pads(pads, ndim_spatial=2):
    if pads is None:
        return [(0, 0)] * ndim_spatial
    half = len(pads) // 2
    return list(zip(pads[:half], pads[half:]))


def _conv(X, W, B, strides, pads, dilations, group):
    N, C, H, Wd = X.shape
    M, Cg, kh, kw = W.shape
    (pt, pb), (pl, pr) = _pair_pads(pads)
    sh, sw = strides
    dh, dw = dilations
    Xp = np.pad(X, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    out_h = (H + pt + pb - (dh * (kh - 1) + 1)) // sh + 1
    out_w = (Wd + pl + pr - (dw * (kw - 1) + 1)) // sw + 1
    ri = (np.arange(out_h) * sh)[:, None, None, None] + (np.arange(kh) * dh)[None, None, :, None]
    ci = (np.arange(out_w) * sw)[None, :, None, None] + (np.arange(kw) * dw)[None, None, None, :]
    patches = Xp[:, :, ri, ci]                     # (N, C, oh, ow, kh, kw)
    g = group
    Xg = patches.reshape(N, g, C // g, out_h, out_w, kh, kw)
    Wg = W.reshape(g, M // g, Cg, kh, kw)
    out = np.einsum("ngcxykl,gmckl->ngmxy", Xg, Wg, optimize=True)
    out = out.reshape(N, M, out_h, out_w)
    if B is not None:
        out = out + B[None, :, None, None]
    return out.astype(X.dtype, copy=False)


def _pool_patches(X, kernel, strides, pads, fill):
    kh, kw = kernel
    sh, sw = strides
    (pt, pb), (pl, pr) = _pair_pads(pads)
    Xp = np.pad(X, ((0, 0), (0, 0), (pt, pb), (pl, pr)),
                constant_values=fill)
    H, W = Xp.shape[2:]
    out_h = (H - kh) // sh + 1
    out_w = (W - kw) // sw + 1
    ri = (np.arange(out_h) * sh)[:, None, None, None] + np.arange(kh)[None, None, :, None]
    ci = (np.arange(out_w) * sw)[None, :, None, None] + np.arange(kw)[None, None, None, :]
    return Xp[:, :, ri, ci]


class GraphExecutor:
    """Evaluates an OnnxGraph on numpy inputs; nodes must be topo-ordered."""

    def __init__(self, graph: OnnxGraph):
        self.graph = graph

    def run(self, feeds: dict, dtype=np.float32) -> dict:
        values = {k: np.asarray(v, dtype=dtype)
                  for k, v in self.graph.initializers.items()
                  if np.asarray(v).dtype.kind == "f"}
        values.update({k: np.asarray(v) for k, v in self.graph.initializers.items()
                       if np.asarray(v).dtype.kind != "f"})
        for k, v in feeds.items():
            values[k] = np.asarray(v, dtype=dtype)
        for node in self.graph.nodes:
            try:
                self._exec_node(node, values)
            except OnnxError:
                raise
            except Exception as exc:
                raise OnnxError(
                    f"failure in node {node.name or node.op_type!r} "
                    f"({node.op_type}): {exc}") from exc
        out = {}
        for name, _shape in self.graph.outputs:
            if name not in values:
                raise OnnxError(f"graph output {name!r} was never produced")
            out[name] = values[name]
        return out

    def _exec_node(self, node: OnnxNode, values: dict):
        op = node.op_type
        get = lambda i: values[node.inputs[i]] if i < len(node.inputs) and node.inputs[i] else None
        a = node.attrs
        if op == "Conv":
            X, W = get(0), get(1)
            kernel = a.get("kernel_shape", list(W.shape[2:]))
            out = _conv(X, W, get(2),
                        strides=a.get("strides", [1, 1]),
                        pads=a.get("pads", [0, 0, 0, 0]),
                        dilations=a.get("dilations", [1, 1]),
                        group=a.get("group", 1))
        elif op == "Relu":
            out = np.maximum(get(0), 0)
        elif op == "MaxPool":
            patches = _pool_patches(get(0), a["kernel_shape"],
                                    a.get("strides", [1, 1]),
                                    a.get("pads", [0, 0, 0, 0]),
                                    fill=-np.inf)
            out = patches.max(axis=(-2, -1))
        elif op == "AveragePool":
            X = get(0)
            patches = _pool_patches(X, a["kernel_shape"],
                                    a.get("strides", [1, 1]),
                                    a.get("pads", [0, 0, 0, 0]), fill=0.0)
            total = patches.sum(axis=(-2, -1))
            if a.get("count_include_pad", 0):
                count = a["kernel_shape"][0] * a["kernel_shape"][1]
                out = total / count
            else:
                ones = np.ones((1, 1) + X.shape[2:], dtype=X.dtype)
                counts = _pool_patches(ones, a["kernel_shape"],
                                       a.get("strides", [1, 1]),
                                       a.get("pads", [0, 0, 0, 0]),
                                       fill=0.0).sum(axis=(-2, -1))
                out = total / counts
        elif op == "GlobalAveragePool":
            out = get(0).mean(axis=(2, 3), keepdims=True)
        elif op == "BatchNormalization":
            X, scale, bias, mean, var = (get(i) for i in range(5))
            eps = a.get("epsilon", 1e-5)
            shape = (1, -1, 1, 1)
            out = ((X - mean.reshape(shape))
                   / np.sqrt(var.reshape(shape) + eps)
                   * scale.reshape(shape) + bias.reshape(shape))
        elif op == "Add":
            out = get(0) + get(1)
        elif op == "Mul":
            out = get(0) * get(1)
        elif op == "Concat":
            out = np.concatenate([values[i] for i in node.inputs], axis=a["axis"])
        elif op == "Pad":
            X = get(0)
            pads = a.get("pads")
            if pads is None:
                pads = [int(p) for p in get(1)]
            value = a.get("value", 0.0)
            if len(node.inputs) > 2 and node.inputs[2]:
                value = float(get(2))
            half = len(pads) // 2
            pairs = list(zip(pads[:half], pads[half:]))
            out = np.pad(X, pairs, constant_values=value)
        elif op == "Slice":
            X = get(0)
            starts = [int(v) for v in get(1)]
            ends = [int(v) for v in get(2)]
            axes = [int(v) for v in get(3)] if get(3) is not None else list(range(len(starts)))
            steps = [int(v) for v in get(4)] if get(4) is not None else [1] * len(starts)
            slicer = [slice(None)] * X.ndim
            for s, e, ax, st in zip(starts, ends, axes, steps):
                slicer[ax] = slice(s, e, st)
            out = X[tuple(slicer)]
        elif op == "Identity":
            out = get(0)
        else:
            raise OnnxError(
                f"op {op!r} (node {node.name!r}) is outside the supported "
                "vocabulary")
        values[node.outputs[0]] = out
