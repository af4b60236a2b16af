"""Self-contained ONNX model loading and CPU inference for feature extractors.

Parses the ONNX protobuf wire format directly (no protobuf/onnxruntime
dependency) and executes the graph with numpy. Only the op profile needed by
image-classification feature extractors is supported; loading a model that
uses anything else raises UnsupportedOp at load time, not mid-inference.

Supported ops: Conv (grouped/strided/dilated), Gemm, MatMul,
BatchNormalization (inference), Relu, Clip, Sigmoid, Tanh, Softmax, Add, Sub,
Mul, Div, GlobalAveragePool, AveragePool, MaxPool, Flatten, Reshape, Concat,
Transpose, Squeeze, Unsqueeze, Gather, Shape, Constant, Identity, Dropout,
ReduceMean, LeakyRelu.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = ["OnnxParseError", "UnsupportedOp", "OnnxModel", "load_model"]


class OnnxParseError(Exception):
    pass


class UnsupportedOp(OnnxParseError):
    pass


# ---------------------------------------------------------------------------
# Protobuf wire-format primitives
# ---------------------------------------------------------------------------

def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise OnnxParseError("truncated varint")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise OnnxParseError("varint too long")


def _iter_fields(buf: bytes):
    """Yield (field_number, wire_type, value) for one serialized message.

    value is an int for wire types 0/1/5 and a bytes slice for type 2.
    """
    pos = 0
    n = len(buf)
    while pos < n:
        key, pos = _read_varint(buf, pos)
        field_no, wire = key >> 3, key & 0x07
        if wire == 0:
            val, pos = _read_varint(buf, pos)
        elif wire == 1:
            val = int.from_bytes(buf[pos : pos + 8], "little")
            pos += 8
        elif wire == 2:
            length, pos = _read_varint(buf, pos)
            val = buf[pos : pos + length]
            pos += length
        elif wire == 5:
            val = int.from_bytes(buf[pos : pos + 4], "little")
            pos += 4
        else:
            raise OnnxParseError(f"unsupported wire type {wire}")
        yield field_no, wire, val


def _zigzag64(v: int) -> int:
    # int64 fields are plain (non-zigzag) varints; map the two's complement.
    return v - (1 << 64) if v >= (1 << 63) else v


def _packed_int64(val, wire) -> list[int]:
    if wire == 0:
        return [_zigzag64(val)]
    out = []
    pos = 0
    while pos < len(val):
        v, pos = _read_varint(val, pos)
        out.append(_zigzag64(v))
    return out


def _packed_float32(val, wire) -> list[float]:
    if wire == 5:
        return [struct.unpack("<f", struct.pack("<I", val))[0]]
    return list(np.frombuffer(val, dtype="<f4"))


# ONNX TensorProto.DataType values we materialize.
_DTYPES = {1: "<f4", 6: "<i4", 7: "<i8", 9: "|b1", 11: "<f8"}


def _parse_tensor(buf: bytes) -> tuple[str, np.ndarray]:
    dims: list[int] = []
    data_type = 1
    raw = b""
    float_data: list[float] = []
    int64_data: list[int] = []
    int32_data: list[int] = []
    double_data: list[float] = []
    name = ""
    for no, wire, val in _iter_fields(buf):
        if no == 1:
            dims.extend(_packed_int64(val, wire))
        elif no == 2:
            data_type = val
        elif no == 4:
            float_data.extend(_packed_float32(val, wire))
        elif no == 5:
            int32_data.extend(_packed_int64(val, wire))
        elif no == 7:
            int64_data.extend(_packed_int64(val, wire))
        elif no == 8:
            name = val.decode("utf-8")
        elif no == 9:
            raw = val
        elif no == 10:
            double_data.extend(np.frombuffer(val, dtype="<f8") if wire == 2 else [val])
        elif no == 13:
            raise OnnxParseError("external tensor data is not supported")
    if data_type not in _DTYPES:
        raise OnnxParseError(f"unsupported tensor data type {data_type}")
    dtype = np.dtype(_DTYPES[data_type])
    if raw:
        arr = np.frombuffer(raw, dtype=dtype)
    elif float_data:
        arr = np.asarray(float_data, dtype=dtype)
    elif int64_data:
        arr = np.asarray(int64_data, dtype=dtype)
    elif int32_data:
        arr = np.asarray(int32_data, dtype=dtype)
    elif double_data:
        arr = np.asarray(double_data, dtype=dtype)
    else:
        arr = np.zeros(0, dtype=dtype)
    shape = tuple(int(d) for d in dims)
    expect = int(np.prod(shape)) if shape else arr.size
    if arr.size != expect:
        raise OnnxParseError(f"tensor {name!r}: {arr.size} values for shape {shape}")
    return name, arr.reshape(shape).copy()


def _parse_attribute(buf: bytes) -> tuple[str, object]:
    name = ""
    f_val = None
    i_val = None
    s_val = None
    t_val = None
    floats: list[float] = []
    ints: list[int] = []
    for no, wire, val in _iter_fields(buf):
        if no == 1:
            name = val.decode("utf-8")
        elif no == 2:
            f_val = struct.unpack("<f", struct.pack("<I", val))[0]
        elif no == 3:
            i_val = _zigzag64(val)
        elif no == 4:
            s_val = val
        elif no == 5:
            t_val = _parse_tensor(val)[1]
        elif no == 7:
            floats.extend(_packed_float32(val, wire))
        elif no == 8:
            ints.extend(_packed_int64(val, wire))
        # type tag (20) and doc strings are ignored; the populated field wins
    for candidate in (t_val, f_val, i_val, s_val):
        if candidate is not None:
            return name, candidate
    if ints:
        return name, ints
    if floats:
        return name, floats
    return name, None


@dataclass
class Node:
    op_type: str
    inputs: list[str]
    outputs: list[str]
    attrs: dict[str, object]


def _parse_node(buf: bytes) -> Node:
    inputs: list[str] = []
    outputs: list[str] = []
    op_type = ""
    attrs: dict[str, object] = {}
    for no, wire, val in _iter_fields(buf):
        if no == 1:
            inputs.append(val.decode("utf-8"))
        elif no == 2:
            outputs.append(val.decode("utf-8"))
        elif no == 4:
            op_type = val.decode("utf-8")
        elif no == 5:
            k, v = _parse_attribute(val)
            attrs[k] = v
    return Node(op_type, inputs, outputs, attrs)


def _parse_value_info(buf: bytes) -> tuple[str, list[int | None]]:
    name = ""
    shape: list[int | None] = []
    for no, wire, val in _iter_fields(buf):
        if no == 1:
            name = val.decode("utf-8")
        elif no == 2:
            for tno, _, tval in _iter_fields(val):
                if tno == 1:  # tensor_type
                    for fno, _, fval in _iter_fields(tval):
                        if fno == 2:  # shape
                            for dno, _, dval in _iter_fields(fval):
                                if dno == 1:  # dim
                                    dim: int | None = None
                                    for eno, ewire, eval_ in _iter_fields(dval):
                                        if eno == 1 and ewire == 0:
                                            dim = _zigzag64(eval_)
                                    shape.append(dim)
    return name, shape


@dataclass
class OnnxModel:
    nodes: list[Node]
    initializers: dict[str, np.ndarray]
    inputs: list[tuple[str, list[int | None]]]
    outputs: list[tuple[str, list[int | None]]]
    opset: int = 13

    @property
    def input_name(self) -> str:
        return self.inputs[0][0]

    @property
    def output_name(self) -> str:
        return self.outputs[0][0]

    def run(self, feeds: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Execute all nodes in graph order and return the graph outputs."""
        env: dict[str, np.ndarray] = dict(self.initializers)
        env.update({k: np.asarray(v) for k, v in feeds.items()})
        for node in self.nodes:
            fn = _OPS[node.op_type]
            args = [env[name] if name else None for name in node.inputs]
            results = fn(node, *args)
            if not isinstance(results, tuple):
                results = (results,)
            for out_name, value in zip(node.outputs, results):
                if out_name:
                    env[out_name] = value
        missing = [name for name, _ in self.outputs if name not in env]
        if missing:
            raise OnnxParseError(f"graph outputs never produced: {missing}")
        return {name: env[name] for name, _ in self.outputs}


def _parse_graph(buf: bytes) -> OnnxModel:
    nodes: list[Node] = []
    initializers: dict[str, np.ndarray] = {}
    inputs: list[tuple[str, list[int | None]]] = []
    outputs: list[tuple[str, list[int | None]]] = []
    for no, wire, val in _iter_fields(buf):
        if no == 1:
            nodes.append(_parse_node(val))
        elif no == 5:
            name, arr = _parse_tensor(val)
            initializers[name] = arr
        elif no == 11:
            inputs.append(_parse_value_info(val))
        elif no == 12:
            outputs.append(_parse_value_info(val))
    # Graph inputs that carry weights via initializers are not runtime feeds.
    inputs = [(n, s) for n, s in inputs if n not in initializers]
    return OnnxModel(nodes, initializers, inputs, outputs)


def load_model(path) -> OnnxModel:
    """Parse an ONNX file and verify every node is in the supported profile."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise OnnxParseError(f"cannot read {path}: {exc}") from exc
    graph = None
    opset = 13
    try:
        for no, wire, val in _iter_fields(buf):
            if no == 7 and wire == 2:
                graph = val
            elif no == 8 and wire == 2:
                for ono, owire, oval in _iter_fields(val):
                    if ono == 2 and owire == 0:
                        opset = int(oval)
    except OnnxParseError:
        raise
    except Exception as exc:  # malformed bytes surface as struct/index errors
        raise OnnxParseError(f"not a parseable ONNX file: {exc}") from exc
    if graph is None:
        raise OnnxParseError("no graph found; not an ONNX model file")
    model = _parse_graph(graph)
    model.opset = opset
    unsupported = sorted({n.op_type for n in model.nodes if n.op_type not in _OPS})
    if unsupported:
        raise UnsupportedOp(f"model uses unsupported ops: {unsupported}")
    if not model.inputs or not model.outputs:
        raise OnnxParseError("graph must declare at least one input and output")
    return model


# ---------------------------------------------------------------------------
# Operator implementations (NCHW, float32 accumulation in float64 where cheap)
# ---------------------------------------------------------------------------

def _attr_ints(node: Node, key: str, default: list[int]) -> list[int]:
    v = node.attrs.get(key)
    if v is None:
        return list(default)
    if isinstance(v, int):
        return [v]
    return [int(x) for x in v]


def _pool_patches(x: np.ndarray, kh: int, kw: int, sh: int, sw: int):
    n, c, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    s = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, oh, ow, kh, kw),
        strides=(s[0], s[1], s[2] * sh, s[3] * sw, s[2], s[3]),
        writeable=False,
    )
    return view, oh, ow


def _op_conv(node: Node, x, w, b=None):
    group = int(node.attrs.get("group", 1))
    kh, kw = w.shape[2], w.shape[3]
    strides = _attr_ints(node, "strides", [1, 1])
    dilations = _attr_ints(node, "dilations", [1, 1])
    pads = _attr_ints(node, "pads", [0, 0, 0, 0])
    if node.attrs.get("auto_pad", b"NOTSET") not in (b"NOTSET", "NOTSET", None):
        raise UnsupportedOp("Conv auto_pad other than NOTSET")
    x = np.asarray(x, dtype=np.float32)
    if any(pads):
        x = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[2]), (pads[1], pads[3])))
    dh, dw = dilations
    ekh = (kh - 1) * dh + 1  # effective kernel extent under dilation
    ekw = (kw - 1) * dw + 1
    view, oh, ow = _pool_patches(x, ekh, ekw, strides[0], strides[1])
    view = view[:, :, :, :, ::dh, ::dw]  # (N, C, oh, ow, kh, kw)
    n = x.shape[0]
    m = w.shape[0]
    cin_g = w.shape[1]
    out = np.empty((n, m, oh, ow), dtype=np.float32)
    m_g = m // group
    for g in range(group):
        xg = view[:, g * cin_g : (g + 1) * cin_g]
        wg = w[g * m_g : (g + 1) * m_g]
        out[:, g * m_g : (g + 1) * m_g] = np.einsum(
            "nchwkl,mckl->nmhw", xg, wg, optimize=True
        )
    if b is not None:
        out += b.reshape(1, -1, 1, 1)
    return out


def _op_gemm(node: Node, a, b, c=None):
    alpha = float(node.attrs.get("alpha", 1.0))
    beta = float(node.attrs.get("beta", 1.0))
    if int(node.attrs.get("transA", 0)):
        a = a.T
    if int(node.attrs.get("transB", 0)):
        b = b.T
    out = alpha * (np.asarray(a, dtype=np.float32) @ np.asarray(b, dtype=np.float32))
    if c is not None:
        out = out + beta * c
    return out.astype(np.float32)


def _op_batchnorm(node: Node, x, scale, bias, mean, var):
    eps = float(node.attrs.get("epsilon", 1e-5))
    shape = (1, -1) + (1,) * (x.ndim - 2)
    inv = 1.0 / np.sqrt(var.astype(np.float64) + eps)
    return (
        (x - mean.reshape(shape)) * (scale * inv).reshape(shape).astype(np.float32)
        + bias.reshape(shape)
    ).astype(np.float32)


def _op_avgpool(node: Node, x):
    kh, kw = _attr_ints(node, "kernel_shape", [1, 1])
    sh, sw = _attr_ints(node, "strides", [1, 1])
    pads = _attr_ints(node, "pads", [0, 0, 0, 0])
    include_pad = int(node.attrs.get("count_include_pad", 0))
    if any(pads):
        x = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[2]), (pads[1], pads[3])))
    view, _, _ = _pool_patches(np.asarray(x, dtype=np.float32), kh, kw, sh, sw)
    out = view.mean(axis=(4, 5))
    if any(pads) and not include_pad:
        ones = np.ones(x.shape[2:], dtype=np.float32)
        ones[: pads[0]] = 0
        if pads[2]:
            ones[-pads[2] :] = 0
        ones[:, : pads[1]] = 0
        if pads[3]:
            ones[:, -pads[3] :] = 0
        cnt, _, _ = _pool_patches(ones[None, None], kh, kw, sh, sw)
        denom = cnt.sum(axis=(4, 5))
        out = out * (kh * kw) / np.maximum(denom, 1e-12)
    return out.astype(np.float32)


def _op_maxpool(node: Node, x):
    kh, kw = _attr_ints(node, "kernel_shape", [1, 1])
    sh, sw = _attr_ints(node, "strides", [1, 1])
    pads = _attr_ints(node, "pads", [0, 0, 0, 0])
    if any(pads):
        x = np.pad(
            x,
            ((0, 0), (0, 0), (pads[0], pads[2]), (pads[1], pads[3])),
            constant_values=-np.inf,
        )
    view, _, _ = _pool_patches(np.asarray(x, dtype=np.float32), kh, kw, sh, sw)
    return view.max(axis=(4, 5)).astype(np.float32)


def _op_reshape(node: Node, x, shape=None):
    target = shape if shape is not None else np.asarray(node.attrs.get("shape", []))
    target = [int(v) for v in np.asarray(target).ravel()]
    resolved = [x.shape[i] if v == 0 else v for i, v in enumerate(target)]
    return np.reshape(x, resolved)


def _op_clip(node: Node, x, lo=None, hi=None):
    lo_v = float(lo) if lo is not None else float(node.attrs.get("min", -np.inf))
    hi_v = float(hi) if hi is not None else float(node.attrs.get("max", np.inf))
    return np.clip(x, lo_v, hi_v)


def _op_softmax(node: Node, x):
    axis = int(node.attrs.get("axis", -1))
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)


def _op_reduce_mean(node: Node, x, axes_in=None):
    axes = node.attrs.get("axes")
    if axes_in is not None:
        axes = [int(a) for a in np.asarray(axes_in).ravel()]
    keep = bool(int(node.attrs.get("keepdims", 1)))
    axes_t = tuple(int(a) for a in axes) if axes else None
    return np.mean(x, axis=axes_t, keepdims=keep, dtype=np.float64).astype(np.float32)


def _axes_arg(node: Node, axes_in):
    if axes_in is not None:
        return [int(a) for a in np.asarray(axes_in).ravel()]
    return _attr_ints(node, "axes", [])


_OPS = {
    "Conv": _op_conv,
    "Gemm": _op_gemm,
    "MatMul": lambda node, a, b: (np.asarray(a, np.float32) @ np.asarray(b, np.float32)),
    "BatchNormalization": _op_batchnorm,
    "Relu": lambda node, x: np.maximum(x, 0),
    "LeakyRelu": lambda node, x: np.where(
        x >= 0, x, x * np.float32(node.attrs.get("alpha", 0.01))
    ),
    "Clip": _op_clip,
    "Sigmoid": lambda node, x: (1.0 / (1.0 + np.exp(-np.asarray(x, np.float64)))).astype(np.float32),
    "Tanh": lambda node, x: np.tanh(x),
    "Softmax": _op_softmax,
    "Add": lambda node, a, b: a + b,
    "Sub": lambda node, a, b: a - b,
    "Mul": lambda node, a, b: a * b,
    "Div": lambda node, a, b: a / b,
    "GlobalAveragePool": lambda node, x: np.mean(
        x, axis=(2, 3), keepdims=True, dtype=np.float64
    ).astype(np.float32),
    "AveragePool": _op_avgpool,
    "MaxPool": _op_maxpool,
    "Flatten": lambda node, x: x.reshape(
        int(np.prod(x.shape[: int(node.attrs.get("axis", 1))])), -1
    ),
    "Reshape": _op_reshape,
    "Concat": lambda node, *xs: np.concatenate(xs, axis=int(node.attrs.get("axis", 0))),
    "Transpose": lambda node, x: np.transpose(x, _attr_ints(node, "perm", list(range(x.ndim))[::-1])),
    "Squeeze": lambda node, x, axes=None: np.squeeze(x, axis=tuple(_axes_arg(node, axes)) or None),
    "Unsqueeze": lambda node, x, axes=None: np.expand_dims(x, tuple(_axes_arg(node, axes))),
    "Gather": lambda node, x, idx: np.take(x, np.asarray(idx, dtype=np.int64), axis=int(node.attrs.get("axis", 0))),
    "Shape": lambda node, x: np.asarray(x.shape, dtype=np.int64),
    "Constant": lambda node: np.asarray(node.attrs["value"]),
    "Identity": lambda node, x: x,
    "Dropout": lambda node, x, *rest: x,
    "ReduceMean": _op_reduce_mean,
}
