"""Numpy executor for the convolutional-network subset of ONNX operators.

Covers the operator vocabulary produced by exporting the supported image
backbones: Conv (grouped/depthwise included), BatchNormalization, Relu,
Clip, Add, Mul, Concat, MaxPool, AveragePool, GlobalAveragePool, Pad, plus
a few shape utilities.  Activations are computed in float32 throughout so
results track a float32 reference framework closely.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, ValidationError
from .onnx_proto import OnnxGraph, OnnxModel


def _pair(value, default):
    if value is None:
        return tuple(default)
    return tuple(int(v) for v in value)


def _pad_nchw(x: np.ndarray, pads, fill: float) -> np.ndarray:
    """Apply ONNX spatial pads [h_begin, w_begin, h_end, w_end]."""
    hb, wb, he, we = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (0, 0), (hb, he), (wb, we)),
                  mode="constant", constant_values=fill)


def _windows(x: np.ndarray, kernel, strides, dilations=(1, 1)) -> np.ndarray:
    """(N, C, oH, oW, kH, kW) sliding windows of a padded NCHW tensor."""
    kh, kw = kernel
    dh, dw = dilations
    span_h = (kh - 1) * dh + 1
    span_w = (kw - 1) * dw + 1
    if x.shape[2] < span_h or x.shape[3] < span_w:
        raise ValidationError(
            f"kernel {kernel} with dilation {dilations} exceeds input {x.shape[2:]}"
        )
    win = sliding_window_view(x, (span_h, span_w), axis=(2, 3))
    win = win[:, :, ::strides[0], ::strides[1], ::dh, ::dw]
    return win


def op_conv(x, weight, bias, attrs):
    group = int(attrs.get("group", 1))
    kh, kw = weight.shape[2], weight.shape[3]
    strides = _pair(attrs.get("strides"), (1, 1))
    dilations = _pair(attrs.get("dilations"), (1, 1))
    pads = _pair(attrs.get("pads"), (0, 0, 0, 0))
    x = _pad_nchw(np.asarray(x, dtype=np.float32), pads, 0.0)
    win = _windows(x, (kh, kw), strides, dilations)
    n, c_in, oh, ow = win.shape[0], win.shape[1], win.shape[2], win.shape[3]
    m = weight.shape[0]
    weight = np.asarray(weight, dtype=np.float32)

    if group == 1:
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c_in * kh * kw)
        flat_w = weight.reshape(m, c_in * kh * kw)
        out = cols @ flat_w.T
        out = out.reshape(n, oh, ow, m).transpose(0, 3, 1, 2)
    elif group == c_in and weight.shape[1] == 1:
        # Depthwise: one filter per input channel, vectorized in one einsum.
        out = np.einsum("nchwkl,ckl->nchw", win, weight[:, 0], optimize=True)
        if m != c_in:  # channel multiplier > 1
            raise ValidationError("depthwise conv with channel multiplier > 1 unsupported")
    else:
        cg = c_in // group
        mg = m // group
        parts = []
        for g in range(group):
            wg = win[:, g * cg:(g + 1) * cg]
            cols = wg.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, cg * kh * kw)
            flat_w = weight[g * mg:(g + 1) * mg].reshape(mg, cg * kh * kw)
            parts.append((cols @ flat_w.T).reshape(n, oh, ow, mg))
        out = np.concatenate(parts, axis=3).transpose(0, 3, 1, 2)

    out = np.ascontiguousarray(out, dtype=np.float32)
    if bias is not None:
        out += np.asarray(bias, dtype=np.float32)[None, :, None, None]
    return out


def op_batchnorm(x, scale, b, mean, var, attrs):
    eps = float(attrs.get("epsilon", 1e-5))
    scale = np.asarray(scale, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    mean = np.asarray(mean, dtype=np.float32)
    var = np.asarray(var, dtype=np.float32)
    inv = scale / np.sqrt(var + np.float32(eps))
    shape = (1, -1) + (1,) * (x.ndim - 2)
    return (x - mean.reshape(shape)) * inv.reshape(shape) + b.reshape(shape)


def op_maxpool(x, attrs):
    kernel = _pair(attrs["kernel_shape"], None)
    strides = _pair(attrs.get("strides"), (1, 1))
    pads = _pair(attrs.get("pads"), (0, 0, 0, 0))
    x = _pad_nchw(np.asarray(x, dtype=np.float32), pads, -np.inf)
    win = _windows(x, kernel, strides)
    return win.max(axis=(4, 5))


def op_avgpool(x, attrs):
    kernel = _pair(attrs["kernel_shape"], None)
    strides = _pair(attrs.get("strides"), (1, 1))
    pads = _pair(attrs.get("pads"), (0, 0, 0, 0))
    include_pad = int(attrs.get("count_include_pad", 0))
    x = np.asarray(x, dtype=np.float32)
    padded = _pad_nchw(x, pads, 0.0)
    win = _windows(padded, kernel, strides)
    total = win.sum(axis=(4, 5), dtype=np.float32)
    if include_pad or not any(pads):
        count = np.float32(kernel[0] * kernel[1])
        return total / count
    ones = _pad_nchw(np.ones((1, 1) + x.shape[2:], dtype=np.float32), pads, 0.0)
    counts = _windows(ones, kernel, strides).sum(axis=(4, 5), dtype=np.float32)
    return total / counts


def op_pad(x, pads, value, attrs):
    mode = attrs.get("mode", b"constant")
    if isinstance(mode, bytes):
        mode = mode.decode("utf-8")
    if mode != "constant":
        raise ValidationError(f"Pad mode {mode!r} unsupported")
    pads = np.asarray(pads, dtype=np.int64)
    rank = x.ndim
    pairs = [(int(pads[i]), int(pads[i + rank])) for i in range(rank)]
    fill = float(value) if value is not None else 0.0
    return np.pad(x, pairs, mode="constant", constant_values=fill)


def execute_graph(graph: OnnxGraph, feeds: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Run the graph on named inputs and return all declared outputs."""
    values: dict[str, np.ndarray] = {t.name: t.array for t in graph.initializers}
    for info in graph.inputs:
        if info.name not in feeds and info.name not in values:
            raise ValidationError(f"missing graph input {info.name!r}")
    for name, arr in feeds.items():
        values[name] = np.asarray(arr)

    def get(name):
        if name == "":
            return None
        if name not in values:
            raise FormatError(f"node input {name!r} is not produced by any upstream node")
        return values[name]

    for node in graph.nodes:
        op = node.op_type
        a = node.attributes
        ins = node.inputs
        if op == "Conv":
            out = op_conv(get(ins[0]), get(ins[1]),
                          get(ins[2]) if len(ins) > 2 else None, a)
        elif op == "BatchNormalization":
            out = op_batchnorm(get(ins[0]), get(ins[1]), get(ins[2]),
                               get(ins[3]), get(ins[4]), a)
        elif op == "Relu":
            out = np.maximum(get(ins[0]), 0)
        elif op == "Clip":
            lo = get(ins[1]) if len(ins) > 1 else None
            hi = get(ins[2]) if len(ins) > 2 else None
            out = get(ins[0])
            if lo is not None:
                out = np.maximum(out, np.asarray(lo, dtype=out.dtype))
            if hi is not None:
                out = np.minimum(out, np.asarray(hi, dtype=out.dtype))
        elif op == "Add":
            out = get(ins[0]) + get(ins[1])
        elif op == "Mul":
            out = get(ins[0]) * get(ins[1])
        elif op == "Concat":
            out = np.concatenate([get(i) for i in ins], axis=int(a["axis"]))
        elif op == "MaxPool":
            out = op_maxpool(get(ins[0]), a)
        elif op == "AveragePool":
            out = op_avgpool(get(ins[0]), a)
        elif op == "GlobalAveragePool":
            x = get(ins[0])
            out = x.mean(axis=tuple(range(2, x.ndim)), keepdims=True, dtype=np.float32)
        elif op == "Pad":
            out = op_pad(get(ins[0]), get(ins[1]),
                         get(ins[2]) if len(ins) > 2 else None, a)
        elif op == "Identity":
            out = get(ins[0])
        elif op == "Transpose":
            out = np.transpose(get(ins[0]), axes=a.get("perm"))
        elif op == "Reshape":
            out = np.reshape(get(ins[0]), [int(d) for d in get(ins[1])])
        elif op == "Flatten":
            x = get(ins[0])
            axis = int(a.get("axis", 1))
            out = x.reshape(int(np.prod(x.shape[:axis], initial=1)), -1)
        elif op == "Gemm":
            x, w = get(ins[0]), get(ins[1])
            if int(a.get("transA", 0)):
                x = x.T
            if int(a.get("transB", 0)):
                w = w.T
            out = float(a.get("alpha", 1.0)) * (x @ w)
            if len(ins) > 2:
                out = out + float(a.get("beta", 1.0)) * get(ins[2])
        else:
            raise FormatError(f"unsupported ONNX operator {op!r}")
        values[node.outputs[0]] = out

    missing = [o.name for o in graph.outputs if o.name not in values]
    if missing:
        raise FormatError(f"graph outputs never produced: {missing}")
    return {o.name: values[o.name] for o in graph.outputs}


def run_model(model: OnnxModel, feeds: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return execute_graph(model.graph, feeds)
