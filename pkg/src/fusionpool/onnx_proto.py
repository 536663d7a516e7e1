"""Minimal ONNX model reader/writer over the protobuf wire format.

Implements exactly the subset of the ONNX schema needed for frozen
feature-extractor graphs: ModelProto / GraphProto / NodeProto / TensorProto /
ValueInfoProto and scalar/typed attributes.  Self-contained on purpose: the
deployment targets for this package do not ship an ONNX runtime, and model
files must still be loadable and executable from a plain numpy stack.

Wire-format notes: fields are (tag, value) pairs where
tag = field_number << 3 | wire_type; wire types used here are 0 (varint),
5 (fixed32), and 2 (length-delimited).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import FormatError

# TensorProto.DataType values used by this subset.
DT_FLOAT = 1
DT_UINT8 = 2
DT_INT32 = 6
DT_INT64 = 7
DT_DOUBLE = 11
DT_BOOL = 9

_NUMPY_TO_DT = {
    np.dtype(np.float32): DT_FLOAT,
    np.dtype(np.float64): DT_DOUBLE,
    np.dtype(np.int64): DT_INT64,
    np.dtype(np.int32): DT_INT32,
    np.dtype(np.uint8): DT_UINT8,
    np.dtype(np.bool_): DT_BOOL,
}
_DT_TO_NUMPY = {v: k for k, v in _NUMPY_TO_DT.items()}

# AttributeProto.AttributeType values.
ATTR_FLOAT, ATTR_INT, ATTR_STRING, ATTR_TENSOR = 1, 2, 3, 4
ATTR_FLOATS, ATTR_INTS, ATTR_STRINGS = 6, 7, 8


# ---------------------------------------------------------------------------
# varint / tag primitives


def _write_varint(out: bytearray, value: int) -> None:
    if value < 0:
        value &= (1 << 64) - 1  # two's complement, 10 bytes
    while True:
        bits = value & 0x7F
        value >>= 7
        if value:
            out.append(bits | 0x80)
        else:
            out.append(bits)
            return


def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise FormatError("truncated varint in ONNX file")
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise FormatError("malformed varint in ONNX file")


def _signed64(value: int) -> int:
    return value - (1 << 64) if value >= (1 << 63) else value


def _tag(field_number: int, wire_type: int) -> int:
    return (field_number << 3) | wire_type


def _write_bytes_field(out: bytearray, field_number: int, payload: bytes) -> None:
    _write_varint(out, _tag(field_number, 2))
    _write_varint(out, len(payload))
    out.extend(payload)


def _write_str_field(out: bytearray, field_number: int, text: str) -> None:
    _write_bytes_field(out, field_number, text.encode("utf-8"))


def _write_int_field(out: bytearray, field_number: int, value: int) -> None:
    _write_varint(out, _tag(field_number, 0))
    _write_varint(out, value)


def _write_float_field(out: bytearray, field_number: int, value: float) -> None:
    _write_varint(out, _tag(field_number, 5))
    out.extend(np.float32(value).tobytes())


def _iter_fields(buf: bytes) -> Iterator[tuple[int, int, object]]:
    """Yield (field_number, wire_type, value) for every field in a message."""
    pos = 0
    while pos < len(buf):
        tag, pos = _read_varint(buf, pos)
        number, wire = tag >> 3, tag & 0x7
        if wire == 0:
            value, pos = _read_varint(buf, pos)
        elif wire == 2:
            length, pos = _read_varint(buf, pos)
            if pos + length > len(buf):
                raise FormatError("truncated length-delimited field in ONNX file")
            value = buf[pos:pos + length]
            pos += length
        elif wire == 5:
            if pos + 4 > len(buf):
                raise FormatError("truncated fixed32 field in ONNX file")
            value = buf[pos:pos + 4]
            pos += 4
        elif wire == 1:
            if pos + 8 > len(buf):
                raise FormatError("truncated fixed64 field in ONNX file")
            value = buf[pos:pos + 8]
            pos += 8
        else:
            raise FormatError(f"unsupported protobuf wire type {wire}")
        yield number, wire, value


def _packed_int64(payload: bytes) -> list[int]:
    values = []
    pos = 0
    while pos < len(payload):
        v, pos = _read_varint(payload, pos)
        values.append(_signed64(v))
    return values


# ---------------------------------------------------------------------------
# Model structure


@dataclass
class OnnxTensor:
    name: str
    array: np.ndarray

    def serialize(self) -> bytes:
        out = bytearray()
        for dim in self.array.shape:
            _write_int_field(out, 1, dim)
        dtype = np.dtype(self.array.dtype)
        if dtype not in _NUMPY_TO_DT:
            raise FormatError(f"unsupported tensor dtype {dtype}")
        _write_int_field(out, 2, _NUMPY_TO_DT[dtype])
        _write_str_field(out, 8, self.name)
        _write_bytes_field(out, 9, np.ascontiguousarray(self.array).astype(dtype, copy=False).tobytes())
        return bytes(out)

    @classmethod
    def parse(cls, buf: bytes) -> "OnnxTensor":
        dims: list[int] = []
        data_type = DT_FLOAT
        name = ""
        raw: Optional[bytes] = None
        float_data: list[float] = []
        int_data: list[int] = []
        for number, wire, value in _iter_fields(buf):
            if number == 1 and wire == 0:
                dims.append(_signed64(value))
            elif number == 1 and wire == 2:
                dims.extend(_packed_int64(value))
            elif number == 2:
                data_type = value
            elif number == 8:
                name = value.decode("utf-8")
            elif number == 9:
                raw = bytes(value)
            elif number == 4 and wire == 2:  # packed float_data
                float_data.extend(np.frombuffer(value, dtype="<f4").tolist())
            elif number == 4 and wire == 5:
                float_data.append(np.frombuffer(value, dtype="<f4")[0])
            elif number in (5, 7) and wire == 2:  # packed int32/int64 data
                int_data.extend(_packed_int64(value))
            elif number in (5, 7) and wire == 0:
                int_data.append(_signed64(value))
        if data_type not in _DT_TO_NUMPY:
            raise FormatError(f"unsupported ONNX tensor data_type {data_type}")
        dtype = _DT_TO_NUMPY[data_type]
        if raw is not None:
            array = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype)
        elif float_data:
            array = np.asarray(float_data, dtype=dtype)
        elif int_data:
            array = np.asarray(int_data, dtype=dtype)
        else:
            array = np.zeros(0, dtype=dtype)
        expected = int(np.prod(dims)) if dims else array.size
        if array.size != expected:
            raise FormatError(
                f"tensor {name!r}: payload holds {array.size} elements, dims {dims} expect {expected}"
            )
        return cls(name=name, array=array.reshape(dims))


def _serialize_attribute(name: str, value) -> bytes:
    out = bytearray()
    _write_str_field(out, 1, name)
    if isinstance(value, bool):
        raise FormatError("boolean attributes are not part of the ONNX schema")
    if isinstance(value, int):
        _write_int_field(out, 3, value)
        _write_int_field(out, 20, ATTR_INT)
    elif isinstance(value, float):
        _write_float_field(out, 2, value)
        _write_int_field(out, 20, ATTR_FLOAT)
    elif isinstance(value, str):
        _write_bytes_field(out, 4, value.encode("utf-8"))
        _write_int_field(out, 20, ATTR_STRING)
    elif isinstance(value, bytes):
        _write_bytes_field(out, 4, value)
        _write_int_field(out, 20, ATTR_STRING)
    elif isinstance(value, OnnxTensor):
        _write_bytes_field(out, 5, value.serialize())
        _write_int_field(out, 20, ATTR_TENSOR)
    elif isinstance(value, (list, tuple)) and all(isinstance(v, int) for v in value):
        for v in value:
            _write_int_field(out, 8, v)
        _write_int_field(out, 20, ATTR_INTS)
    elif isinstance(value, (list, tuple)) and all(isinstance(v, float) for v in value):
        for v in value:
            _write_float_field(out, 7, v)
        _write_int_field(out, 20, ATTR_FLOATS)
    else:
        raise FormatError(f"unsupported attribute value for {name!r}: {value!r}")
    return bytes(out)


def _parse_attribute(buf: bytes) -> tuple[str, object]:
    name = ""
    value: object = None
    ints: list[int] = []
    floats: list[float] = []
    for number, wire, raw in _iter_fields(buf):
        if number == 1:
            name = raw.decode("utf-8")
        elif number == 2:
            value = float(np.frombuffer(raw, dtype="<f4")[0])
        elif number == 3:
            value = _signed64(raw)
        elif number == 4:
            value = bytes(raw)
        elif number == 5:
            value = OnnxTensor.parse(raw)
        elif number == 7 and wire == 5:
            floats.append(float(np.frombuffer(raw, dtype="<f4")[0]))
        elif number == 7 and wire == 2:
            floats.extend(np.frombuffer(raw, dtype="<f4").tolist())
        elif number == 8 and wire == 0:
            ints.append(_signed64(raw))
        elif number == 8 and wire == 2:
            ints.extend(_packed_int64(raw))
    if ints:
        value = ints
    elif floats:
        value = floats
    return name, value


@dataclass
class OnnxNode:
    op_type: str
    inputs: list[str]
    outputs: list[str]
    name: str = ""
    attributes: dict = field(default_factory=dict)

    def serialize(self) -> bytes:
        out = bytearray()
        for inp in self.inputs:
            _write_str_field(out, 1, inp)
        for outp in self.outputs:
            _write_str_field(out, 2, outp)
        if self.name:
            _write_str_field(out, 3, self.name)
        _write_str_field(out, 4, self.op_type)
        for attr_name in sorted(self.attributes):
            _write_bytes_field(out, 5, _serialize_attribute(attr_name, self.attributes[attr_name]))
        return bytes(out)

    @classmethod
    def parse(cls, buf: bytes) -> "OnnxNode":
        node = cls(op_type="", inputs=[], outputs=[])
        for number, _wire, value in _iter_fields(buf):
            if number == 1:
                node.inputs.append(value.decode("utf-8"))
            elif number == 2:
                node.outputs.append(value.decode("utf-8"))
            elif number == 3:
                node.name = value.decode("utf-8")
            elif number == 4:
                node.op_type = value.decode("utf-8")
            elif number == 5:
                attr_name, attr_value = _parse_attribute(value)
                node.attributes[attr_name] = attr_value
        return node


@dataclass
class OnnxValueInfo:
    """Graph input/output declaration: name, element type, symbolic shape."""

    name: str
    elem_type: int = DT_FLOAT
    shape: tuple = ()  # ints for fixed dims, None/str for symbolic dims

    def serialize(self) -> bytes:
        shape_buf = bytearray()
        for dim in self.shape:
            dim_buf = bytearray()
            if isinstance(dim, int):
                _write_int_field(dim_buf, 1, dim)
            else:
                _write_str_field(dim_buf, 2, str(dim) if dim is not None else "N")
            _write_bytes_field(shape_buf, 1, bytes(dim_buf))
        tensor_buf = bytearray()
        _write_int_field(tensor_buf, 1, self.elem_type)
        _write_bytes_field(tensor_buf, 2, bytes(shape_buf))
        type_buf = bytearray()
        _write_bytes_field(type_buf, 1, bytes(tensor_buf))
        out = bytearray()
        _write_str_field(out, 1, self.name)
        _write_bytes_field(out, 2, bytes(type_buf))
        return bytes(out)

    @classmethod
    def parse(cls, buf: bytes) -> "OnnxValueInfo":
        info = cls(name="")
        for number, _wire, value in _iter_fields(buf):
            if number == 1:
                info.name = value.decode("utf-8")
            elif number == 2:
                for tnum, _tw, tval in _iter_fields(value):
                    if tnum != 1:
                        continue
                    elem_type, dims = DT_FLOAT, []
                    for snum, _sw, sval in _iter_fields(tval):
                        if snum == 1:
                            elem_type = sval
                        elif snum == 2:
                            for dnum, _dw, dval in _iter_fields(sval):
                                if dnum != 1:
                                    continue
                                for fnum, fw, fval in _iter_fields(dval):
                                    if fnum == 1:
                                        dims.append(_signed64(fval))
                                    elif fnum == 2:
                                        dims.append(fval.decode("utf-8"))
                                if not dval:
                                    dims.append(None)
                    info.elem_type = elem_type
                    info.shape = tuple(dims)
        return info


@dataclass
class OnnxGraph:
    name: str
    nodes: list[OnnxNode] = field(default_factory=list)
    initializers: list[OnnxTensor] = field(default_factory=list)
    inputs: list[OnnxValueInfo] = field(default_factory=list)
    outputs: list[OnnxValueInfo] = field(default_factory=list)

    def serialize(self) -> bytes:
        out = bytearray()
        for node in self.nodes:
            _write_bytes_field(out, 1, node.serialize())
        _write_str_field(out, 2, self.name)
        for init in self.initializers:
            _write_bytes_field(out, 5, init.serialize())
        for inp in self.inputs:
            _write_bytes_field(out, 11, inp.serialize())
        for outp in self.outputs:
            _write_bytes_field(out, 12, outp.serialize())
        return bytes(out)

    @classmethod
    def parse(cls, buf: bytes) -> "OnnxGraph":
        graph = cls(name="")
        for number, _wire, value in _iter_fields(buf):
            if number == 1:
                graph.nodes.append(OnnxNode.parse(value))
            elif number == 2:
                graph.name = value.decode("utf-8")
            elif number == 5:
                graph.initializers.append(OnnxTensor.parse(value))
            elif number == 11:
                graph.inputs.append(OnnxValueInfo.parse(value))
            elif number == 12:
                graph.outputs.append(OnnxValueInfo.parse(value))
        return graph


@dataclass
class OnnxModel:
    graph: OnnxGraph
    opset_version: int = 13
    ir_version: int = 8
    producer_name: str = "fusionpool"

    def serialize(self) -> bytes:
        out = bytearray()
        _write_int_field(out, 1, self.ir_version)
        _write_str_field(out, 2, self.producer_name)
        _write_bytes_field(out, 7, self.graph.serialize())
        opset = bytearray()
        _write_str_field(opset, 1, "")
        _write_int_field(opset, 2, self.opset_version)
        _write_bytes_field(out, 8, bytes(opset))
        return bytes(out)

    @classmethod
    def parse(cls, buf: bytes) -> "OnnxModel":
        graph: Optional[OnnxGraph] = None
        opset_version = 0
        ir_version = 0
        producer = ""
        for number, _wire, value in _iter_fields(buf):
            if number == 1:
                ir_version = value
            elif number == 2:
                producer = value.decode("utf-8")
            elif number == 7:
                graph = OnnxGraph.parse(value)
            elif number == 8:
                domain, version = "", 0
                for onum, _ow, oval in _iter_fields(value):
                    if onum == 1:
                        domain = oval.decode("utf-8")
                    elif onum == 2:
                        version = oval
                if domain in ("", "ai.onnx"):
                    opset_version = max(opset_version, version)
        if graph is None:
            raise FormatError("ONNX file has no graph")
        return cls(graph=graph, opset_version=opset_version,
                   ir_version=ir_version, producer_name=producer)


def load_model(path: str) -> OnnxModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data:
        raise FormatError(f"empty ONNX file: {path}")
    try:
        return OnnxModel.parse(data)
    except FormatError:
        raise
    except Exception as exc:  # malformed bytes surface as varint/range errors
        raise FormatError(f"corrupt ONNX file {path}: {exc}") from exc


def save_model(model: OnnxModel, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(model.serialize())
