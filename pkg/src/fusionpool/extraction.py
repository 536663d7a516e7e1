"""Frozen feature extractors behind a uniform interface.

Two extractor families: ONNX-backed backbones (real CNNs exported as frozen
graphs with feature-map and pooled outputs) and a synthetic extractor used
throughout the test suite so no model files are required.  Both emit
FeatureMaps whose pooled vector is the global average of each spatial map;
that identity is what makes the analytic Grad-CAM in the explain module
exact.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import FormatError, MissingInputError, ValidationError
from .ingest import FrameTensor
from . import onnx_proto
from .onnx_exec import run_model

MODEL_DIR_ENV = "FUSIONPOOL_MODEL_DIR"


@dataclass(frozen=True)
class BackboneSpec:
    """Declared geometry of one frozen backbone."""

    name: str
    input_size: int
    feature_dim: int
    map_count: int
    map_size: tuple[int, int]
    normalization: str = "scale_pm1"
    source: str = ""

    def __post_init__(self):
        if self.feature_dim != self.map_count:
            raise ValidationError(
                f"backbone {self.name!r}: feature_dim ({self.feature_dim}) must equal "
                f"map_count ({self.map_count}); the pooled vector is GAP over the maps"
            )
        if self.input_size <= 0 or self.map_size[0] <= 0 or self.map_size[1] <= 0:
            raise ValidationError(f"backbone {self.name!r}: dimensions must be positive")

    @classmethod
    def synthetic(cls, seed: int, name: str | None = None, input_size: int = 32,
                  feature_dim: int = 16, map_size: tuple[int, int] = (5, 5)) -> "BackboneSpec":
        return cls(
            name=name or f"synthetic{seed}",
            input_size=input_size,
            feature_dim=feature_dim,
            map_count=feature_dim,
            map_size=map_size,
            normalization="scale_pm1",
            source=f"synthetic:{seed}",
        )


@dataclass
class FeatureMaps:
    """Final-stage activations of one frame: K maps of h x w plus their GAP."""

    maps: np.ndarray       # (K, h, w) float32
    pooled: np.ndarray     # (K,) float32
    source_id: int

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float32)
        self.pooled = np.asarray(self.pooled, dtype=np.float32)
        if self.maps.ndim != 3 or self.pooled.shape != (self.maps.shape[0],):
            raise ValidationError(
                f"feature maps (K,h,w)/(K,) shape mismatch: {self.maps.shape} vs {self.pooled.shape}"
            )
        if not (np.all(np.isfinite(self.maps)) and np.all(np.isfinite(self.pooled))):
            raise ValidationError("non-finite activation; extractor output is corrupt")
        means = self.maps.mean(axis=(1, 2), dtype=np.float64)
        tol = 1e-6 * (1.0 + np.abs(self.pooled))
        if np.any(np.abs(means - self.pooled) > tol):
            raise ValidationError("pooled vector is not the global average of the maps")


def _check_frames(frames: Sequence[FrameTensor], input_size: int) -> None:
    for frame in frames:
        if frame.height != input_size or frame.width != input_size:
            raise ValidationError(
                f"frame {frame.source_id} is {frame.height}x{frame.width}, "
                f"extractor expects {input_size}x{input_size}"
            )


def _area_downsample(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Exact area-average resize; every source pixel contributes."""
    image = np.asarray(image, dtype=np.float64)
    in_h, in_w = image.shape[:2]

    def weights(n_out, n_in):
        w = np.zeros((n_out, n_in))
        scale = n_in / n_out
        for i in range(n_out):
            lo, hi = i * scale, (i + 1) * scale
            for r in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
                w[i, r] = min(hi, r + 1) - max(lo, r)
        return w / scale

    wy = weights(out_h, in_h)
    wx = weights(out_w, in_w)
    return np.einsum("oi,ijc,pj->opc", wy, image, wx)


class SyntheticExtractor:
    """Deterministic, dependency-free stand-in for a CNN backbone.

    Each map is a seeded random projection of a coarse (8x8 per channel)
    area-averaged summary of the frame, plus a seeded per-cell bias,
    box-smoothed and squashed by tanh into [-1, 1].  The projection
    preserves locality: nearby frames give nearby features, so class
    structure in pixel space survives into feature space.  The area
    average touches every pixel, so any single-pixel change moves the
    output; distinct frames collide only on a measure-zero set.
    """

    COARSE = 8

    def __init__(self, spec: BackboneSpec, seed: int):
        self.spec = spec
        self.seed = seed
        k, (h, w) = spec.map_count, spec.map_size
        p = self.COARSE * self.COARSE * 3
        rng = np.random.Generator(np.random.PCG64(seed))
        self._basis = rng.standard_normal((k, h * w, p)) / np.sqrt(p)
        self._bias = 0.3 * rng.standard_normal((k, h, w))

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def _single(self, frame: FrameTensor) -> FeatureMaps:
        k, (h, w) = self.spec.map_count, self.spec.map_size
        coarse = _area_downsample(frame.values, self.COARSE, self.COARSE)
        v = coarse.reshape(-1)
        raw = (self._basis @ v).reshape(k, h, w) + self._bias
        raw = _box_smooth(raw)
        maps = np.tanh(raw).astype(np.float32)
        pooled = maps.mean(axis=(1, 2), dtype=np.float64).astype(np.float32)
        return FeatureMaps(maps=maps, pooled=pooled, source_id=frame.source_id)

    def extract(self, frames: Sequence[FrameTensor]) -> list[FeatureMaps]:
        _check_frames(frames, self.spec.input_size)
        return [self._single(f) for f in frames]


def _box_smooth(maps: np.ndarray) -> np.ndarray:
    """3x3 box filter with edge replication, applied per map."""
    if maps.shape[1] < 2 or maps.shape[2] < 2:
        return maps
    padded = np.pad(maps, ((0, 0), (1, 1), (1, 1)), mode="edge")
    acc = np.zeros_like(maps)
    for dy in range(3):
        for dx in range(3):
            acc += padded[:, dy:dy + maps.shape[1], dx:dx + maps.shape[2]]
    return acc / 9.0


def synthetic_extract(seed: int, frame: FrameTensor, feature_dim: int = 16,
                      map_size: tuple[int, int] = (5, 5)) -> FeatureMaps:
    """One-shot synthetic extraction; convenience over SyntheticExtractor."""
    spec = BackboneSpec.synthetic(
        seed, input_size=frame.height, feature_dim=feature_dim, map_size=map_size
    )
    return SyntheticExtractor(spec, seed).extract([frame])[0]


class OnnxExtractor:
    """Runs a frozen CNN exported as an ONNX graph with two outputs:
    feature maps (N, K, h, w) and the pooled vector (N, K)."""

    def __init__(self, spec: BackboneSpec, model: onnx_proto.OnnxModel):
        self.spec = spec
        self.model = model
        if model.opset_version < 13:
            raise FormatError(
                f"backbone {spec.name!r}: opset {model.opset_version} < 13"
            )
        graph = model.graph
        initializer_names = {t.name for t in graph.initializers}
        data_inputs = [i for i in graph.inputs if i.name not in initializer_names]
        if len(data_inputs) != 1:
            raise FormatError(
                f"backbone {spec.name!r}: expected a single data input, got {len(data_inputs)}"
            )
        if len(graph.outputs) != 2:
            raise FormatError(
                f"backbone {spec.name!r}: expected (maps, pooled) outputs, got {len(graph.outputs)}"
            )
        self._input_name = data_inputs[0].name
        by_rank = {len(o.shape): o for o in graph.outputs}
        if 4 not in by_rank or 2 not in by_rank:
            raise FormatError(
                f"backbone {spec.name!r}: outputs must be rank 4 (maps) and rank 2 (pooled)"
            )
        self._maps_name = by_rank[4].name
        self._pooled_name = by_rank[2].name

        in_shape = data_inputs[0].shape
        self._check_dims("input", in_shape[1:], (3, spec.input_size, spec.input_size))
        self._check_dims("feature maps", by_rank[4].shape[1:],
                         (spec.map_count, spec.map_size[0], spec.map_size[1]))
        self._check_dims("pooled vector", by_rank[2].shape[1:], (spec.feature_dim,))

    def _check_dims(self, what: str, declared, expected) -> None:
        concrete = tuple(d for d in declared)
        if len(concrete) != len(expected) or any(
            isinstance(d, int) and d != e for d, e in zip(concrete, expected)
        ):
            raise ValidationError(
                f"backbone {self.spec.name!r}: {what} dims {concrete} do not match "
                f"spec declaration {expected}"
            )

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def extract(self, frames: Sequence[FrameTensor]) -> list[FeatureMaps]:
        _check_frames(frames, self.spec.input_size)
        if not frames:
            return []
        batch = np.stack([f.values.transpose(2, 0, 1) for f in frames]).astype(np.float32)
        outputs = run_model(self.model, {self._input_name: batch})
        maps = np.asarray(outputs[self._maps_name], dtype=np.float32)
        pooled = np.asarray(outputs[self._pooled_name], dtype=np.float32)
        if maps.shape[1:] != (self.spec.map_count, *self.spec.map_size):
            raise ValidationError(
                f"backbone {self.spec.name!r}: graph emitted maps {maps.shape[1:]}, "
                f"spec declares {(self.spec.map_count, *self.spec.map_size)}"
            )
        if pooled.shape[1] != self.spec.feature_dim:
            raise ValidationError(
                f"backbone {self.spec.name!r}: graph emitted pooled width {pooled.shape[1]}, "
                f"spec declares {self.spec.feature_dim}"
            )
        return [
            FeatureMaps(maps=maps[i], pooled=pooled[i], source_id=frames[i].source_id)
            for i in range(len(frames))
        ]


Extractor = SyntheticExtractor | OnnxExtractor


def resolve_model_path(source: str) -> str:
    if os.path.isfile(source):
        return source
    if not os.path.isabs(source):
        model_dir = os.environ.get(MODEL_DIR_ENV)
        if model_dir:
            candidate = os.path.join(model_dir, source)
            if os.path.isfile(candidate):
                return candidate
    raise MissingInputError(f"backbone model file not found: {source}")


def read_meta_sidecar(model_path: str) -> dict[str, str]:
    """Read the key=value .meta sidecar next to a model file, if present."""
    sidecar = os.path.splitext(model_path)[0] + ".meta"
    values: dict[str, str] = {}
    if os.path.isfile(sidecar):
        with open(sidecar, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line and not line.startswith("#") and "=" in line:
                    key, _, value = line.partition("=")
                    values[key.strip()] = value.strip()
    return values


def spec_from_model(name: str, source: str) -> BackboneSpec:
    """Build a BackboneSpec from a model file's declared dims.

    Geometry comes from the graph's input/output declarations; the
    normalization scheme comes from the .meta sidecar (default scale_pm1).
    """
    path = resolve_model_path(source)
    model = onnx_proto.load_model(path)
    initializer_names = {t.name for t in model.graph.initializers}
    data_inputs = [i for i in model.graph.inputs if i.name not in initializer_names]
    if len(data_inputs) != 1 or len(model.graph.outputs) != 2:
        raise FormatError(
            f"{path}: expected one data input and two outputs (maps, pooled)"
        )
    by_rank = {len(o.shape): o for o in model.graph.outputs}
    if 4 not in by_rank or 2 not in by_rank:
        raise FormatError(f"{path}: outputs must be rank 4 (maps) and rank 2 (pooled)")
    in_shape = data_inputs[0].shape
    maps_shape = by_rank[4].shape
    pooled_shape = by_rank[2].shape
    dims = [in_shape[2], in_shape[3], maps_shape[1], maps_shape[2], maps_shape[3], pooled_shape[1]]
    if not all(isinstance(d, int) for d in dims):
        raise FormatError(f"{path}: graph declares symbolic non-batch dims {dims}")
    if in_shape[2] != in_shape[3]:
        raise FormatError(f"{path}: non-square input {in_shape} unsupported")
    meta = read_meta_sidecar(path)
    return BackboneSpec(
        name=name,
        input_size=in_shape[2],
        feature_dim=pooled_shape[1],
        map_count=maps_shape[1],
        map_size=(maps_shape[2], maps_shape[3]),
        normalization=meta.get("normalization", "scale_pm1"),
        source=path,
    )


def load_backbone(spec: BackboneSpec) -> Extractor:
    """Resolve a BackboneSpec into a ready extractor handle."""
    if spec.source.startswith("synthetic:"):
        try:
            seed = int(spec.source.split(":", 1)[1])
        except ValueError:
            raise ValidationError(f"bad synthetic source {spec.source!r}") from None
        return SyntheticExtractor(spec, seed)
    path = resolve_model_path(spec.source)
    model = onnx_proto.load_model(path)
    return OnnxExtractor(spec, model)


def extract(handle: Extractor, frames: Sequence[FrameTensor]) -> list[FeatureMaps]:
    """Uniform entry point mirroring handle.extract."""
    return handle.extract(frames)
