"""Fused feature records, the persistent multi-task feature pool, and the
merge/add-task operations that grow it without touching existing rows.

Pool files (.fpl) are little-endian binary: magic "FPL1"; u32 version=1;
u32 backbone count, then per backbone (u16 name length, name, u32 dim);
u32 class count, then per class (u16 length, name); u32 task count, then
per task (u32 task_id, u16 length, dataset name); u64 record count, then
per record (u64 sample_id, u32 task_id, u32 global_class, D x f32);
u32 CRC32 over everything after the magic.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    ChecksumError,
    FormatError,
    LabelError,
    MissingInputError,
    SchemaMismatchError,
    ValidationError,
)
from .extraction import FeatureMaps

MAGIC = b"FPL1"
VERSION = 1

# A merge policy is either the tag "merge_by_name" (case-folded name equality)
# or an alias table mapping local class names to canonical class names.
MergePolicy = str | Mapping[str, str]


def _canonical(name: str, policy: MergePolicy) -> str:
    folded = name.casefold()
    if isinstance(policy, str):
        if policy != "merge_by_name":
            raise ValidationError(f"unknown merge policy {policy!r}")
        return folded
    return policy.get(name, policy.get(folded, folded)).casefold()


@dataclass
class LabelSpace:
    """Global class registry shared by every task in a pool.

    Global indices are assigned in first-seen order and are never renumbered,
    so heads trained before a merge stay valid on their classes.
    """

    global_classes: list[str] = field(default_factory=list)
    per_task_map: dict[tuple[int, str], int] = field(default_factory=dict)
    merge_policy: MergePolicy = "merge_by_name"

    def _index_of(self, canonical: str) -> int | None:
        for idx, existing in enumerate(self.global_classes):
            if existing.casefold() == canonical:
                return idx
        return None

    def register_task(self, task_id: int, class_names: Sequence[str]) -> dict[str, int]:
        """Register a task's local classes; returns local name -> global index."""
        mapping: dict[str, int] = {}
        for name in class_names:
            if not name:
                raise LabelError("empty class name")
            canonical = _canonical(name, self.merge_policy)
            idx = self._index_of(canonical)
            if idx is None:
                idx = len(self.global_classes)
                self.global_classes.append(name)
            self.per_task_map[(task_id, name.casefold())] = idx
            mapping[name] = idx
        return mapping

    def global_index(self, task_id: int, local_name: str) -> int:
        key = (task_id, local_name.casefold())
        if key not in self.per_task_map:
            raise LabelError(
                f"class {local_name!r} is not registered for task {task_id}"
            )
        return self.per_task_map[key]

    @property
    def class_count(self) -> int:
        return len(self.global_classes)

    def copy(self) -> "LabelSpace":
        return LabelSpace(
            global_classes=list(self.global_classes),
            per_task_map=dict(self.per_task_map),
            merge_policy=self.merge_policy,
        )


@dataclass
class FeatureRecord:
    sample_id: int
    task_id: int
    global_class: int
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 1:
            raise ValidationError("record features must be a flat vector")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError(f"record {self.sample_id}: non-finite feature values")
        if not 0 <= self.sample_id < 2 ** 64:
            raise ValidationError(f"sample_id {self.sample_id} out of u64 range")


@dataclass
class FeaturePool:
    schema: list[tuple[str, int]]
    label_space: LabelSpace
    records: list[FeatureRecord] = field(default_factory=list)
    tasks: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        seen: set[int] = set()
        d = self.feature_dim
        for rec in self.records:
            if rec.features.shape[0] != d:
                raise SchemaMismatchError(
                    f"record {rec.sample_id} has {rec.features.shape[0]} features, pool D={d}"
                )
            if rec.sample_id in seen:
                raise ValidationError(f"sample_id collision: {rec.sample_id}")
            seen.add(rec.sample_id)
            if not 0 <= rec.global_class < self.label_space.class_count:
                raise LabelError(
                    f"record {rec.sample_id}: class index {rec.global_class} outside label space"
                )

    @property
    def feature_dim(self) -> int:
        return sum(dim for _, dim in self.schema)

    @property
    def checksum(self) -> int:
        """CRC32 of the serialized payload; the integrity word stored on disk."""
        return zlib.crc32(self._payload())

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeaturePool):
            return NotImplemented
        if (self.schema != other.schema
                or self.label_space.global_classes != other.label_space.global_classes
                or self.tasks != other.tasks
                or len(self.records) != len(other.records)):
            return False
        for a, b in zip(self.records, other.records):
            if (a.sample_id, a.task_id, a.global_class) != (b.sample_id, b.task_id, b.global_class):
                return False
            if a.features.tobytes() != b.features.tobytes():
                return False
        return True

    def feature_matrix(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.feature_dim), dtype=np.float32)
        return np.stack([rec.features for rec in self.records])

    def class_vector(self) -> np.ndarray:
        return np.asarray([rec.global_class for rec in self.records], dtype=np.int64)

    def by_sample_id(self) -> dict[int, FeatureRecord]:
        return {rec.sample_id: rec for rec in self.records}

    # ------------------------------------------------------------------
    # persistence

    def _payload(self) -> bytes:
        out = io.BytesIO()
        out.write(struct.pack("<I", VERSION))
        out.write(struct.pack("<I", len(self.schema)))
        for name, dim in self.schema:
            encoded = name.encode("utf-8")
            out.write(struct.pack("<H", len(encoded)))
            out.write(encoded)
            out.write(struct.pack("<I", dim))
        classes = self.label_space.global_classes
        out.write(struct.pack("<I", len(classes)))
        for name in classes:
            encoded = name.encode("utf-8")
            out.write(struct.pack("<H", len(encoded)))
            out.write(encoded)
        out.write(struct.pack("<I", len(self.tasks)))
        for task_id in sorted(self.tasks):
            encoded = self.tasks[task_id].encode("utf-8")
            out.write(struct.pack("<IH", task_id, len(encoded)))
            out.write(encoded)
        out.write(struct.pack("<Q", len(self.records)))
        for rec in self.records:
            out.write(struct.pack("<QII", rec.sample_id, rec.task_id, rec.global_class))
            out.write(rec.features.astype("<f4", copy=False).tobytes())
        return out.getvalue()


def fuse(per_backbone: Sequence[np.ndarray], schema: Sequence[tuple[str, int]]) -> np.ndarray:
    """Concatenate per-backbone pooled vectors in schema order."""
    if len(per_backbone) != len(schema):
        raise SchemaMismatchError(
            f"got {len(per_backbone)} backbone vectors for a {len(schema)}-backbone schema"
        )
    parts = []
    for vec, (name, dim) in zip(per_backbone, schema):
        vec = np.asarray(vec, dtype=np.float32).reshape(-1)
        if vec.shape[0] != dim:
            raise SchemaMismatchError(
                f"backbone {name!r}: vector has {vec.shape[0]} dims, schema says {dim}"
            )
        parts.append(vec)
    if not parts:
        raise SchemaMismatchError("empty schema")
    return np.concatenate(parts)


def build_pool(
    extracted: Mapping[str, Sequence[FeatureMaps]],
    labels: Sequence[str],
    task_id: int,
    label_space: LabelSpace,
    dataset_name: str = "",
) -> FeaturePool:
    """Assemble one task's records from per-backbone extraction output.

    ``extracted`` maps backbone name to one FeatureMaps per sample, in the
    same sample order for every backbone; the schema is the mapping order.
    Labels must already be registered for the task in ``label_space``.
    """
    if not extracted:
        raise SchemaMismatchError("build_pool needs at least one backbone")
    schema = [(name, maps[0].pooled.shape[0] if maps else 0)
              for name, maps in extracted.items()]
    n = len(labels)
    for name, maps in extracted.items():
        if len(maps) != n:
            raise ValidationError(
                f"backbone {name!r} produced {len(maps)} outputs for {n} samples"
            )
    if n == 0:
        # Dims are unknowable from zero samples; callers must prime the schema.
        raise_if = [name for name, dim in schema if dim == 0]
        if raise_if:
            raise ValidationError(
                "cannot infer backbone dims from zero samples; "
                "use an explicit schema via FeaturePool directly"
            )

    records = []
    for i in range(n):
        sample_ids = {extracted[name][i].source_id for name, _ in schema}
        if len(sample_ids) != 1:
            raise ValidationError(
                f"sample {i}: backbones disagree on source_id ({sorted(sample_ids)})"
            )
        fused = fuse([extracted[name][i].pooled for name, _ in schema], schema)
        records.append(FeatureRecord(
            sample_id=sample_ids.pop(),
            task_id=task_id,
            global_class=label_space.global_index(task_id, labels[i]),
            features=fused,
        ))
    return FeaturePool(
        schema=schema,
        label_space=label_space,
        records=records,
        tasks={task_id: dataset_name},
    )


def merge_pools(a: FeaturePool, b: FeaturePool, policy: MergePolicy = "merge_by_name") -> FeaturePool:
    """Union two pools over a merged label space; never mutates inputs.

    Classes of ``a`` keep their indices; classes of ``b`` are mapped by the
    policy onto existing classes or appended in their original order.
    """
    if a.schema != b.schema:
        raise SchemaMismatchError(
            f"schema mismatch: {a.schema} vs {b.schema}"
        )
    if isinstance(policy, Mapping):
        known = {c.casefold() for c in a.label_space.global_classes}
        known |= {c.casefold() for c in b.label_space.global_classes}
        for alias, target in policy.items():
            if alias.casefold() not in known:
                raise LabelError(f"alias table references unknown class {alias!r}")

    merged_space = a.label_space.copy()
    remap: dict[int, int] = {}
    for b_idx, name in enumerate(b.label_space.global_classes):
        canonical = _canonical(name, policy)
        idx = merged_space._index_of(canonical)
        if idx is None:
            idx = len(merged_space.global_classes)
            merged_space.global_classes.append(name)
        remap[b_idx] = idx
    for (task_id, local), b_idx in b.label_space.per_task_map.items():
        merged_space.per_task_map[(task_id, local)] = remap[b_idx]

    a_ids = {rec.sample_id for rec in a.records}
    merged_records = list(a.records)
    for rec in b.records:
        if rec.sample_id in a_ids:
            raise ValidationError(f"sample_id collision on merge: {rec.sample_id}")
        merged_records.append(FeatureRecord(
            sample_id=rec.sample_id,
            task_id=rec.task_id,
            global_class=remap[rec.global_class],
            features=rec.features,
        ))

    tasks = dict(a.tasks)
    for task_id, name in b.tasks.items():
        if task_id in tasks and tasks[task_id] != name and name and tasks[task_id]:
            raise ValidationError(
                f"task {task_id} named {tasks[task_id]!r} in one pool and {name!r} in the other"
            )
        tasks[task_id] = tasks.get(task_id) or name
    return FeaturePool(
        schema=list(a.schema),
        label_space=merged_space,
        records=merged_records,
        tasks=tasks,
    )


def add_task(pool: FeaturePool, new_task: FeaturePool,
             policy: MergePolicy = "merge_by_name") -> FeaturePool:
    """Append a freshly built task pool; existing records stay untouched.

    Equivalent to merge_pools(pool, new_task) with the extra guarantee that
    every task id in ``new_task`` is new to ``pool``.
    """
    for task_id in new_task.tasks:
        if task_id in pool.tasks:
            raise ValidationError(f"task id {task_id} already present in the pool")
    return merge_pools(pool, new_task, policy)


def save_pool(pool: FeaturePool, path: str) -> None:
    payload = pool._payload()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_pool(path: str) -> FeaturePool:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise MissingInputError(f"pool file not found: {path}") from None
    if len(blob) < len(MAGIC) + 8:
        raise FormatError(f"{path}: truncated pool file")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    payload, stored_crc = blob[4:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(payload) != stored_crc:
        raise ChecksumError(f"{path}: CRC32 mismatch; file is corrupt")

    view = io.BytesIO(payload)

    def read(fmt: str):
        size = struct.calcsize(fmt)
        chunk = view.read(size)
        if len(chunk) != size:
            raise FormatError(f"{path}: truncated pool file")
        values = struct.unpack(fmt, chunk)
        return values[0] if len(values) == 1 else values

    def read_str(length: int) -> str:
        chunk = view.read(length)
        if len(chunk) != length:
            raise FormatError(f"{path}: truncated pool file")
        return chunk.decode("utf-8")

    version = read("<I")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported pool version {version}")
    schema = []
    for _ in range(read("<I")):
        name = read_str(read("<H"))
        schema.append((name, read("<I")))
    classes = [read_str(read("<H")) for _ in range(read("<I"))]
    tasks = {}
    for _ in range(read("<I")):
        task_id, name_len = read("<IH")
        tasks[task_id] = read_str(name_len)
    d = sum(dim for _, dim in schema)
    records = []
    space = LabelSpace(global_classes=classes)
    for _ in range(read("<Q")):
        sample_id, task_id, global_class = read("<QII")
        feat = np.frombuffer(view.read(4 * d), dtype="<f4")
        if feat.shape[0] != d:
            raise FormatError(f"{path}: truncated record payload")
        if global_class >= len(classes):
            raise FormatError(f"{path}: record class index {global_class} out of range")
        space.per_task_map.setdefault(
            (task_id, classes[global_class].casefold()), global_class
        )
        records.append(FeatureRecord(
            sample_id=sample_id, task_id=task_id,
            global_class=global_class, features=feat.copy(),
        ))
    if view.read(1):
        raise FormatError(f"{path}: trailing bytes after last record")
    return FeaturePool(schema=schema, label_space=space, records=records, tasks=tasks)
