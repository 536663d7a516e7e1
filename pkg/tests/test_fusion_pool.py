import numpy as np
import pytest

from fusionpool.errors import ChecksumError, FormatError, LabelError, SchemaMismatchError, ValidationError
from fusionpool.extraction import BackboneSpec, SyntheticExtractor
from fusionpool.fusion_pool import (
    FeaturePool,
    FeatureRecord,
    LabelSpace,
    add_task,
    build_pool,
    fuse,
    load_pool,
    merge_pools,
    save_pool,
)
from fusionpool.ingest import FrameTensor

from conftest import clustered_pool


class TestFuse:
    def test_concatenation(self):
        schema = [("a", 2), ("b", 1), ("c", 2)]
        out = fuse([np.array([1.0, 2.0]), np.array([3.0]), np.array([4.0, 5.0])], schema)
        assert np.array_equal(out, np.array([1, 2, 3, 4, 5], dtype=np.float32))

    def test_single_backbone_identity(self):
        vec = np.array([1.5, -2.5, 3.0], dtype=np.float32)
        assert np.array_equal(fuse([vec], [("only", 3)]), vec)

    def test_four_backbone_paper_dims(self):
        # Published pooled widths of the four backbones sum to 6912.
        dims = [("mobilenetv2", 1280), ("inceptionv3", 2048),
                ("inceptionresnetv2", 1536), ("xception", 2048)]
        vectors = [np.zeros(d, dtype=np.float32) for _, d in dims]
        assert fuse(vectors, dims).shape[0] == 6912

    def test_dim_mismatch(self):
        with pytest.raises(SchemaMismatchError):
            fuse([np.zeros(3)], [("a", 4)])

    def test_count_mismatch(self):
        with pytest.raises(SchemaMismatchError):
            fuse([np.zeros(3)], [("a", 3), ("b", 3)])

    def test_injective_for_fixed_schema(self, rng):
        schema = [("a", 3), ("b", 2)]
        seen = {}
        for _ in range(200):
            parts = (rng.standard_normal(3).astype(np.float32),
                     rng.standard_normal(2).astype(np.float32))
            key = fuse(parts, schema).tobytes()
            flat = (parts[0].tobytes(), parts[1].tobytes())
            assert seen.setdefault(key, flat) == flat


def extract_for(seeds, frames):
    out = {}
    for seed in seeds:
        spec = BackboneSpec.synthetic(seed, feature_dim=4, map_size=(3, 3))
        out[spec.name] = SyntheticExtractor(spec, seed).extract(frames)
    return out


def make_frames(rng, n, start_id=0):
    return [
        FrameTensor(values=rng.uniform(-1, 1, size=(32, 32, 3)).astype(np.float32),
                    source_id=start_id + i)
        for i in range(n)
    ]


class TestBuildPool:
    def test_two_backbones_ten_samples(self, rng):
        frames = make_frames(rng, 10)
        extracted = extract_for([1, 2], frames)
        space = LabelSpace()
        space.register_task(0, ["normal", "violence"])
        labels = ["normal"] * 5 + ["violence"] * 5
        pool = build_pool(extracted, labels, 0, space, dataset_name="demo")
        assert len(pool) == 10
        assert pool.feature_dim == 8
        assert pool.tasks == {0: "demo"}

    def test_unknown_label(self, rng):
        frames = make_frames(rng, 1)
        extracted = extract_for([1], frames)
        space = LabelSpace()
        space.register_task(0, ["normal"])
        with pytest.raises(LabelError, match="arson"):
            build_pool(extracted, ["arson"], 0, space)

    def test_missing_backbone_output(self, rng):
        frames = make_frames(rng, 3)
        extracted = extract_for([1], frames)
        extracted["synthetic1"] = extracted["synthetic1"][:2]
        space = LabelSpace()
        space.register_task(0, ["normal"])
        with pytest.raises(ValidationError, match="2 outputs for 3 samples"):
            build_pool(extracted, ["normal"] * 3, 0, space)

    def test_zero_samples_empty_pool(self):
        space = LabelSpace()
        space.register_task(0, ["normal"])
        pool = FeaturePool(schema=[("synthetic1", 4)], label_space=space,
                           records=[], tasks={0: "demo"})
        assert len(pool) == 0
        assert pool.feature_dim == 4


class TestMergePools:
    def test_ucf_rlvs_shape(self, rng):
        ucf = clustered_pool(rng, ["normal", "shoplifting"], 5, 6, task_id=0)
        rlvs = clustered_pool(rng, ["normal", "violence"], 5, 6, task_id=1, start_id=1000)
        merged = merge_pools(ucf, rlvs)
        assert merged.label_space.global_classes == ["normal", "shoplifting", "violence"]
        assert len(merged) == 20

    def test_counts_add(self, rng):
        a = clustered_pool(rng, ["n", "x"], 50, 4, task_id=0)
        b = clustered_pool(rng, ["n", "y"], 100, 4, task_id=1, start_id=10_000)
        assert len(merge_pools(a, b)) == 300

    def test_merge_with_empty(self, rng):
        a = clustered_pool(rng, ["n", "x"], 5, 4, task_id=0)
        empty_space = LabelSpace()
        empty_space.register_task(9, ["n", "zz"])
        empty = FeaturePool(schema=list(a.schema), label_space=empty_space,
                            records=[], tasks={9: "other"})
        merged = merge_pools(a, empty)
        assert [
            (r.sample_id, r.task_id, r.global_class, r.features.tobytes())
            for r in merged.records
        ] == [
            (r.sample_id, r.task_id, r.global_class, r.features.tobytes())
            for r in a.records
        ]
        assert merged.label_space.global_classes == ["n", "x", "zz"]

    def test_case_folded_name_merge(self, rng):
        a = clustered_pool(rng, ["Normal", "x"], 2, 4, task_id=0)
        b = clustered_pool(rng, ["NORMAL", "y"], 2, 4, task_id=1, start_id=100)
        merged = merge_pools(a, b)
        assert merged.label_space.class_count == 3
        # b's NORMAL records land on a's Normal index.
        assert {r.global_class for r in merged.records if r.task_id == 1} == {0, 2}

    def test_alias_table(self, rng):
        a = clustered_pool(rng, ["normal", "violence"], 2, 4, task_id=0)
        b = clustered_pool(rng, ["normal", "fight"], 2, 4, task_id=1, start_id=100)
        merged = merge_pools(a, b, policy={"fight": "violence"})
        assert merged.label_space.global_classes == ["normal", "violence"]

    def test_alias_unknown_class(self, rng):
        a = clustered_pool(rng, ["normal"], 2, 4, task_id=0)
        b = clustered_pool(rng, ["violence"], 2, 4, task_id=1, start_id=100)
        with pytest.raises(LabelError, match="ghost"):
            merge_pools(a, b, policy={"ghost": "violence"})

    def test_schema_mismatch(self, rng):
        a = clustered_pool(rng, ["n", "x"], 2, 4)
        b = clustered_pool(rng, ["n", "x"], 2, 5, task_id=1, start_id=100)
        with pytest.raises(SchemaMismatchError):
            merge_pools(a, b)

    def test_sample_collision(self, rng):
        a = clustered_pool(rng, ["n", "x"], 2, 4, task_id=0)
        b = clustered_pool(rng, ["n", "x"], 2, 4, task_id=1, start_id=0)
        with pytest.raises(ValidationError, match="collision"):
            merge_pools(a, b)

    def test_inputs_not_mutated(self, rng):
        a = clustered_pool(rng, ["n", "x"], 3, 4, task_id=0)
        b = clustered_pool(rng, ["n", "y"], 3, 4, task_id=1, start_id=100)
        a_bytes = [r.features.tobytes() for r in a.records]
        a_classes = list(a.label_space.global_classes)
        merge_pools(a, b)
        assert [r.features.tobytes() for r in a.records] == a_bytes
        assert a.label_space.global_classes == a_classes

    def test_associative_up_to_relabeling(self, rng):
        a = clustered_pool(rng, ["n", "x"], 3, 4, task_id=0)
        b = clustered_pool(rng, ["n", "y"], 3, 4, task_id=1, start_id=100)
        c = clustered_pool(rng, ["n", "z"], 3, 4, task_id=2, start_id=200)
        left = merge_pools(merge_pools(a, b), c)
        right = merge_pools(a, merge_pools(b, c))
        assert sorted(n.casefold() for n in left.label_space.global_classes) == \
               sorted(n.casefold() for n in right.label_space.global_classes)
        left_by_id = left.by_sample_id()
        right_by_id = right.by_sample_id()
        assert left_by_id.keys() == right_by_id.keys()
        for sid, lrec in left_by_id.items():
            rrec = right_by_id[sid]
            assert lrec.features.tobytes() == rrec.features.tobytes()
            assert (left.label_space.global_classes[lrec.global_class].casefold()
                    == right.label_space.global_classes[rrec.global_class].casefold())


class TestAddTask:
    def test_equivalent_to_from_scratch(self, rng):
        base_a = clustered_pool(rng, ["normal", "shoplifting"], 10, 6, task_id=0)
        base_b = clustered_pool(rng, ["normal", "violence"], 10, 6, task_id=1, start_id=1000)
        pool2 = merge_pools(base_a, base_b)
        newtask = clustered_pool(rng, ["normal", "vandalism"], 25, 6, task_id=2, start_id=2000)

        before = [(r.sample_id, r.features.tobytes()) for r in pool2.records]
        grown = add_task(pool2, newtask)
        # Existing records byte-identical.
        assert [(r.sample_id, r.features.tobytes()) for r in grown.records[:len(before)]] == before

        scratch = merge_pools(merge_pools(base_a, base_b), newtask)
        assert grown == scratch

    def test_zero_record_task_registers_task_only(self, rng):
        pool = clustered_pool(rng, ["n", "x"], 3, 4, task_id=0)
        space = LabelSpace()
        space.register_task(5, ["n"])
        empty = FeaturePool(schema=list(pool.schema), label_space=space,
                            records=[], tasks={5: "late"})
        grown = add_task(pool, empty)
        assert len(grown) == len(pool)
        assert grown.tasks == {0: "synthetic", 5: "late"}

    def test_task_reuse_rejected(self, rng):
        pool = clustered_pool(rng, ["n", "x"], 3, 4, task_id=0)
        again = clustered_pool(rng, ["n", "y"], 3, 4, task_id=0, start_id=100)
        with pytest.raises(ValidationError, match="task id 0"):
            add_task(pool, again)


class TestPersistence:
    def test_round_trip_identity(self, rng, tmp_path):
        pool = clustered_pool(rng, ["Normal", "shoplifting", "violence"], 3, 5)
        path = str(tmp_path / "pool.fpl")
        save_pool(pool, path)
        loaded = load_pool(path)
        assert loaded == pool
        # Byte-for-byte stable over a second round trip.
        path2 = str(tmp_path / "pool2.fpl")
        save_pool(loaded, path2)
        assert open(path, "rb").read() == open(path2, "rb").read()

    def test_per_task_map_reconstructed(self, rng, tmp_path):
        pool = clustered_pool(rng, ["normal", "violence"], 2, 3, task_id=4)
        path = str(tmp_path / "pool.fpl")
        save_pool(pool, path)
        loaded = load_pool(path)
        assert loaded.label_space.global_index(4, "violence") == 1

    def test_flipped_payload_byte_detected(self, rng, tmp_path):
        pool = clustered_pool(rng, ["n", "x"], 3, 4)
        path = tmp_path / "pool.fpl"
        save_pool(pool, str(path))
        blob = bytearray(path.read_bytes())
        blob[20] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            load_pool(str(path))

    def test_every_single_byte_flip_is_detected(self, rng, tmp_path):
        pool = clustered_pool(rng, ["n", "x"], 1, 2)
        path = tmp_path / "pool.fpl"
        save_pool(pool, str(path))
        blob = path.read_bytes()
        for offset in range(4, len(blob) - 4):  # payload region
            corrupted = bytearray(blob)
            corrupted[offset] ^= 0xFF
            path.write_bytes(bytes(corrupted))
            with pytest.raises(ChecksumError):
                load_pool(str(path))

    def test_bad_magic(self, rng, tmp_path):
        pool = clustered_pool(rng, ["n", "x"], 1, 2)
        path = tmp_path / "pool.fpl"
        save_pool(pool, str(path))
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            load_pool(str(path))

    def test_truncated_file(self, rng, tmp_path):
        pool = clustered_pool(rng, ["n", "x"], 2, 4)
        path = tmp_path / "pool.fpl"
        save_pool(pool, str(path))
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises((FormatError, ChecksumError)):
            load_pool(str(path))

    def test_checksum_property_matches_file(self, rng, tmp_path):
        pool = clustered_pool(rng, ["n", "x"], 2, 4)
        path = tmp_path / "pool.fpl"
        save_pool(pool, str(path))
        import struct
        stored = struct.unpack("<I", path.read_bytes()[-4:])[0]
        assert stored == pool.checksum


class TestIncrementalEqualsBatch:
    def test_random_partitions(self, rng):
        # Three tasks; any add_task order must equal the from-scratch pool.
        tasks = [
            clustered_pool(rng, ["normal", "shoplifting"], 8, 5, task_id=0, start_id=0),
            clustered_pool(rng, ["normal", "violence"], 8, 5, task_id=1, start_id=1000),
            clustered_pool(rng, ["normal", "vandalism"], 8, 5, task_id=2, start_id=2000),
        ]
        batch = merge_pools(merge_pools(tasks[0], tasks[1]), tasks[2])
        for _ in range(5):
            order = rng.permutation(3)
            incremental = tasks[order[0]]
            for idx in order[1:]:
                incremental = add_task(incremental, tasks[idx])
            assert incremental.by_sample_id().keys() == batch.by_sample_id().keys()
            inc_by_id = incremental.by_sample_id()
            for sid, brec in batch.by_sample_id().items():
                irec = inc_by_id[sid]
                assert irec.features.tobytes() == brec.features.tobytes()
                assert (incremental.label_space.global_classes[irec.global_class].casefold()
                        == batch.label_space.global_classes[brec.global_class].casefold())
