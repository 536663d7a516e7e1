import numpy as np
import pytest

from fusionpool.fusion_pool import FeaturePool, FeatureRecord, LabelSpace


def clustered_pool(rng, class_names, per_class, dim, separation=6.0,
                   task_id=0, start_id=0, schema=None):
    """Pool with one Gaussian cluster per class; cluster means separation
    sigma apart along seeded random directions, unit within-cluster sigma."""
    space = LabelSpace()
    space.register_task(task_id, class_names)
    centers = rng.standard_normal((len(class_names), dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= separation
    records = []
    sample_id = start_id
    for cls_idx in range(len(class_names)):
        for _ in range(per_class):
            features = centers[cls_idx] + rng.standard_normal(dim)
            records.append(FeatureRecord(
                sample_id=sample_id, task_id=task_id,
                global_class=cls_idx, features=features.astype(np.float32),
            ))
            sample_id += 1
    return FeaturePool(
        schema=schema or [("synthetic", dim)],
        label_space=space,
        records=records,
        tasks={task_id: "synthetic"},
    )


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))
