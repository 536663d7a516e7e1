"""Deep feature fusion pools for multi-task video anomaly detection."""

__version__ = "0.1.0"

from .errors import FusionPoolError
from .extraction import BackboneSpec, FeatureMaps, extract, load_backbone, synthetic_extract
from .fusion_pool import (
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
from .heads import HeadConfig, TrainedHead, gradient_check, load_head, predict, predict_scores, save_head, train
from .evaluation import ConfusionMatrix, MetricsReport, confusion, evaluate, metrics
from .explain import Embedding2D, Heatmap, TsneConfig, grad_cam, render_heatmap, render_scatter, tsne
from .ingest import DatasetManifest, FrameTensor, load_manifest, preprocess_frame, sample_frames

__all__ = [
    "__version__",
    "FusionPoolError",
    "BackboneSpec", "FeatureMaps", "extract", "load_backbone", "synthetic_extract",
    "FeaturePool", "FeatureRecord", "LabelSpace",
    "add_task", "build_pool", "fuse", "load_pool", "merge_pools", "save_pool",
    "HeadConfig", "TrainedHead", "gradient_check", "load_head", "predict",
    "predict_scores", "save_head", "train",
    "ConfusionMatrix", "MetricsReport", "confusion", "evaluate", "metrics",
    "Embedding2D", "Heatmap", "TsneConfig", "grad_cam", "render_heatmap",
    "render_scatter", "tsne",
    "DatasetManifest", "FrameTensor", "load_manifest", "preprocess_frame", "sample_frames",
]
