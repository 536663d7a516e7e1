"""Explainability: Grad-CAM heatmaps and t-SNE embeddings of pool features.

For a linear head over GAP features the class score is linear in every map
cell, so the gradient-averaged map importances reduce analytically to the
head's class weights rescaled by the standardizer; the heatmap is the
rectified, weighted sum of the backbone's final-stage maps.  Non-linear
heads (KNN, AdaBoost, NB) have no defined gradient here and are rejected.

t-SNE is implemented from scratch: per-point Gaussian bandwidths found by
bisection to match the target perplexity, symmetrized affinities, Student-t
low-dimensional kernel, and gradient descent with momentum and early
exaggeration.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .errors import UnsupportedHeadError, ValidationError
from .extraction import FeatureMaps
from .heads import LINEAR_KINDS, TrainedHead
from .ingest import resize_bilinear


@dataclass
class Heatmap:
    grid: np.ndarray        # (h, w) floats, >= 0, max 1 unless all-zero
    class_index: int
    source_id: int
    backbone: str

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ValidationError(f"heatmap grid must be 2-D, got {self.grid.shape}")
        if (self.grid < 0).any():
            raise ValidationError("heatmap values must be non-negative")
        peak = self.grid.max() if self.grid.size else 0.0
        if peak > 0 and abs(peak - 1.0) > 1e-9:
            raise ValidationError("non-zero heatmap must be normalized to max 1")


def _backbone_slice(schema: Sequence[tuple[str, int]], backbone: str) -> tuple[int, int]:
    offset = 0
    for name, dim in schema:
        if name == backbone:
            return offset, dim
        offset += dim
    raise ValidationError(f"backbone {backbone!r} is not in the schema {schema}")


def grad_cam(maps: FeatureMaps, head: TrainedHead, class_index: int,
             backbone: str, schema: Sequence[tuple[str, int]]) -> Heatmap:
    """Rectified, weight-scaled sum of one backbone's feature maps.

    The class score is w . (fused - mean)/std + b, so d(score)/d(pooled_k)
    = w_k / std_k for the backbone's K coordinates; averaging the per-cell
    gradients (each w_k / (std_k h w)) reproduces those importances exactly,
    which is why this analytic form coincides with the autodiff procedure.
    """
    if head.kind not in LINEAR_KINDS:
        raise UnsupportedHeadError(
            f"grad_cam needs a linear head (one of {LINEAR_KINDS}), got {head.kind!r}"
        )
    if not 0 <= class_index < head.class_count:
        raise ValidationError(f"class index {class_index} outside [0, {head.class_count})")
    offset, k = _backbone_slice(schema, backbone)
    if maps.maps.shape[0] != k:
        raise ValidationError(
            f"maps have {maps.maps.shape[0]} channels but backbone {backbone!r} "
            f"occupies {k} fused coordinates"
        )
    weights = head.params["w"][class_index, offset:offset + k] / head.std[offset:offset + k]
    heat = np.einsum("k,khw->hw", weights, maps.maps.astype(np.float64))
    heat = np.maximum(heat, 0.0)
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    return Heatmap(grid=heat, class_index=class_index,
                   source_id=maps.source_id, backbone=backbone)


# ---------------------------------------------------------------------------
# t-SNE


@dataclass
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    seed: int = 0
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    learning_rate: float = 200.0
    momentum_start: float = 0.5
    momentum_final: float = 0.8
    momentum_switch: int = 250


@dataclass
class Embedding2D:
    points: np.ndarray           # (N, 2)
    labels: np.ndarray | None
    final_kl: float
    config: TsneConfig
    kl_at_exaggeration_end: float = float("nan")
    max_entropy_error: float = float("nan")

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if not np.all(np.isfinite(self.points)):
            raise ValidationError("embedding contains non-finite coordinates")
        if self.final_kl < 0:
            raise ValidationError("KL divergence cannot be negative")


def _conditional_affinities(d2: np.ndarray, perplexity: float,
                            tol: float = 1e-5, max_steps: int = 50):
    """Per-row Gaussian affinities with bandwidths bisected to the target
    entropy log(perplexity); returns (P_conditional, max entropy error)."""
    n = d2.shape[0]
    target = np.log(perplexity)
    p = np.zeros((n, n), dtype=np.float64)
    worst = 0.0
    for i in range(n):
        row = np.delete(d2[i], i)
        beta, beta_lo, beta_hi = 1.0, 0.0, np.inf
        probs = np.full(n - 1, 1.0 / (n - 1))
        err = np.inf
        for _ in range(max_steps):
            logits = -row * beta
            logits -= logits.max()
            expd = np.exp(logits)
            probs = expd / expd.sum()
            entropy = float(-(probs * np.log(np.maximum(probs, 1e-300))).sum())
            err = entropy - target
            if abs(err) <= tol:
                break
            if err > 0:          # too spread out -> sharpen
                beta_lo = beta
                beta = beta * 2.0 if beta_hi == np.inf else (beta + beta_hi) / 2.0
            else:
                beta_hi = beta
                beta = beta / 2.0 if beta_lo == 0.0 else (beta + beta_lo) / 2.0
        worst = max(worst, abs(err))
        p[i, np.arange(n) != i] = probs
    return p, worst


def _kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / np.maximum(q[mask], 1e-12))).sum())


def _student_q(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((y[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
    inv = 1.0 / (1.0 + d2)
    np.fill_diagonal(inv, 0.0)
    q = inv / inv.sum()
    return q, inv


def tsne(features: np.ndarray, config: TsneConfig | None = None,
         labels: np.ndarray | None = None) -> Embedding2D:
    """Embed N x D features into 2-D; deterministic for a given seed."""
    config = config or TsneConfig()
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValidationError(f"features must be N x D with D >= 1, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("t-SNE input contains non-finite values")
    n = x.shape[0]
    if n < 4:
        raise ValidationError(f"t-SNE needs at least 4 points, got {n}")
    if config.perplexity >= (n - 1) / 3.0:
        raise ValidationError(
            f"perplexity {config.perplexity} infeasible for {n} points "
            f"(needs perplexity < (N-1)/3 = {(n - 1) / 3.0:.2f})"
        )

    # Same per-dimension standardization the heads use, so no backbone's
    # scale dominates the pairwise distances.
    std = x.std(axis=0)
    x = (x - x.mean(axis=0)) / np.where(std > 0, std, 1.0)

    sq_norms = (x * x).sum(axis=1)
    d2 = np.maximum(sq_norms[:, None] + sq_norms[None, :] - 2.0 * x @ x.T, 0.0)
    cond, worst_entropy = _conditional_affinities(d2, config.perplexity)
    p = (cond + cond.T) / (2.0 * n)
    p = np.maximum(p, 0.0)

    rng = np.random.Generator(np.random.PCG64(config.seed))
    y = 1e-4 * rng.standard_normal((n, 2))
    velocity = np.zeros_like(y)
    kl_snapshot = float("nan")

    for it in range(1, config.iterations + 1):
        p_eff = p * config.early_exaggeration if it <= config.exaggeration_iters else p
        q, inv = _student_q(y)
        coeff = (p_eff - q) * inv
        grad = 4.0 * ((coeff.sum(axis=1)[:, None]) * y - coeff @ y)
        momentum = (config.momentum_start if it < config.momentum_switch
                    else config.momentum_final)
        velocity = momentum * velocity - config.learning_rate * grad
        y = y + velocity
        y = y - y.mean(axis=0)
        if it == config.exaggeration_iters:
            q_true, _ = _student_q(y)
            kl_snapshot = _kl_divergence(p, q_true)

    q_final, _ = _student_q(y)
    final_kl = _kl_divergence(p, q_final)
    return Embedding2D(
        points=y,
        labels=None if labels is None else np.asarray(labels, dtype=np.int64),
        final_kl=final_kl,
        config=config,
        kl_at_exaggeration_end=kl_snapshot,
        max_entropy_error=worst_entropy,
    )


def embedding_to_csv(embedding: Embedding2D, sample_ids: Sequence[int],
                     class_names: Sequence[str], path: str) -> None:
    """Write `sample_id,x,y,class_name` rows for every embedded point."""
    n = embedding.points.shape[0]
    if len(sample_ids) != n:
        raise ValidationError(f"{len(sample_ids)} sample ids for {n} points")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "x", "y", "class_name"])
        for i in range(n):
            label = int(embedding.labels[i]) if embedding.labels is not None else 0
            writer.writerow([
                sample_ids[i],
                f"{embedding.points[i, 0]:.9g}",
                f"{embedding.points[i, 1]:.9g}",
                class_names[label] if label < len(class_names) else str(label),
            ])


# ---------------------------------------------------------------------------
# rendering

# Fixed blue->cyan->green->yellow->red ramp; anchors in [0, 1].
_RAMP_STOPS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
_RAMP_COLORS = np.array([
    [0, 0, 131],
    [0, 160, 255],
    [60, 255, 60],
    [255, 200, 0],
    [200, 0, 0],
], dtype=np.float64)


def _apply_ramp(values: np.ndarray) -> np.ndarray:
    flat = np.clip(values, 0.0, 1.0).ravel()
    rgb = np.stack(
        [np.interp(flat, _RAMP_STOPS, _RAMP_COLORS[:, ch]) for ch in range(3)],
        axis=1,
    )
    return rgb.reshape(values.shape + (3,))


def render_heatmap(heatmap: Heatmap, base_frame: np.ndarray | None,
                   path: str, default_size: int = 224) -> None:
    """Upsample, colorize, optionally alpha-blend over the frame, write PNG."""
    if base_frame is not None:
        base = np.asarray(base_frame)
        if base.ndim != 3 or base.shape[2] != 3:
            raise ValidationError(f"base frame must be HxWx3, got {base.shape}")
        out_h, out_w = base.shape[0], base.shape[1]
    else:
        out_h = out_w = default_size
    up = resize_bilinear(heatmap.grid, out_h, out_w)
    colored = _apply_ramp(up)
    if base_frame is not None:
        blended = 0.4 * colored + 0.6 * np.asarray(base_frame, dtype=np.float64)
    else:
        blended = colored
    image = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


def render_scatter(embedding: Embedding2D, path: str,
                   class_names: Sequence[str] | None = None,
                   title: str = "feature embedding") -> None:
    """One marker per point, colored by class, with a class-name legend."""
    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    points = embedding.points
    labels = embedding.labels
    if labels is None or points.shape[0] == 0:
        ax.scatter(points[:, 0], points[:, 1], s=14, c="tab:gray")
    else:
        for idx in np.unique(labels):
            sel = labels == idx
            name = (class_names[idx] if class_names is not None and idx < len(class_names)
                    else f"class {idx}")
            ax.scatter(points[sel, 0], points[sel, 1], s=14,
                       color=f"C{int(idx) % 10}", label=name)
        ax.legend(loc="best", fontsize=8)
    ax.set_title(title)
    ax.set_xlabel("dim 1")
    ax.set_ylabel("dim 2")
    fig.tight_layout()
    fig.savefig(path, dpi=150, metadata={"Software": "fusionpool"})
    plt.close(fig)
