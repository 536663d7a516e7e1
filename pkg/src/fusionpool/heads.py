"""The six classifier heads trained on fused feature pools.

KNN, logistic regression (one-vs-rest), SoftMax (multinomial logistic),
linear SVM (squared hinge, one-vs-rest), AdaBoost over depth-1 stumps
(SAMME), and Gaussian Naive Bayes.  Every head standardizes features with
train-set statistics, is deterministic given (pool, config), and breaks
prediction ties toward the lowest class index.

Binary logistic regression is fitted through the two-class multinomial path,
which makes LogReg and SoftMax provably identical on two-class pools; they
diverge only for three or more classes (OvR vs multinomial).
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ChecksumError,
    FormatError,
    MissingInputError,
    UnsupportedHeadError,
    ValidationError,
)
from .fusion_pool import FeaturePool

HEAD_KINDS = ("knn", "logreg", "softmax", "svm", "adaboost", "nb")
LINEAR_KINDS = ("logreg", "softmax", "svm")

HEAD_MAGIC = b"FPH1"
HEAD_VERSION = 1
_KIND_TAGS = {kind: i for i, kind in enumerate(HEAD_KINDS)}


@dataclass
class HeadConfig:
    kind: str
    k: int = 5                      # KNN neighbours
    learning_rate: float = 0.1      # gradient-descent heads
    l2: float = 1e-4
    epochs: int = 500
    rounds: int = 100               # AdaBoost stages
    variance_floor_scale: float = 1e-9   # NB: floor = scale * max feature variance
    seed: int = 0

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValidationError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if self.learning_rate <= 0 or self.epochs < 1 or self.rounds < 1:
            raise ValidationError("learning_rate, epochs and rounds must be positive")
        if self.l2 < 0 or self.variance_floor_scale < 0:
            raise ValidationError("l2 and variance_floor_scale must be >= 0")


@dataclass
class TrainedHead:
    kind: str
    class_count: int
    class_names: list[str]
    mean: np.ndarray            # (D,) standardizer mean
    std: np.ndarray             # (D,) standardizer std, all > 0
    params: dict
    seed: int = 0
    warning: str = ""
    diagnostics: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def feature_dim(self) -> int:
        return self.mean.shape[0]

    def standardize(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1:
            features = features[None, :]
        if features.shape[1] != self.feature_dim:
            raise ValidationError(
                f"feature dim {features.shape[1]} does not match head dim {self.feature_dim}"
            )
        return (features - self.mean) / self.std

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrainedHead):
            return NotImplemented
        return serialize_head(self) == serialize_head(other)


def _fit_standardizer(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)  # constant dims pass through unscaled
    return mean, std


def _one_hot(y: np.ndarray, c: int) -> np.ndarray:
    out = np.zeros((y.shape[0], c), dtype=np.float64)
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_gradient(kind: str, w: np.ndarray, b: np.ndarray, x: np.ndarray,
                      y: np.ndarray, class_count: int, l2: float):
    """Full-batch loss and analytic gradients for the differentiable heads.

    kind "softmax": mean multinomial cross-entropy; "logreg": mean per-class
    sigmoid cross-entropy (one-vs-rest); "svm": mean squared hinge, one-vs-rest
    with +/-1 targets.  All add (l2/2)*||W||^2; biases are unregularized.
    With zero samples the data term vanishes and the gradient is exactly l2*W.
    """
    n = x.shape[0]
    if n == 0:
        return 0.5 * l2 * float((w * w).sum()), l2 * w, np.zeros_like(b)
    scores = x @ w.T + b
    y_hot = _one_hot(y, class_count)
    if kind == "softmax":
        shifted = scores - scores.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        log_p = shifted - log_z[:, None]
        loss = -log_p[np.arange(n), y].mean()
        delta = (np.exp(log_p) - y_hot) / n
    elif kind == "logreg":
        # log(1+exp(-|s|)) form keeps the per-class BCE stable for large |s|.
        softplus = np.logaddexp(0.0, -np.abs(scores))
        loss = (softplus + np.maximum(scores, 0.0) - scores * y_hot).sum() / n
        p = 1.0 / (1.0 + np.exp(-scores))
        delta = (p - y_hot) / n
    elif kind == "svm":
        t = 2.0 * y_hot - 1.0
        violation = np.maximum(0.0, 1.0 - t * scores)
        loss = (violation ** 2).sum() / n
        delta = (-2.0 * t * violation) / n
    else:
        raise UnsupportedHeadError(f"head kind {kind!r} has no differentiable loss")
    grad_w = delta.T @ x + l2 * w
    grad_b = delta.sum(axis=0)
    loss = float(loss + 0.5 * l2 * (w * w).sum())
    return loss, grad_w, grad_b


def _train_linear(kind: str, x: np.ndarray, y: np.ndarray, c: int,
                  config: HeadConfig) -> tuple[np.ndarray, np.ndarray, list[float], str]:
    # Binary logistic regression == two-class multinomial regression; sharing
    # the path makes SoftMax and LogReg bit-identical on two-class pools.
    loss_kind = "softmax" if (kind == "logreg" and c == 2) else kind
    w = np.zeros((c, x.shape[1]), dtype=np.float64)
    b = np.zeros(c, dtype=np.float64)
    history = []
    warning = ""
    for _ in range(config.epochs):
        loss, grad_w, grad_b = loss_and_gradient(loss_kind, w, b, x, y, c, config.l2)
        history.append(loss)
        w -= config.learning_rate * grad_w
        b -= config.learning_rate * grad_b
    final_loss, grad_w, grad_b = loss_and_gradient(loss_kind, w, b, x, y, c, config.l2)
    history.append(final_loss)
    grad_norm = float(np.sqrt((grad_w ** 2).sum() + (grad_b ** 2).sum()))
    if grad_norm > 1e-3:
        warning = f"optimizer did not converge: final gradient norm {grad_norm:.3e}"
    increases = np.diff(history) > 1e-9
    if increases.any():
        epoch = int(np.argmax(increases))
        warning = (warning + "; " if warning else "") + f"loss increased at epoch {epoch}"
    return w, b, history, warning


def _train_adaboost(x: np.ndarray, y: np.ndarray, c: int, config: HeadConfig):
    n, d = x.shape
    weights = np.full(n, 1.0 / n)
    order = [np.argsort(x[:, j], kind="stable") for j in range(d)]
    features, thresholds, lefts, rights, alphas, epsilons = [], [], [], [], [], []
    warning = ""
    for _ in range(config.rounds):
        best = None  # (error, feature, threshold, left_class, right_class)
        for j in range(d):
            idx = order[j]
            xv = x[idx, j]
            lw = weights[idx]
            cum = np.zeros((n + 1, c), dtype=np.float64)
            np.add.at(cum, (np.arange(1, n + 1), y[idx]), lw)
            cum = np.cumsum(cum, axis=0)          # cum[i] = class weights of first i
            total = cum[-1]
            splits = np.nonzero(xv[:-1] < xv[1:])[0]  # split after position i
            if splits.size == 0:
                continue
            left = cum[splits + 1]
            right = total - left
            err = weights.sum() - left.max(axis=1) - right.max(axis=1)
            pos = int(np.argmin(err))
            if best is None or err[pos] < best[0] - 1e-15:
                i = splits[pos]
                best = (
                    float(err[pos]), j, float((xv[i] + xv[i + 1]) / 2.0),
                    int(np.argmax(left[pos])), int(np.argmax(right[pos])),
                )
        if best is None:
            warning = "no splittable feature; data is constant"
            break
        eps, j, thr, cl, cr = best
        eps = min(max(eps, 0.0), 1.0)
        if eps >= 1.0 - 1.0 / c - 1e-12:
            if not features:
                warning = "weak learner no better than chance on round 1"
            break
        eps_safe = max(eps, 1e-12)
        alpha = float(np.log((1.0 - eps_safe) / eps_safe) + np.log(c - 1.0))
        features.append(j)
        thresholds.append(thr)
        lefts.append(cl)
        rights.append(cr)
        alphas.append(alpha)
        epsilons.append(eps)
        if eps <= 1e-12:
            break  # perfect stump; further rounds cannot help
        pred = np.where(x[:, j] <= thr, cl, cr)
        weights = weights * np.exp(alpha * (pred != y))
        weights = weights / weights.sum()
    params = {
        "features": np.asarray(features, dtype=np.int64),
        "thresholds": np.asarray(thresholds, dtype=np.float64),
        "left_classes": np.asarray(lefts, dtype=np.int64),
        "right_classes": np.asarray(rights, dtype=np.int64),
        "alphas": np.asarray(alphas, dtype=np.float64),
        "epsilons": np.asarray(epsilons, dtype=np.float64),
    }
    return params, warning


def train(pool: FeaturePool, config: HeadConfig) -> TrainedHead:
    """Fit one head on every record of the pool."""
    if len(pool) == 0:
        raise ValidationError("cannot train on an empty pool")
    x_raw = pool.feature_matrix().astype(np.float64)
    y = pool.class_vector()
    c = pool.label_space.class_count
    present = np.unique(y)
    if present.size < 2:
        raise ValidationError(
            f"training needs at least 2 classes with records, found {present.size}"
        )
    mean, std = _fit_standardizer(x_raw)
    x = (x_raw - mean) / std
    warning = ""
    diagnostics: dict = {}

    if config.kind == "knn":
        params = {
            "k": config.k,
            "metric": "euclidean",
            "train_x": x.copy(),
            "train_y": y.copy(),
        }
    elif config.kind in LINEAR_KINDS:
        w, b, history, warning = _train_linear(config.kind, x, y, c, config)
        params = {"w": w, "b": b}
        diagnostics["loss_history"] = history
    elif config.kind == "adaboost":
        params, warning = _train_adaboost(x, y, c, config)
    elif config.kind == "nb":
        max_var = float(x.var(axis=0).max())
        if max_var <= 0.0:
            raise ValidationError("NB: every feature has zero variance; nothing to model")
        floor = config.variance_floor_scale * max_var
        means = np.zeros((c, x.shape[1]))
        variances = np.full((c, x.shape[1]), floor)
        priors = np.zeros(c)
        for cls in range(c):
            rows = x[y == cls]
            priors[cls] = rows.shape[0] / x.shape[0]
            if rows.shape[0]:
                means[cls] = rows.mean(axis=0)
                variances[cls] = np.maximum(rows.var(axis=0), floor)
        params = {"means": means, "variances": variances, "priors": priors,
                  "variance_floor": floor}
    else:  # pragma: no cover - HeadConfig already validated the kind
        raise ValidationError(f"unknown head kind {config.kind!r}")

    return TrainedHead(
        kind=config.kind,
        class_count=c,
        class_names=list(pool.label_space.global_classes),
        mean=mean,
        std=std,
        params=params,
        seed=config.seed,
        warning=warning,
        diagnostics=diagnostics,
    )


def _scores(head: TrainedHead, x: np.ndarray) -> np.ndarray:
    c = head.class_count
    if head.kind == "knn":
        k = head.params["k"]
        train_x = head.params["train_x"]
        train_y = head.params["train_y"]
        d2 = ((x[:, None, :] - train_x[None, :, :]) ** 2).sum(axis=2)
        # Stable sort: distance ties at the k-boundary resolve by train order.
        nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
        votes = np.zeros((x.shape[0], c), dtype=np.float64)
        for row, idx in enumerate(nearest):
            votes[row] = np.bincount(train_y[idx], minlength=c)
        return votes / min(k, train_x.shape[0])
    if head.kind in ("logreg", "softmax"):
        logits = x @ head.params["w"].T + head.params["b"]
        if head.kind == "softmax" or c == 2:
            return _softmax_rows(logits)
        p = 1.0 / (1.0 + np.exp(-logits))
        total = p.sum(axis=1, keepdims=True)
        uniform = np.full_like(p, 1.0 / c)
        return np.where(total > 0, p / np.where(total > 0, total, 1.0), uniform)
    if head.kind == "svm":
        return x @ head.params["w"].T + head.params["b"]
    if head.kind == "adaboost":
        alphas = head.params["alphas"]
        if alphas.size == 0:
            return np.full((x.shape[0], c), 1.0 / c)
        votes = np.zeros((x.shape[0], c), dtype=np.float64)
        side = x[:, head.params["features"]] <= head.params["thresholds"]
        stump_class = np.where(side, head.params["left_classes"], head.params["right_classes"])
        for t in range(alphas.shape[0]):
            votes[np.arange(x.shape[0]), stump_class[:, t]] += alphas[t]
        return votes / alphas.sum()
    if head.kind == "nb":
        means = head.params["means"]
        variances = head.params["variances"]
        priors = head.params["priors"]
        with np.errstate(divide="ignore"):
            log_priors = np.where(priors > 0, np.log(np.where(priors > 0, priors, 1.0)), -np.inf)
        diff = x[:, None, :] - means[None, :, :]
        log_like = -0.5 * (np.log(2.0 * np.pi * variances)[None] + diff ** 2 / variances[None]).sum(axis=2)
        log_post = log_priors[None, :] + log_like
        log_post -= log_post.max(axis=1, keepdims=True)
        p = np.exp(log_post)
        return p / p.sum(axis=1, keepdims=True)
    raise ValidationError(f"unknown head kind {head.kind!r}")


def predict_scores(head: TrainedHead, features: np.ndarray) -> np.ndarray:
    """Per-class scores, one row per input; argmax equals predict exactly."""
    return _scores(head, head.standardize(features))


def predict(head: TrainedHead, features: np.ndarray) -> np.ndarray:
    """Global class indices; ties resolve to the lowest class index."""
    return np.argmax(predict_scores(head, features), axis=1)


def gradient_check(kind: str, pool: FeaturePool, config: HeadConfig,
                   step: float = 1e-5, max_coords: int = 400) -> float:
    """Max relative error between analytic and central-difference gradients
    at a seeded random parameter point."""
    if kind not in LINEAR_KINDS:
        raise UnsupportedHeadError(f"gradient_check needs a differentiable head, got {kind!r}")
    x_raw = pool.feature_matrix().astype(np.float64)
    mean, std = _fit_standardizer(x_raw)
    x = (x_raw - mean) / std
    y = pool.class_vector()
    c = pool.label_space.class_count
    rng = np.random.Generator(np.random.PCG64(config.seed))
    w = 0.1 * rng.standard_normal((c, x.shape[1]))
    b = 0.1 * rng.standard_normal(c)

    _, grad_w, grad_b = loss_and_gradient(kind, w, b, x, y, c, config.l2)
    flat_analytic = np.concatenate([grad_w.ravel(), grad_b])
    n_params = flat_analytic.shape[0]
    coords = (np.arange(n_params) if n_params <= max_coords
              else rng.choice(n_params, size=max_coords, replace=False))

    def loss_at(flat: np.ndarray) -> float:
        wq = flat[: w.size].reshape(w.shape)
        bq = flat[w.size:]
        return loss_and_gradient(kind, wq, bq, x, y, c, config.l2)[0]

    theta = np.concatenate([w.ravel(), b])
    max_rel = 0.0
    for i in coords:
        bumped = theta.copy()
        bumped[i] = theta[i] + step
        hi = loss_at(bumped)
        bumped[i] = theta[i] - step
        lo = loss_at(bumped)
        numeric = (hi - lo) / (2.0 * step)
        analytic = flat_analytic[i]
        denom = max(abs(analytic), abs(numeric), 1e-8)
        max_rel = max(max_rel, abs(analytic - numeric) / denom)
    return max_rel


# ---------------------------------------------------------------------------
# .head persistence


def _pack_str(out: io.BytesIO, text: str) -> None:
    encoded = text.encode("utf-8")
    out.write(struct.pack("<H", len(encoded)))
    out.write(encoded)


def _pack_f64(out: io.BytesIO, arr: np.ndarray) -> None:
    out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def serialize_head(head: TrainedHead) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", HEAD_VERSION))
    out.write(struct.pack("<B", _KIND_TAGS[head.kind]))
    d = head.feature_dim
    out.write(struct.pack("<II", head.class_count, d))
    for name in head.class_names:
        _pack_str(out, name)
    _pack_f64(out, head.mean)
    _pack_f64(out, head.std)
    out.write(struct.pack("<q", head.seed))
    _pack_str(out, head.warning)
    p = head.params
    if head.kind == "knn":
        out.write(struct.pack("<IB", p["k"], 0))  # metric 0 = euclidean
        out.write(struct.pack("<Q", p["train_x"].shape[0]))
        out.write(np.ascontiguousarray(p["train_y"], dtype="<u4").tobytes())
        _pack_f64(out, p["train_x"])
    elif head.kind in LINEAR_KINDS:
        _pack_f64(out, p["w"])
        _pack_f64(out, p["b"])
    elif head.kind == "adaboost":
        t = p["alphas"].shape[0]
        out.write(struct.pack("<I", t))
        out.write(np.ascontiguousarray(p["features"], dtype="<u4").tobytes())
        _pack_f64(out, p["thresholds"])
        out.write(np.ascontiguousarray(p["left_classes"], dtype="<u4").tobytes())
        out.write(np.ascontiguousarray(p["right_classes"], dtype="<u4").tobytes())
        _pack_f64(out, p["alphas"])
        _pack_f64(out, p["epsilons"])
    elif head.kind == "nb":
        _pack_f64(out, p["means"])
        _pack_f64(out, p["variances"])
        _pack_f64(out, p["priors"])
        out.write(struct.pack("<d", p["variance_floor"]))
    return out.getvalue()


def save_head(head: TrainedHead, path: str) -> None:
    payload = serialize_head(head)
    with open(path, "wb") as fh:
        fh.write(HEAD_MAGIC)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_head(path: str) -> TrainedHead:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise MissingInputError(f"head file not found: {path}") from None
    if len(blob) < len(HEAD_MAGIC) + 9:
        raise FormatError(f"{path}: truncated head file")
    if blob[:4] != HEAD_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {HEAD_MAGIC!r}")
    payload, stored = blob[4:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(payload) != stored:
        raise ChecksumError(f"{path}: CRC32 mismatch; file is corrupt")
    view = io.BytesIO(payload)

    def read(fmt: str):
        size = struct.calcsize(fmt)
        chunk = view.read(size)
        if len(chunk) != size:
            raise FormatError(f"{path}: truncated head file")
        values = struct.unpack(fmt, chunk)
        return values[0] if len(values) == 1 else values

    def read_str() -> str:
        return view.read(read("<H")).decode("utf-8")

    def read_f64(count: int) -> np.ndarray:
        data = view.read(8 * count)
        if len(data) != 8 * count:
            raise FormatError(f"{path}: truncated head file")
        return np.frombuffer(data, dtype="<f8").copy()

    def read_u32(count: int) -> np.ndarray:
        data = view.read(4 * count)
        if len(data) != 4 * count:
            raise FormatError(f"{path}: truncated head file")
        return np.frombuffer(data, dtype="<u4").astype(np.int64)

    version = read("<I")
    if version != HEAD_VERSION:
        raise FormatError(f"{path}: unsupported head version {version}")
    kind = HEAD_KINDS[read("<B")]
    c, d = read("<II")
    class_names = [read_str() for _ in range(c)]
    mean = read_f64(d)
    std = read_f64(d)
    seed = read("<q")
    warning = read_str()
    if kind == "knn":
        k, _metric = read("<IB")
        n = read("<Q")
        train_y = read_u32(n)
        train_x = read_f64(n * d).reshape(n, d)
        params = {"k": k, "metric": "euclidean", "train_x": train_x, "train_y": train_y}
    elif kind in LINEAR_KINDS:
        params = {"w": read_f64(c * d).reshape(c, d), "b": read_f64(c)}
    elif kind == "adaboost":
        t = read("<I")
        params = {
            "features": read_u32(t),
            "thresholds": read_f64(t),
            "left_classes": read_u32(t),
            "right_classes": read_u32(t),
            "alphas": read_f64(t),
            "epsilons": read_f64(t),
        }
    else:
        params = {
            "means": read_f64(c * d).reshape(c, d),
            "variances": read_f64(c * d).reshape(c, d),
            "priors": read_f64(c),
            "variance_floor": read("<d"),
        }
    if view.read(1):
        raise FormatError(f"{path}: trailing bytes in head file")
    return TrainedHead(
        kind=kind, class_count=c, class_names=class_names,
        mean=mean, std=std, params=params, seed=seed, warning=warning,
    )
