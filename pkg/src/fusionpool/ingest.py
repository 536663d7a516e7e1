"""Dataset manifests, frame-interval sampling, and backbone-ready preprocessing.

A manifest is a line-oriented UTF-8 text file, one record per line:

    <media_path>\t<class_name>\t<task_id>

``#`` starts a comment line.  Header lines configure the manifest:
``!interval=<k>`` sets the sampling interval, ``!dataset=<name>`` names the
dataset, and ``!exclude=<media_path>:<frame_index>`` drops a single frame
(manual curation hook).  A media_path may point at an image file (one frame)
or a directory of pre-extracted frames; video decoding is out of scope and
is expected to happen upstream via an external frame dumper.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ManifestError, MissingInputError, ValidationError

if TYPE_CHECKING:
    from .extraction import BackboneSpec

DEFAULT_SAMPLING_INTERVAL = 10

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(dataset_name: str, media_path: str, frame_index: int) -> int:
    """64-bit FNV-1a over the identifying triple; the pool's sample_id."""
    h = _FNV_OFFSET
    payload = f"{dataset_name}\x00{media_path}\x00{frame_index}".encode("utf-8")
    for byte in payload:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class DatasetManifest:
    dataset_name: str
    task_id: int
    entries: list[tuple[str, str]]  # (media_path, class_name)
    sampling_interval: int = DEFAULT_SAMPLING_INTERVAL
    exclusions: set[tuple[str, int]] = field(default_factory=set)

    def __post_init__(self):
        if self.sampling_interval < 1:
            raise ValidationError(
                f"sampling_interval must be >= 1, got {self.sampling_interval}"
            )
        seen = set()
        for path, class_name in self.entries:
            if not class_name:
                raise ManifestError(f"empty class name for media path {path!r}")
            if path in seen:
                raise ManifestError(f"duplicate media path {path!r}")
            seen.add(path)

    @property
    def class_names(self) -> list[str]:
        """Distinct class names in first-seen order."""
        out: list[str] = []
        for _, name in self.entries:
            if name not in out:
                out.append(name)
        return out


@dataclass
class FrameTensor:
    """One preprocessed frame: H x W x C float32 in the backbone's range."""

    values: np.ndarray
    source_id: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValidationError(f"frame tensor must be HxWxC, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("frame tensor contains non-finite values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Parse a manifest file; malformed records report their line number."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise MissingInputError(f"manifest not found: {path}")

    dataset_name = os.path.splitext(os.path.basename(path))[0]
    interval = DEFAULT_SAMPLING_INTERVAL
    entries: list[tuple[str, str]] = []
    exclusions: set[tuple[str, int]] = set()
    task_id: int | None = None

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if line.startswith("!"):
                key, sep, value = line[1:].partition("=")
                if not sep:
                    raise ManifestError(f"{path}:{lineno}: malformed header {line!r}")
                if key == "interval":
                    try:
                        interval = int(value)
                    except ValueError:
                        raise ManifestError(f"{path}:{lineno}: interval must be an integer") from None
                    if interval < 1:
                        raise ManifestError(f"{path}:{lineno}: interval must be >= 1, got {interval}")
                elif key == "dataset":
                    dataset_name = value
                elif key == "exclude":
                    media, sep2, idx = value.rpartition(":")
                    if not sep2:
                        raise ManifestError(f"{path}:{lineno}: exclude needs <media_path>:<frame_index>")
                    try:
                        exclusions.add((media, int(idx)))
                    except ValueError:
                        raise ManifestError(f"{path}:{lineno}: frame index must be an integer") from None
                else:
                    raise ManifestError(f"{path}:{lineno}: unknown header {key!r}")
                continue

            parts = line.split("\t")
            if len(parts) != 3:
                raise ManifestError(
                    f"{path}:{lineno}: expected <media_path>\\t<class_name>\\t<task_id>, got {len(parts)} fields"
                )
            media_path, class_name, task_field = parts
            if not media_path:
                raise ManifestError(f"{path}:{lineno}: empty media path")
            if not class_name:
                raise ManifestError(f"{path}:{lineno}: empty class name")
            try:
                line_task = int(task_field)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: task id must be an integer, got {task_field!r}") from None
            if task_id is None:
                task_id = line_task
            elif line_task != task_id:
                raise ManifestError(
                    f"{path}:{lineno}: mixed task ids in one manifest ({task_id} vs {line_task})"
                )
            if any(media_path == seen for seen, _ in entries):
                raise ManifestError(f"{path}:{lineno}: duplicate media path {media_path!r}")
            entries.append((media_path, class_name))

    return DatasetManifest(
        dataset_name=dataset_name,
        task_id=task_id if task_id is not None else 0,
        entries=entries,
        sampling_interval=interval,
        exclusions=exclusions,
    )


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    """Write a manifest such that load_manifest reproduces it."""
    lines = [f"!dataset={manifest.dataset_name}", f"!interval={manifest.sampling_interval}"]
    for media, idx in sorted(manifest.exclusions):
        lines.append(f"!exclude={media}:{idx}")
    for media_path, class_name in manifest.entries:
        lines.append(f"{media_path}\t{class_name}\t{manifest.task_id}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def sample_frames(frame_count: int, interval: int) -> list[int]:
    """Frame indices {0, interval, 2*interval, ...} below frame_count."""
    if interval < 1:
        raise ValidationError(f"sampling interval must be >= 1, got {interval}")
    if frame_count < 0:
        raise ValidationError(f"frame count must be >= 0, got {frame_count}")
    return list(range(0, frame_count, interval))


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centre sampling, no antialiasing.

    Kept in-house (rather than delegating to an image library) so the exact
    sampling convention is pinned and independently checkable.
    """
    image = np.asarray(image, dtype=np.float64)
    in_h, in_w = image.shape[:2]
    if in_h == 0 or in_w == 0:
        raise ValidationError("cannot resize a zero-dimension image")
    if in_h == out_h and in_w == out_w:
        return image.copy()

    def axis_coords(n_out, n_in):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    ylo, yhi, yfrac = axis_coords(out_h, in_h)
    xlo, xhi, xfrac = axis_coords(out_w, in_w)
    yfrac = yfrac[:, None, None] if image.ndim == 3 else yfrac[:, None]
    xfrac = xfrac[None, :, None] if image.ndim == 3 else xfrac[None, :]

    top = image[ylo][:, xlo] * (1 - xfrac) + image[ylo][:, xhi] * xfrac
    bot = image[yhi][:, xlo] * (1 - xfrac) + image[yhi][:, xhi] * xfrac
    return top * (1 - yfrac) + bot * yfrac


# Per-channel ImageNet statistics, applied after scaling pixels to [0, 1].
_IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float64)
_IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float64)

NORMALIZATIONS = ("scale_pm1", "imagenet_standard")


def normalize_pixels(pixels: np.ndarray, scheme: str) -> np.ndarray:
    """Map uint8-range pixel values into a backbone's input range."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if scheme == "scale_pm1":
        return pixels / 127.5 - 1.0
    if scheme == "imagenet_standard":
        return (pixels / 255.0 - _IMAGENET_MEAN) / _IMAGENET_STD
    raise ValidationError(f"unknown normalization scheme {scheme!r}")


def preprocess_frame(raw_image: np.ndarray, spec: "BackboneSpec", source_id: int = 0) -> FrameTensor:
    """Resize a decoded RGB image to the backbone's input size and normalize."""
    raw_image = np.asarray(raw_image)
    if raw_image.ndim == 2:
        raw_image = np.repeat(raw_image[:, :, None], 3, axis=2)
    if raw_image.ndim != 3 or raw_image.shape[2] != 3:
        raise ValidationError(
            f"expected an RGB image (HxWx3), got shape {raw_image.shape}"
        )
    if raw_image.shape[0] == 0 or raw_image.shape[1] == 0:
        raise ValidationError("zero-dimension image")
    resized = resize_bilinear(raw_image, spec.input_size, spec.input_size)
    values = normalize_pixels(resized, spec.normalization)
    return FrameTensor(values=values.astype(np.float32), source_id=source_id)


def decode_image(path: str | os.PathLike) -> np.ndarray:
    """Load an image file as an HxWx3 uint8 RGB array."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise MissingInputError(f"image not found: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


_IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


def media_frame_paths(media_path: str, interval: int,
                      exclusions: Iterable[tuple[str, int]] = ()) -> list[tuple[int, str]]:
    """Expand one manifest entry into (frame_index, image_path) pairs.

    A plain image file is a single frame (index 0).  A directory is a frame
    sequence in sorted filename order, sampled at the given interval.
    """
    excluded = set(exclusions)
    if os.path.isfile(media_path):
        frames = [(0, media_path)]
    elif os.path.isdir(media_path):
        names = sorted(
            n for n in os.listdir(media_path)
            if n.lower().endswith(_IMAGE_EXTENSIONS)
        )
        indices = sample_frames(len(names), interval)
        frames = [(i, os.path.join(media_path, names[i])) for i in indices]
    else:
        raise MissingInputError(f"media path not found: {media_path}")
    return [(i, p) for i, p in frames if (media_path, i) not in excluded]
