# src/data_io.py

"""
Image datasets for the discrete VAE: IDX files (MNIST / Fashion-MNIST,
optionally gzipped), binarization, small synthetic sets and minibatching.
"""

import gzip
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, NamedTuple, Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_GZIP_MAGIC = b"\x1f\x8b"

PathLike = Union[str, Path]


class DataError(Exception):
    pass


class IdxParseError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray
    labels: Optional[np.ndarray] = None
    split: str = "train"
    image_shape: Tuple[int, int] = (28, 28)
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 2:
            raise DataError(f"images must be a (count, pixels) array, got {self.images.shape}")
        if np.any(self.images < 0.0) or np.any(self.images > 1.0):
            raise DataError("pixel values must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.images.shape[0],):
                raise DataError(
                    f"{self.labels.shape[0]} labels for {self.images.shape[0]} images"
                )

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def num_pixels(self) -> int:
        return int(self.images.shape[1])

    @property
    def num_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1


class Batch(NamedTuple):
    indices: np.ndarray
    images: np.ndarray
    labels: Optional[np.ndarray]


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_bytes(path: PathLike) -> bytes:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if raw[:2] == _GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise IdxParseError(f"corrupt gzip stream in {path}: {e}", 0) from e
    return raw


def _header(raw: bytes, words: int, magic: int, path: PathLike) -> Tuple[int, ...]:
    size = 4 * words
    if len(raw) < size:
        raise IdxParseError(f"truncated IDX header in {path}", len(raw))
    values = struct.unpack(f">{words}I", raw[:size])
    if values[0] != magic:
        raise IdxParseError(
            f"bad magic 0x{values[0]:08x} in {path}, expected 0x{magic:08x}", 0
        )
    return values


def _read_images(path: PathLike) -> Tuple[np.ndarray, Tuple[int, int]]:
    raw = _read_bytes(path)
    _, count, rows, cols = _header(raw, 4, IDX_IMAGES_MAGIC, path)
    expected = 16 + count * rows * cols
    if len(raw) < expected:
        raise IdxParseError(
            f"truncated image data in {path}: {count}x{rows}x{cols} needs {expected} bytes",
            len(raw),
        )
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows * cols), (rows, cols)


def _read_labels(path: PathLike) -> np.ndarray:
    raw = _read_bytes(path)
    _, count = _header(raw, 2, IDX_LABELS_MAGIC, path)
    if len(raw) < 8 + count:
        raise IdxParseError(f"truncated label data in {path}: needs {8 + count} bytes", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def load_idx(
    images_path: PathLike,
    labels_path: Optional[PathLike] = None,
    split: str = "train",
) -> Dataset:
    """Pixels are scaled by 1/255; nothing is returned unless both files parse."""
    pixels, shape = _read_images(images_path)
    labels = None
    if labels_path is not None:
        labels = _read_labels(labels_path)
        if labels.shape[0] != pixels.shape[0]:
            raise IdxParseError(
                f"{labels.shape[0]} labels in {labels_path} for {pixels.shape[0]} images",
                4,
            )
    logger.info("loaded %d images of %dx%d from %s", pixels.shape[0], shape[0], shape[1], images_path)
    return Dataset(pixels / 255.0, labels, split=split, image_shape=shape)


def write_idx(
    dataset: Dataset,
    images_path: PathLike,
    labels_path: Optional[PathLike] = None,
    compress: bool = False,
) -> None:
    rows, cols = dataset.image_shape
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8)
    payload = struct.pack(">4I", IDX_IMAGES_MAGIC, len(dataset), rows, cols) + pixels.tobytes()
    opener = gzip.compress if compress else (lambda b: b)
    Path(images_path).write_bytes(opener(payload))
    if labels_path is not None:
        if dataset.labels is None:
            raise DataError("dataset has no labels to write")
        body = struct.pack(">2I", IDX_LABELS_MAGIC, len(dataset)) + dataset.labels.astype(np.uint8).tobytes()
        Path(labels_path).write_bytes(opener(body))


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


def binarize(d: Dataset, mode: str = "threshold", seed: int = 0) -> Dataset:
    if mode == "threshold":
        images = (d.images >= 0.5).astype(np.float64)
    elif mode == "stochastic":
        rng = np.random.default_rng(seed)
        images = (rng.random(d.images.shape) < d.images).astype(np.float64)
    else:
        raise DataError(f"unknown binarization mode '{mode}'")
    return Dataset(images, d.labels, d.split, d.image_shape, dict(d.meta))


def subset(d: Dataset, limit: int) -> Dataset:
    """First `limit` examples (all of them when limit is larger)."""
    keep = slice(0, min(int(limit), len(d)))
    labels = None if d.labels is None else d.labels[keep]
    return Dataset(d.images[keep], labels, d.split, d.image_shape, dict(d.meta))


def synthetic_dataset(
    kind: str,
    n: int,
    seed: int = 0,
    components: int = 3,
    side: int = 4,
    split: str = "train",
) -> Dataset:
    """
    "bars": side x side images with one row or column lit (2*side classes).
    "mixture": draws from a Bernoulli mixture whose weights and means are kept
    in `meta`.
    """
    if n < 1:
        raise DataError(f"synthetic dataset needs n >= 1, got {n}")
    rng = np.random.default_rng(seed)

    if kind == "bars":
        classes = 2 * side
        labels = rng.permutation(np.arange(n) % classes)
        images = np.zeros((n, side, side))
        for i, c in enumerate(labels):
            if c < side:
                images[i, c, :] = 1.0
            else:
                images[i, :, c - side] = 1.0
        return Dataset(
            images.reshape(n, side * side), labels, split, (side, side),
            {"kind": "bars", "classes": classes},
        )

    if kind == "mixture":
        pixels = side * side
        weights = np.full(components, 1.0 / components)
        means = rng.uniform(0.05, 0.95, size=(components, pixels))
        labels = rng.choice(components, size=n, p=weights)
        images = (rng.random((n, pixels)) < means[labels]).astype(np.float64)
        return Dataset(
            images, labels, split, (side, side),
            {"kind": "mixture", "weights": weights.tolist(), "means": means.tolist()},
        )

    raise DataError(f"unknown synthetic dataset kind '{kind}'")


def save_synthetic_params(d: Dataset, path: PathLike) -> None:
    Path(path).write_text(json.dumps(d.meta, indent=2), encoding="utf-8")


def batch_iterator(
    d: Dataset,
    batch_size: int,
    seed: Optional[int] = None,
) -> Iterator[Batch]:
    """
    One pass over the data; a seeded permutation when `seed` is given,
    the last batch may be short.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(d)) if seed is None else np.random.default_rng(seed).permutation(len(d))
    for start in range(0, len(d), batch_size):
        idx = order[start:start + batch_size]
        labels = None if d.labels is None else d.labels[idx]
        yield Batch(idx, d.images[idx], labels)
