"""Datasets and image output."""

from __future__ import annotations

import glob
import os
import tempfile
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .rng import Rng

CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE  # 3073 bytes: label then R, G, B planes


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray            # [N, C, H, W] float32 in [-1, 1]
    labels: Optional[np.ndarray]  # [N] int64 or None
    num_classes: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if self.images.size and (self.images.min() < -1 or self.images.max() > 1):
            raise DatasetError("pixels outside [-1, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise DatasetError("one label per image expected")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]


def synth_two_blobs(n: int, h: int = 8, w: int = 8, seed: int = 0, channels: int = 1) -> Dataset:
    """Two-class toy set: class 0 is a bright square on a dark ground, class 1 the inverse.

    Labels alternate 0, 1, 0, ... so classes are balanced.  The square covers
    ``floor(3h/4) x floor(3w/4)`` pixels (over half the image, so class 0 is
    the brighter class on average) at a random offset, with N(0, 0.05) noise.
    """
    if h < 4 or w < 4:
        raise DatasetError("two-blob images need h, w >= 4")
    rng = Rng(seed, stream=0xDA7A)
    sh, sw = (3 * h) // 4, (3 * w) // 4
    labels = np.arange(n) % 2
    r0 = rng.integers(0, h - sh + 1, (n,))
    c0 = rng.integers(0, w - sw + 1, (n,))
    noise = 0.05 * rng.normal((n, channels, h, w), dtype=np.float64)
    imgs = np.full((n, channels, h, w), -0.8)
    for i in range(n):
        imgs[i, :, r0[i]:r0[i] + sh, c0[i]:c0[i] + sw] = 0.8
    imgs[labels == 1] *= -1
    imgs = np.clip(imgs + noise, -1.0, 1.0)
    return Dataset(imgs.astype(np.float32), labels, num_classes=2)


def _cifar_files(path: str) -> list[str]:
    if os.path.isdir(path):
        files = sorted(glob.glob(os.path.join(path, "data_batch_*.bin")))
        if not files:
            raise DatasetError(f"no data_batch_*.bin files under {path}")
        return files
    if not os.path.exists(path):
        raise DatasetError(f"dataset path {path} does not exist")
    return [path]


def cifar10_load(path: str, limit: Optional[int] = None) -> Dataset:
    """Read CIFAR-10 binary batches (a file or a directory of ``data_batch_*.bin``)."""
    chunks = []
    for fname in _cifar_files(path):
        raw = np.fromfile(fname, dtype=np.uint8)
        if raw.size % CIFAR_RECORD:
            raise DatasetError(f"{fname}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
        chunks.append(raw.reshape(-1, CIFAR_RECORD))
    rec = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    if limit is not None:
        rec = rec[:limit]
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DatasetError(f"label {labels.max()} > 9")
    pix = rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float32)
    return Dataset(pix / np.float32(127.5) - 1, labels, num_classes=10)


def hflip(images: np.ndarray, mask=None) -> np.ndarray:
    """Mirror ``[N, C, H, W]`` images left-right (only where ``mask`` is true, if given)."""
    if mask is None:
        return images[..., ::-1].copy()
    out = images.copy()
    out[mask] = images[mask][..., ::-1]
    return out


def atomic_write(path: str, payload) -> None:
    """Write bytes, or an iterable of byte chunks, to a temp file in the target directory, then rename over ``path``."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            for chunk in ([payload] if isinstance(payload, (bytes, bytearray, memoryview)) else payload):
                f.write(chunk)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_bytes(image: np.ndarray) -> np.ndarray:
    """[-1, 1] floats to uint8 via round((x + 1) * 127.5), clamped."""
    return np.clip(np.round((np.asarray(image, dtype=np.float64) + 1) * 127.5), 0, 255).astype(np.uint8)


def encode_pixmap(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected [C, H, W] with C in (1, 3), got {img.shape}")
    C, H, W = img.shape
    magic = "P5" if C == 1 else "P6"
    body = to_bytes(img).transpose(1, 2, 0).tobytes()  # row-major, channels interleaved
    return f"{magic}\n{W} {H}\n255\n".encode("ascii") + body


def image_write(path: str, image) -> None:
    """Save one ``[C, H, W]`` image as a binary pixmap (P5 grey, P6 colour)."""
    atomic_write(path, encode_pixmap(image))


def make_grid(images: np.ndarray, ncol: int = 8, pad: int = 1) -> np.ndarray:
    """Tile ``[N, C, H, W]`` images into one ``[C, H', W']`` image on a black (-1) ground."""
    n, C, H, W = images.shape
    ncol = max(1, min(ncol, n))
    nrow = -(-n // ncol)
    grid = np.full((C, nrow * (H + pad) + pad, ncol * (W + pad) + pad), -1.0, dtype=np.float32)
    for i in range(n):
        r, c = divmod(i, ncol)
        y, x = pad + r * (H + pad), pad + c * (W + pad)
        grid[:, y:y + H, x:x + W] = images[i]
    return grid
