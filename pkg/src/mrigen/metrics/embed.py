"""Feature embedders and feature files."""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import InvalidInput

FEATURE_MAGIC = b"MRIGFEAT"
FEATURE_VERSION = 1


class TinyConvEmbedder:
    """Frozen random 3-layer ReLU conv net with global average pooling.

    Weights come from ``numpy.random.default_rng(seed)`` at construction and
    never change. Images are ``(H, W)`` arrays in [0, 1]; features are
    ``float64`` rows of length ``dim``.
    """

    def __init__(self, seed: int = 0, dim: int = 64):
        rng = np.random.default_rng(seed)
        widths = [1, 16, 32, dim]
        self.dim = dim
        self.layers = []
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            fan_in = c_in * 9
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3))
            b = rng.uniform(-0.1, 0.1, size=c_out)
            self.layers.append((torch.from_numpy(w), torch.from_numpy(b)))

    @torch.no_grad()
    def embed(self, images) -> np.ndarray:
        x = torch.as_tensor(np.asarray(images, dtype=np.float64))[:, None]
        for i, (w, b) in enumerate(self.layers):
            x = F.relu(F.conv2d(x, w, b, stride=1 if i == 0 else 2, padding=1))
        return x.mean(dim=(2, 3)).numpy()

    def __call__(self, images):
        return self.embed(images)


class FileEmbedder:
    """Serves precomputed features (binary feature file or CSV) for a list
    of images of matching length."""

    def __init__(self, path):
        self.path = Path(path)
        self.features = read_features(self.path)
        self.dim = self.features.shape[1]

    def embed(self, images) -> np.ndarray:
        if len(images) != len(self.features):
            raise InvalidInput(f"{self.path} holds {len(self.features)} rows, got {len(images)} images")
        return self.features.copy()

    def __call__(self, images):
        return self.embed(images)


def embed_images(images, embedder) -> np.ndarray:
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise InvalidInput("no images to embed")
    shape = images[0].shape
    for i, im in enumerate(images):
        if im.shape != shape:
            raise InvalidInput(f"image {i} has shape {im.shape}, expected {shape}")
    return np.asarray(embedder.embed(np.stack(images)), dtype=np.float64)


def write_features(path, features) -> None:
    """Binary if ``path`` ends in anything but ``.csv``; float32 payload."""
    f = np.asarray(features, dtype=np.float64)
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"f{i}" for i in range(f.shape[1])])
            for row in f:
                w.writerow([repr(float(v)) for v in row])
        return
    n, d = f.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, n, d))
        fh.write(b"f4")
        fh.write(f.astype("<f4").tobytes())


def read_features(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise InvalidInput(f"{path}: empty feature CSV")
        return np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(rows[0]))
    raw = path.read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise InvalidInput(f"{path}: not a feature file")
    version, n, d = struct.unpack("<III", raw[8:20])
    if version != FEATURE_VERSION or raw[20:22] != b"f4":
        raise InvalidInput(f"{path}: unsupported feature file")
    payload = raw[22:]
    if len(payload) != 4 * n * d:
        raise InvalidInput(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float64)
