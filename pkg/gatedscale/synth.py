"""Deterministic synthetic scenes with objects at three scales.

Class 0 is background, 1 large, 2 medium, 3 small. Each scene is a pure
function of (spec, index): shapes come from the ``scene`` stream, pixel
noise from the ``noise`` stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gatedscale.errors import ConfigError
from gatedscale.rng import Stream
from gatedscale.tensor import DTYPES, Tensor

DEFAULT_COLORS = (
    (0.2, 0.2, 0.2),
    (0.9, 0.3, 0.2),
    (0.2, 0.8, 0.3),
    (0.3, 0.4, 0.9),
)


@dataclass(frozen=True)
class SynthSpec:
    canvas: tuple[int, int] = (64, 64)
    # (min, max) shapes per image for classes 1, 2, 3.
    counts: tuple[tuple[int, int], ...] = ((1, 1), (1, 3), (2, 6))
    colors: tuple[tuple[float, float, float], ...] = DEFAULT_COLORS
    noise: float = 0.1
    seed: int = 0
    n_train: int = 16
    n_val: int = 8

    def __post_init__(self):
        h, w = self.canvas
        if h < 8 or w < 8:
            raise ConfigError(f"canvas {self.canvas} is too small (min 8x8)")
        if len(self.counts) != 3 or any(lo < 0 or hi < lo for lo, hi in self.counts):
            raise ConfigError(f"counts needs three (min, max) pairs with 0 <= min <= max, got {self.counts}")
        if len(self.colors) != 4:
            raise ConfigError(f"colors needs one RGB triple per class (4), got {len(self.colors)}")
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}")
        if self.n_train < 1 or self.n_val < 0:
            raise ConfigError(f"split sizes must be n_train >= 1, n_val >= 0, got {self.n_train}/{self.n_val}")

    def size_range(self, cls: int) -> tuple[int, int]:
        """Side length range of class ``cls`` in pixels."""
        side = min(self.canvas)
        if cls == 1:
            return side // 2, (3 * side) // 4
        if cls == 2:
            return max(1, side // 8), side // 4
        return 2, min(6, side)


def _shape_mask(stream: Stream, spec: SynthSpec, cls: int) -> np.ndarray:
    h, w = spec.canvas
    lo, hi = spec.size_range(cls)
    disk = stream.randint(0, 1) == 1
    if disk:
        dh = dw = stream.randint(lo, hi)
    else:
        dh, dw = stream.randint(lo, hi), stream.randint(lo, hi)
    top, left = stream.randint(0, h - dh), stream.randint(0, w - dw)
    rows, cols = np.ogrid[:h, :w]
    if disk:
        r = dh / 2
        cy, cx = top + r - 0.5, left + r - 0.5
        return (rows - cy) ** 2 + (cols - cx) ** 2 <= r * r
    return (rows >= top) & (rows < top + dh) & (cols >= left) & (cols < left + dw)


def synth_generate(spec: SynthSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Image (3, H, W) float64 and labels (H, W) int64 of scene ``index``."""
    h, w = spec.canvas
    stream = Stream(spec.seed, "scene", index)
    labels = np.zeros((h, w), dtype=np.int64)
    for cls, (lo, hi) in enumerate(spec.counts, start=1):
        for _ in range(stream.randint(lo, hi)):
            labels[_shape_mask(stream, spec, cls)] = cls
    colors = np.asarray(spec.colors, dtype=np.float64)
    image = colors[labels].transpose(2, 0, 1)
    if spec.noise:
        image = image + spec.noise * Stream(spec.seed, "noise", index).normal_array(3 * h * w).reshape(3, h, w)
    return image, labels


class SyntheticDataset:
    """Cached train/val splits. Validation scenes use the indices after the training ones."""

    def __init__(self, spec: SynthSpec, dtype: str = "f32", flip: bool = True):
        self.spec = spec
        self.dtype = DTYPES[dtype]
        self.flip = flip
        self.train = [synth_generate(spec, i) for i in range(spec.n_train)]
        self.val = [synth_generate(spec, spec.n_train + i) for i in range(spec.n_val)]

    def _stack(self, samples) -> tuple[Tensor, np.ndarray]:
        images = np.stack([s[0] for s in samples]).astype(self.dtype)
        return Tensor(images), np.stack([s[1] for s in samples])

    def train_batch(self, iteration: int, batch_size: int) -> tuple[Tensor, np.ndarray]:
        """Batch ``iteration`` cycles through the training split in index order."""
        n = self.spec.n_train
        samples = []
        stream = Stream(self.spec.seed, "flip", iteration)
        for j in range(batch_size):
            image, labels = self.train[(iteration * batch_size + j) % n]
            if self.flip and stream.uniform() < 0.5:
                image, labels = image[:, :, ::-1], labels[:, ::-1]
            samples.append((image, labels))
        return self._stack(samples)

    def batches(self, split: str, batch_size: int):
        """Unaugmented batches over a whole split in index order."""
        items = self.train if split == "train" else self.val
        for i in range(0, len(items), batch_size):
            yield self._stack(items[i : i + batch_size])
