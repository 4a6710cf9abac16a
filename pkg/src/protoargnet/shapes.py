"""Synthetic 3x3 SHAPES grids: labelling, rendering, generation and storage.

An image is class 1 when some row holds a triangle in its first column and a
circle in its third column; colours never matter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHAPES = ("circle", "triangle", "square")
COLORS = ("red", "green", "blue")
CIRCLE, TRIANGLE, SQUARE = range(3)

IMAGE_SIZE = 28
CELL = 9          # pitch of a grid cell in pixels
MARGIN = 1        # blank row/column before the first cell
SHAPE_SIZE = 7    # bounding box of a shape inside its cell

MAGIC = b"SHPS"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_RECORD = 9 * 2 + 1 + IMAGE_SIZE * IMAGE_SIZE * 3


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """3x3 grid of (shape, colour) index pairs, stored as two int arrays."""

    shapes: tuple[tuple[int, ...], ...]
    colors: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        for arr, limit in ((self.shapes, len(SHAPES)), (self.colors, len(COLORS))):
            a = np.asarray(arr)
            if a.shape != (3, 3):
                raise ValueError(f"grid must be 3x3, got {a.shape}")
            if a.min() < 0 or a.max() >= limit:
                raise ValueError("grid entry out of range")

    @classmethod
    def from_arrays(cls, shapes, colors) -> "GridSpec":
        return cls(tuple(map(tuple, np.asarray(shapes, dtype=int).tolist())),
                   tuple(map(tuple, np.asarray(colors, dtype=int).tolist())))

    @classmethod
    def from_names(cls, cells) -> "GridSpec":
        """``cells[r][c] = ("triangle", "red")``."""
        shapes = [[SHAPES.index(s) for s, _ in row] for row in cells]
        colors = [[COLORS.index(c) for _, c in row] for row in cells]
        return cls.from_arrays(shapes, colors)

    def cell(self, r: int, c: int) -> tuple[str, str]:
        return SHAPES[self.shapes[r][c]], COLORS[self.colors[r][c]]

    def recolored(self, colors) -> "GridSpec":
        return GridSpec.from_arrays(self.shapes, colors)


def label_of(grid: GridSpec) -> int:
    for row in grid.shapes:
        if row[0] == TRIANGLE and row[2] == CIRCLE:
            return 1
    return 0


def cell_region(r: int, c: int) -> tuple[slice, slice]:
    """Pixel rows/cols owned by cell (r, c)."""
    top, left = MARGIN + CELL * r, MARGIN + CELL * c
    return slice(top, top + CELL), slice(left, left + CELL)


def _shape_masks() -> dict[int, np.ndarray]:
    n = SHAPE_SIZE
    yy, xx = np.mgrid[0:n, 0:n]
    c = n // 2
    disk = (yy - c) ** 2 + (xx - c) ** 2 <= 3 ** 2
    # upward isoceles triangle: apex on top, half-width grows every other row
    tri = np.abs(xx - c) <= (yy + 1) // 2
    square = np.ones((n, n), dtype=bool)
    return {CIRCLE: disk, TRIANGLE: tri, SQUARE: square}


_MASKS = _shape_masks()


def render(grid: GridSpec) -> np.ndarray:
    """28x28x3 float image in [0, 1] on a black background."""
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3))
    for r in range(3):
        for c in range(3):
            rows, cols = cell_region(r, c)
            pad = (CELL - SHAPE_SIZE) // 2
            y0, x0 = rows.start + pad, cols.start + pad
            patch = img[y0:y0 + SHAPE_SIZE, x0:x0 + SHAPE_SIZE, grid.colors[r][c]]
            patch[_MASKS[grid.shapes[r][c]]] = 1.0
    return img


@dataclass
class ShapesSample:
    grid: GridSpec
    image: np.ndarray
    label: int


@dataclass
class Dataset:
    samples: list[ShapesSample]
    seed: int
    train_idx: np.ndarray = field(default=None)
    test_idx: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.train_idx is None or self.test_idx is None:
            self.train_idx, self.test_idx = split_indices(self.seed, len(self.samples))

    def __len__(self) -> int:
        return len(self.samples)

    def images(self, idx=None) -> np.ndarray:
        idx = range(len(self.samples)) if idx is None else idx
        return np.stack([self.samples[i].image for i in idx])

    def labels(self, idx=None) -> np.ndarray:
        idx = range(len(self.samples)) if idx is None else idx
        return np.array([self.samples[i].label for i in idx], dtype=np.int64)

    def split(self, name: str) -> np.ndarray:
        if name == "train":
            return self.train_idx
        if name == "test":
            return self.test_idx
        if name == "all":
            return np.arange(len(self.samples))
        raise ValueError(f"unknown split {name!r} (expected train, test or all)")

    def class_counts(self) -> tuple[int, int]:
        y = self.labels()
        return int((y == 0).sum()), int((y == 1).sum())


def split_indices(seed: int, n: int, test_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle, first 80% train and the rest test (both sorted)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xD5,)))
    perm = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _random_grid(rng: np.random.Generator, label: int) -> GridSpec:
    colors = rng.integers(0, len(COLORS), size=(3, 3))
    if label == 1:
        shapes = rng.integers(0, len(SHAPES), size=(3, 3))
        row = rng.integers(0, 3)
        shapes[row, 0], shapes[row, 2] = TRIANGLE, CIRCLE
        return GridSpec.from_arrays(shapes, colors)
    while True:
        grid = GridSpec.from_arrays(rng.integers(0, len(SHAPES), size=(3, 3)), colors)
        if label_of(grid) == 0:
            return grid


def generate(seed: int, n: int) -> Dataset:
    """Balanced dataset; sample ``i`` depends only on ``(seed, i)`` and its label."""
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    master = np.random.default_rng(np.random.SeedSequence(seed))
    labels = np.zeros(n, dtype=np.int64)
    labels[: n // 2] = 1
    labels = master.permutation(labels)
    samples = []
    for i, y in enumerate(labels):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        grid = _random_grid(rng, int(y))
        samples.append(ShapesSample(grid, render(grid), int(y)))
    return Dataset(samples, seed)


def save(dataset: Dataset, path) -> None:
    n = len(dataset.samples)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, dataset.seed & 0xFFFFFFFFFFFFFFFF))
        for s in dataset.samples:
            cells = np.empty(18, dtype=np.uint8)
            cells[0::2] = np.asarray(s.grid.shapes).reshape(-1)
            cells[1::2] = np.asarray(s.grid.colors).reshape(-1)
            fh.write(cells.tobytes())
            fh.write(bytes([s.label]))
            fh.write(np.round(s.image * 255).astype(np.uint8).tobytes())


def load(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, n, seed = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    body = len(raw) - _HEADER.size
    if body != n * _RECORD:
        raise DatasetFormatError(
            f"{path}: header declares {n} records but body holds {body / _RECORD:g}")
    recs = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(n, _RECORD)
    samples = []
    for rec in recs:
        grid = GridSpec.from_arrays(rec[0:18:2].reshape(3, 3), rec[1:18:2].reshape(3, 3))
        image = rec[19:].reshape(IMAGE_SIZE, IMAGE_SIZE, 3).astype(np.float64) / 255.0
        samples.append(ShapesSample(grid, image, int(rec[18])))
    return Dataset(samples, int(seed))
