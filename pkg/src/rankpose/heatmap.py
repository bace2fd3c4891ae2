"""Heatmap label fields: construction, partitioning, and imbalance analysis.

A field is a flat float64 vector over the cells of a grid.  2D grids are
row-major (H x W); 1D grids are bin vectors along a single axis (W*k bins
for the x axis, H*k for the y axis, with integer split factor k >= 1).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Mode",
    "GridShape",
    "HeatmapField",
    "Annotation",
    "LabelField",
    "PixelPartition",
    "make_dot_label",
    "make_gaussian_label",
    "make_blank_label",
    "normalize_to_distribution",
    "partition",
    "imbalance_ratio",
]


class Mode(enum.Enum):
    TWO_D = "2d"
    ONE_D_X = "1d-x"
    ONE_D_Y = "1d-y"


@dataclass(frozen=True)
class GridShape:
    """Grid geometry: H x W cells in 2D, or W*k / H*k bins in 1D."""

    height: int
    width: int
    mode: Mode = Mode.TWO_D
    split_factor: int = 1

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.height}x{self.width}")
        if self.split_factor < 1:
            raise ValueError(f"split_factor must be a positive integer, got {self.split_factor}")

    @property
    def num_cells(self) -> int:
        if self.mode is Mode.TWO_D:
            return self.height * self.width
        if self.mode is Mode.ONE_D_X:
            return self.width * self.split_factor
        return self.height * self.split_factor

    def flat_index(self, cell: tuple[int, int] | int) -> int:
        """Convert a (row, col) pair (2D) or bin index (1D) to a flat index."""
        if self.mode is Mode.TWO_D:
            if isinstance(cell, int):
                raise TypeError("2D grids take (row, col) cells, not a bare index")
            row, col = cell
            if not (0 <= row < self.height and 0 <= col < self.width):
                raise IndexError(f"cell {cell} outside {self.height}x{self.width} grid")
            return row * self.width + col
        if isinstance(cell, tuple):
            if len(cell) != 1:
                raise TypeError("1D grids take a single bin index")
            cell = cell[0]
        if not (0 <= cell < self.num_cells):
            raise IndexError(f"bin {cell} outside {self.num_cells}-bin field")
        return int(cell)

    def cell_coords(self, flat: int) -> tuple[int, int] | int:
        """Inverse of flat_index."""
        if self.mode is Mode.TWO_D:
            return divmod(int(flat), self.width)
        return int(flat)


def _check_values(shape: GridShape, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size != shape.num_cells:
        raise ValueError(f"expected {shape.num_cells} cells, got {values.size}")
    if not np.all(np.isfinite(values)):
        raise ValueError("field contains non-finite values")
    return values


@dataclass
class HeatmapField:
    """Dense per-cell confidences (logits or probabilities, caller-declared)."""

    shape: GridShape
    values: np.ndarray
    keypoint_id: int = 0

    def __post_init__(self) -> None:
        self.values = _check_values(self.shape, self.values)


@dataclass(frozen=True)
class Annotation:
    kind: str  # "dot" | "gaussian" | "blank"
    sigma: float = 0.0
    truncation_radius: int = 0


@dataclass
class LabelField:
    """Ground-truth labels in [0, 1] over a grid."""

    shape: GridShape
    labels: np.ndarray
    annotation: Annotation
    keypoint_id: int = 0

    def __post_init__(self) -> None:
        self.labels = _check_values(self.shape, self.labels)
        if self.labels.min() < 0.0 or self.labels.max() > 1.0:
            raise ValueError("labels must lie in [0, 1]")


@dataclass
class PixelPartition:
    """Index sets P (label > tau) and N (label <= tau) over one field."""

    positives: np.ndarray
    negatives: np.ndarray
    positive_labels: np.ndarray
    positivity_threshold: float

    @property
    def num_positives(self) -> int:
        return int(self.positives.size)

    @property
    def num_negatives(self) -> int:
        return int(self.negatives.size)


def make_dot_label(shape: GridShape, joint_cell: tuple[int, int] | int, keypoint_id: int = 0) -> LabelField:
    """Dot annotation: exactly one cell labeled 1, all others 0."""
    labels = np.zeros(shape.num_cells, dtype=np.float64)
    labels[shape.flat_index(joint_cell)] = 1.0
    return LabelField(shape, labels, Annotation("dot"), keypoint_id)


def make_gaussian_label(
    shape: GridShape,
    joint_cell: tuple[int, int] | int,
    sigma: float,
    truncation_radius: int | None = None,
    keypoint_id: int = 0,
) -> LabelField:
    """Gaussian-smoothed annotation with peak exactly 1 at the joint cell.

    labels[c] = exp(-d(c, joint)^2 / (2 sigma^2)) inside the truncation window
    (a square of half-width ``truncation_radius`` cells per axis, an interval
    in 1D) and 0 outside.  Kernel mass falling outside the grid is discarded.
    ``truncation_radius`` defaults to floor(3 sigma).
    """
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if truncation_radius is None:
        truncation_radius = int(math.floor(3.0 * sigma))
    if truncation_radius < 0:
        raise ValueError(f"truncation_radius must be >= 0, got {truncation_radius}")

    flat = shape.flat_index(joint_cell)
    labels = np.zeros(shape.num_cells, dtype=np.float64)
    inv = 1.0 / (2.0 * sigma * sigma)
    r = truncation_radius
    if shape.mode is Mode.TWO_D:
        jr, jc = divmod(flat, shape.width)
        r0, r1 = max(0, jr - r), min(shape.height - 1, jr + r)
        c0, c1 = max(0, jc - r), min(shape.width - 1, jc + r)
        rows = np.arange(r0, r1 + 1)
        cols = np.arange(c0, c1 + 1)
        d2 = (rows[:, None] - jr) ** 2 + (cols[None, :] - jc) ** 2
        window = np.exp(-d2 * inv)
        grid = labels.reshape(shape.height, shape.width)
        grid[r0 : r1 + 1, c0 : c1 + 1] = window
    else:
        b0, b1 = max(0, flat - r), min(shape.num_cells - 1, flat + r)
        bins = np.arange(b0, b1 + 1)
        labels[b0 : b1 + 1] = np.exp(-((bins - flat) ** 2) * inv)
    labels[flat] = 1.0
    return LabelField(shape, labels, Annotation("gaussian", sigma, truncation_radius), keypoint_id)


def make_blank_label(shape: GridShape, keypoint_id: int = 0) -> LabelField:
    """All-zero labels (e.g. for an occluded keypoint): no positive cells."""
    return LabelField(shape, np.zeros(shape.num_cells), Annotation("blank"), keypoint_id)


def normalize_to_distribution(label: LabelField) -> LabelField:
    """Rescale labels to sum to 1 (1D targets for the KL baseline)."""
    total = label.labels.sum()
    if total <= 0.0:
        raise ValueError("cannot normalize an all-zero label field")
    return LabelField(label.shape, label.labels / total, label.annotation, label.keypoint_id)


def partition(label: LabelField, tau: float = 0.0) -> PixelPartition:
    """Split cells into positives (label > tau) and negatives (label <= tau)."""
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    pos = np.flatnonzero(label.labels > tau)
    neg = np.flatnonzero(label.labels <= tau)
    return PixelPartition(pos, neg, label.labels[pos].copy(), tau)


def imbalance_ratio(part: PixelPartition) -> float:
    """|N| / |P|; undefined (raises) when there are no positives."""
    if part.num_positives == 0:
        raise ValueError("imbalance ratio undefined: partition has no positive cells")
    return part.num_negatives / part.num_positives
