"""Deterministic synthetic pose tasks for desk-scale loss comparisons.

Each instance gets per-keypoint joint cells drawn uniformly over the
grid interior, a feature vector that is a fixed random linear encoding
of the normalized joint coordinates plus Gaussian noise, an instance
area, and per-keypoint visibility flags.  With zero noise the encoding
is exactly invertible by least squares whenever
feature_dim >= 2 * num_keypoints, so a linear model can localize
perfectly in principle; noise and occlusion create the confidence and
quality spread the ranking losses need.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .heatmap import Annotation, GridShape, LabelField, Mode, make_blank_label, \
    make_dot_label, make_gaussian_label

__all__ = ["SynthSpec", "SynthSample", "SynthDataset", "encoding_matrix", "generate",
           "labels_for", "labels_for_1d"]


@dataclass(frozen=True)
class SynthSpec:
    seed: int
    num_instances: int
    grid: GridShape
    num_keypoints: int
    feature_dim: int
    noise_sigma: float = 0.0
    area_range: tuple[float, float] = (2.0, 5.0)
    occlusion_prob: float = 0.0

    def __post_init__(self) -> None:
        if self.grid.mode is not Mode.TWO_D:
            raise ValueError("synthetic tasks are generated on 2D grids")
        if self.grid.height < 3 or self.grid.width < 3:
            raise ValueError("grid too small: need at least 3x3 for interior joints")
        if self.num_instances < 1 or self.num_keypoints < 1:
            raise ValueError("need at least one instance and one keypoint")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")
        lo, hi = self.area_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"area_range must satisfy 0 < lo <= hi, got {self.area_range}")
        if not 0.0 <= self.occlusion_prob < 1.0:
            raise ValueError("occlusion_prob must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "num_instances": self.num_instances,
            "grid": {"height": self.grid.height, "width": self.grid.width},
            "num_keypoints": self.num_keypoints,
            "feature_dim": self.feature_dim,
            "noise_sigma": self.noise_sigma,
            "area_range": list(self.area_range),
            "occlusion_prob": self.occlusion_prob,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(
            seed=int(d["seed"]),
            num_instances=int(d["num_instances"]),
            grid=GridShape(int(d["grid"]["height"]), int(d["grid"]["width"])),
            num_keypoints=int(d["num_keypoints"]),
            feature_dim=int(d["feature_dim"]),
            noise_sigma=float(d.get("noise_sigma", 0.0)),
            area_range=tuple(d.get("area_range", (2.0, 5.0))),
            occlusion_prob=float(d.get("occlusion_prob", 0.0)),
        )


@dataclass
class SynthSample:
    features: np.ndarray
    gt_cells: list[tuple[int, int]]
    area: float
    visibility: np.ndarray  # bool per keypoint


@dataclass
class SynthDataset:
    spec: SynthSpec
    samples: list[SynthSample]

    def __len__(self) -> int:
        return len(self.samples)

    def to_manifest(self) -> dict:
        return {
            "format": "rankpose-dataset",
            "version": 1,
            "spec": self.spec.to_dict(),
            "samples": [
                {
                    "features": [float(x) for x in s.features],
                    "gt_cells": [[int(r), int(c)] for r, c in s.gt_cells],
                    "area": float(s.area),
                    "visibility": [bool(v) for v in s.visibility],
                }
                for s in self.samples
            ],
        }

    @classmethod
    def from_manifest(cls, manifest: dict) -> "SynthDataset":
        if manifest.get("format") != "rankpose-dataset":
            raise ValueError("not a rankpose dataset manifest")
        spec = SynthSpec.from_dict(manifest["spec"])
        samples = [
            SynthSample(
                features=np.array(s["features"], dtype=np.float64),
                gt_cells=[(int(r), int(c)) for r, c in s["gt_cells"]],
                area=float(s["area"]),
                visibility=np.array(s["visibility"], dtype=bool),
            )
            for s in manifest["samples"]
        ]
        return cls(spec, samples)


def encoding_matrix(spec: SynthSpec) -> np.ndarray:
    """The fixed (feature_dim, 2 * num_keypoints) coordinate encoding."""
    child = np.random.SeedSequence(spec.seed).spawn(2)[0]
    rng = np.random.default_rng(child)
    return rng.standard_normal((spec.feature_dim, 2 * spec.num_keypoints))


def generate(spec: SynthSpec) -> SynthDataset:
    """Draw a dataset; identical specs produce identical datasets."""
    matrix = encoding_matrix(spec)
    child = np.random.SeedSequence(spec.seed).spawn(2)[1]
    rng = np.random.default_rng(child)
    h, w = spec.grid.height, spec.grid.width
    samples = []
    for _ in range(spec.num_instances):
        rows = rng.integers(1, h - 1, size=spec.num_keypoints)
        cols = rng.integers(1, w - 1, size=spec.num_keypoints)
        z = np.empty(2 * spec.num_keypoints)
        z[0::2] = rows / (h - 1)
        z[1::2] = cols / (w - 1)
        noise = rng.standard_normal(spec.feature_dim) * spec.noise_sigma
        area = float(rng.uniform(*spec.area_range))
        visible = rng.random(spec.num_keypoints) >= spec.occlusion_prob
        samples.append(SynthSample(
            features=matrix @ z + noise,
            gt_cells=[(int(r), int(c)) for r, c in zip(rows, cols)],
            area=area,
            visibility=visible,
        ))
    return SynthDataset(spec, samples)


def labels_for(sample: SynthSample, grid: GridShape, annotation: Annotation) -> list[LabelField]:
    """Per-keypoint 2D label fields; occluded keypoints get blank fields."""
    fields = []
    for k, cell in enumerate(sample.gt_cells):
        if not sample.visibility[k]:
            fields.append(make_blank_label(grid, keypoint_id=k))
        elif annotation.kind == "dot":
            fields.append(make_dot_label(grid, cell, keypoint_id=k))
        elif annotation.kind == "gaussian":
            fields.append(make_gaussian_label(grid, cell, annotation.sigma,
                                              annotation.truncation_radius, keypoint_id=k))
        else:
            raise ValueError(f"unsupported annotation kind {annotation.kind!r}")
    return fields


def labels_for_1d(sample: SynthSample, grid: GridShape, annotation: Annotation,
                  split_factor: int = 1) -> list[tuple[LabelField, LabelField]]:
    """Per-keypoint (x-axis, y-axis) 1D bin label fields at split factor k."""
    shape_x = GridShape(grid.height, grid.width, Mode.ONE_D_X, split_factor)
    shape_y = GridShape(grid.height, grid.width, Mode.ONE_D_Y, split_factor)
    out = []
    for k, (row, col) in enumerate(sample.gt_cells):
        if not sample.visibility[k]:
            out.append((make_blank_label(shape_x, keypoint_id=k),
                        make_blank_label(shape_y, keypoint_id=k)))
            continue
        bx, by = col * split_factor, row * split_factor
        if annotation.kind == "dot":
            pair = (make_dot_label(shape_x, bx, keypoint_id=k),
                    make_dot_label(shape_y, by, keypoint_id=k))
        elif annotation.kind == "gaussian":
            pair = (make_gaussian_label(shape_x, bx, annotation.sigma,
                                        annotation.truncation_radius, keypoint_id=k),
                    make_gaussian_label(shape_y, by, annotation.sigma,
                                        annotation.truncation_radius, keypoint_id=k))
        else:
            raise ValueError(f"unsupported annotation kind {annotation.kind!r}")
        out.append(pair)
    return out
