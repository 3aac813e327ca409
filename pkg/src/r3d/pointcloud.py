"""Point cloud types, sampling, grouping and training-time augmentation.

A PointCloud is xyz in meters plus RGB in [0, 1], both float32 [N, 3]. The
sampling/grouping entry points (farthest_point_sample, knn_group) validate
arguments and defer the inner loops to r3d.kernels, which picks the compiled
or numpy backend at import.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .rng import Rng


@dataclass
class PointCloud:
    """xyz [N, 3] float32 (meters) + colors [N, 3] float32 clamped to [0, 1]."""

    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float32)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be [N, 3], got {self.points.shape}")
        if self.colors.shape != self.points.shape:
            raise ValueError("colors must match points shape")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite point coordinates")
        np.clip(self.colors, 0.0, 1.0, out=self.colors)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def select(self, idx) -> "PointCloud":
        return PointCloud(self.points[idx], self.colors[idx])

    def as_array(self) -> np.ndarray:
        """Concatenated [N, 6] view: xyz then rgb."""
        return np.concatenate([self.points, self.colors], axis=1)


@dataclass
class RigidTransform:
    """Rotation [3, 3] + translation [3]; maps p -> R p + t."""

    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(3, 3)
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(3)
        if not np.allclose(self.rot.T @ self.rot, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(self.rot) < 0.0:
            raise ValueError("rotation has negative determinant (reflection)")

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float32)
        return points @ self.rot.T.astype(np.float32) + self.trans.astype(np.float32)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))


@dataclass
class Aabb:
    """Axis-aligned box [lo, hi], inclusive on both ends."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if not np.all(self.lo <= self.hi):
            raise ValueError("box lo must be <= hi componentwise")

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points)
        return np.all((p >= self.lo) & (p <= self.hi), axis=-1)

    def sample(self, rng: Rng, size=None) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(size, 3) if size else 3)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)


@dataclass
class AugmentConfig:
    """Training-time augmentation knobs; the default ranges follow the color
    jitter recipe (brightness +-0.125, contrast and saturation [0.5, 1.5]).
    Noise sigmas are desk-scale (2 mm); dropout removes up to 20% of points.
    """

    brightness_range: tuple[float, float] = (-0.125, 0.125)
    contrast_range: tuple[float, float] = (0.5, 1.5)
    saturation_range: tuple[float, float] = (0.5, 1.5)
    coord_noise_sigma: float = 0.002
    proprio_noise_sigma: float = 0.002
    dropout_max_ratio: float = 0.2
    permute_points: bool = True

    def __post_init__(self):
        for name in ("brightness_range", "contrast_range", "saturation_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not ordered")
        if self.coord_noise_sigma < 0 or self.proprio_noise_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        if not (0.0 <= self.dropout_max_ratio < 1.0):
            raise ValueError("dropout_max_ratio must be in [0, 1)")

    @staticmethod
    def identity() -> "AugmentConfig":
        return AugmentConfig((0.0, 0.0), (1.0, 1.0), (1.0, 1.0), 0.0, 0.0, 0.0, False)


# -- sampling / grouping -------------------------------------------------------


def farthest_point_sample(cloud: PointCloud, n: int, start_index: int) -> np.ndarray:
    """Greedy max-min point selection: out[0] == start_index, each following
    index maximizes its distance to the already-chosen set, ties to the lowest
    index. Returns int64 [n], all distinct."""
    return kernels.fps_indices(cloud.points, n, start_index)


def knn_group(cloud: PointCloud, center_indices: np.ndarray, k: int) -> np.ndarray:
    """k nearest neighbours (squared Euclidean) per center, int64 [C, k], each
    row sorted by (distance, index); the center itself is at distance zero."""
    return kernels.knn_indices(cloud.points, center_indices, k)


def crop_workspace(cloud: PointCloud, box: Aabb) -> PointCloud:
    """Keep points inside the box (inclusive), preserving order. May be empty."""
    return cloud.select(box.contains(cloud.points))


def merge_views(clouds: list[PointCloud], extrinsics: list[RigidTransform]) -> PointCloud:
    """Map each view into the common frame (p -> R p + t) and concatenate in
    the given order."""
    if len(clouds) != len(extrinsics):
        raise ValueError("one extrinsic per view required")
    if not clouds:
        raise ValueError("no views to merge")
    pts = [tf.apply(c.points) for c, tf in zip(clouds, extrinsics)]
    cols = [c.colors for c in clouds]
    return PointCloud(np.concatenate(pts, axis=0), np.concatenate(cols, axis=0))


def resample_indices(n_points: int, n_p: int, rng: Rng, points: np.ndarray | None = None) -> np.ndarray:
    """Index array realizing resample_to_fixed; callers with per-point labels
    gather through it so labels stay aligned."""
    if n_points == 0:
        raise ValueError("cannot resample an empty cloud")
    if n_points == n_p:
        return np.arange(n_p, dtype=np.int64)
    if n_points > n_p:
        start = int(rng.integers(n_points))
        return kernels.fps_indices(points, n_p, start)
    pad = rng.integers(0, n_points, size=n_p - n_points).astype(np.int64)
    return np.concatenate([np.arange(n_points, dtype=np.int64), pad])


def resample_to_fixed(cloud: PointCloud, n_p: int, rng: Rng) -> PointCloud:
    """Force exactly n_p points: FPS (rng-seeded start) when too many,
    duplicate rng-chosen points when too few, identity when equal."""
    idx = resample_indices(cloud.n_points, n_p, rng, points=cloud.points)
    if cloud.n_points == n_p:
        return cloud
    return cloud.select(idx)


# -- augmentation --------------------------------------------------------------


def color_jitter(colors: np.ndarray, delta: float, contrast: float, saturation: float) -> np.ndarray:
    """Per-point jitter: pull rgb toward/away from its gray value (saturation),
    scale around 0.5 (contrast), shift (brightness), clamp to [0, 1]."""
    gray = colors.mean(axis=1, keepdims=True)
    out = ((colors - gray) * saturation + gray - 0.5) * contrast + 0.5 + delta
    return np.clip(out, 0.0, 1.0).astype(np.float32, copy=False)


def augment(cloud: PointCloud, proprio: np.ndarray, cfg: AugmentConfig, rng: Rng) -> tuple[PointCloud, np.ndarray]:
    """Training-time randomization, applied in order: point permutation, color
    jitter, additive Gaussian noise (coords and proprio), point dropout with
    duplicate-padding back to n_p.

    Stages whose drawn values are exact identities (delta=0, c=s=1, sigma=0,
    zero dropped points) are skipped so an identity config is a bit-exact
    no-op. Disabled stages consume no rng draws.
    """
    points, colors = cloud.points, cloud.colors
    proprio = np.asarray(proprio, dtype=np.float32)
    n_p = points.shape[0]

    if cfg.permute_points:
        perm = rng.permutation(n_p)
        points, colors = points[perm], colors[perm]

    delta = float(rng.uniform(*cfg.brightness_range))
    contrast = float(rng.uniform(*cfg.contrast_range))
    saturation = float(rng.uniform(*cfg.saturation_range))
    if not (delta == 0.0 and contrast == 1.0 and saturation == 1.0):
        colors = color_jitter(colors, delta, contrast, saturation)

    if cfg.coord_noise_sigma > 0.0:
        points = points + rng.normal(0.0, cfg.coord_noise_sigma, size=points.shape).astype(np.float32)
    if cfg.proprio_noise_sigma > 0.0:
        proprio = proprio + rng.normal(0.0, cfg.proprio_noise_sigma, size=proprio.shape).astype(np.float32)

    if cfg.dropout_max_ratio > 0.0:
        ratio = float(rng.uniform(0.0, cfg.dropout_max_ratio))
        n_drop = math.floor(ratio * n_p)
        if n_drop > 0:
            drop = rng.choice(n_p, size=n_drop, replace=False)
            keep = np.setdiff1d(np.arange(n_p), drop, assume_unique=True)
            pad = keep[rng.integers(0, keep.size, size=n_drop)]
            idx = np.concatenate([keep, pad])
            points, colors = points[idx], colors[idx]

    out = PointCloud(points, colors)
    return out, proprio
