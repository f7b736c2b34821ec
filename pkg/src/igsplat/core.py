"""Shared domain types: scene bounding box, cameras, point clouds, images,
activated Gaussian attributes, and the coordinate normalization every other
module builds on.

World coordinates are arbitrary metric units. The scene bounding box is cubic
by construction; `normalize_point` maps its interior to [-0.5, 0.5]^3, which
is the coordinate system the tri-plane module expects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NumericalError(RuntimeError):
    """Raised when an optimization or decode produces non-finite values."""


def _as_f64(a, shape=None, name="array") -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    if shape is not None and out.shape != shape:
        raise ValueError(f"{name}: expected shape {shape}, got {out.shape}")
    return out


@dataclass(frozen=True)
class BoundingBox:
    """Cubic axis-aligned box: all three side lengths are equal."""

    center: np.ndarray
    half_extent: float

    def __post_init__(self):
        object.__setattr__(self, "center", _as_f64(self.center, (3,), "center"))
        object.__setattr__(self, "half_extent", float(self.half_extent))
        if not np.all(np.isfinite(self.center)):
            raise ValueError("bounding box center must be finite")
        if not (self.half_extent > 0.0 and np.isfinite(self.half_extent)):
            raise ValueError("bounding box half_extent must be positive")

    def contains(self, points: np.ndarray) -> np.ndarray:
        d = np.abs(np.asarray(points, dtype=np.float64) - self.center)
        return np.all(d <= self.half_extent, axis=-1)


def make_cubic_bbox(points: np.ndarray, margin: float = 0.0) -> BoundingBox:
    """Smallest cube containing `points`, optionally inflated by `margin`.

    Side length is (1 + margin) times the largest per-axis extent; the center
    is the midpoint of the original axis-aligned bounds, so the cube is not
    re-centered by the margin.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got {pts.shape}")
    if pts.shape[0] == 0:
        raise ValueError("empty point set")
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite coordinates in point set")
    if margin < 0.0:
        raise ValueError("margin must be >= 0")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent <= 0.0:
        raise ValueError("degenerate point set: zero extent")
    return BoundingBox(center=(lo + hi) / 2.0, half_extent=0.5 * (1.0 + margin) * extent)


def normalize_point(p: np.ndarray, bbox: BoundingBox) -> np.ndarray:
    """Affine map sending the bbox interior to [-0.5, 0.5]^3 (points outside
    the box land outside that range; contraction handles them later)."""
    return (np.asarray(p, dtype=np.float64) - bbox.center) / (2.0 * bbox.half_extent)


def denormalize_point(q: np.ndarray, bbox: BoundingBox) -> np.ndarray:
    """Inverse of `normalize_point`."""
    return np.asarray(q, dtype=np.float64) * (2.0 * bbox.half_extent) + bbox.center


@dataclass
class PointCloud:
    """Explicit positions, plus raw per-point attributes during bootstrapping.

    `explicit_attrs` rows follow the raw attribute slot layout of the decoder
    module and exist only while the explicit render path is alive.
    """

    positions: np.ndarray
    explicit_attrs: np.ndarray | None = None

    def __post_init__(self):
        self.positions = _as_f64(self.positions, name="positions")
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {self.positions.shape}")
        if self.positions.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite point positions")
        if self.explicit_attrs is not None:
            self.explicit_attrs = _as_f64(self.explicit_attrs, name="explicit_attrs")
            if self.explicit_attrs.ndim != 2 or self.explicit_attrs.shape[0] != self.positions.shape[0]:
                raise ValueError("explicit_attrs row count must match positions")

    @property
    def n(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. `rotation` is world-to-camera; a world point x maps to
    camera space as R @ x + t, with +z looking forward."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_f64(self.rotation, (3, 3), "rotation"))
        object.__setattr__(self, "translation", _as_f64(self.translation, (3,), "translation"))
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation is not orthonormal")
        if not (0.0 < self.near < self.far):
            raise ValueError("camera requires 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("camera resolution must be at least 1x1")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass
class ImageBuffer:
    """H x W x 3 float image. Values are finite; clamping to [0, 1] happens
    at output time (`clamped` / `to_uint8`), not inside the render math."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = _as_f64(self.pixels, name="pixels")
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be (H, W, 3), got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise NumericalError("non-finite pixel values")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def clamped(self) -> "ImageBuffer":
        return ImageBuffer(np.clip(self.pixels, 0.0, 1.0))

    def to_uint8(self) -> np.ndarray:
        return np.round(np.clip(self.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)

    @staticmethod
    def from_uint8(data: np.ndarray) -> "ImageBuffer":
        return ImageBuffer(np.asarray(data, dtype=np.float64) / 255.0)


SCALE_EXP_MIN = -12.0
SCALE_EXP_MAX = -2.0


@dataclass
class GaussianAttributes:
    """Activated, renderer-ready attributes for a batch of n primitives.

    opacity: (n,) in (0, 1); scale_exp: (n, 3) exponents in [-12, -2] (axis
    scale is e^scale_exp); rotation: (n, 4) unit quaternions (w, x, y, z);
    sh: (n, 3, (deg+1)^2) spherical-harmonics coefficients per RGB channel.
    """

    opacity: np.ndarray
    scale_exp: np.ndarray
    rotation: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        self.opacity = _as_f64(self.opacity, name="opacity")
        self.scale_exp = _as_f64(self.scale_exp, name="scale_exp")
        self.rotation = _as_f64(self.rotation, name="rotation")
        self.sh = _as_f64(self.sh, name="sh")
        n = self.opacity.shape[0]
        if self.opacity.ndim != 1:
            raise ValueError("opacity must be (n,)")
        if self.scale_exp.shape != (n, 3):
            raise ValueError("scale_exp must be (n, 3)")
        if self.rotation.shape != (n, 4):
            raise ValueError("rotation must be (n, 4)")
        if self.sh.ndim != 3 or self.sh.shape[:2] != (n, 3):
            raise ValueError("sh must be (n, 3, n_coeffs)")
        if n:
            if not (np.all(self.opacity > 0.0) and np.all(self.opacity < 1.0)):
                raise ValueError("opacity must lie strictly in (0, 1)")
            if np.any(self.scale_exp < SCALE_EXP_MIN) or np.any(self.scale_exp > SCALE_EXP_MAX):
                raise ValueError("scale_exp out of [-12, -2]")
            norms = np.linalg.norm(self.rotation, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError("rotations must be unit quaternions")

    @property
    def n(self) -> int:
        return self.opacity.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[2]))) - 1

    def select(self, idx: np.ndarray) -> "GaussianAttributes":
        return GaussianAttributes(
            self.opacity[idx], self.scale_exp[idx], self.rotation[idx], self.sh[idx]
        )


def n_sh_coeffs(degree: int) -> int:
    """Total SH coefficient count across RGB for a given degree."""
    if not 0 <= degree <= 3:
        raise ValueError("SH degree must be in 0..3")
    return 3 * (degree + 1) ** 2


def neighbor_distances(positions: np.ndarray, k: int = 3) -> np.ndarray:
    """Per-point mean distance to the k nearest neighbors (used to size
    initial splats)."""
    from scipy.spatial import cKDTree

    pts = np.asarray(positions, dtype=np.float64)
    n = pts.shape[0]
    if n == 1:
        return np.array([1e-3])
    kk = min(k, n - 1)
    dist, _ = cKDTree(pts).query(pts, k=kk + 1)
    return np.maximum(dist[:, 1:].mean(axis=1), 1e-7)


def mean_neighbor_distance(positions: np.ndarray, k: int = 3) -> float:
    return float(neighbor_distances(positions, k).mean())
