"""Multi-view feature lifting: 2D feature maps -> per-point semantic field.

Each point is projected into every view with a pinhole model; views that
pass both the frustum test and a depth-buffer occlusion test contribute a
bilinearly sampled feature. Contributions are averaged (uniform weights by
default, injectable otherwise) into one descriptor per point. Points no
view sees keep a zero row and coverage=False.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError
from .geometry import PointCloud, _frozen


@dataclass(frozen=True)
class CameraView:
    """Pinhole view: intrinsics, world-to-camera extrinsics, rasters.

    feature_map is (H, W, D); depth_map is (H, W) with 0 marking invalid
    pixels. The extrinsics rotation block must be orthonormal within 1e-5.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    extrinsics: np.ndarray
    width: int
    height: int
    feature_map: np.ndarray
    depth_map: np.ndarray

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ParameterError("focal lengths must be positive")
        ext = np.asarray(self.extrinsics, dtype=np.float64)
        if ext.shape != (4, 4):
            raise ParameterError("extrinsics must be a 4x4 matrix")
        rot = ext[:3, :3]
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-5:
            raise DataError("extrinsics rotation block is not orthonormal")
        feat = np.asarray(self.feature_map, dtype=np.float64)
        depth = np.asarray(self.depth_map, dtype=np.float64)
        if feat.ndim != 3 or feat.shape[:2] != (self.height, self.width):
            raise ParameterError("feature_map must be (H, W, D)")
        if depth.shape != (self.height, self.width):
            raise ParameterError("depth_map must be (H, W)")
        object.__setattr__(self, "extrinsics", _frozen(ext, np.float64))
        object.__setattr__(self, "feature_map", _frozen(feat, np.float64))
        object.__setattr__(self, "depth_map", _frozen(depth, np.float64))

    @property
    def dim(self) -> int:
        return self.feature_map.shape[2]


@dataclass(frozen=True)
class FeatureField:
    """Dense per-point (or per-voxel) feature matrix with coverage flags.

    Rows with coverage=False are exactly zero.
    """

    values: np.ndarray
    granularity: str = "point"
    coverage: np.ndarray | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ParameterError("feature values must be (M, D)")
        if self.granularity not in ("point", "voxel"):
            raise ParameterError("granularity must be 'point' or 'voxel'")
        if not np.isfinite(vals).all():
            raise DataError("feature values must be finite")
        if self.coverage is None:
            cov = np.ones(vals.shape[0], dtype=bool)
        else:
            cov = np.asarray(self.coverage, dtype=bool)
            if cov.shape != (vals.shape[0],):
                raise ParameterError("coverage must be (M,)")
            if vals[~cov].any():
                raise DataError("coverage=False rows must be exactly zero")
        object.__setattr__(self, "values", _frozen(vals, np.float64))
        object.__setattr__(self, "coverage", _frozen(cov, bool))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]


def project_point(view: CameraView, p):
    """Pinhole projection of one world point.

    Returns (u, v, depth) or None when the point is behind the camera or
    outside [0, W) x [0, H). Out-of-frustum is an absent result, not an
    error.
    """
    uv, depth, valid = project_points(view, np.asarray(p, dtype=np.float64).reshape(1, 3))
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(depth[0])


def project_points(view: CameraView, points):
    """Vectorized pinhole projection: (uv, depth, in_frustum_mask)."""
    pts = np.asarray(points, dtype=np.float64)
    cam = pts @ view.extrinsics[:3, :3].T + view.extrinsics[:3, 3]
    depth = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = view.fx * cam[:, 0] / depth + view.cx
        v = view.fy * cam[:, 1] / depth + view.cy
    valid = (
        (depth > 0)
        & (u >= 0.0) & (u < view.width)
        & (v >= 0.0) & (v < view.height)
    )
    uv = np.stack([u, v], axis=1)
    uv[~valid] = 0.0
    return uv, depth, valid


def bilinear_sample(raster: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear sampling of an (H, W, D) raster at continuous (u, v).

    Neighbour pixels are clamped to the raster bounds, so sampling at exact
    integer coordinates returns the stored pixel value.
    """
    h, w = raster.shape[:2]
    u = uv[:, 0]
    v = uv[:, 1]
    u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 1)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 1)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    du = (u - u0)[:, None]
    dv = (v - v0)[:, None]
    top = raster[v0, u0] * (1.0 - du) + raster[v0, u1] * du
    bot = raster[v1, u0] * (1.0 - du) + raster[v1, u1] * du
    return top * (1.0 - dv) + bot * dv


def lift_multiview(
    cloud: PointCloud,
    views: list[CameraView],
    depth_tol: float,
    weight_fn=None,
) -> FeatureField:
    """Aggregate per-view features into one semantic descriptor per point.

    A view contributes to a point when the projection lands in frame AND
    the projected depth matches the view's depth buffer at the rounded
    pixel within depth_tol (occlusion test). Contributions are combined by
    weighted averaging; the default weight is uniform. ``weight_fn`` may be
    a callable (view, points, uv, depth) -> (N,) positive weights.
    """
    if depth_tol <= 0:
        raise ParameterError("depth_tol must be positive")
    if not views:
        n = len(cloud)
        return FeatureField(np.zeros((n, 0)), "point", np.zeros(n, dtype=bool))
    dims = {v.dim for v in views}
    if len(dims) != 1:
        raise ParameterError(f"views disagree on feature dimension: {sorted(dims)}")
    d = dims.pop()
    n = len(cloud)
    accum = np.zeros((n, d), dtype=np.float64)
    wsum = np.zeros(n, dtype=np.float64)
    for view in views:
        uv, depth, valid = project_points(view, cloud.positions)
        ur = np.clip(np.rint(uv[:, 0]).astype(np.int64), 0, view.width - 1)
        vr = np.clip(np.rint(uv[:, 1]).astype(np.int64), 0, view.height - 1)
        buffer_depth = view.depth_map[vr, ur]
        visible = valid & (buffer_depth > 0) & (
            np.abs(depth - buffer_depth) <= depth_tol
        )
        if not visible.any():
            continue
        samples = bilinear_sample(view.feature_map, uv[visible])
        if weight_fn is None:
            weights = np.ones(int(visible.sum()), dtype=np.float64)
        else:
            weights = np.asarray(
                weight_fn(view, cloud.positions[visible], uv[visible], depth[visible]),
                dtype=np.float64,
            )
            if weights.shape != (int(visible.sum()),) or (weights <= 0).any():
                raise ParameterError("weight_fn must return positive per-point weights")
        accum[visible] += samples * weights[:, None]
        wsum[visible] += weights
    covered = wsum > 0
    accum[covered] /= wsum[covered, None]
    accum[~covered] = 0.0
    return FeatureField(accum, "point", covered)
