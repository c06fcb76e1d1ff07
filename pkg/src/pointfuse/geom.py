"""Point cloud container, spatial queries, patch extraction and canonical frames.

Patches are fixed-size local neighborhoods expressed in coordinates relative
to their center and scaled by the gathering radius, so every patch lives in
the unit ball.  A canonical frame is the eigenbasis of a patch's second-moment
matrix and is used to factor rigid orientation out of the learning problem.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateCovarianceError,
    InvalidInputError,
    ShapeError,
)

logger = logging.getLogger(__name__)

# Every patch is resampled to exactly this many points.
PATCH_POINTS = 500

# Default gathering radius as a fraction of the bounding-box diagonal.
PATCH_RADIUS_FRACTION = 0.05

# Relative slack applied to ball queries so candidate sets are never clipped
# by kd-tree rounding before the exact distance filter runs.
_BALL_SLACK = 1.0 + 1e-9


def _as_points(obj) -> np.ndarray:
    """Coerce a PointCloud or array-like to an (n, 3) float64 array."""
    if isinstance(obj, PointCloud):
        return obj.points
    pts = np.asarray(obj, dtype=np.float64)
    if pts.ndim == 1 and pts.shape == (3,):
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"expected points of shape (n, 3), got {pts.shape}")
    return pts


class PointCloud:
    """Points with optional per-point unit normals.

    Coordinates are stored as float64.  Normals, when present, must match the
    point count and be unit length within 1e-6.
    """

    __slots__ = ("points", "normals")

    def __init__(self, points, normals=None):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ShapeError(f"points must have shape (n, 3), got {points.shape}")
        if points.shape[0] == 0:
            raise InvalidInputError("point cloud must contain at least one point")
        if not np.isfinite(points).all():
            raise InvalidInputError("point coordinates must be finite")
        if normals is not None:
            normals = np.asarray(normals, dtype=np.float64)
            if normals.shape != points.shape:
                raise ShapeError(
                    f"normals shape {normals.shape} does not match points {points.shape}"
                )
            if not np.isfinite(normals).all():
                raise InvalidInputError("normals must be finite")
            lengths = np.linalg.norm(normals, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                worst = float(np.max(np.abs(lengths - 1.0)))
                raise InvalidInputError(
                    f"normals must be unit length within 1e-6 (worst deviation {worst:.3e})"
                )
        self.points = points
        self.normals = normals

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def copy(self) -> "PointCloud":
        normals = None if self.normals is None else self.normals.copy()
        return PointCloud(self.points.copy(), normals)


def bounding_box_diagonal(cloud) -> float:
    """Length of the diagonal of the axis-aligned bounding box."""
    pts = _as_points(cloud)
    extent = pts.max(axis=0) - pts.min(axis=0)
    return float(np.linalg.norm(extent))


class SpatialIndex:
    """kd-tree over a fixed set of points with exact, tie-stable queries.

    Neighbor sets agree with brute-force scans: candidates come from the tree,
    then exact squared distances decide membership and ordering, with the
    point index breaking distance ties.
    """

    def __init__(self, cloud):
        self.points = _as_points(cloud)
        if self.points.shape[0] == 0:
            raise InvalidInputError("cannot index an empty point set")
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return self.points.shape[0]

    def knn(self, query, k: int) -> np.ndarray:
        """Indices of the k nearest points, ascending by (distance, index)."""
        query = np.asarray(query, dtype=np.float64).reshape(3)
        n = len(self)
        if not 1 <= k <= n:
            raise InvalidInputError(f"k must be in [1, {n}], got {k}")
        dist, _ = self._tree.query(query, k=k)
        kth = float(np.atleast_1d(dist)[-1])
        cand = np.asarray(
            self._tree.query_ball_point(query, kth * _BALL_SLACK + 1e-300), dtype=np.intp
        )
        d2 = ((self.points[cand] - query) ** 2).sum(axis=1)
        order = np.lexsort((cand, d2))
        return cand[order[:k]]

    def radius(self, query, r: float) -> np.ndarray:
        """Indices of points strictly within r, ascending by (distance, index)."""
        query = np.asarray(query, dtype=np.float64).reshape(3)
        if not (np.isfinite(r) and r > 0.0):
            raise InvalidInputError(f"radius must be positive and finite, got {r}")
        cand = np.asarray(self._tree.query_ball_point(query, r * _BALL_SLACK), dtype=np.intp)
        if cand.size == 0:
            return cand
        d2 = ((self.points[cand] - query) ** 2).sum(axis=1)
        keep = d2 < r * r
        cand, d2 = cand[keep], d2[keep]
        order = np.lexsort((cand, d2))
        return cand[order]

    # Bulk variants feed the hot paths.  They keep the same strict-inequality
    # and ordering conventions as the scalar queries; distance ties between
    # distinct points are resolved by index just the same.
    def knn_bulk(self, queries: np.ndarray, k: int) -> np.ndarray:
        queries = np.asarray(queries, dtype=np.float64)
        n = len(self)
        if not 1 <= k <= n:
            raise InvalidInputError(f"k must be in [1, {n}], got {k}")
        _, idx = self._tree.query(queries, k=k)
        return np.atleast_2d(idx)

    def radius_bulk(self, queries: np.ndarray, r: float) -> list:
        queries = np.asarray(queries, dtype=np.float64)
        if not (np.isfinite(r) and r > 0.0):
            raise InvalidInputError(f"radius must be positive and finite, got {r}")
        out = []
        r2 = r * r
        for q, cand in zip(queries, self._tree.query_ball_point(queries, r * _BALL_SLACK)):
            cand = np.asarray(cand, dtype=np.intp)
            if cand.size:
                d2 = ((self.points[cand] - q) ** 2).sum(axis=1)
                keep = d2 < r2
                cand, d2 = cand[keep], d2[keep]
                cand = cand[np.lexsort((cand, d2))]
            out.append(cand)
        return out


def knn(index: SpatialIndex, query, k: int) -> np.ndarray:
    return index.knn(query, k)


def neighbors_excluding_self(index: SpatialIndex, k: int) -> np.ndarray:
    """For every indexed point, its k nearest OTHER points, as an (n, k) array.

    k is clamped (with a warning) when the cloud holds fewer than k + 1
    points.  When several coincident copies shadow a point's own index the
    returned row may keep a zero-distance stand-in instead, which is
    indistinguishable for any distance-based use.
    """
    n = len(index)
    if n < 2:
        raise InvalidInputError("neighbor queries need at least two points")
    kk = min(k, n - 1)
    if kk < k:
        logger.warning("clamping neighbor count from %d to %d (%d points)", k, kk, n)
    raw = index.knn_bulk(index.points, kk + 1)
    out = np.empty((n, kk), dtype=np.intp)
    for i in range(n):
        row = raw[i]
        row = row[row != i]
        out[i] = row[:kk] if row.shape[0] >= kk else raw[i][:kk]
    return out


def radius_query(index: SpatialIndex, query, r: float) -> np.ndarray:
    return index.radius(query, r)


@dataclass
class Patch:
    """A fixed-size neighborhood in center-relative, radius-scaled coordinates.

    points
        (PATCH_POINTS, 3) array of (p - center) / radius coordinates.
    center_index
        Index of the source point the patch was gathered around.
    radius
        Gathering radius in source-cloud units.
    source_sigma
        Noise level (fraction of the clean bounding-box diagonal) of the
        variant the patch was cut from, or None when not applicable.
    """

    points: np.ndarray
    center_index: int
    radius: float
    source_sigma: float | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (PATCH_POINTS, 3):
            raise ShapeError(
                f"patch must have shape ({PATCH_POINTS}, 3), got {pts.shape}"
            )
        if not np.isfinite(pts).all():
            raise InvalidInputError("patch coordinates must be finite")
        if not (np.isfinite(self.radius) and self.radius > 0.0):
            raise InvalidInputError(f"patch radius must be positive, got {self.radius}")
        self.points = pts


def resample_indices(m: int, rng: np.random.Generator) -> np.ndarray:
    """Row selection bringing an m-point member set to exactly PATCH_POINTS.

    Oversized sets are thinned by uniform choice without replacement;
    undersized sets keep every member and append uniform duplicates.  A set
    already at size draws nothing from `rng`.
    """
    if m < 1:
        raise InvalidInputError("cannot resample an empty member set")
    if m == PATCH_POINTS:
        return np.arange(m)
    if m > PATCH_POINTS:
        return rng.choice(m, PATCH_POINTS, replace=False)
    return np.concatenate([np.arange(m), rng.integers(0, m, size=PATCH_POINTS - m)])


def _resample(coords: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    m = coords.shape[0]
    if m == PATCH_POINTS:
        return coords
    return coords[resample_indices(m, rng)]


def gather_patch_at(
    cloud,
    position,
    center_index: int,
    radius: float,
    rng: np.random.Generator,
    index: SpatialIndex | None = None,
    source_sigma: float | None = None,
) -> Patch:
    """Cut a patch around an arbitrary position (not necessarily a cloud point).

    Used when a second cloud is sampled around a center picked on another
    variant of the same shape.  An empty gather falls back to the single
    nearest point rather than failing.
    """
    pts = _as_points(cloud)
    if index is None:
        index = SpatialIndex(pts)
    position = np.asarray(position, dtype=np.float64).reshape(3)
    members = index.radius(position, radius)
    if members.size == 0:
        members = index.knn(position, 1)
        logger.warning(
            "empty patch gather at index %d; falling back to nearest point", center_index
        )
    coords = (pts[members] - position) / radius
    return Patch(_resample(coords, rng), center_index, radius, source_sigma)


def extract_patch(
    cloud,
    center_index: int,
    radius: float | None = None,
    rng: np.random.Generator | None = None,
    index: SpatialIndex | None = None,
    source_sigma: float | None = None,
) -> Patch:
    """Cut the patch centered on cloud point `center_index`.

    radius defaults to PATCH_RADIUS_FRACTION of the cloud's bounding-box
    diagonal.  The member set (all points strictly within the radius) is
    resampled to PATCH_POINTS rows with `rng`; coordinates come out as
    (p - center) / radius, so the center itself maps to the origin.
    """
    pts = _as_points(cloud)
    if not 0 <= center_index < pts.shape[0]:
        raise InvalidInputError(
            f"center index {center_index} out of range for {pts.shape[0]} points"
        )
    if radius is None:
        radius = PATCH_RADIUS_FRACTION * bounding_box_diagonal(pts)
    if not (np.isfinite(radius) and radius > 0.0):
        raise InvalidInputError(
            f"patch radius must be positive and finite, got {radius} "
            "(is the cloud a single repeated point?)"
        )
    if rng is None:
        rng = np.random.default_rng(0)
    return gather_patch_at(
        pts, pts[center_index], center_index, radius, rng, index, source_sigma
    )


def eigen3_symmetric(matrix) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and matching eigenvector columns of a symmetric 3x3.

    Each eigenvector's sign is fixed so its largest-magnitude component is
    positive (first such component on exact ties).
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3):
        raise ShapeError(f"expected a 3x3 matrix, got {m.shape}")
    if not np.isfinite(m).all():
        raise InvalidInputError("matrix entries must be finite")
    if not np.allclose(m, m.T, rtol=1e-8, atol=1e-10):
        raise InvalidInputError("matrix is not symmetric")
    w, v = np.linalg.eigh(m)
    w = w[::-1].copy()
    v = v[:, ::-1].copy()
    pick = np.argmax(np.abs(v), axis=0)
    signs = np.where(v[pick, np.arange(3)] < 0.0, -1.0, 1.0)
    return w, v * signs


@dataclass
class CanonicalFrame:
    """Orthonormal rotation into a patch's eigenbasis.

    rotation
        (3, 3) matrix T whose rows are covariance eigenvectors ordered by
        descending eigenvalue; applying the frame maps patch coordinates
        into the eigenbasis, inverting maps back.
    eigenvalues
        The three covariance eigenvalues, descending.
    """

    rotation: np.ndarray
    eigenvalues: np.ndarray = field(default=None)

    def apply(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def invert(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation


def patch_covariance(points) -> np.ndarray:
    """Second-moment matrix of center-relative patch coordinates.

    The patch center sits at the origin by construction, so moments are taken
    about the origin rather than the coordinate mean.
    """
    pts = _as_points(points)
    return (pts.T @ pts) / pts.shape[0]


def canonical_frame(patch) -> CanonicalFrame:
    """Eigenbasis frame of a patch's covariance.

    Raises DegenerateCovarianceError when the covariance carries no signal
    (every patch point at the center).
    """
    pts = patch.points if isinstance(patch, Patch) else _as_points(patch)
    cov = patch_covariance(pts)
    trace = float(np.trace(cov))
    if trace <= 0.0 or not np.isfinite(trace):
        raise DegenerateCovarianceError(
            "patch covariance is zero; all points coincide with the center"
        )
    w, v = eigen3_symmetric(cov)
    return CanonicalFrame(rotation=v.T.copy(), eigenvalues=w)


def apply_frame(frame: CanonicalFrame, vectors: np.ndarray) -> np.ndarray:
    return frame.apply(vectors)


def invert_frame(frame: CanonicalFrame, vectors: np.ndarray) -> np.ndarray:
    return frame.invert(vectors)


_AXES = {"x": 0, "y": 1, "z": 2}


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Right-handed rotation by `angle` radians about a coordinate axis."""
    if isinstance(axis, str):
        try:
            axis = _AXES[axis.lower()]
        except KeyError:
            raise InvalidInputError(f"axis must be one of 'x', 'y', 'z', got {axis!r}")
    if axis not in (0, 1, 2):
        raise InvalidInputError(f"axis must be 0, 1 or 2, got {axis}")
    c, s = np.cos(angle), np.sin(angle)
    rot = np.eye(3)
    # remaining axes in cyclic order keep the rotation right-handed
    a, b = (axis + 1) % 3, (axis + 2) % 3
    rot[a, a] = c
    rot[a, b] = -s
    rot[b, a] = s
    rot[b, b] = c
    return rot


def rotate_patch(patch, axis, angle: float):
    """Rotate patch coordinates about a coordinate axis through the origin.

    Accepts a Patch (returns a new Patch with the same metadata) or a bare
    (n, 3) array (returns an array).
    """
    rot = rotation_matrix(axis, angle)
    if isinstance(patch, Patch):
        return Patch(
            patch.points @ rot.T, patch.center_index, patch.radius, patch.source_sigma
        )
    return _as_points(patch) @ rot.T
