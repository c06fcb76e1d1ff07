"""Evaluation metrics and the classical normal-estimation baseline.

Angular error is orientation-blind (a normal and its negation score the
same).  Surface distance is exact point-to-triangle distance, accelerated
by an axis-aligned bounding-volume tree over the mesh.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError, ShapeError
from .geom import PointCloud, SpatialIndex

logger = logging.getLogger(__name__)

# PCA baseline neighborhood sizes keyed by how noisy the input is assumed
# to be: light / moderate / heavy synthetic noise, and scanned data.
PCA_K_LIGHT = 60
PCA_K_MODERATE = 150
PCA_K_HEAVY = 200
PCA_K_SCANNED = 100

_BVH_LEAF_SIZE = 8


def _as_points(obj, name: str) -> np.ndarray:
    arr = obj.points if isinstance(obj, PointCloud) else np.asarray(obj, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] == 0:
        raise ShapeError(f"{name} must be a non-empty (n, 3) array, got {arr.shape}")
    return arr


def _as_unit_rows(obj, name: str) -> np.ndarray:
    arr = np.asarray(obj, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] == 0:
        raise ShapeError(f"{name} must be a non-empty (n, 3) array, got {arr.shape}")
    lengths = np.linalg.norm(arr, axis=1)
    if np.any(np.abs(lengths - 1.0) > 1e-6):
        raise InvalidInputError(f"{name} rows must be unit length within 1e-6")
    return arr


def msae(gt_normals, pred_normals) -> float:
    """Mean squared angular error in squared radians, orientation-blind.

    Each angle is arccos(|gt . pred|), so flipping the sign of any normal
    leaves the value bitwise unchanged.
    """
    gt = _as_unit_rows(gt_normals, "gt_normals")
    pred = _as_unit_rows(pred_normals, "pred_normals")
    if gt.shape != pred.shape:
        raise ShapeError(
            f"normal arrays must align, got {gt.shape} vs {pred.shape}"
        )
    cos = np.clip(np.abs(np.einsum("ij,ij->i", gt, pred)), 0.0, 1.0)
    theta = np.arccos(cos)
    return float(np.mean(theta * theta))


def chamfer(first, second) -> float:
    """Symmetric mean squared nearest-neighbor distance between two clouds."""
    a = _as_points(first, "first")
    b = _as_points(second, "second")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return float(np.mean(d_ab * d_ab) + np.mean(d_ba * d_ba))


# ---------------------------------------------------------------------------
# point-to-surface distance


@dataclass
class TriangleMesh:
    """Triangles over a shared vertex table.

    Faces with zero area are dropped at construction with a warning; an
    empty face list (before or after dropping) is an error.
    """

    vertices: np.ndarray
    faces: np.ndarray
    _bvh: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.intp)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ShapeError(f"vertices must be (m, 3), got {self.vertices.shape}")
        if not np.isfinite(self.vertices).all():
            raise InvalidInputError("mesh vertices must be finite")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ShapeError(f"faces must be (t, 3), got {self.faces.shape}")
        if self.faces.size == 0:
            raise InvalidInputError("mesh has no faces")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise InvalidInputError("face indices out of vertex range")
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        areas = np.linalg.norm(np.cross(b - a, c - a), axis=1)
        degenerate = areas == 0.0
        if degenerate.any():
            logger.warning("dropping %d zero-area face(s)", int(degenerate.sum()))
            self.faces = self.faces[~degenerate]
            if self.faces.shape[0] == 0:
                raise InvalidInputError("every face was degenerate")

    def corners(self):
        return (self.vertices[self.faces[:, i]] for i in range(3))

    def bvh(self):
        if self._bvh is None:
            self._bvh = _TriangleBVH(self)
        return self._bvh


def _dist2_point_to_triangles(p, a, b, c) -> np.ndarray:
    """Exact squared distance from one point to each triangle (a, b, c).

    Closest-point classification over the triangle's Voronoi regions,
    vectorized over the leading axis.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_face = vb / denom
        w_face = vc / denom

        candidates = [
            ((d1 <= 0.0) & (d2 <= 0.0), a),
            ((d3 >= 0.0) & (d4 <= d3), b),
            ((d6 >= 0.0) & (d5 <= d6), c),
            ((vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0), a + t_ab[:, None] * ab),
            ((vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0), a + t_ac[:, None] * ac),
            (
                (va <= 0.0) & ((d4 - d3) >= 0.0) & ((d5 - d6) >= 0.0),
                b + t_bc[:, None] * (c - b),
            ),
        ]
        closest = a + v_face[:, None] * ab + w_face[:, None] * ac
        taken = np.zeros(len(a), dtype=bool)
        for mask, value in candidates:
            use = mask & ~taken
            if use.any():
                closest[use] = value[use]
                taken |= mask
    diff = closest - p
    return np.einsum("ij,ij->i", diff, diff)


class _TriangleBVH:
    """Median-split AABB tree over mesh triangles for nearest queries."""

    def __init__(self, mesh: TriangleMesh):
        a, b, c = mesh.corners()
        self.a, self.b, self.c = a, b, c
        lo = np.minimum(np.minimum(a, b), c)
        hi = np.maximum(np.maximum(a, b), c)
        centroid = (a + b + c) / 3.0
        self.nodes = []
        self._build(np.arange(len(a)), lo, hi, centroid)

    def _build(self, tris, lo, hi, centroid) -> int:
        node_lo = lo[tris].min(axis=0)
        node_hi = hi[tris].max(axis=0)
        node = {"lo": node_lo, "hi": node_hi, "tris": None, "left": -1, "right": -1}
        self.nodes.append(node)
        me = len(self.nodes) - 1
        if tris.size <= _BVH_LEAF_SIZE:
            node["tris"] = tris
            return me
        cent = centroid[tris]
        axis = int(np.argmax(cent.max(axis=0) - cent.min(axis=0)))
        order = np.argsort(cent[:, axis], kind="stable")
        half = tris.size // 2
        left, right = tris[order[:half]], tris[order[half:]]
        if left.size == 0 or right.size == 0:  # all centroids equal
            node["tris"] = tris
            return me
        node["left"] = self._build(left, lo, hi, centroid)
        node["right"] = self._build(right, lo, hi, centroid)
        return me

    def query_dist2(self, p: np.ndarray) -> float:
        best = np.inf
        stack = [0]
        nodes = self.nodes
        while stack:
            node = nodes[stack.pop()]
            gap = np.maximum(np.maximum(node["lo"] - p, p - node["hi"]), 0.0)
            if float(gap @ gap) >= best:
                continue
            tris = node["tris"]
            if tris is not None:
                d2 = _dist2_point_to_triangles(p, self.a[tris], self.b[tris], self.c[tris])
                local = float(d2.min())
                if local < best:
                    best = local
            else:
                stack.append(node["left"])
                stack.append(node["right"])
        return best


def point2surface(points, mesh: TriangleMesh) -> float:
    """Mean exact distance from each point to its nearest mesh triangle."""
    pts = _as_points(points, "points")
    bvh = mesh.bvh()
    total = 0.0
    for p in pts:
        total += np.sqrt(bvh.query_dist2(p))
    return float(total / len(pts))


# ---------------------------------------------------------------------------
# PCA baseline


def pca_normals(cloud, k: int) -> np.ndarray:
    """Classical plane-fit normals: smallest covariance eigenvector of the
    k-neighborhood (the point itself included).

    Signs are fixed to the +z hemisphere (+x on z = 0 ties, then +y).
    Neighborhoods without a fitable plane (rank < 2) fall back to +z with a
    logged count.
    """
    pts = _as_points(cloud, "cloud")
    n = len(pts)
    if not isinstance(k, (int, np.integer)) or not 3 <= k <= n:
        raise InvalidInputError(f"k must be an integer in [3, {n}], got {k!r}")
    idx = SpatialIndex(pts).knn_bulk(pts, int(k))
    nbh = pts[idx]
    centered = nbh - nbh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / float(k)
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0].copy()

    spread = w[:, 2]
    degenerate = ~(w[:, 1] > 1e-12 * np.maximum(spread, 1e-300)) | ~(spread > 0.0)
    if degenerate.any():
        logger.warning(
            "%d degenerate PCA neighborhood(s) fell back to +z", int(degenerate.sum())
        )
        normals[degenerate] = (0.0, 0.0, 1.0)

    nx, ny, nz = normals[:, 0], normals[:, 1], normals[:, 2]
    sign = np.where(
        nz != 0.0,
        np.sign(nz),
        np.where(nx != 0.0, np.sign(nx), np.where(ny < 0.0, -1.0, 1.0)),
    )
    normals = normals * sign[:, None]
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / lengths


# ---------------------------------------------------------------------------
# aggregate report


@dataclass
class MetricsReport:
    """Bundle of metric values; fields are None when not computable."""

    chamfer: float | None = None
    msae: float | None = None
    point2surface: float | None = None
    sharp_msae: float | None = None
    sharp_point2surface: float | None = None
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"counts": dict(self.counts)}
        for name in ("chamfer", "msae", "point2surface", "sharp_msae",
                     "sharp_point2surface"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out


def evaluate(
    gt: PointCloud,
    pred: PointCloud,
    mesh: TriangleMesh | None = None,
    sharp_mask=None,
) -> MetricsReport:
    """Compute whatever metrics the inputs allow.

    Chamfer always runs.  Angular error needs normals on both clouds with
    matching point counts; surface distance needs a mesh; the sharp-subset
    variants additionally need a boolean mask over the ground-truth points.
    Metrics whose inputs are missing are omitted with a warning.
    """
    report = MetricsReport(counts={"points": len(pred)})
    report.chamfer = chamfer(gt, pred)

    angles_ok = gt.has_normals and pred.has_normals and len(gt) == len(pred)
    if angles_ok:
        report.msae = msae(gt.normals, pred.normals)
    else:
        logger.warning(
            "angular error skipped: needs matching clouds with normals on both"
        )
    if mesh is not None:
        report.point2surface = point2surface(pred, mesh)

    if sharp_mask is not None:
        mask = np.asarray(sharp_mask, dtype=bool)
        if mask.shape != (len(gt),):
            raise ShapeError(
                f"sharp mask must have shape ({len(gt)},), got {mask.shape}"
            )
        n_sharp = int(mask.sum())
        report.counts["sharp"] = n_sharp
        if n_sharp == 0:
            logger.warning("sharp mask selects no points; sharp metrics skipped")
        else:
            if angles_ok and len(pred) == len(gt):
                report.sharp_msae = msae(gt.normals[mask], pred.normals[mask])
            if mesh is not None and len(pred) == len(gt):
                report.sharp_point2surface = point2surface(pred.points[mask], mesh)
    return report
