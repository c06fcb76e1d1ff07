"""Training data synthesis: noise variants, contrastive pairs, regression targets.

A shape is represented by a clean cloud plus a ladder of noisy copies at
fixed noise fractions.  Contrastive pairs cut patches around one and the
same surface location on two variants of the shape; regression samples pair
a noisy patch with the clean geometry inside the same ball, expressed in the
noisy patch's canonical coordinates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ShapeError
from .geom import (
    PATCH_POINTS,
    PATCH_RADIUS_FRACTION,
    CanonicalFrame,
    Patch,
    PointCloud,
    SpatialIndex,
    bounding_box_diagonal,
    canonical_frame,
    gather_patch_at,
    resample_indices,
    rotate_patch,
)

logger = logging.getLogger(__name__)

# Noise ladder used to build variant sets, as fractions of the clean cloud's
# bounding-box diagonal.
GAUSSIAN_SIGMA_FRACTIONS = (0.0025, 0.005, 0.01, 0.015, 0.025)

# Rotation augmentation set for the second view of a contrastive pair.
ROTATION_ANGLES = tuple(
    np.pi * f
    for f in (0, 1 / 12, 1 / 6, 1 / 4, 1 / 3, 1 / 2, 7 / 12, 2 / 3, 3 / 4, 5 / 6, 1)
)

# Sharp-feature test: a point is sharp when any of this many nearest
# neighbors (excluding the point itself) subtends a normal angle inside
# (SHARP_MIN_ANGLE, SHARP_MAX_ANGLE).
SHARP_NEIGHBORS = 10
SHARP_MIN_ANGLE = np.pi / 6
SHARP_MAX_ANGLE = 5 * np.pi / 6


@dataclass
class NoiseSpec:
    """Distortion description: Gaussian everywhere, or on a point subset.

    sigma_fraction scales with the clean cloud's bounding-box diagonal.
    impulse_fraction, when set, picks that share of points uniformly and
    perturbs only them (kind "impulsive").
    """

    kind: str = "gaussian"
    sigma_fraction: float = 0.01
    impulse_fraction: float | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "impulsive"):
            raise InvalidInputError(f"unknown noise kind {self.kind!r}")
        if not (np.isfinite(self.sigma_fraction) and self.sigma_fraction >= 0.0):
            raise InvalidInputError(
                f"sigma_fraction must be >= 0, got {self.sigma_fraction}"
            )
        if self.kind == "impulsive":
            f = self.impulse_fraction
            if f is None or not (np.isfinite(f) and 0.0 <= f <= 1.0):
                raise InvalidInputError(
                    f"impulsive noise needs impulse_fraction in [0, 1], got {f}"
                )
        elif self.impulse_fraction is not None:
            raise InvalidInputError("impulse_fraction only applies to impulsive noise")


def add_noise(cloud: PointCloud, spec: NoiseSpec, rng: np.random.Generator) -> PointCloud:
    """Perturb coordinates per `spec`; normals are carried over unchanged."""
    sigma = spec.sigma_fraction * bounding_box_diagonal(cloud)
    pts = cloud.points
    if spec.kind == "gaussian":
        noisy = pts + rng.normal(0.0, sigma, size=pts.shape)
    else:
        count = int(np.rint(spec.impulse_fraction * len(cloud)))
        noisy = pts.copy()
        if count:
            hit = rng.choice(len(cloud), size=count, replace=False)
            noisy[hit] += rng.normal(0.0, sigma, size=(count, 3))
    return PointCloud(noisy, cloud.normals)


@dataclass
class VariantSet:
    """A clean cloud and its noisy copies, ordered by noise level.

    Every variant has the same point count and index correspondence: point i
    of a noisy cloud is the displaced point i of the clean one.
    """

    clean: PointCloud
    noisy: list = field(default_factory=list)

    def __post_init__(self):
        for sigma, cloud in self.noisy:
            if len(cloud) != len(self.clean):
                raise ShapeError(
                    f"variant at sigma={sigma} has {len(cloud)} points, "
                    f"clean has {len(self.clean)}"
                )

    @property
    def n_variants(self) -> int:
        return 1 + len(self.noisy)

    def variant(self, i: int):
        """(sigma_fraction, cloud) with the clean cloud at i = 0."""
        if i == 0:
            return 0.0, self.clean
        return self.noisy[i - 1]


def make_variant_set(
    cloud: PointCloud,
    sigma_fractions=GAUSSIAN_SIGMA_FRACTIONS,
    rng: np.random.Generator | None = None,
) -> VariantSet:
    """Build the noise ladder for one shape.

    The clean cloud must carry normals; they are the eventual regression
    ground truth and are shared by every variant.
    """
    if not cloud.has_normals:
        raise InvalidInputError("variant sets need a clean cloud with normals")
    if rng is None:
        rng = np.random.default_rng(0)
    noisy = [
        (float(s), add_noise(cloud, NoiseSpec("gaussian", float(s)), rng))
        for s in sigma_fractions
    ]
    return VariantSet(clean=cloud, noisy=noisy)


@dataclass
class ContrastivePair:
    """Two views of the same surface location on two shape variants.

    Both patches are centered on the first view's center position and sit in
    the first patch's canonical frame; the second carries an extra axis
    rotation.  center_index refers to the shared source point.
    """

    first: Patch
    second: Patch
    center_index: int


def build_contrastive_pair(
    variant_set: VariantSet,
    center_index: int,
    first_variant: int,
    second_variant: int,
    axis: int,
    angle: float,
    rng: np.random.Generator,
    indexes: list | None = None,
) -> ContrastivePair:
    """Deterministically assemble one pair given every choice explicitly.

    `indexes`, when given, holds one SpatialIndex per variant (clean first)
    so repeated gathers against the same clouds skip tree rebuilds.
    """
    sigma1, cloud1 = variant_set.variant(first_variant)
    sigma2, cloud2 = variant_set.variant(second_variant)
    if not 0 <= center_index < len(cloud1):
        raise InvalidInputError(
            f"center index {center_index} out of range for {len(cloud1)} points"
        )
    idx1 = indexes[first_variant] if indexes else None
    idx2 = indexes[second_variant] if indexes else None
    r1 = PATCH_RADIUS_FRACTION * bounding_box_diagonal(cloud1)
    r2 = PATCH_RADIUS_FRACTION * bounding_box_diagonal(cloud2)
    position = cloud1.points[center_index]
    patch1 = gather_patch_at(cloud1, position, center_index, r1, rng, idx1, sigma1)
    patch2 = gather_patch_at(cloud2, position, center_index, r2, rng, idx2, sigma2)
    frame = canonical_frame(patch1)
    first = Patch(frame.apply(patch1.points), center_index, r1, sigma1)
    second = Patch(frame.apply(patch2.points), center_index, r2, sigma2)
    second = rotate_patch(second, axis, angle)
    return ContrastivePair(first=first, second=second, center_index=center_index)


def sample_contrastive_pair(
    variant_set: VariantSet,
    center_index: int,
    rng: np.random.Generator,
    first_variant: int | None = None,
    indexes: list | None = None,
) -> ContrastivePair:
    """Draw a pair: variants uniform with replacement, rotation uniform.

    `first_variant` pins the first view (used when a schedule sweeps every
    variant); the second view is always drawn fresh.
    """
    n = variant_set.n_variants
    if first_variant is None:
        first_variant = int(rng.integers(0, n))
    elif not 0 <= first_variant < n:
        raise InvalidInputError(f"first_variant must be in [0, {n}), got {first_variant}")
    second_variant = int(rng.integers(0, n))
    axis = int(rng.integers(0, 3))
    angle = float(ROTATION_ANGLES[rng.integers(0, len(ROTATION_ANGLES))])
    return build_contrastive_pair(
        variant_set, center_index, first_variant, second_variant, axis, angle, rng, indexes
    )


def classify_sharp_features(
    cloud: PointCloud,
    k: int = SHARP_NEIGHBORS,
    index: SpatialIndex | None = None,
) -> np.ndarray:
    """Boolean sharp flag per point.

    A point is sharp when any of its k nearest neighbors (itself excluded)
    has a normal whose angle to the point's own normal falls strictly inside
    (SHARP_MIN_ANGLE, SHARP_MAX_ANGLE).  Near-parallel and near-antiparallel
    neighbors (thin sheets) both count as smooth.
    """
    if not cloud.has_normals:
        raise InvalidInputError("sharp-feature classification needs normals")
    n = len(cloud)
    if n < k + 1:
        raise InvalidInputError(f"need at least {k + 1} points for k={k}, got {n}")
    if index is None:
        index = SpatialIndex(cloud)
    raw = index.knn_bulk(cloud.points, k + 1)
    neigh = np.empty((n, k), dtype=np.intp)
    for i in range(n):
        row = raw[i]
        row = row[row != i][:k]
        if row.shape[0] < k:
            row = raw[i][:k]
        neigh[i] = row
    cos = np.einsum("nkj,nj->nk", cloud.normals[neigh], cloud.normals)
    cos = np.clip(cos, -1.0, 1.0)
    theta = np.arccos(cos)
    return np.any((theta > SHARP_MIN_ANGLE) & (theta < SHARP_MAX_ANGLE), axis=1)


def density_resample(
    cloud: PointCloud,
    regime: str,
    rng: np.random.Generator,
    floor: float = 0.2,
    bands: int = 8,
) -> PointCloud:
    """Thin a cloud non-uniformly along its longest bounding-box axis.

    "gradient" ramps the keep probability linearly from `floor` to 1;
    "striped" splits the axis into `bands` equal slabs alternating keep
    probability 1 and `floor`.  floor = 1 keeps everything in both regimes.
    """
    if regime not in ("gradient", "striped"):
        raise InvalidInputError(f"unknown density regime {regime!r}")
    if not (np.isfinite(floor) and 0.0 < floor <= 1.0):
        raise InvalidInputError(f"floor must lie in (0, 1], got {floor}")
    if bands < 1:
        raise InvalidInputError(f"bands must be >= 1, got {bands}")
    pts = cloud.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = hi - lo
    axis = int(np.argmax(extent))
    if extent[axis] > 0.0:
        t = (pts[:, axis] - lo[axis]) / extent[axis]
    else:
        t = np.zeros(len(cloud))
    if regime == "gradient":
        prob = floor + (1.0 - floor) * t
    else:
        band = np.minimum((t * bands).astype(np.intp), bands - 1)
        prob = np.where(band % 2 == 0, 1.0, floor)
    keep = rng.uniform(size=len(cloud)) < prob
    if not keep.any():
        raise InvalidInputError("density resampling removed every point")
    normals = None if cloud.normals is None else cloud.normals[keep]
    return PointCloud(pts[keep], normals)


@dataclass
class TrainingSample:
    """One regression target: a noisy patch and the clean geometry inside it.

    Everything lives in the noisy patch's canonical coordinates: gt_points
    are clean points inside the gathering ball, resampled to the patch size,
    normalized by the same center and radius and rotated by the same frame;
    gt_normals are the matching rotated unit normals (row-aligned with
    gt_points, not with the noisy patch).  gt_center / gt_center_normal are
    the ground truth of the center point itself, for the center-anchored
    loss variant.
    """

    noisy_patch: Patch
    gt_points: np.ndarray
    gt_normals: np.ndarray
    gt_center: np.ndarray
    gt_center_normal: np.ndarray
    center_index: int
    frame: CanonicalFrame | None = None

    def __post_init__(self):
        self.gt_points = np.asarray(self.gt_points, dtype=np.float64)
        self.gt_normals = np.asarray(self.gt_normals, dtype=np.float64)
        self.gt_center = np.asarray(self.gt_center, dtype=np.float64).reshape(3)
        self.gt_center_normal = np.asarray(self.gt_center_normal, dtype=np.float64).reshape(3)
        if self.gt_points.shape != (PATCH_POINTS, 3):
            raise ShapeError(
                f"gt_points must be ({PATCH_POINTS}, 3), got {self.gt_points.shape}"
            )
        if self.gt_normals.shape != self.gt_points.shape:
            raise ShapeError(
                f"gt_normals {self.gt_normals.shape} must match gt_points "
                f"{self.gt_points.shape}"
            )
        lengths = np.linalg.norm(self.gt_normals, axis=1)
        if np.any(np.abs(lengths - 1.0) > 1e-6):
            raise InvalidInputError("gt_normals must be unit length within 1e-6")


def build_training_sample(
    clean: PointCloud,
    noisy: PointCloud,
    center_index: int,
    rng: np.random.Generator,
    sigma_fraction: float | None = None,
    clean_index: SpatialIndex | None = None,
    noisy_index: SpatialIndex | None = None,
) -> TrainingSample:
    """Cut a noisy patch and its clean counterpart around one source point.

    The noisy patch is extracted as for inference (centered on the noisy
    point, radius relative to the noisy cloud) and brought into its own
    canonical frame.  Clean points inside the same ball become the target
    patch under the identical normalization, so predicted displacements and
    target coordinates share one coordinate system.
    """
    if not clean.has_normals:
        raise InvalidInputError("training samples need a clean cloud with normals")
    if len(clean) != len(noisy):
        raise ShapeError(
            f"clean and noisy clouds must align ({len(clean)} vs {len(noisy)} points)"
        )
    if not 0 <= center_index < len(noisy):
        raise InvalidInputError(
            f"center index {center_index} out of range for {len(noisy)} points"
        )
    radius = PATCH_RADIUS_FRACTION * bounding_box_diagonal(noisy)
    center = noisy.points[center_index]
    patch = gather_patch_at(
        noisy, center, center_index, radius, rng, noisy_index, sigma_fraction
    )
    frame = canonical_frame(patch)
    canonical = Patch(frame.apply(patch.points), center_index, radius, sigma_fraction)

    if clean_index is None:
        clean_index = SpatialIndex(clean)
    members = clean_index.radius(center, radius)
    if members.size == 0:
        members = clean_index.knn(center, 1)
        logger.warning(
            "no clean points inside the patch ball at index %d; using nearest",
            center_index,
        )
    sel = members[resample_indices(members.size, rng)]
    gt_coords = frame.apply((clean.points[sel] - center) / radius)
    gt_normals = frame.apply(clean.normals[sel])

    gt_center = frame.apply((clean.points[center_index] - center) / radius)
    gt_center_normal = frame.apply(clean.normals[center_index])
    return TrainingSample(
        noisy_patch=canonical,
        gt_points=gt_coords,
        gt_normals=gt_normals,
        gt_center=gt_center,
        gt_center_normal=gt_center_normal,
        center_index=center_index,
        frame=frame,
    )
