"""Training loops and the iterative filtering pipeline.

Pretraining teaches the encoder noise-invariant patch features with a
contrastive objective; regression training fits the displacement/normal
head on top of the frozen encoder; filtering runs the trained networks over
a cloud and applies two geometric clean-up steps per iteration.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datagen import VariantSet, build_training_sample, sample_contrastive_pair
from .errors import InvalidInputError, NumericError, ShapeError
from .geom import (
    PATCH_POINTS,
    PATCH_RADIUS_FRACTION,
    CanonicalFrame,
    PointCloud,
    SpatialIndex,
    bounding_box_diagonal,
    canonical_frame,
    extract_patch,
    neighbors_excluding_self,
    resample_indices,
)
from .loss import JointLossConfig, alt_joint_loss, joint_loss, nt_xent_batch
from .net import EncoderWeights, ProjectionWeights, RegressorWeights, encode, regress, project
from .tensor import (
    Adam,
    SGD,
    Tensor,
    backward,
    concat,
    no_grad,
    reshape,
    tmean,
)

logger = logging.getLogger(__name__)

# Refinement defaults: neighbor counts for the inflation and low-rank steps.
TAUBIN_NEIGHBORS = 100
LRMA_NEIGHBORS = 20


def _positive_int(value, name, minimum=1):
    if not isinstance(value, (int, np.integer)) or value < minimum:
        raise InvalidInputError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


@dataclass
class PretrainConfig:
    """Contrastive pretraining settings.

    samples_per_epoch caps how many pairs one epoch draws from the shuffled
    schedule; None visits every point of every variant once per epoch.
    """

    epochs: int = 150
    lr: float = 3e-4
    batch_size: int = 512
    tau: float = 0.01
    seed: int = 0
    samples_per_epoch: int | None = None

    def __post_init__(self):
        self.epochs = _positive_int(self.epochs, "epochs")
        self.batch_size = _positive_int(self.batch_size, "batch_size", minimum=2)
        if not (np.isfinite(self.lr) and self.lr > 0.0):
            raise InvalidInputError(f"lr must be positive, got {self.lr}")
        if not (np.isfinite(self.tau) and self.tau > 0.0):
            raise InvalidInputError(f"tau must be positive, got {self.tau}")
        if self.samples_per_epoch is not None:
            self.samples_per_epoch = _positive_int(
                self.samples_per_epoch, "samples_per_epoch", minimum=2
            )


@dataclass
class RegressTrainConfig:
    """Regression head training settings (encoder stays frozen)."""

    epochs: int = 30
    lr: float = 1e-2
    batch_size: int = 64
    loss: JointLossConfig = field(default_factory=JointLossConfig)
    seed: int = 0
    samples_per_epoch: int | None = None

    def __post_init__(self):
        self.epochs = _positive_int(self.epochs, "epochs")
        self.batch_size = _positive_int(self.batch_size, "batch_size")
        if not (np.isfinite(self.lr) and self.lr > 0.0):
            raise InvalidInputError(f"lr must be positive, got {self.lr}")
        if self.samples_per_epoch is not None:
            self.samples_per_epoch = _positive_int(
                self.samples_per_epoch, "samples_per_epoch"
            )


@dataclass
class InferenceConfig:
    """Iterative filtering settings."""

    iterations: int = 2
    taubin_neighbors: int = TAUBIN_NEIGHBORS
    lrma_neighbors: int = LRMA_NEIGHBORS
    radius_fraction: float = PATCH_RADIUS_FRACTION
    chunk_size: int = 64
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        self.iterations = _positive_int(self.iterations, "iterations")
        self.taubin_neighbors = _positive_int(self.taubin_neighbors, "taubin_neighbors")
        self.lrma_neighbors = _positive_int(self.lrma_neighbors, "lrma_neighbors")
        self.chunk_size = _positive_int(self.chunk_size, "chunk_size")
        self.threads = _positive_int(self.threads, "threads")
        if not (np.isfinite(self.radius_fraction) and self.radius_fraction > 0.0):
            raise InvalidInputError(
                f"radius_fraction must be positive, got {self.radius_fraction}"
            )


def _check_datasets(datasets):
    datasets = list(datasets)
    if not datasets:
        raise InvalidInputError("training needs at least one variant set")
    for vs in datasets:
        if not isinstance(vs, VariantSet):
            raise InvalidInputError(f"expected VariantSet entries, got {type(vs).__name__}")
    return datasets


def _variant_indexes(datasets):
    """One SpatialIndex per variant per shape, clean first."""
    return [
        [SpatialIndex(vs.variant(v)[1]) for v in range(vs.n_variants)]
        for vs in datasets
    ]


def pretrain_encoder(
    datasets,
    cfg: PretrainConfig | None = None,
    loss_log: list | None = None,
) -> tuple[EncoderWeights, ProjectionWeights]:
    """Fit encoder + projection head with the contrastive batch objective.

    One epoch shuffles the full (shape, variant, point) schedule, keeps up
    to samples_per_epoch entries, and uses each as the first view of a pair.
    Appends each epoch's mean loss to `loss_log` when given.
    """
    datasets = _check_datasets(datasets)
    cfg = cfg or PretrainConfig()
    root = np.random.SeedSequence(cfg.seed)
    init_seed, *epoch_seeds = root.spawn(cfg.epochs + 1)
    init_rngs = init_seed.spawn(2)

    enc = EncoderWeights.init(init_rngs[0])
    proj = ProjectionWeights.init(init_rngs[1])
    params = enc.parameters() + proj.parameters()
    opt = Adam(params, lr=cfg.lr)

    entries = [
        (s, v, i)
        for s, vs in enumerate(datasets)
        for v in range(vs.n_variants)
        for i in range(len(vs.clean))
    ]
    indexes = _variant_indexes(datasets)
    cap = cfg.samples_per_epoch or len(entries)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng(epoch_seeds[epoch])
        order = rng.permutation(len(entries))[:cap]
        batch_losses = []
        weights = []
        for start in range(0, order.size, cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            if chunk.size < 2:
                continue  # a single leftover pair carries no contrastive signal
            firsts = np.empty((chunk.size, PATCH_POINTS, 3))
            seconds = np.empty_like(firsts)
            for row, entry in enumerate(chunk):
                shape_i, variant_i, point_i = entries[entry]
                pair = sample_contrastive_pair(
                    datasets[shape_i],
                    point_i,
                    rng,
                    first_variant=variant_i,
                    indexes=indexes[shape_i],
                )
                firsts[row] = pair.first.points
                seconds[row] = pair.second.points
            zp = project(proj, encode(enc, firsts))
            zq = project(proj, encode(enc, seconds))
            loss = nt_xent_batch(zp, zq, cfg.tau)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite contrastive loss at epoch {epoch}")
            backward(loss, params)
            opt.step()
            opt.zero_grad()
            batch_losses.append(value)
            weights.append(chunk.size)
        if not batch_losses:
            raise InvalidInputError("epoch produced no batches; dataset too small")
        mean_loss = float(np.average(batch_losses, weights=weights))
        if loss_log is not None:
            loss_log.append(mean_loss)
        logger.info(
            "pretrain epoch %d/%d: loss=%.6f time=%.1fs",
            epoch + 1, cfg.epochs, mean_loss, time.perf_counter() - t0,
        )
    return enc, proj


def train_regressor(
    datasets,
    encoder: EncoderWeights,
    cfg: RegressTrainConfig | None = None,
    loss_log: list | None = None,
) -> RegressorWeights:
    """Fit the displacement/normal head on frozen encoder features.

    The schedule sweeps every point of every NOISY variant; clean variants
    only serve as ground truth.  Appends each epoch's mean loss to
    `loss_log` when given.
    """
    datasets = _check_datasets(datasets)
    for vs in datasets:
        if not vs.noisy:
            raise InvalidInputError("regression training needs noisy variants")
    cfg = cfg or RegressTrainConfig()
    root = np.random.SeedSequence(cfg.seed)
    init_seed, *epoch_seeds = root.spawn(cfg.epochs + 1)
    reg = RegressorWeights.init(init_seed)
    params = reg.parameters()
    opt = SGD(params, lr=cfg.lr)

    entries = [
        (s, v, i)
        for s, vs in enumerate(datasets)
        for v in range(1, vs.n_variants)
        for i in range(len(vs.clean))
    ]
    indexes = _variant_indexes(datasets)
    cap = cfg.samples_per_epoch or len(entries)

    saved_flags = encoder.trainable_flags()
    encoder.set_trainable(False)
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            rng = np.random.default_rng(epoch_seeds[epoch])
            order = rng.permutation(len(entries))[:cap]
            batch_losses = []
            weights = []
            for start in range(0, order.size, cfg.batch_size):
                chunk = order[start : start + cfg.batch_size]
                samples = []
                for entry in chunk:
                    shape_i, variant_i, point_i = entries[entry]
                    vs = datasets[shape_i]
                    sigma, noisy_cloud = vs.variant(variant_i)
                    samples.append(
                        build_training_sample(
                            vs.clean,
                            noisy_cloud,
                            point_i,
                            rng,
                            sigma_fraction=sigma,
                            clean_index=indexes[shape_i][0],
                            noisy_index=indexes[shape_i][variant_i],
                        )
                    )
                stacked = np.stack([s.noisy_patch.points for s in samples])
                with no_grad():
                    feats = encode(encoder, stacked)
                disp, normal = regress(reg, Tensor(feats.data))
                terms = []
                for row, sample in enumerate(samples):
                    if cfg.loss.variant == "joint":
                        term = joint_loss(disp[row], normal[row], sample, cfg.loss)
                    else:
                        term = alt_joint_loss(
                            disp[row], normal[row],
                            sample.gt_center, sample.gt_center_normal, cfg.loss,
                        )
                    terms.append(reshape(term, (1,)))
                loss = tmean(concat(terms))
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError(f"non-finite regression loss at epoch {epoch}")
                backward(loss, params)
                opt.step()
                opt.zero_grad()
                batch_losses.append(value)
                weights.append(chunk.size)
            if not batch_losses:
                raise InvalidInputError("epoch produced no batches; dataset too small")
            mean_loss = float(np.average(batch_losses, weights=weights))
            if loss_log is not None:
                loss_log.append(mean_loss)
            logger.info(
                "regress epoch %d/%d: loss=%.6f time=%.1fs",
                epoch + 1, cfg.epochs, mean_loss, time.perf_counter() - t0,
            )
    finally:
        for p, flag in zip(encoder.parameters(), saved_flags):
            p.requires_grad = flag
    return reg


# ---------------------------------------------------------------------------
# inference


def _batched_frames(patches: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Canonical rotations for a stack of centered patches.

    Returns (rotations (n, 3, 3), degenerate mask).  Rows flagged degenerate
    get the identity rotation; callers pass those points through unchanged.
    """
    covs = np.einsum("npi,npj->nij", patches, patches) / patches.shape[1]
    traces = np.trace(covs, axis1=1, axis2=2)
    degenerate = ~(traces > 0.0) | ~np.isfinite(traces)
    safe = covs.copy()
    safe[degenerate] = np.eye(3)
    w, v = np.linalg.eigh(safe)
    v = v[:, :, ::-1]  # descending eigenvalues
    pick = np.argmax(np.abs(v), axis=1)
    signs = np.where(np.take_along_axis(v, pick[:, None, :], axis=1)[:, 0, :] < 0.0, -1.0, 1.0)
    v = v * signs[:, None, :]
    rot = np.transpose(v, (0, 2, 1)).copy()
    rot[degenerate] = np.eye(3)
    return rot, degenerate


def _network_pass(
    canon: np.ndarray,
    encoder: EncoderWeights,
    regressor: RegressorWeights,
    chunk_size: int,
    threads: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Run encoder + regressor over canonical patches in chunks."""
    n = canon.shape[0]
    disp = np.empty((n, 3))
    normal = np.empty((n, 3))

    def run(start):
        stop = min(start + chunk_size, n)
        feats = encode(encoder, canon[start:stop])
        d, m = regress(regressor, feats)
        disp[start:stop] = d.data
        normal[start:stop] = m.data

    starts = range(0, n, chunk_size)
    with no_grad():
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(run, starts))
        else:
            for start in starts:
                run(start)
    return disp, normal


def predict_cloud(
    cloud_points: np.ndarray,
    encoder: EncoderWeights,
    regressor: RegressorWeights,
    cfg: InferenceConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """One network pass over every point: filtered positions and unit normals.

    Degenerate patches (no spatial extent) pass their point through
    unchanged with a +z normal and a logged count.
    """
    pts = np.asarray(cloud_points, dtype=np.float64)
    n = pts.shape[0]
    radius = cfg.radius_fraction * bounding_box_diagonal(pts)
    if not radius > 0.0:
        raise InvalidInputError("cloud has no spatial extent; cannot size patches")
    index = SpatialIndex(pts)
    members = index.radius_bulk(pts, radius)
    patches = np.empty((n, PATCH_POINTS, 3))
    for i in range(n):
        rel = (pts[members[i]] - pts[i]) / radius
        patches[i] = rel[resample_indices(rel.shape[0], rng)]
    rot, degenerate = _batched_frames(patches)
    canon = np.einsum("nij,npj->npi", rot, patches)
    disp, normal = _network_pass(canon, encoder, regressor, cfg.chunk_size, cfg.threads)
    # undo the frame (rows of rot are orthonormal, so inverse = transpose)
    world_disp = np.einsum("nji,nj->ni", rot, disp)
    world_normal = np.einsum("nji,nj->ni", rot, normal)
    lengths = np.linalg.norm(world_normal, axis=1, keepdims=True)
    zero_rows = lengths[:, 0] == 0.0
    world_normal = world_normal / np.maximum(lengths, 1e-300)
    world_normal[zero_rows] = (0.0, 0.0, 1.0)
    new_pts = pts + world_disp * radius
    if degenerate.any():
        logger.warning(
            "%d degenerate patch(es) passed through unchanged", int(degenerate.sum())
        )
        new_pts[degenerate] = pts[degenerate]
        world_normal[degenerate] = (0.0, 0.0, 1.0)
    return new_pts, world_normal


def infer_point(
    cloud: PointCloud,
    index: int,
    encoder: EncoderWeights,
    regressor: RegressorWeights,
    radius_fraction: float = PATCH_RADIUS_FRACTION,
    rng: np.random.Generator | None = None,
    spatial_index: SpatialIndex | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Filtered position and unit normal for a single cloud point.

    The patch is cut around the point, rotated into its canonical frame,
    pushed through the networks, and the outputs are rotated back and
    unscaled.  A degenerate patch returns the point unchanged with a +z
    normal and a warning.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    radius = radius_fraction * bounding_box_diagonal(cloud)
    patch = extract_patch(cloud, index, radius, rng, spatial_index)
    try:
        frame = canonical_frame(patch)
    except Exception as exc:  # degenerate neighborhood: pass through
        logger.warning("degenerate patch at index %d (%s); passing through", index, exc)
        return cloud.points[index].copy(), np.array([0.0, 0.0, 1.0])
    with no_grad():
        feat = encode(encoder, frame.apply(patch.points))
        disp, normal = regress(regressor, feat)
    position = cloud.points[index] + frame.invert(disp.data) * radius
    out_normal = frame.invert(normal.data)
    length = float(np.linalg.norm(out_normal))
    out_normal = out_normal / length if length > 0.0 else np.array([0.0, 0.0, 1.0])
    return position, out_normal


def taubin_inflate(
    filtered: PointCloud, original: PointCloud, k: int = TAUBIN_NEIGHBORS
) -> PointCloud:
    """Counter the shrinkage of a filtering pass.

    Each filtered point is pulled back by the mean displacement its k
    nearest filtered neighbors (itself excluded) underwent, so a locally
    uniform translation is undone exactly.
    """
    if len(filtered) != len(original):
        raise ShapeError(
            f"filtered and original clouds must align "
            f"({len(filtered)} vs {len(original)} points)"
        )
    k = _positive_int(k, "k")
    neigh = neighbors_excluding_self(SpatialIndex(filtered), k)
    moved = filtered.points - original.points
    correction = moved[neigh].mean(axis=1)
    return PointCloud(filtered.points - correction, filtered.normals)


def lrma_update(cloud: PointCloud, k: int = LRMA_NEIGHBORS) -> PointCloud:
    """One low-rank style positional update from neighbor normals.

    Every neighbor offset is projected onto its own normal and onto the
    center's normal; a third of the mean pulls the point toward the local
    surface while displacements inside the tangent plane cancel out.
    """
    if not cloud.has_normals:
        raise InvalidInputError("this update needs per-point normals")
    k = _positive_int(k, "k")
    pts, normals = cloud.points, cloud.normals
    neigh = neighbors_excluding_self(SpatialIndex(pts), k)
    offsets = pts[neigh] - pts[:, None, :]
    nn = normals[neigh]
    along_neighbor = np.einsum("nkj,nkj->nk", offsets, nn)[..., None] * nn
    along_center = (
        np.einsum("nkj,nj->nk", offsets, normals)[..., None] * normals[:, None, :]
    )
    update = (along_neighbor + along_center).sum(axis=1) / (3.0 * neigh.shape[1])
    return PointCloud(pts + update, normals)


def filter_cloud(
    cloud: PointCloud,
    encoder: EncoderWeights,
    regressor: RegressorWeights,
    cfg: InferenceConfig | None = None,
) -> PointCloud:
    """Iteratively filter a cloud and estimate its normals.

    Each iteration re-derives the patch radius from the current positions,
    runs the network pass, then applies the inflation and normal-based
    refinement steps.  The returned cloud carries the last pass's normals;
    point count and order never change.
    """
    cfg = cfg or InferenceConfig()
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.iterations)
    pts = cloud.points.copy()
    normals = None
    for iteration in range(cfg.iterations):
        t0 = time.perf_counter()
        rng = np.random.default_rng(seeds[iteration])
        new_pts, normals = predict_cloud(pts, encoder, regressor, cfg, rng)
        refined = taubin_inflate(
            PointCloud(new_pts, normals), PointCloud(pts), cfg.taubin_neighbors
        )
        refined = lrma_update(refined, cfg.lrma_neighbors)
        pts = refined.points
        logger.info(
            "filter iteration %d/%d: time=%.1fs",
            iteration + 1, cfg.iterations, time.perf_counter() - t0,
        )
    return PointCloud(pts, normals)
