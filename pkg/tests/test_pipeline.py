"""Training loops, inference passes, and the two refinement steps."""

import numpy as np
import pytest

from pointfuse import (
    EncoderWeights,
    InferenceConfig,
    InvalidInputError,
    PointCloud,
    PretrainConfig,
    RegressTrainConfig,
    RegressorWeights,
    ShapeError,
    canonical_frame,
    filter_cloud,
    infer_point,
    lrma_update,
    make_variant_set,
    predict_cloud,
    pretrain_encoder,
    taubin_inflate,
    train_regressor,
)
from pointfuse.loss import JointLossConfig
from pointfuse.pipeline import _batched_frames

from conftest import sample_plane, sample_sphere


@pytest.fixture(scope="module")
def sphere_variants():
    cloud = sample_sphere(2000, 101)
    return make_variant_set(cloud, (0.005,), np.random.default_rng(101))


@pytest.fixture(scope="module")
def frozen_encoder():
    return EncoderWeights.init(7)


def brute_knn_excluding_self(points, i, k):
    d2 = ((points - points[i]) ** 2).sum(axis=1)
    d2[i] = np.inf
    return np.lexsort((np.arange(len(points)), d2))[:k]


# ---------------------------------------------------------------------------
# configs


def test_pretrain_config_defaults_and_validation():
    cfg = PretrainConfig()
    assert cfg.epochs == 150 and cfg.batch_size == 512 and cfg.tau == 0.01
    with pytest.raises(InvalidInputError):
        PretrainConfig(epochs=0)
    with pytest.raises(InvalidInputError):
        PretrainConfig(batch_size=1)  # a pair needs at least two rows
    with pytest.raises(InvalidInputError):
        PretrainConfig(lr=0.0)
    with pytest.raises(InvalidInputError):
        PretrainConfig(tau=-0.1)
    with pytest.raises(InvalidInputError):
        PretrainConfig(samples_per_epoch=1)


def test_regress_config_defaults_and_validation():
    cfg = RegressTrainConfig()
    assert cfg.epochs == 30 and cfg.batch_size == 64
    assert cfg.loss.variant == "joint"
    RegressTrainConfig(batch_size=1)  # single-sample batches are legal here
    with pytest.raises(InvalidInputError):
        RegressTrainConfig(epochs=0)
    with pytest.raises(InvalidInputError):
        RegressTrainConfig(lr=float("nan"))


def test_inference_config_defaults_and_validation():
    cfg = InferenceConfig()
    assert cfg.iterations == 2
    assert cfg.taubin_neighbors == 100
    assert cfg.lrma_neighbors == 20
    assert cfg.radius_fraction == 0.05
    for bad in (
        dict(iterations=0),
        dict(taubin_neighbors=0),
        dict(lrma_neighbors=-1),
        dict(chunk_size=0),
        dict(threads=0),
        dict(radius_fraction=0.0),
    ):
        with pytest.raises(InvalidInputError):
            InferenceConfig(**bad)


def test_training_rejects_bad_datasets(frozen_encoder):
    with pytest.raises(InvalidInputError):
        pretrain_encoder([])
    with pytest.raises(InvalidInputError):
        pretrain_encoder([sample_sphere(10, 0)])  # not a variant set
    clean_only = make_variant_set(sample_sphere(2000, 33), (), np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        train_regressor([clean_only], frozen_encoder)


# ---------------------------------------------------------------------------
# batched canonical frames


def test_batched_frames_match_serial(rng):
    scales = np.array([3.0, 1.0, 0.2])
    patches = np.empty((20, 120, 3))
    for i in range(20):
        axis_frame = np.linalg.qr(rng.normal(size=(3, 3)))[0]
        patches[i] = (rng.normal(size=(120, 3)) * scales) @ axis_frame.T
    rot, degenerate = _batched_frames(patches)
    assert not degenerate.any()
    for i in range(20):
        serial = canonical_frame(patches[i]).rotation
        np.testing.assert_allclose(rot[i], serial, atol=1e-10)


def test_batched_frames_flag_degenerate(rng):
    patches = rng.normal(size=(3, 50, 3))
    patches[1] = 0.0
    rot, degenerate = _batched_frames(patches)
    np.testing.assert_array_equal(degenerate, [False, True, False])
    np.testing.assert_array_equal(rot[1], np.eye(3))
    # non-degenerate rows still get proper rotations
    np.testing.assert_allclose(rot[0] @ rot[0].T, np.eye(3), atol=1e-12)


# ---------------------------------------------------------------------------
# contrastive pretraining


def test_pretrain_is_deterministic_and_logs(sphere_variants):
    cfg = PretrainConfig(epochs=2, batch_size=2, samples_per_epoch=2, seed=5)
    log_a, log_b = [], []
    enc_a, proj_a = pretrain_encoder([sphere_variants], cfg, loss_log=log_a)
    enc_b, proj_b = pretrain_encoder([sphere_variants], cfg, loss_log=log_b)

    assert len(log_a) == 2 and all(np.isfinite(v) for v in log_a)
    assert log_a == log_b
    for pa, pb in zip(enc_a.parameters() + proj_a.parameters(),
                      enc_b.parameters() + proj_b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_pretrain_different_seed_differs(sphere_variants):
    cfg_a = PretrainConfig(epochs=1, batch_size=2, samples_per_epoch=2, seed=5)
    cfg_b = PretrainConfig(epochs=1, batch_size=2, samples_per_epoch=2, seed=6)
    enc_a, _ = pretrain_encoder([sphere_variants], cfg_a)
    enc_b, _ = pretrain_encoder([sphere_variants], cfg_b)
    assert any(
        not np.array_equal(pa.data, pb.data)
        for pa, pb in zip(enc_a.parameters(), enc_b.parameters())
    )


def test_pretrain_skips_single_row_leftover(sphere_variants):
    # three samples in batches of two leave a singleton batch, which carries
    # no contrastive signal and is skipped rather than trained on
    cfg = PretrainConfig(epochs=1, batch_size=2, samples_per_epoch=3, seed=1)
    log = []
    pretrain_encoder([sphere_variants], cfg, loss_log=log)
    assert len(log) == 1 and np.isfinite(log[0])


# ---------------------------------------------------------------------------
# regression training


def test_train_regressor_leaves_encoder_untouched(sphere_variants, frozen_encoder):
    before = [p.data.copy() for p in frozen_encoder.parameters()]
    frozen_encoder.parameters()[0].requires_grad = False  # mixed flags survive
    flags = [p.requires_grad for p in frozen_encoder.parameters()]

    cfg = RegressTrainConfig(epochs=2, batch_size=4, samples_per_epoch=4, seed=3)
    log = []
    reg = train_regressor([sphere_variants], frozen_encoder, cfg, loss_log=log)

    assert len(log) == 2 and all(np.isfinite(v) for v in log)
    for p, snapshot in zip(frozen_encoder.parameters(), before):
        np.testing.assert_array_equal(p.data, snapshot)
    assert [p.requires_grad for p in frozen_encoder.parameters()] == flags
    assert isinstance(reg, RegressorWeights)
    frozen_encoder.parameters()[0].requires_grad = True


def test_train_regressor_deterministic(sphere_variants, frozen_encoder):
    cfg = RegressTrainConfig(epochs=1, batch_size=4, samples_per_epoch=4, seed=9)
    reg_a = train_regressor([sphere_variants], frozen_encoder, cfg)
    reg_b = train_regressor([sphere_variants], frozen_encoder, cfg)
    for pa, pb in zip(reg_a.parameters(), reg_b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_train_regressor_alternative_loss(sphere_variants, frozen_encoder):
    cfg = RegressTrainConfig(
        epochs=1,
        batch_size=4,
        samples_per_epoch=4,
        seed=4,
        loss=JointLossConfig(variant="alternative"),
    )
    log = []
    train_regressor([sphere_variants], frozen_encoder, cfg, loss_log=log)
    assert len(log) == 1 and np.isfinite(log[0])


# ---------------------------------------------------------------------------
# network inference


def test_predict_cloud_zero_regressor_passes_points_through(frozen_encoder):
    cloud = sample_sphere(60, 200)
    reg = RegressorWeights.init(0)
    for p in reg.parameters():
        p.data[...] = 0.0
    cfg = InferenceConfig(radius_fraction=0.5, chunk_size=16)
    new_pts, normals = predict_cloud(
        cloud.points, frozen_encoder, reg, cfg, np.random.default_rng(0)
    )
    np.testing.assert_array_equal(new_pts, cloud.points)
    assert normals.shape == (60, 3)
    np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-12)


def test_predict_cloud_isolated_point_passes_through(frozen_encoder, caplog):
    cloud = sample_plane(80, 201)
    pts = np.vstack([cloud.points, [50.0, 50.0, 50.0]])
    reg = RegressorWeights.init(1)
    cfg = InferenceConfig(chunk_size=32)
    new_pts, normals = predict_cloud(
        pts, frozen_encoder, reg, cfg, np.random.default_rng(0)
    )
    assert "degenerate" in caplog.text
    np.testing.assert_array_equal(new_pts[-1], pts[-1])
    np.testing.assert_array_equal(normals[-1], [0.0, 0.0, 1.0])
    # the plane points still move and keep unit normals
    np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-12)


def test_infer_point_matches_contracts(frozen_encoder):
    cloud = sample_sphere(500, 202)
    reg = RegressorWeights.init(2)
    position, normal = infer_point(cloud, 17, frozen_encoder, reg)
    assert position.shape == (3,) and normal.shape == (3,)
    assert np.isfinite(position).all()
    assert np.linalg.norm(normal) == pytest.approx(1.0, abs=1e-12)


def test_infer_point_zero_regressor_identity(frozen_encoder):
    cloud = sample_sphere(500, 203)
    reg = RegressorWeights.init(0)
    for p in reg.parameters():
        p.data[...] = 0.0
    position, normal = infer_point(cloud, 5, frozen_encoder, reg)
    np.testing.assert_array_equal(position, cloud.points[5])
    assert np.linalg.norm(normal) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# inflation step


def test_taubin_matches_brute_force(rng):
    original = PointCloud(rng.normal(size=(150, 3)))
    filtered = PointCloud(original.points + 0.05 * rng.normal(size=(150, 3)))
    k = 7
    got = taubin_inflate(filtered, original, k)
    moved = filtered.points - original.points
    want = np.empty_like(filtered.points)
    for i in range(150):
        neigh = brute_knn_excluding_self(filtered.points, i, k)
        want[i] = filtered.points[i] - moved[neigh].mean(axis=0)
    np.testing.assert_allclose(got.points, want, atol=1e-12)


def test_taubin_undoes_constant_translation_exactly(rng):
    # integer coordinates keep every float step exact, so recovery is bitwise
    grid = rng.choice(40**3, size=200, replace=False)
    original = PointCloud(
        np.column_stack([grid % 40, grid // 40 % 40, grid // 1600]).astype(np.float64)
    )
    shift = np.array([3.0, -7.0, 11.0])
    filtered = PointCloud(original.points + shift)
    restored = taubin_inflate(filtered, original, k=12)
    np.testing.assert_array_equal(restored.points, original.points)


def test_taubin_validation(rng):
    a = PointCloud(rng.normal(size=(10, 3)))
    b = PointCloud(rng.normal(size=(11, 3)))
    with pytest.raises(ShapeError):
        taubin_inflate(a, b)
    with pytest.raises(InvalidInputError):
        taubin_inflate(a, a.copy(), k=0)


def test_taubin_clamps_oversized_k(rng, caplog):
    cloud = PointCloud(rng.normal(size=(10, 3)))
    out = taubin_inflate(cloud, cloud.copy(), k=100)
    assert len(out) == 10


# ---------------------------------------------------------------------------
# normal-guided positional update


def test_lrma_planar_point_drops_to_third_height():
    xs, ys = np.meshgrid(np.linspace(-1, 1, 7), np.linspace(-1, 1, 7))
    plane = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(49)])
    h = 0.05
    pts = np.vstack([plane, [0.0, 0.0, h]])
    normals = np.tile([0.0, 0.0, 1.0], (50, 1))
    cloud = PointCloud(pts, normals)
    out = lrma_update(cloud, k=8)
    assert out.points[-1, 2] == pytest.approx(h / 3, abs=1e-10)
    np.testing.assert_array_equal(out.points[-1, :2], [0.0, 0.0])


def test_lrma_matches_brute_force(rng):
    pts = rng.normal(size=(120, 3))
    normals = rng.normal(size=(120, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    cloud = PointCloud(pts, normals)
    k = 5
    got = lrma_update(cloud, k)
    want = np.empty_like(pts)
    for i in range(120):
        neigh = brute_knn_excluding_self(pts, i, k)
        off = pts[neigh] - pts[i]
        term = (off * normals[neigh]).sum(axis=1)[:, None] * normals[neigh]
        term = term + (off @ normals[i])[:, None] * normals[i]
        want[i] = pts[i] + term.sum(axis=0) / (3.0 * k)
    np.testing.assert_allclose(got.points, want, atol=1e-12)
    np.testing.assert_array_equal(got.normals, normals)


def test_lrma_requires_normals(rng):
    with pytest.raises(InvalidInputError):
        lrma_update(PointCloud(rng.normal(size=(30, 3))), k=3)


# ---------------------------------------------------------------------------
# full filtering loop


def test_filter_cloud_deterministic_and_shape_preserving(frozen_encoder):
    cloud = sample_sphere(60, 210)
    reg = RegressorWeights.init(3)
    cfg = InferenceConfig(
        iterations=1, radius_fraction=0.5, taubin_neighbors=10,
        lrma_neighbors=5, chunk_size=16, seed=11,
    )
    out_a = filter_cloud(cloud, frozen_encoder, reg, cfg)
    out_b = filter_cloud(cloud, frozen_encoder, reg, cfg)
    assert len(out_a) == 60
    assert out_a.has_normals
    np.testing.assert_array_equal(out_a.points, out_b.points)
    np.testing.assert_array_equal(out_a.normals, out_b.normals)


def test_filter_cloud_threads_do_not_change_results(frozen_encoder):
    cloud = sample_sphere(60, 211)
    reg = RegressorWeights.init(4)
    base = dict(
        iterations=1, radius_fraction=0.5, taubin_neighbors=10,
        lrma_neighbors=5, chunk_size=16, seed=12,
    )
    serial = filter_cloud(cloud, frozen_encoder, reg, InferenceConfig(**base, threads=1))
    threaded = filter_cloud(cloud, frozen_encoder, reg, InferenceConfig(**base, threads=2))
    np.testing.assert_array_equal(serial.points, threaded.points)
    np.testing.assert_array_equal(serial.normals, threaded.normals)


def test_filter_cloud_is_predict_then_refine(frozen_encoder):
    cloud = sample_sphere(60, 212)
    reg = RegressorWeights.init(5)
    cfg = InferenceConfig(
        iterations=1, radius_fraction=0.5, taubin_neighbors=10,
        lrma_neighbors=5, chunk_size=16, seed=13,
    )
    got = filter_cloud(cloud, frozen_encoder, reg, cfg)

    rng = np.random.default_rng(np.random.SeedSequence(13).spawn(1)[0])
    new_pts, normals = predict_cloud(cloud.points, frozen_encoder, reg, cfg, rng)
    refined = taubin_inflate(
        PointCloud(new_pts, normals), PointCloud(cloud.points), cfg.taubin_neighbors
    )
    refined = lrma_update(refined, cfg.lrma_neighbors)
    np.testing.assert_array_equal(got.points, refined.points)
    np.testing.assert_array_equal(got.normals, refined.normals)
