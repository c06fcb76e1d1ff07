"""Losses: brute-force oracles, frozen values, invariances, gradients."""

import numpy as np
import pytest

from pointfuse import (
    InvalidInputError,
    JointLossConfig,
    ShapeError,
    Tensor,
    alt_joint_loss,
    backward,
    joint_loss,
    nearest_gt_index,
    normal_loss,
    nt_xent_batch,
    position_loss,
)
from pointfuse.tensor import l2_normalize


def unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def brute_force_nt_xent(za, zb, tau):
    """Direct enumeration over all 2N x 2N similarities."""
    z = np.vstack([za, zb])
    n = za.shape[0]
    total = 0.0
    for i in range(2 * n):
        partner = (i + n) % (2 * n)
        sims = z @ z[i] / tau
        others = np.delete(sims, i)
        m = others.max()
        lse = m + np.log(np.exp(others - m).sum())
        total += lse - sims[partner]
    return total / (2 * n)


# ---------------------------------------------------------------------------
# contrastive loss


def test_nt_xent_single_pair_identical_views_is_exactly_zero():
    z = np.array([[1.0, 0.0, 0.0]])
    loss = nt_xent_batch(Tensor(z), Tensor(z.copy()), tau=0.01)
    assert loss.item() == 0.0  # exact: the only other embedding is the positive


def test_nt_xent_two_pairs_frozen_value():
    # identical views per pair, pairs orthogonal, tau=1: every term is
    # -log(e / (e + 2))
    z = np.eye(2)
    loss = nt_xent_batch(Tensor(z), Tensor(z.copy()), tau=1.0)
    want = np.log((np.e + 2.0) / np.e)
    assert loss.item() == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("n", [1, 2, 4, 8])
@pytest.mark.parametrize("tau", [1.0, 0.1, 0.01])
def test_nt_xent_matches_brute_force(n, tau):
    rng = np.random.default_rng(1000 + n)
    za, zb = unit_rows(rng, n, 16), unit_rows(rng, n, 16)
    got = nt_xent_batch(Tensor(za), Tensor(zb), tau=tau).item()
    assert got == pytest.approx(brute_force_nt_xent(za, zb, tau), abs=1e-9)


def test_nt_xent_view_swap_symmetry(rng):
    za, zb = unit_rows(rng, 6, 32), unit_rows(rng, 6, 32)
    a = nt_xent_batch(Tensor(za), Tensor(zb), tau=0.05).item()
    b = nt_xent_batch(Tensor(zb), Tensor(za), tau=0.05).item()
    assert abs(a - b) < 1e-12


def test_nt_xent_no_overflow_at_low_tau(rng):
    za, zb = unit_rows(rng, 8, 8), unit_rows(rng, 8, 8)
    loss = nt_xent_batch(Tensor(za), Tensor(zb), tau=0.001)
    assert np.isfinite(loss.item())


def test_nt_xent_gradient_matches_fd(rng):
    za = rng.normal(size=(3, 8))
    zb = rng.normal(size=(3, 8))

    def f(a):
        na = a / np.linalg.norm(a, axis=1, keepdims=True)
        nb = zb / np.linalg.norm(zb, axis=1, keepdims=True)
        return brute_force_nt_xent(na, nb, 0.1)

    t = Tensor(za, requires_grad=True)
    backward(nt_xent_batch(l2_normalize(t, axis=1), l2_normalize(Tensor(zb), axis=1), tau=0.1))
    h = 1e-6
    fd = np.zeros_like(za)
    for i in range(za.shape[0]):
        for j in range(za.shape[1]):
            up, dn = za.copy(), za.copy()
            up[i, j] += h
            dn[i, j] -= h
            fd[i, j] = (f(up) - f(dn)) / (2 * h)
    np.testing.assert_allclose(t.grad, fd, atol=1e-6, rtol=1e-5)


def test_nt_xent_validates_inputs(rng):
    za = unit_rows(rng, 3, 8)
    with pytest.raises(ShapeError):
        nt_xent_batch(Tensor(za), Tensor(za[:2]), tau=0.1)
    with pytest.raises(InvalidInputError):
        nt_xent_batch(Tensor(za), Tensor(za), tau=0.0)
    with pytest.raises(InvalidInputError):
        nt_xent_batch(Tensor(za * 2.0), Tensor(za), tau=0.1)  # non-unit rows


# ---------------------------------------------------------------------------
# position loss


def test_position_loss_zero_at_gt_point_when_beta_zero(rng):
    gt = rng.normal(size=(50, 3))
    loss = position_loss(Tensor(gt[13].copy()), gt, beta=0.0)
    assert loss.item() == 0.0


def test_position_loss_matches_brute_force(rng):
    for _ in range(20):
        gt = rng.normal(size=(500, 3))
        p = rng.normal(size=3)
        beta = float(rng.uniform(0.0, 0.2))
        d2 = ((gt - p) ** 2).sum(axis=1)
        want = (1.0 - beta) * d2.min() + beta * d2.max()
        got = position_loss(Tensor(p), gt, beta=beta).item()
        assert got == pytest.approx(want, abs=1e-12)


def test_position_loss_default_beta_mixes_far_point(rng):
    gt = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
    loss = position_loss(Tensor(np.zeros(3)), gt, beta=0.01)
    assert loss.item() == pytest.approx(0.01 * 100.0, abs=1e-12)


def test_position_loss_validates(rng):
    with pytest.raises(InvalidInputError):
        position_loss(Tensor(np.zeros(3)), rng.normal(size=(5, 3)), beta=1.5)
    with pytest.raises(ShapeError):
        position_loss(Tensor(np.zeros(2)), rng.normal(size=(5, 3)))


def test_nearest_gt_index_lowest_on_ties():
    gt = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    assert nearest_gt_index(np.array([1.0, 0.0, 0.0]), gt) == 0


# ---------------------------------------------------------------------------
# normal loss


def frozen_angular(theta, delta=0.3, gamma=12):
    c2 = np.cos(theta) ** 2
    return 1.0 - (delta * c2 + (1.0 - delta) * c2 ** (gamma // 2))


def test_normal_loss_frozen_pi_third():
    # cos^2(pi/3) = 0.25; 1 - (0.3*0.25 + 0.7*0.5^12) = 0.9248291015625
    n = Tensor(np.array([np.sin(np.pi / 3), 0.0, np.cos(np.pi / 3)]))
    gt_pts = np.zeros((1, 3))
    gt_nrm = np.array([[0.0, 0.0, 1.0]])
    loss = normal_loss(n, np.zeros(3), gt_pts, gt_nrm, delta=0.3, gamma=12)
    assert loss.item() == pytest.approx(0.9248291, abs=1e-6)
    assert loss.item() == 0.9248291015625  # exact in float64


def test_normal_loss_zero_when_aligned():
    n = Tensor(np.array([0.0, 0.0, 1.0]))
    loss = normal_loss(n, np.zeros(3), np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]))
    assert loss.item() == 0.0


def test_normal_loss_sign_flip_exact(rng):
    for _ in range(20):
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        ref = rng.normal(size=3)
        ref /= np.linalg.norm(ref)
        gt_pts, gt_nrm = np.zeros((1, 3)), ref[None, :]
        a = normal_loss(Tensor(v), np.zeros(3), gt_pts, gt_nrm).item()
        b = normal_loss(Tensor(-v), np.zeros(3), gt_pts, gt_nrm).item()
        c = normal_loss(Tensor(v), np.zeros(3), gt_pts, -gt_nrm).item()
        assert a == b == c  # bitwise: the angle enters through cos^2 only


def test_normal_loss_uses_nearest_point(rng):
    gt_pts = np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
    gt_nrm = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    n = Tensor(np.array([0.0, 0.0, 1.0]))
    near_first = normal_loss(n, np.array([0.1, 0.0, 0.0]), gt_pts, gt_nrm).item()
    near_second = normal_loss(n, np.array([4.9, 0.0, 0.0]), gt_pts, gt_nrm).item()
    assert near_first == 0.0
    assert near_second == pytest.approx(frozen_angular(np.pi / 2), abs=1e-12)


def test_normal_loss_matches_formula_random(rng):
    for _ in range(30):
        theta = rng.uniform(0.0, np.pi)
        n = Tensor(np.array([np.sin(theta), 0.0, np.cos(theta)]))
        got = normal_loss(
            n, np.zeros(3), np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]])
        ).item()
        assert got == pytest.approx(frozen_angular(theta), abs=1e-12)


def test_normal_loss_validates_gamma():
    n = Tensor(np.array([0.0, 0.0, 1.0]))
    args = (n, np.zeros(3), np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]))
    with pytest.raises(InvalidInputError):
        normal_loss(*args, gamma=7)  # odd
    with pytest.raises(InvalidInputError):
        normal_loss(*args, gamma=0)
    with pytest.raises(InvalidInputError):
        normal_loss(*args, delta=-0.1)


# ---------------------------------------------------------------------------
# joint losses


class FakeSample:
    def __init__(self, gt_points, gt_normals):
        self.gt_points = gt_points
        self.gt_normals = gt_normals


def test_joint_loss_is_weighted_sum(rng):
    gt = rng.normal(size=(100, 3))
    nrm = unit_rows(rng, 100, 3)
    p = Tensor(rng.normal(size=3))
    n = Tensor(unit_rows(rng, 1, 3)[0])
    cfg = JointLossConfig(alpha=0.9)
    total = joint_loss(p, n, FakeSample(gt, nrm), cfg).item()
    pos = position_loss(p, gt, cfg.beta).item()
    ang = normal_loss(n, p, gt, nrm, cfg.delta, cfg.gamma).item()
    assert total == pytest.approx(0.9 * pos + 0.1 * ang, abs=1e-12)


def test_joint_loss_alpha_limits(rng):
    gt = rng.normal(size=(50, 3))
    nrm = unit_rows(rng, 50, 3)
    p = Tensor(rng.normal(size=3))
    n = Tensor(unit_rows(rng, 1, 3)[0])
    only_pos = joint_loss(p, n, FakeSample(gt, nrm), JointLossConfig(alpha=1.0)).item()
    assert only_pos == pytest.approx(position_loss(p, gt).item(), abs=1e-12)
    only_ang = joint_loss(p, n, FakeSample(gt, nrm), JointLossConfig(alpha=0.0)).item()
    assert only_ang == pytest.approx(normal_loss(n, p, gt, nrm).item(), abs=1e-12)


def test_joint_loss_gradient_matches_fd(rng):
    gt = rng.normal(size=(40, 3))
    nrm = unit_rows(rng, 40, 3)
    sample = FakeSample(gt, nrm)
    cfg = JointLossConfig()
    p0 = rng.normal(size=3)
    n0 = unit_rows(rng, 1, 3)[0]

    p = Tensor(p0.copy(), requires_grad=True)
    n = Tensor(n0.copy(), requires_grad=True)
    backward(joint_loss(p, l2_normalize(n, axis=-1), sample, cfg))

    def f(pv, nv):
        nv = nv / np.linalg.norm(nv)
        d2 = ((gt - pv) ** 2).sum(axis=1)
        pos = (1 - cfg.beta) * d2.min() + cfg.beta * d2.max()
        ref = nrm[np.argmin(d2)]
        c2 = float(nv @ ref) ** 2
        ang = 1.0 - (cfg.delta * c2 + (1 - cfg.delta) * c2 ** (cfg.gamma // 2))
        return cfg.alpha * pos + (1 - cfg.alpha) * ang

    h = 1e-6
    for t, x0, which in ((p, p0, "p"), (n, n0, "n")):
        fd = np.zeros(3)
        for i in range(3):
            up, dn = x0.copy(), x0.copy()
            up[i] += h
            dn[i] -= h
            if which == "p":
                fd[i] = (f(up, n0) - f(dn, n0)) / (2 * h)
            else:
                fd[i] = (f(p0, up) - f(p0, dn)) / (2 * h)
        np.testing.assert_allclose(t.grad, fd, atol=1e-6, rtol=1e-5)


def test_alt_joint_loss_zero_at_target(rng):
    center = rng.normal(size=3)
    ref = unit_rows(rng, 1, 3)[0]
    loss = alt_joint_loss(Tensor(center.copy()), Tensor(ref.copy()), center, ref)
    # the self-dot of a normalized random vector is 1 only to rounding, so
    # the angular term vanishes to float64 precision rather than exactly
    assert loss.item() == pytest.approx(0.0, abs=1e-14)
    exact = alt_joint_loss(
        Tensor(center.copy()), Tensor(np.array([0.0, 1.0, 0.0])), center, [0.0, 1.0, 0.0]
    )
    assert exact.item() == 0.0


def test_alt_joint_loss_alpha_one_unit_displacement(rng):
    center = rng.normal(size=3)
    off = np.zeros(3)
    off[0] = 1.0
    ref = unit_rows(rng, 1, 3)[0]
    cfg = JointLossConfig(alpha=1.0)
    loss = alt_joint_loss(Tensor(center + off), Tensor(ref.copy()), center, ref, cfg)
    assert loss.item() == pytest.approx(1.0, abs=1e-12)


def test_alt_joint_loss_hand_composed(rng):
    for _ in range(10):
        center = rng.normal(size=3)
        ref = unit_rows(rng, 1, 3)[0]
        p = rng.normal(size=3)
        n = unit_rows(rng, 1, 3)[0]
        cfg = JointLossConfig(alpha=0.8, delta=0.3, gamma=12)
        got = alt_joint_loss(Tensor(p), Tensor(n), center, ref, cfg).item()
        pos = ((p - center) ** 2).sum()
        c2 = float(n @ ref) ** 2
        ang = 1.0 - (0.3 * c2 + 0.7 * c2**6)
        assert got == pytest.approx(0.8 * pos + 0.2 * ang, abs=1e-12)


def test_joint_loss_config_validation():
    with pytest.raises(InvalidInputError):
        JointLossConfig(alpha=1.5)
    with pytest.raises(InvalidInputError):
        JointLossConfig(gamma=3)
    with pytest.raises(InvalidInputError):
        JointLossConfig(variant="bogus")
    cfg = JointLossConfig(variant="alternative")
    assert cfg.variant == "alternative"
