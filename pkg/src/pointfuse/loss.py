"""Training objectives: contrastive batch loss and the joint regression losses.

All functions build on the tensor primitives and return scalar Tensors, so
gradients flow to whatever inputs were created with requires_grad.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, ShapeError
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    exp,
    getitem,
    log,
    matmul,
    max_over_axis,
    min_over_axis,
    mul,
    power,
    reshape,
    sub,
    tmean,
    transpose,
    tsum,
)

DEFAULT_TAU = 0.01
DEFAULT_ALPHA = 0.9
DEFAULT_BETA = 0.01
DEFAULT_DELTA = 0.3
DEFAULT_GAMMA = 12


def _check_unit_rows(arr: np.ndarray, name: str, tol: float = 1e-6):
    lengths = np.linalg.norm(arr, axis=-1)
    worst = float(np.max(np.abs(lengths - 1.0))) if lengths.size else 0.0
    if worst > tol:
        raise InvalidInputError(
            f"{name} rows must be unit length within {tol:g} (worst deviation {worst:.3e})"
        )


def nt_xent_batch(z_first, z_second, tau: float = DEFAULT_TAU) -> Tensor:
    """Normalized-temperature cross entropy over a batch of embedding pairs.

    Row i of each argument is one view of pair i.  Every embedding serves as
    an anchor once per direction: its positive is its partner view, and the
    denominator runs over all 2N-1 other embeddings in the doubled batch.
    The result is the mean over the 2N ordered anchor-positive pairs.

    The log-sum-exp is stabilized by subtracting each anchor's largest
    other-similarity as a constant, which also makes a single-pair batch
    evaluate to exactly 0.0 (its denominator holds only the positive term).
    """
    zp, zq = as_tensor(z_first), as_tensor(z_second)
    if zp.ndim != 2 or zp.shape != zq.shape:
        raise ShapeError(
            f"expected matching (N, d) embedding batches, got {zp.shape} and {zq.shape}"
        )
    n = zp.shape[0]
    if n < 1:
        raise InvalidInputError("contrastive batch must hold at least one pair")
    if not (np.isfinite(tau) and tau > 0.0):
        raise InvalidInputError(f"temperature must be positive, got {tau}")
    _check_unit_rows(zp.data, "z_first")
    _check_unit_rows(zq.data, "z_second")

    z = concat([zp, zq], axis=0)
    sims = mul(matmul(z, transpose(z)), 1.0 / tau)

    # Knock the self-similarity out of every row before the exp: adding a
    # -inf constant keeps the backward rule a plain identity pass and turns
    # the excluded entries into exact zeros after exponentiation.
    self_block = np.zeros((2 * n, 2 * n))
    np.fill_diagonal(self_block, -np.inf)
    others = add(sims, self_block)

    row_max = np.max(others.data, axis=1, keepdims=True)
    shifted = exp(sub(others, row_max))
    lse = add(log(tsum(shifted, axis=1)), row_max[:, 0])

    partner = np.concatenate([np.arange(n) + n, np.arange(n)])
    positive = getitem(sims, (np.arange(2 * n), partner))
    return tmean(sub(lse, positive))


@dataclass
class JointLossConfig:
    """Weights of the joint objective and which variant to use.

    variant "joint" balances the two-sided projection distance against the
    angular term; "alternative" regresses straight onto the center point's
    ground truth position and normal.
    """

    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    delta: float = DEFAULT_DELTA
    gamma: int = DEFAULT_GAMMA
    variant: str = "joint"

    def __post_init__(self):
        for name in ("alpha", "beta", "delta"):
            v = getattr(self, name)
            if not (np.isfinite(v) and 0.0 <= v <= 1.0):
                raise InvalidInputError(f"{name} must lie in [0, 1], got {v}")
        if not isinstance(self.gamma, (int, np.integer)) or self.gamma < 2 or self.gamma % 2:
            raise InvalidInputError(
                f"gamma must be a positive even integer, got {self.gamma!r}"
            )
        self.gamma = int(self.gamma)
        if self.variant not in ("joint", "alternative"):
            raise InvalidInputError(
                f"variant must be 'joint' or 'alternative', got {self.variant!r}"
            )


def _as_const_points(x, name: str) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] == 0:
        raise ShapeError(f"{name} must have shape (m, 3) with m >= 1, got {arr.shape}")
    return arr


def _as_vec3(x, name: str) -> Tensor:
    t = as_tensor(x)
    if t.shape != (3,):
        raise ShapeError(f"{name} must have shape (3,), got {t.shape}")
    return t


def position_loss(p_pred, gt_points, beta: float = DEFAULT_BETA) -> Tensor:
    """Two-sided squared distance from a predicted point to a target patch.

    (1 - beta) times the squared distance to the nearest target point plus
    beta times the squared distance to the farthest one; the small far-side
    weight keeps predictions from collapsing onto patch fringes.
    """
    p = _as_vec3(p_pred, "p_pred")
    gt = _as_const_points(gt_points, "gt_points")
    if not (np.isfinite(beta) and 0.0 <= beta <= 1.0):
        raise InvalidInputError(f"beta must lie in [0, 1], got {beta}")
    diffs = sub(reshape(p, (1, 3)), gt)
    d2 = tsum(power(diffs, 2), axis=1)
    near = min_over_axis(d2, axis=0)
    far = max_over_axis(d2, axis=0)
    return add(mul(near, 1.0 - beta), mul(far, beta))


def nearest_gt_index(p_pred, gt_points) -> int:
    """Index of the target point closest to the prediction (lowest on ties).

    The choice itself is not differentiated; losses treat it as a constant.
    """
    p = p_pred.data if isinstance(p_pred, Tensor) else np.asarray(p_pred, dtype=np.float64)
    gt = _as_const_points(gt_points, "gt_points")
    d2 = ((gt - p.reshape(3)) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def _angular_term(n_pred: Tensor, reference: np.ndarray, delta: float, gamma: int) -> Tensor:
    """1 - [delta cos^2 + (1 - delta) cos^gamma] against a fixed unit normal.

    cos^gamma is computed from cos^2, so flipping either normal's sign leaves
    the value bitwise unchanged.
    """
    c = tsum(mul(n_pred, reference))
    c2 = mul(c, c)
    cg = power(c2, gamma // 2)
    return sub(1.0, add(mul(c2, delta), mul(cg, 1.0 - delta)))


def normal_loss(
    n_pred,
    p_pred,
    gt_points,
    gt_normals,
    delta: float = DEFAULT_DELTA,
    gamma: int = DEFAULT_GAMMA,
) -> Tensor:
    """Angular loss against the normal of the target point nearest p_pred."""
    n = _as_vec3(n_pred, "n_pred")
    gt = _as_const_points(gt_points, "gt_points")
    normals = _as_const_points(gt_normals, "gt_normals")
    if normals.shape != gt.shape:
        raise ShapeError(
            f"gt_normals shape {normals.shape} does not match gt_points {gt.shape}"
        )
    if not (np.isfinite(delta) and 0.0 <= delta <= 1.0):
        raise InvalidInputError(f"delta must lie in [0, 1], got {delta}")
    if not isinstance(gamma, (int, np.integer)) or gamma < 2 or gamma % 2:
        raise InvalidInputError(f"gamma must be a positive even integer, got {gamma!r}")
    j = nearest_gt_index(p_pred, gt)
    return _angular_term(n, normals[j], delta, int(gamma))


def joint_loss(p_pred, n_pred, sample, cfg: JointLossConfig | None = None) -> Tensor:
    """Weighted sum of the position and normal terms for one training sample.

    `sample` needs gt_points and gt_normals attributes holding the aligned
    ground-truth patch (anything duck-typed works, e.g. TrainingSample).
    """
    cfg = cfg or JointLossConfig()
    pos = position_loss(p_pred, sample.gt_points, cfg.beta)
    ang = normal_loss(n_pred, p_pred, sample.gt_points, sample.gt_normals,
                      cfg.delta, cfg.gamma)
    return add(mul(pos, cfg.alpha), mul(ang, 1.0 - cfg.alpha))


def alt_joint_loss(
    p_pred, n_pred, gt_center, gt_center_normal, cfg: JointLossConfig | None = None
) -> Tensor:
    """Center-anchored variant: squared distance to the ground-truth center
    position plus the angular term against that center's normal."""
    cfg = cfg or JointLossConfig()
    p = _as_vec3(p_pred, "p_pred")
    n = _as_vec3(n_pred, "n_pred")
    center = np.asarray(
        gt_center.data if isinstance(gt_center, Tensor) else gt_center, dtype=np.float64
    ).reshape(3)
    ref = np.asarray(
        gt_center_normal.data if isinstance(gt_center_normal, Tensor) else gt_center_normal,
        dtype=np.float64,
    ).reshape(3)
    pos = tsum(power(sub(p, center), 2))
    ang = _angular_term(n, ref, cfg.delta, cfg.gamma)
    return add(mul(pos, cfg.alpha), mul(ang, 1.0 - cfg.alpha))
