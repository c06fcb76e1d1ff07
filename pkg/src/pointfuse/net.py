"""Point networks: shared-weight encoder, projection head, joint regressor.

The encoder applies the same small MLP to every point of a patch and
max-pools over points, which makes the feature exactly invariant to point
order.  The projection head is only used while pretraining; the regressor
turns a feature into a displacement and a unit normal.
"""

from __future__ import annotations

import json
import logging

import numpy as np

from .errors import DataError, InvalidInputError, ShapeError
from .geom import PATCH_POINTS, Patch
from .tensor import (
    Parameter,
    Tensor,
    add,
    as_tensor,
    l2_normalize,
    matmul,
    max_over_axis,
    relu,
    reshape,
)

logger = logging.getLogger(__name__)

ENCODER_WIDTHS = (3, 64, 128, 256, 512, 1024)
PROJECTION_WIDTHS = (1024, 512, 256, 256)
REGRESSOR_WIDTHS = (1024, 512, 256, 128, 64, 6)

FORMAT_VERSION = 1


class MLPWeights:
    """Weights of a plain fully connected stack.

    Layer i maps widths[i] -> widths[i+1].  Weights initialize uniformly in
    +-1/sqrt(fan_in), biases at zero, drawn layer by layer from one seeded
    generator so a seed pins the whole stack.
    """

    component = "mlp"
    widths: tuple = ()

    def __init__(self, params: list[Parameter]):
        expected = 2 * (len(self.widths) - 1)
        if len(params) != expected:
            raise ShapeError(
                f"{self.component} expects {expected} parameter arrays, got {len(params)}"
            )
        for i in range(len(self.widths) - 1):
            w, b = params[2 * i], params[2 * i + 1]
            want_w = (self.widths[i], self.widths[i + 1])
            if w.data.shape != want_w or b.data.shape != (self.widths[i + 1],):
                raise ShapeError(
                    f"{self.component} layer {i}: got {w.data.shape}/{b.data.shape}, "
                    f"want {want_w}/({self.widths[i + 1]},)"
                )
        self.params = list(params)

    @classmethod
    def init(cls, seed: int = 0):
        rng = np.random.default_rng(seed)
        params = []
        for i in range(len(cls.widths) - 1):
            fan_in, fan_out = cls.widths[i], cls.widths[i + 1]
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            params.append(Parameter(w, name=f"{cls.component}.{i}.weight"))
            params.append(
                Parameter(np.zeros(fan_out), name=f"{cls.component}.{i}.bias")
            )
        return cls(params)

    def layers(self):
        for i in range(len(self.widths) - 1):
            yield self.params[2 * i], self.params[2 * i + 1]

    def parameters(self) -> list[Parameter]:
        return list(self.params)

    def set_trainable(self, flag: bool):
        for p in self.params:
            p.requires_grad = bool(flag)

    def trainable_flags(self) -> list[bool]:
        return [p.requires_grad for p in self.params]

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "params": {
                p.name: {"shape": list(p.data.shape), "values": p.data.ravel().tolist()}
                for p in self.params
            },
        }

    @classmethod
    def from_dict(cls, doc: dict):
        if list(doc.get("widths", [])) != list(cls.widths):
            raise DataError(
                f"{cls.component} widths {doc.get('widths')} do not match {list(cls.widths)}"
            )
        entries = doc.get("params")
        if not isinstance(entries, dict):
            raise DataError(f"{cls.component} document lacks a params table")
        params = []
        for i in range(len(cls.widths) - 1):
            for kind in ("weight", "bias"):
                name = f"{cls.component}.{i}.{kind}"
                entry = entries.get(name)
                if entry is None:
                    raise DataError(f"missing parameter {name!r}")
                arr = np.asarray(entry["values"], dtype=np.float64)
                shape = tuple(entry["shape"])
                if arr.size != int(np.prod(shape)):
                    raise DataError(f"parameter {name!r}: {arr.size} values for shape {shape}")
                arr = arr.reshape(shape)
                if not np.isfinite(arr).all():
                    raise DataError(f"parameter {name!r} holds non-finite values")
                params.append(Parameter(arr, name=name))
        return cls(params)


class EncoderWeights(MLPWeights):
    component = "encoder"
    widths = ENCODER_WIDTHS


class ProjectionWeights(MLPWeights):
    component = "projection"
    widths = PROJECTION_WIDTHS


class RegressorWeights(MLPWeights):
    component = "regressor"
    widths = REGRESSOR_WIDTHS


_COMPONENT_CLASSES = {
    cls.component: cls
    for cls in (EncoderWeights, ProjectionWeights, RegressorWeights)
}


def save_weights(path, components: dict):
    """Write named weight stacks to one versioned JSON document."""
    doc = {
        "format_version": FORMAT_VERSION,
        "components": {name: w.to_dict() for name, w in components.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_weights(path) -> dict:
    """Read back a weight file; unknown components or versions are errors."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read weights file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"weights file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise DataError(
            f"weights file {path}: unsupported format_version {doc.get('format_version')!r}"
        )
    out = {}
    for name, sub in doc.get("components", {}).items():
        cls = _COMPONENT_CLASSES.get(name)
        if cls is None:
            raise DataError(f"weights file {path}: unknown component {name!r}")
        out[name] = cls.from_dict(sub)
    return out


def _mlp_forward(weights: MLPWeights, x: Tensor, relu_last: bool = False) -> Tensor:
    n_layers = len(weights.widths) - 1
    h = x
    for i, (w, b) in enumerate(weights.layers()):
        h = add(matmul(h, w), b)
        if relu_last or i < n_layers - 1:
            h = relu(h)
    return h


def _batch_view(x, feature_dim: int):
    """Normalize input rank: returns (2-D tensor, had_batch_axis)."""
    t = as_tensor(x)
    if t.ndim == 1 and t.shape == (feature_dim,):
        return reshape(t, (1, feature_dim)), False
    if t.ndim == 2 and t.shape[1] == feature_dim:
        return t, True
    raise ShapeError(f"expected (*, {feature_dim}) input, got {t.shape}")


def encode(weights: EncoderWeights, patch) -> Tensor:
    """Per-point MLP followed by a channelwise max pool.

    Accepts one patch (Patch or (PATCH_POINTS, 3) array -> (1024,) feature)
    or a stacked batch ((B, PATCH_POINTS, 3) -> (B, 1024)).
    """
    x = patch.points if isinstance(patch, Patch) else patch
    t = as_tensor(x)
    if t.ndim == 2:
        batched = False
        t = reshape(t, (1,) + t.shape)
    elif t.ndim == 3:
        batched = True
    else:
        raise ShapeError(f"encode expects rank 2 or 3 input, got {t.shape}")
    n_batch, n_points, n_dims = t.shape
    if (n_points, n_dims) != (PATCH_POINTS, 3):
        raise ShapeError(
            f"encode expects ({PATCH_POINTS}, 3) patches, got ({n_points}, {n_dims})"
        )
    flat = reshape(t, (n_batch * n_points, n_dims))
    flat = _mlp_forward(weights, flat)
    cube = reshape(flat, (n_batch, n_points, weights.widths[-1]))
    feat = max_over_axis(cube, axis=1)
    return feat if batched else reshape(feat, (weights.widths[-1],))


def _fallback_rows(raw: Tensor, basis_index: int, what: str) -> Tensor:
    """Replace zero rows with a fixed unit basis vector, keeping gradients sane."""
    norms = np.linalg.norm(raw.data, axis=1)
    zero_rows = np.flatnonzero(norms == 0.0)
    if zero_rows.size == 0:
        return raw
    logger.warning(
        "%d zero %s vector(s) replaced by fixed basis fallback", zero_rows.size, what
    )
    fix = np.zeros_like(raw.data)
    fix[zero_rows, basis_index] = 1.0
    return add(raw, fix)


def project(weights: ProjectionWeights, feature) -> Tensor:
    """Map an encoder feature to the unit-length contrastive embedding."""
    t, batched = _batch_view(feature, weights.widths[0])
    raw = _mlp_forward(weights, t)
    raw = _fallback_rows(raw, 0, "projection")
    z = l2_normalize(raw, axis=1)
    return z if batched else reshape(z, (weights.widths[-1],))


def regress(weights: RegressorWeights, feature) -> tuple[Tensor, Tensor]:
    """Map a feature to (displacement, unit normal).

    The displacement lives in the patch's normalized canonical coordinates;
    callers undo the frame and radius scaling.  A zero normal output falls
    back to the +z basis vector (flagged in the log) rather than failing.
    """
    t, batched = _batch_view(feature, weights.widths[0])
    out = _mlp_forward(weights, t)
    disp = out[:, :3]
    raw_normal = _fallback_rows(out[:, 3:], 2, "normal")
    normal = l2_normalize(raw_normal, axis=1)
    if not batched:
        disp = reshape(disp, (3,))
        normal = reshape(normal, (3,))
    return disp, normal
