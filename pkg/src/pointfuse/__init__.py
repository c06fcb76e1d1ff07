"""Joint point-cloud filtering and normal estimation.

A contrastive-pretrained per-patch encoder feeds a small regression head
that predicts, for every point, a displacement onto the underlying surface
and the surface normal there.  Iterative inference alternates network
predictions with two classical refinement steps.  Everything runs on plain
numpy under a small define-by-run autodiff engine.
"""

from .datagen import (
    GAUSSIAN_SIGMA_FRACTIONS,
    ROTATION_ANGLES,
    SHARP_NEIGHBORS,
    ContrastivePair,
    NoiseSpec,
    TrainingSample,
    VariantSet,
    add_noise,
    build_contrastive_pair,
    build_training_sample,
    classify_sharp_features,
    density_resample,
    make_variant_set,
    sample_contrastive_pair,
)
from .errors import (
    DataError,
    DegenerateCovarianceError,
    InvalidInputError,
    NumericError,
    PointfuseError,
    ShapeError,
    StateError,
)
from .io import (
    read_mask,
    read_mesh_off,
    read_point_cloud,
    write_mask,
    write_point_cloud,
)
from .geom import (
    PATCH_POINTS,
    PATCH_RADIUS_FRACTION,
    CanonicalFrame,
    Patch,
    PointCloud,
    SpatialIndex,
    apply_frame,
    bounding_box_diagonal,
    canonical_frame,
    eigen3_symmetric,
    extract_patch,
    gather_patch_at,
    invert_frame,
    knn,
    neighbors_excluding_self,
    patch_covariance,
    radius_query,
    rotate_patch,
    rotation_matrix,
)
from .loss import (
    JointLossConfig,
    alt_joint_loss,
    joint_loss,
    nearest_gt_index,
    normal_loss,
    nt_xent_batch,
    position_loss,
)
from .metrics import (
    MetricsReport,
    TriangleMesh,
    chamfer,
    evaluate,
    msae,
    pca_normals,
    point2surface,
)
from .net import (
    EncoderWeights,
    MLPWeights,
    ProjectionWeights,
    RegressorWeights,
    encode,
    load_weights,
    project,
    regress,
    save_weights,
)
from .pipeline import (
    InferenceConfig,
    PretrainConfig,
    RegressTrainConfig,
    filter_cloud,
    infer_point,
    lrma_update,
    predict_cloud,
    pretrain_encoder,
    taubin_inflate,
    train_regressor,
)
from .tensor import (
    Adam,
    Parameter,
    SGD,
    Tensor,
    backward,
    no_grad,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # errors
    "PointfuseError", "ShapeError", "InvalidInputError", "DataError",
    "DegenerateCovarianceError", "StateError", "NumericError",
    # geometry
    "PATCH_POINTS", "PATCH_RADIUS_FRACTION", "PointCloud", "Patch",
    "CanonicalFrame", "SpatialIndex", "bounding_box_diagonal", "knn",
    "neighbors_excluding_self", "radius_query", "extract_patch",
    "gather_patch_at", "patch_covariance", "canonical_frame",
    "eigen3_symmetric", "apply_frame", "invert_frame", "rotation_matrix",
    "rotate_patch",
    # data synthesis
    "GAUSSIAN_SIGMA_FRACTIONS", "ROTATION_ANGLES", "SHARP_NEIGHBORS",
    "NoiseSpec", "VariantSet", "ContrastivePair", "TrainingSample",
    "add_noise", "make_variant_set", "build_contrastive_pair",
    "sample_contrastive_pair", "build_training_sample",
    "classify_sharp_features", "density_resample",
    # autodiff
    "Tensor", "Parameter", "backward", "no_grad", "SGD", "Adam",
    # networks
    "MLPWeights", "EncoderWeights", "ProjectionWeights", "RegressorWeights",
    "encode", "project", "regress", "save_weights", "load_weights",
    # losses
    "nt_xent_batch", "JointLossConfig", "position_loss", "normal_loss",
    "nearest_gt_index", "joint_loss", "alt_joint_loss",
    # training + inference
    "PretrainConfig", "RegressTrainConfig", "InferenceConfig",
    "pretrain_encoder", "train_regressor", "predict_cloud", "infer_point",
    "taubin_inflate", "lrma_update", "filter_cloud",
    # metrics
    "msae", "chamfer", "TriangleMesh", "point2surface", "pca_normals",
    "MetricsReport", "evaluate",
    # file formats
    "read_point_cloud", "write_point_cloud", "read_mesh_off",
    "read_mask", "write_mask",
]
