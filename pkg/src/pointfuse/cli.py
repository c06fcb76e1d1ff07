"""Command line: dataset synthesis, training, filtering and evaluation.

Exit codes: 0 success, 1 usage problems (bad flags or flag values), 2 data
problems (unreadable or malformed files, bad config documents), 3 numeric
failures.  A JSON config file can preset any command's defaults; explicit
flags always win.  POINTFUSE_THREADS overrides --threads when set.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import re
import sys
from dataclasses import dataclass, field

import numpy as np

from .datagen import (
    GAUSSIAN_SIGMA_FRACTIONS,
    NoiseSpec,
    SHARP_NEIGHBORS,
    VariantSet,
    add_noise,
    classify_sharp_features,
    density_resample,
    make_variant_set,
)
from .errors import (
    DataError,
    DegenerateCovarianceError,
    InvalidInputError,
    NumericError,
    PointfuseError,
    ShapeError,
)
from .io import (
    read_mask,
    read_mesh_off,
    read_point_cloud,
    write_mask,
    write_point_cloud,
)
from .loss import JointLossConfig
from .metrics import evaluate
from .net import load_weights, save_weights
from .pipeline import (
    InferenceConfig,
    PretrainConfig,
    RegressTrainConfig,
    filter_cloud,
    pretrain_encoder,
    train_regressor,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

THREADS_ENV = "POINTFUSE_THREADS"

CONFIG_SCHEMA_VERSION = 1

_DEFAULT_NOISE_PCT = ",".join(f"{s * 100:g}" for s in GAUSSIAN_SIGMA_FRACTIONS)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# run configuration files

_NoneType = type(None)

# section -> key -> allowed value types (bool is never allowed; it subclasses
# int, so it needs explicit rejection)
_CONFIG_TYPES = {
    "pretrain": {
        "epochs": (int,),
        "batch_size": (int,),
        "lr": (int, float),
        "tau": (int, float),
        "seed": (int,),
        "samples_per_epoch": (int, _NoneType),
    },
    "train": {
        "epochs": (int,),
        "batch_size": (int,),
        "lr": (int, float),
        "alpha": (int, float),
        "beta": (int, float),
        "delta": (int, float),
        "gamma": (int,),
        "variant": (str,),
        "seed": (int,),
        "samples_per_epoch": (int, _NoneType),
    },
    "inference": {
        "iterations": (int,),
        "taubin_neighbors": (int,),
        "lrma_neighbors": (int,),
        "radius_fraction": (int, float),
        "chunk_size": (int,),
        "threads": (int,),
        "seed": (int,),
    },
    "noise": {
        "gaussian_sigmas_pct": (list,),
        "impulsive": (str, list, _NoneType),
        "density": (str, _NoneType),
        "seed": (int,),
    },
}

# which config section feeds which subcommand's defaults
_SECTION_FOR_COMMAND = {
    "pretrain": "pretrain",
    "train": "train",
    "filter": "inference",
    "gen-data": "noise",
}

# config key -> argparse dest, where they differ
_DEST_OVERRIDES = {
    "noise": {"gaussian_sigmas_pct": "noise"},
}


@dataclass
class RunConfig:
    """Validated contents of a --config JSON document."""

    schema_version: int = CONFIG_SCHEMA_VERSION
    pretrain: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    inference: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)

    def defaults_for(self, command: str) -> dict:
        section = _SECTION_FOR_COMMAND.get(command)
        if section is None:
            return {}
        overrides = _DEST_OVERRIDES.get(section, {})
        values = getattr(self, section if section != "inference" else "inference")
        return {overrides.get(key, key): value for key, value in values.items()}


def load_run_config(path) -> RunConfig:
    """Read and validate a config document; unknown keys are rejected."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError(f"config {path} must hold a JSON object")
    version = doc.get("schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        raise DataError(
            f"config {path}: schema_version must be {CONFIG_SCHEMA_VERSION}, got {version!r}"
        )
    sections = {}
    for key, value in doc.items():
        if key == "schema_version":
            continue
        table = _CONFIG_TYPES.get(key)
        if table is None:
            raise DataError(f"config {path}: unknown section {key!r}")
        if not isinstance(value, dict):
            raise DataError(f"config {path}: section {key!r} must be an object")
        for name, entry in value.items():
            allowed = table.get(name)
            if allowed is None:
                raise DataError(f"config {path}: unknown key {key}.{name}")
            if isinstance(entry, bool) or not isinstance(entry, allowed):
                raise DataError(
                    f"config {path}: {key}.{name} has the wrong type "
                    f"({type(entry).__name__})"
                )
        sections[key] = dict(value)
    return RunConfig(schema_version=version, **sections)


def _prescan_config(argv) -> RunConfig:
    """Pull --config out of raw argv so its values can seed parser defaults."""
    path = None
    for i, token in enumerate(argv):
        if token == "--config":
            if i + 1 >= len(argv):
                raise _UsageError("--config needs a path")
            path = argv[i + 1]
        elif token.startswith("--config="):
            path = token.split("=", 1)[1]
    return load_run_config(path) if path else RunConfig()


# ---------------------------------------------------------------------------
# flag parsing helpers


def _parse_sigmas(value) -> tuple:
    """Noise levels as percents (flag string or config list) -> fractions."""
    if isinstance(value, (list, tuple)):
        parts = list(value)
    else:
        text = str(value).strip()
        if not text:
            return ()
        parts = text.split(",")
    out = []
    for part in parts:
        try:
            pct = float(part)
        except (TypeError, ValueError):
            raise _UsageError(f"bad noise level {part!r}") from None
        if not (np.isfinite(pct) and pct >= 0.0):
            raise _UsageError(f"noise levels must be >= 0, got {part!r}")
        out.append(pct / 100.0)
    return tuple(out)


def _parse_impulsive(value):
    """"SIGMA_PCT:FRACTION" (or a [sigma_pct, fraction] list) -> NoiseSpec."""
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        parts = list(value)
    else:
        parts = str(value).split(":")
    if len(parts) != 2:
        raise _UsageError(f"impulsive noise must be SIGMA_PCT:FRACTION, got {value!r}")
    try:
        sigma_pct, fraction = float(parts[0]), float(parts[1])
    except (TypeError, ValueError):
        raise _UsageError(f"impulsive noise must be SIGMA_PCT:FRACTION, got {value!r}") from None
    return NoiseSpec("impulsive", sigma_pct / 100.0, fraction)


def _resolve_threads(flag_value: int) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise _UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        if value < 1:
            raise _UsageError(f"{THREADS_ENV} must be >= 1, got {value}")
        return value
    return flag_value


def _stem(path: str) -> str:
    base = os.path.basename(path)
    return base[:-4] if base.endswith(".xyz") else base


# ---------------------------------------------------------------------------
# dataset discovery

_GAUSS_RE = re.compile(r"_gauss_([0-9.eE+-]+)pct\.xyz$")


def discover_groups(data_dir: str) -> list:
    """Find (stem, clean_path, [(sigma_fraction, noisy_path), ...]) groups.

    A group is a *_clean.xyz file plus its *_gauss_<pct>pct.xyz siblings,
    ordered by noise level.  Impulsive/density files are evaluation data and
    are never picked up here.
    """
    if not os.path.isdir(data_dir):
        raise DataError(f"{data_dir} is not a directory")
    groups = []
    for clean_path in sorted(glob.glob(os.path.join(data_dir, "*_clean.xyz"))):
        stem = os.path.basename(clean_path)[: -len("_clean.xyz")]
        noisy = []
        pattern = os.path.join(data_dir, f"{stem}_gauss_*pct.xyz")
        for noisy_path in sorted(glob.glob(pattern)):
            match = _GAUSS_RE.search(os.path.basename(noisy_path))
            if not match:
                continue
            try:
                pct = float(match.group(1))
            except ValueError:
                continue
            noisy.append((pct / 100.0, noisy_path))
        noisy.sort(key=lambda item: item[0])
        groups.append((stem, clean_path, noisy))
    if not groups:
        raise DataError(f"no *_clean.xyz shapes found in {data_dir}")
    return groups


def _load_variant_sets(data_dir: str) -> list:
    sets = []
    for stem, clean_path, noisy_files in discover_groups(data_dir):
        clean = read_point_cloud(clean_path)
        if not clean.has_normals:
            raise DataError(f"{clean_path}: training clouds need normals")
        noisy = []
        for sigma, path in noisy_files:
            cloud = read_point_cloud(path)
            if len(cloud) != len(clean):
                raise DataError(
                    f"{path}: {len(cloud)} points, but {clean_path} has {len(clean)}"
                )
            noisy.append((sigma, cloud))
        sets.append(VariantSet(clean=clean, noisy=noisy))
    return sets


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    sigmas = _parse_sigmas(args.noise)
    impulse = _parse_impulsive(args.impulsive)
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for path in args.inputs:
        cloud = read_point_cloud(path)
        if not cloud.has_normals:
            raise DataError(f"{path}: input clouds need normals")
        stem = _stem(path)
        if args.density:
            cloud = density_resample(cloud, args.density, rng)
        write_point_cloud(os.path.join(args.out, f"{stem}_clean.xyz"), cloud)
        variant_set = make_variant_set(cloud, sigmas, rng)
        for sigma, noisy in variant_set.noisy:
            name = f"{stem}_gauss_{sigma * 100:g}pct.xyz"
            write_point_cloud(os.path.join(args.out, name), noisy)
        if impulse is not None:
            noisy = add_noise(cloud, impulse, rng)
            name = (
                f"{stem}_impulse_{impulse.sigma_fraction * 100:g}pct_"
                f"{impulse.impulse_fraction:g}.xyz"
            )
            write_point_cloud(os.path.join(args.out, name), noisy)
        if args.sharp_mask:
            if len(cloud) >= SHARP_NEIGHBORS + 1:
                mask = classify_sharp_features(cloud)
                write_mask(os.path.join(args.out, f"{stem}_sharp.mask"), mask)
            else:
                logger.warning(
                    "%s: too few points for a sharp mask (%d)", path, len(cloud)
                )
        logger.info("synthesized %d variant(s) for %s", len(variant_set.noisy), stem)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    datasets = _load_variant_sets(args.data)
    cfg = PretrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        tau=args.tau,
        seed=args.seed,
        samples_per_epoch=args.samples_per_epoch,
    )
    losses = []
    encoder, projection = pretrain_encoder(datasets, cfg, loss_log=losses)
    save_weights(args.out, {"encoder": encoder, "projection": projection})
    logger.info("wrote %s (first epoch loss %.6f, last %.6f)",
                args.out, losses[0], losses[-1])
    return EXIT_OK


def cmd_train(args) -> int:
    datasets = _load_variant_sets(args.data)
    components = load_weights(args.encoder)
    encoder = components.get("encoder")
    if encoder is None:
        raise DataError(f"{args.encoder} holds no encoder component")
    loss_cfg = JointLossConfig(
        alpha=args.alpha,
        beta=args.beta,
        delta=args.delta,
        gamma=args.gamma,
        variant=args.variant,
    )
    cfg = RegressTrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        loss=loss_cfg,
        seed=args.seed,
        samples_per_epoch=args.samples_per_epoch,
    )
    losses = []
    regressor = train_regressor(datasets, encoder, cfg, loss_log=losses)
    save_weights(args.out, {"encoder": encoder, "regressor": regressor})
    logger.info("wrote %s (first epoch loss %.6f, last %.6f)",
                args.out, losses[0], losses[-1])
    return EXIT_OK


def cmd_filter(args) -> int:
    cloud = read_point_cloud(args.input)
    components = load_weights(args.model)
    encoder = components.get("encoder")
    regressor = components.get("regressor")
    if encoder is None or regressor is None:
        raise DataError(f"{args.model} must hold encoder and regressor components")
    cfg = InferenceConfig(
        iterations=args.iterations,
        taubin_neighbors=args.taubin_neighbors,
        lrma_neighbors=args.lrma_neighbors,
        radius_fraction=args.radius_fraction,
        chunk_size=args.chunk_size,
        threads=_resolve_threads(args.threads),
        seed=args.seed,
    )
    filtered = filter_cloud(cloud, encoder, regressor, cfg)
    write_point_cloud(args.out, filtered)
    return EXIT_OK


def cmd_eval(args) -> int:
    gt = read_point_cloud(args.gt)
    pred = read_point_cloud(args.pred)
    mesh = read_mesh_off(args.mesh) if args.mesh else None
    mask = None
    if args.sharp:
        mask = read_mask(args.sharp)
        if mask.shape[0] != len(gt):
            raise DataError(
                f"{args.sharp}: {mask.shape[0]} entries for {len(gt)} points"
            )
    report = evaluate(gt, pred, mesh=mesh, sharp_mask=mask)
    doc = {"schema_version": 1, **report.to_dict()}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        try:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text)
        except OSError as exc:
            raise DataError(f"cannot write {args.out}: {exc}") from exc
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser(config: RunConfig | None = None) -> argparse.ArgumentParser:
    config = config or RunConfig()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON config presetting defaults for this command")
    common.add_argument("--quiet", action="store_true",
                        help="log warnings and errors only")

    top = _Parser(prog="pointfuse",
                  description="Joint normal estimation and point cloud filtering.")
    sub = top.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common],
                       help="synthesize noise variants and sharp masks")
    p.add_argument("inputs", nargs="+", metavar="CLOUD",
                   help="clean .xyz clouds with normals")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--noise", default=_DEFAULT_NOISE_PCT,
                   help="comma-separated Gaussian levels, percent of bbox diagonal")
    p.add_argument("--impulsive", default=None, metavar="SIGMA_PCT:FRACTION",
                   help="also write one impulsive-noise variant")
    p.add_argument("--density", choices=("gradient", "striped"), default=None,
                   help="resample the clean cloud non-uniformly first")
    p.add_argument("--sharp-mask", default=True,
                   action=argparse.BooleanOptionalAction,
                   help="write per-point sharp-feature masks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data, **config.defaults_for("gen-data"))

    p = sub.add_parser("pretrain", parents=[common],
                       help="contrastive encoder pretraining")
    p.add_argument("--data", required=True, help="directory from gen-data")
    p.add_argument("--out", required=True, help="weights JSON to write")
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--batch", dest="batch_size", type=int, default=512)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--samples-per-epoch", dest="samples_per_epoch",
                   type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain, **config.defaults_for("pretrain"))

    p = sub.add_parser("train", parents=[common],
                       help="fit the displacement/normal head")
    p.add_argument("--data", required=True, help="directory from gen-data")
    p.add_argument("--encoder", required=True, help="weights JSON from pretrain")
    p.add_argument("--out", required=True, help="weights JSON to write")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", dest="batch_size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--delta", type=float, default=0.3)
    p.add_argument("--gamma", type=int, default=12)
    p.add_argument("--loss", dest="variant", choices=("joint", "alternative"),
                   default="joint")
    p.add_argument("--samples-per-epoch", dest="samples_per_epoch",
                   type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train, **config.defaults_for("train"))

    p = sub.add_parser("filter", parents=[common],
                       help="filter a cloud and estimate its normals")
    p.add_argument("--input", required=True, help=".xyz cloud to filter")
    p.add_argument("--model", required=True, help="weights JSON from train")
    p.add_argument("--out", required=True, help="filtered .xyz to write")
    p.add_argument("--iterations", type=int, default=2)
    p.add_argument("--taubin-k", dest="taubin_neighbors", type=int, default=100)
    p.add_argument("--lrma-k", dest="lrma_neighbors", type=int, default=20)
    p.add_argument("--radius-fraction", dest="radius_fraction",
                   type=float, default=0.05)
    p.add_argument("--chunk", dest="chunk_size", type=int, default=64)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_filter, **config.defaults_for("filter"))

    p = sub.add_parser("eval", parents=[common],
                       help="score a filtered cloud against ground truth")
    p.add_argument("--gt", required=True, help="ground-truth .xyz (with normals)")
    p.add_argument("--pred", required=True, help="predicted .xyz")
    p.add_argument("--mesh", default=None, help="OFF mesh for surface distance")
    p.add_argument("--sharp", default=None, help="0/1 sharp mask over gt points")
    p.add_argument("--out", default=None, help="report JSON (default: stdout)")
    p.set_defaults(func=cmd_eval, **config.defaults_for("eval"))

    return top


def _setup_logging(quiet: bool):
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING if quiet else logging.INFO,
        format="%(message)s",
        force=True,
    )


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        config = _prescan_config(argv)
        parser = build_parser(config)
        args = parser.parse_args(argv)
        _setup_logging(getattr(args, "quiet", False))
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidInputError, ShapeError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, DegenerateCovarianceError, np.linalg.LinAlgError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PointfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
