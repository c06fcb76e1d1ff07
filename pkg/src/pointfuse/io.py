"""File formats: xyz point clouds, OFF triangle meshes, 0/1 mask files.

Cloud files hold one point per line, "x y z" or "x y z nx ny nz", with
blank lines and '#' comments skipped.  Writers emit shortest round-trip
float formatting, so write/read cycles reproduce coordinates exactly and
reruns are byte-identical.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .geom import PointCloud
from .metrics import TriangleMesh


def _data_lines(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"{path} is not a text file: {exc}") from exc
    for lineno, line in enumerate(raw, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        yield lineno, text


def read_point_cloud(path) -> PointCloud:
    """Parse an xyz file; normals are renormalized to exact unit length."""
    coords = []
    normals = []
    width = None
    for lineno, text in _data_lines(path):
        fields = text.split()
        if len(fields) not in (3, 6):
            raise DataError(
                f"{path}:{lineno}: expected 3 or 6 columns, got {len(fields)}"
            )
        if width is None:
            width = len(fields)
        elif len(fields) != width:
            raise DataError(
                f"{path}:{lineno}: mixed {width}- and {len(fields)}-column rows"
            )
        try:
            values = [float(f) for f in fields]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        if not all(np.isfinite(values)):
            raise DataError(f"{path}:{lineno}: non-finite value")
        coords.append(values[:3])
        if width == 6:
            normals.append(values[3:])
    if not coords:
        raise DataError(f"{path}: no points found")
    pts = np.asarray(coords, dtype=np.float64)
    if not normals:
        return PointCloud(pts)
    nrm = np.asarray(normals, dtype=np.float64)
    lengths = np.linalg.norm(nrm, axis=1, keepdims=True)
    if np.any(lengths == 0.0):
        bad = int(np.flatnonzero(lengths[:, 0] == 0.0)[0])
        raise DataError(f"{path}: zero-length normal at point {bad}")
    return PointCloud(pts, nrm / lengths)


def _fmt(value: float) -> str:
    return repr(float(value))


def write_point_cloud(path, cloud: PointCloud):
    rows = cloud.points if cloud.normals is None else np.hstack(
        [cloud.points, cloud.normals]
    )
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(" ".join(_fmt(v) for v in row))
                fh.write("\n")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def read_mesh_off(path) -> TriangleMesh:
    """Parse an OFF file with triangular faces."""
    lines = _data_lines(path)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise DataError(f"{path}: empty mesh file") from None
    if header != "OFF":
        raise DataError(f"{path}:{lineno}: expected OFF header, got {header!r}")
    try:
        lineno, counts = next(lines)
    except StopIteration:
        raise DataError(f"{path}: missing element counts") from None
    fields = counts.split()
    if len(fields) != 3:
        raise DataError(f"{path}:{lineno}: counts line needs 3 integers")
    try:
        n_vertices, n_faces, _ = (int(f) for f in fields)
    except ValueError as exc:
        raise DataError(f"{path}:{lineno}: {exc}") from exc

    vertices = np.empty((n_vertices, 3))
    for i in range(n_vertices):
        try:
            lineno, text = next(lines)
        except StopIteration:
            raise DataError(f"{path}: expected {n_vertices} vertices, file ended") from None
        fields = text.split()
        if len(fields) != 3:
            raise DataError(f"{path}:{lineno}: vertex needs 3 coordinates")
        try:
            vertices[i] = [float(f) for f in fields]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc

    faces = np.empty((n_faces, 3), dtype=np.intp)
    for i in range(n_faces):
        try:
            lineno, text = next(lines)
        except StopIteration:
            raise DataError(f"{path}: expected {n_faces} faces, file ended") from None
        fields = text.split()
        if not fields or fields[0] != "3" or len(fields) != 4:
            raise DataError(f"{path}:{lineno}: only triangular faces are supported")
        try:
            faces[i] = [int(f) for f in fields[1:]]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc

    try:
        return TriangleMesh(vertices, faces)
    except Exception as exc:
        raise DataError(f"{path}: {exc}") from exc


def read_mask(path) -> np.ndarray:
    """One 0/1 flag per line -> boolean array."""
    flags = []
    for lineno, text in _data_lines(path):
        if text not in ("0", "1"):
            raise DataError(f"{path}:{lineno}: mask entries must be 0 or 1, got {text!r}")
        flags.append(text == "1")
    if not flags:
        raise DataError(f"{path}: empty mask")
    return np.asarray(flags, dtype=bool)


def write_mask(path, mask):
    mask = np.asarray(mask, dtype=bool)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for flag in mask:
                fh.write("1\n" if flag else "0\n")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
