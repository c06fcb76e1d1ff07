"""Shared fixtures: analytic surface samplers with exact normals.

Every sampler takes (n, seed) and returns a PointCloud whose normals come
from the surface's closed form, so angular metrics have exact references.
"""

import numpy as np
import pytest

from pointfuse import PointCloud


def sample_sphere(n, seed, radius=1.0):
    """Uniform points on a sphere; the normal at p is p/|p|."""
    g = np.random.default_rng(seed)
    v = g.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return PointCloud(v * radius, v.copy())


def sample_cube(n, seed, half=1.0):
    """Uniform points on the surface of [-half, half]^3 with face normals."""
    g = np.random.default_rng(seed)
    face = g.integers(0, 6, size=n)
    uv = g.uniform(-half, half, size=(n, 2))
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    pts = np.zeros((n, 3))
    nrm = np.zeros((n, 3))
    rows = np.arange(n)
    pts[rows, axis] = sign * half
    other = np.array([[1, 2], [0, 2], [0, 1]])[axis]
    pts[rows, other[:, 0]] = uv[:, 0]
    pts[rows, other[:, 1]] = uv[:, 1]
    nrm[rows, axis] = sign
    return PointCloud(pts, nrm)


def sample_plane(n, seed, extent=1.0):
    """Points on z = 0 with +z normals."""
    g = np.random.default_rng(seed)
    xy = g.uniform(-extent, extent, size=(n, 2))
    pts = np.column_stack([xy, np.zeros(n)])
    nrm = np.tile([0.0, 0.0, 1.0], (n, 1))
    return PointCloud(pts, nrm)


def sample_torus(n, seed, major=1.0, minor=0.4):
    """Area-uniform points on a torus via rejection on the tube angle."""
    g = np.random.default_rng(seed)
    pts = np.empty((0, 3))
    nrm = np.empty((0, 3))
    while pts.shape[0] < n:
        m = 4 * (n - pts.shape[0]) + 16
        u = g.uniform(0.0, 2.0 * np.pi, size=m)
        v = g.uniform(0.0, 2.0 * np.pi, size=m)
        keep = g.uniform(0.0, 1.0, size=m) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        p = np.column_stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)])
        q = np.column_stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)])
        pts = np.vstack([pts, p])
        nrm = np.vstack([nrm, q])
    return PointCloud(pts[:n], nrm[:n])


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
