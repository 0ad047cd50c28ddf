"""Deterministic synthetic point clouds standing in for scanned datasets."""

from __future__ import annotations

import os

import numpy as np

from .pointcloud import PointCloud, write_ply

KINDS = ("sphere-surface", "plane", "gaussian-blobs", "uniform-cube")


def sphere_surface(rng, points, radius=1.0):
    v = rng.normal(size=(points, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius


def plane(rng, points, size=1.0):
    # random orientation: QR of a gaussian matrix gives an orthonormal frame
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    uv = rng.uniform(-size / 2, size / 2, size=(points, 2))
    return uv @ q[:, :2].T


def blob_centers(blobs, spread=4.0):
    angles = 2 * np.pi * np.arange(blobs) / blobs
    return np.stack([spread * np.cos(angles), spread * np.sin(angles), np.zeros(blobs)], axis=1)


def gaussian_blobs(rng, points, blobs=3, sigma=0.25, spread=4.0):
    centers = blob_centers(blobs, spread)
    which = np.arange(points) % blobs
    return centers[which] + rng.normal(scale=sigma, size=(points, 3))


def uniform_cube(rng, points):
    return rng.uniform(0.0, 1.0, size=(points, 3))


def make_cloud(kind: str, points: int, seed: int) -> PointCloud:
    rng = np.random.default_rng(seed)
    if kind == "sphere-surface":
        pts = sphere_surface(rng, points)
    elif kind == "plane":
        pts = plane(rng, points)
    elif kind == "gaussian-blobs":
        pts = gaussian_blobs(rng, points)
    elif kind == "uniform-cube":
        pts = uniform_cube(rng, points)
    else:
        raise ValueError(f"unknown kind {kind!r}; choose from {', '.join(KINDS)}")
    return PointCloud(pts)


def write_corpus(kind: str, count: int, points: int, seed: int, out_dir) -> list:
    """Write ``count`` clouds as binary PLY; cloud ``i`` uses seed ``seed + i``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(count):
        path = os.path.join(out_dir, f"{kind}_{seed + i:05d}.ply")
        write_ply(path, make_cloud(kind, points, seed + i))
        paths.append(path)
    return paths
