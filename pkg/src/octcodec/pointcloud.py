"""Point cloud I/O, cubic quantization and distortion metrics."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    EmptyCloudError,
    MalformedHeaderError,
    OutOfBoundsError,
    PlyError,
    UnsupportedFormatError,
)

BBOX_EPS = 2.0 ** -20
EDGE_BITS = 24
MAX_DEPTH = 16
BRUTE_FORCE_LIMIT = 10_000

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class CubicBBox:
    origin: tuple
    edge: float

    def __post_init__(self):
        if not self.edge > 0:
            raise ValueError("bounding box edge must be positive")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "edge", float(self.edge))

    def leaf_size(self, depth):
        return self.edge / 2.0 ** depth


@dataclass(frozen=True)
class VoxelSet:
    """Deduplicated integer voxel coordinates, sorted lexicographically."""

    depth: int
    coords: np.ndarray

    def __post_init__(self):
        if not 1 <= self.depth <= 16:
            raise ValueError(f"depth must be in 1..16, got {self.depth}")
        c = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if len(c) and (c.min() < 0 or c.max() >= 1 << self.depth):
            raise ValueError("voxel coordinate out of range for depth")
        c = np.unique(c, axis=0) if len(c) else c
        object.__setattr__(self, "coords", c)

    def __len__(self):
        return len(self.coords)

    def __eq__(self, other):
        if not isinstance(other, VoxelSet):
            return NotImplemented
        return self.depth == other.depth and np.array_equal(self.coords, other.coords)

    __hash__ = None


# --------------------------------------------------------------------------- PLY


def _read_header(f):
    first = f.readline()
    if first.strip() != b"ply":
        raise MalformedHeaderError("missing 'ply' magic line")
    fmt = None
    elements = []  # [name, count, [(prop_name, dtype or ('list', count_t, item_t))]]
    while True:
        line = f.readline()
        if not line:
            raise MalformedHeaderError("header not terminated by end_header")
        toks = line.decode("ascii", errors="replace").split()
        if not toks or toks[0] in ("comment", "obj_info"):
            continue
        key = toks[0]
        if key == "end_header":
            break
        if key == "format":
            if len(toks) < 2:
                raise MalformedHeaderError("bad format line")
            fmt = toks[1]
        elif key == "element":
            if len(toks) != 3:
                raise MalformedHeaderError(f"bad element line: {line!r}")
            try:
                elements.append([toks[1], int(toks[2]), []])
            except ValueError:
                raise MalformedHeaderError(f"bad element count: {line!r}") from None
        elif key == "property":
            if not elements:
                raise MalformedHeaderError("property before any element")
            if len(toks) >= 5 and toks[1] == "list":
                if toks[2] not in _PLY_TYPES or toks[3] not in _PLY_TYPES:
                    raise MalformedHeaderError(f"unknown list type: {line!r}")
                elements[-1][2].append((toks[4], ("list", _PLY_TYPES[toks[2]], _PLY_TYPES[toks[3]])))
            elif len(toks) == 3:
                if toks[1] not in _PLY_TYPES:
                    raise MalformedHeaderError(f"unknown property type: {toks[1]}")
                elements[-1][2].append((toks[2], _PLY_TYPES[toks[1]]))
            else:
                raise MalformedHeaderError(f"bad property line: {line!r}")
        else:
            raise MalformedHeaderError(f"unexpected header keyword {key!r}")
    if fmt is None:
        raise MalformedHeaderError("no format line")
    if fmt not in ("ascii", "binary_little_endian"):
        raise UnsupportedFormatError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def _skip_binary_element(buf, pos, count, props):
    if all(not isinstance(t, tuple) for _, t in props):
        size = sum(np.dtype(t).itemsize for _, t in props)
        return pos + size * count
    for _ in range(count):
        for _, t in props:
            if isinstance(t, tuple):
                _, ct, it = t
                n = int(np.frombuffer(buf, dtype="<" + ct, count=1, offset=pos)[0])
                pos += np.dtype(ct).itemsize + n * np.dtype(it).itemsize
            else:
                pos += np.dtype(t).itemsize
    return pos


def load_ply(path) -> PointCloud:
    """Read x, y, z vertex positions from an ASCII or binary little-endian PLY."""
    with open(path, "rb") as f:
        fmt, elements = _read_header(f)
        body = f.read()
    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise MalformedHeaderError("no vertex element")
    names = [p for p, _ in vertex[2]]
    for axis in "xyz":
        if axis not in names:
            raise MalformedHeaderError(f"vertex element lacks property {axis!r}")
    for p, t in vertex[2]:
        if p in "xyz" and t not in ("f4", "f8"):
            raise UnsupportedFormatError(f"position property {p} must be float or double")
    if vertex[1] == 0:
        raise EmptyCloudError(f"{path}: zero vertices")

    if fmt == "ascii":
        lines = body.decode("ascii", errors="replace").splitlines()
        lines = [ln for ln in lines if ln.strip()]
        start = 0
        for e in elements:
            if e is vertex:
                break
            start += e[1]
        rows = lines[start:start + vertex[1]]
        if len(rows) < vertex[1]:
            raise PlyError(f"{path}: expected {vertex[1]} vertex rows, found {len(rows)}")
        if any(isinstance(t, tuple) for _, t in vertex[2]):
            raise UnsupportedFormatError("list properties on vertices are not supported")
        idx = [names.index(a) for a in "xyz"]
        try:
            table = np.array([[float(r.split()[i]) for i in idx] for r in rows])
        except (ValueError, IndexError):
            raise PlyError(f"{path}: malformed vertex row") from None
        return PointCloud(table)

    pos = 0
    for e in elements:
        if e is vertex:
            break
        pos = _skip_binary_element(body, pos, e[1], e[2])
    if any(isinstance(t, tuple) for _, t in vertex[2]):
        raise UnsupportedFormatError("list properties on vertices are not supported")
    dt = np.dtype([(p, "<" + t) for p, t in vertex[2]])
    if len(body) - pos < dt.itemsize * vertex[1]:
        raise PlyError(f"{path}: truncated vertex data")
    arr = np.frombuffer(body, dtype=dt, count=vertex[1], offset=pos)
    return PointCloud(np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64))


def write_ply(path, pc: PointCloud, binary=True):
    pts = pc.points
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {len(pts)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            f.write(np.ascontiguousarray(pts, dtype="<f8").tobytes())
        else:
            for p in pts:
                f.write(("%.17g %.17g %.17g\n" % tuple(p)).encode("ascii"))


# ------------------------------------------------------------------ quantization


def _round_up_bits(x: float, bits: int) -> float:
    """Smallest float >= x with at most ``bits`` significant bits."""
    mant, exp = math.frexp(x)
    return math.ldexp(math.ceil(math.ldexp(mant, bits)), exp - bits)


def compute_bbox(pc: PointCloud) -> CubicBBox:
    """Cubic box from the per-axis minimum with edge ``extent * (1 + 2^-20)``.

    The edge is rounded up to ``EDGE_BITS`` significant bits and the origin
    down onto the half-leaf grid of depth 16. Cell centers are then exact
    floats (whenever ``|origin|`` is below about ``4096 * edge``), so the
    half-leaf error bound holds in floating point as well as in exact arithmetic. Inputs
    with short mantissas, such as small integers, are left unchanged.
    """
    if len(pc) == 0:
        raise EmptyCloudError("cannot bound an empty cloud")
    lo = pc.points.min(axis=0)
    hi = pc.points.max(axis=0)
    origin = lo
    edge = 0.0
    for _ in range(4):
        extent = float((hi - origin).max())
        new_edge = _round_up_bits(max(extent * (1.0 + BBOX_EPS), BBOX_EPS), EDGE_BITS)
        # power of two dividing every half-leaf offset at every depth
        grid = math.ldexp(1.0, math.frexp(new_edge)[1] - EDGE_BITS - MAX_DEPTH - 1)
        origin = np.floor(lo / grid) * grid
        if new_edge == edge:
            break
        edge = new_edge
    return CubicBBox(tuple(origin), edge)


def _centers(coords, bbox, depth):
    w = bbox.edge / 2.0 ** depth
    return np.asarray(bbox.origin) + (coords + 0.5) * w


def quantize(pc: PointCloud, bbox: CubicBBox, depth: int) -> VoxelSet:
    """Map every point to the leaf cell containing it and deduplicate."""
    if not 1 <= depth <= 16:
        raise ValueError(f"depth must be in 1..16, got {depth}")
    if len(pc) == 0:
        raise EmptyCloudError("cannot quantize an empty cloud")
    origin = np.asarray(bbox.origin)
    pts = pc.points
    outside = np.any((pts < origin) | (pts > origin + bbox.edge), axis=1)
    if outside.any():
        i = int(np.flatnonzero(outside)[0])
        raise OutOfBoundsError(i, pts[i])
    return VoxelSet(depth, point_cells(pc, bbox, depth))


def point_cells(pc: PointCloud, bbox: CubicBBox, depth: int) -> np.ndarray:
    """Per-point leaf cell (not deduplicated), with a float fix-up so that the
    cell center is within half a leaf of the point in floating arithmetic."""
    side = 1 << depth
    origin = np.asarray(bbox.origin)
    pts = pc.points
    cells = np.floor((pts - origin) / bbox.edge * side).astype(np.int64)
    np.clip(cells, 0, side - 1, out=cells)
    half = bbox.edge / 2.0 ** (depth + 1)
    for step in (-1, 1):
        err = np.abs(_centers(cells, bbox, depth) - pts)
        bad = err > half
        if not bad.any():
            break
        moved = np.clip(cells + step, 0, side - 1)
        better = bad & (np.abs(_centers(moved, bbox, depth) - pts) <= half)
        cells = np.where(better, moved, cells)
    return cells


def dequantize(vs: VoxelSet, bbox: CubicBBox) -> PointCloud:
    return PointCloud(_centers(vs.coords.astype(np.float64), bbox, vs.depth))


# ----------------------------------------------------------------------- metrics


def nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Euclidean distance from every row of ``src`` to its nearest row of ``dst``."""
    if max(len(src), len(dst)) > BRUTE_FORCE_LIMIT:
        d, _ = cKDTree(dst).query(src, k=1)
        return np.asarray(d, dtype=np.float64)
    out = np.empty(len(src))
    step = max(1, 1_000_000 // max(len(dst), 1))
    for start in range(0, len(src), step):
        chunk = src[start:start + step]
        # explicit differences, not the |a|^2 - 2ab + |b|^2 expansion: no cancellation
        diff = chunk[:, None, :] - dst[None, :, :]
        out[start:start + len(chunk)] = np.sqrt(np.min((diff ** 2).sum(axis=2), axis=1))
    return out


def d1_psnr(ref: PointCloud, rec: PointCloud, peak: float) -> float:
    """Symmetric point-to-point PSNR in dB; ``inf`` for identical clouds."""
    if len(ref) == 0 or len(rec) == 0:
        raise EmptyCloudError("metrics need non-empty clouds")
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse_a = float(np.mean(nearest_distances(ref.points, rec.points) ** 2))
    mse_b = float(np.mean(nearest_distances(rec.points, ref.points) ** 2))
    mse = max(mse_a, mse_b)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def chamfer(ref: PointCloud, rec: PointCloud) -> float:
    if len(ref) == 0 or len(rec) == 0:
        raise EmptyCloudError("metrics need non-empty clouds")
    return float(np.mean(nearest_distances(ref.points, rec.points))
                 + np.mean(nearest_distances(rec.points, ref.points)))


METRIC_FIELDS = ["file", "depth", "bpp", "d1_psnr", "chamfer"]


def append_csv(path, row: dict, fields):
    """Append one row, writing the header first if the file is new or empty."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, extrasaction="raise")
        if new:
            w.writeheader()
        w.writerow(row)
