"""Breadth-first octree over a voxel set.

Child index of a voxel at level ``i`` is ``(x_bit << 2) | (y_bit << 1) | z_bit``
taken from the i-th most significant coordinate bits. Occupancy bit ``k`` counts
from the most significant end, so child 0 is ``0b10000000``. Nodes of a layer
are stored parent-major with ascending octant, which is the same as sorting by
Morton code.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np

from .errors import CorruptionError, EmptyCloudError
from .pointcloud import VoxelSet

# occupancy byte -> the octants it contains, MSB first
_BITS = np.unpackbits(np.arange(256, dtype=np.uint8)[:, None], axis=1).astype(bool)
POPCOUNT = _BITS.sum(axis=1).astype(np.int64)


def morton_encode(coords: np.ndarray, depth: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64)
    code = np.zeros(len(coords), dtype=np.int64)
    for b in range(depth - 1, -1, -1):
        digit = (((coords[:, 0] >> b) & 1) << 2) | (((coords[:, 1] >> b) & 1) << 1) | ((coords[:, 2] >> b) & 1)
        code = (code << 3) | digit
    return code


def morton_decode(codes: np.ndarray, depth: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    out = np.zeros((len(codes), 3), dtype=np.int64)
    for b in range(depth):
        digit = (codes >> (3 * b)) & 7
        out[:, 0] |= ((digit >> 2) & 1) << b
        out[:, 1] |= ((digit >> 1) & 1) << b
        out[:, 2] |= (digit & 1) << b
    return out


def expand_children(occupancy: np.ndarray):
    """Return (parent index, octant) for every child implied by one layer's codes."""
    occ = np.asarray(occupancy, dtype=np.int64)
    bits = _BITS[occ]
    parent, octant = np.nonzero(bits)
    return parent.astype(np.int64), octant.astype(np.int64)


class Octree:
    """Occupancy layers of an octree, possibly only the first few of them.

    ``occupancy[i - 1]`` holds the codes of layer ``i``. Structure of layer
    ``i`` (parents, octants) is derived from layer ``i - 1`` codes only, so a
    partially decoded tree can already describe its next layer.
    """

    def __init__(self, depth: int, occupancy):
        self.depth = int(depth)
        self.occupancy = [np.asarray(o, dtype=np.int64) for o in occupancy]
        if len(self.occupancy) > self.depth:
            raise CorruptionError("more layers than depth")
        for i, occ in enumerate(self.occupancy, start=1):
            if len(occ) != self.layer_size(i):
                raise CorruptionError(
                    f"layer {i} has {len(occ)} nodes, popcount of layer {i - 1} says {self.layer_size(i)}")
            if len(occ) and (occ.min() < 1 or occ.max() > 255):
                raise CorruptionError(f"layer {i} holds an occupancy code outside 1..255")

    @property
    def complete(self):
        return len(self.occupancy) == self.depth

    def layer_size(self, i: int) -> int:
        if i == 1:
            return 1
        return int(POPCOUNT[self.occupancy[i - 2]].sum())

    @cached_property
    def _structure(self):
        parents, octants = [np.array([-1], dtype=np.int64)], [np.array([0], dtype=np.int64)]
        for occ in self.occupancy[: self.depth - 1]:
            p, o = expand_children(occ)
            parents.append(p)
            octants.append(o)
        return parents, octants

    def parents(self, i: int) -> np.ndarray:
        return self._structure[0][i - 1]

    def octants(self, i: int) -> np.ndarray:
        return self._structure[1][i - 1]

    def with_layer(self, occ) -> "Octree":
        return Octree(self.depth, self.occupancy + [np.asarray(occ, dtype=np.int64)])


def build_octree(vs: VoxelSet) -> Octree:
    if len(vs) == 0:
        raise EmptyCloudError("cannot build an octree over an empty voxel set")
    depth = vs.depth
    codes = np.unique(morton_encode(vs.coords, depth))
    layers = []
    for i in range(1, depth + 1):
        shift = 3 * (depth - i)
        child = np.unique(codes >> shift)  # prefixes of level i+1 nodes
        parent = child >> 3
        digit = child & 7
        starts = np.flatnonzero(np.r_[True, parent[1:] != parent[:-1]])
        occ = np.bitwise_or.reduceat(np.left_shift(1, 7 - digit), starts)
        layers.append(occ.astype(np.int64))
    return Octree(depth, layers)


def occupancy_sequence(t: Octree):
    return [occ.tolist() for occ in t.occupancy]


def aux_info(t: Octree, i: int):
    """(level, octant) of each layer-``i`` node; reads only layer ``i-1`` codes."""
    if not 1 <= i <= t.depth:
        raise ValueError(f"layer index {i} outside 1..{t.depth}")
    if i == 1:
        return [(1, 0)]
    _, octant = expand_children(t.occupancy[i - 2])
    return [(i, int(o)) for o in octant]


def reconstruct_voxels(t: Octree) -> VoxelSet:
    if not t.complete:
        raise CorruptionError(f"octree has {len(t.occupancy)} of {t.depth} layers")
    prefix = np.zeros(1, dtype=np.int64)
    for i, occ in enumerate(t.occupancy, start=1):
        if len(occ) != len(prefix):
            raise CorruptionError(f"layer {i}: {len(occ)} codes for {len(prefix)} nodes")
        p, o = expand_children(occ)
        prefix = prefix[p] * 8 + o
    return VoxelSet(t.depth, morton_decode(prefix, t.depth))


def dump(t: Octree) -> str:
    """One line per node: ``level octant occupancy parent_index``."""
    lines = []
    for i, occ in enumerate(t.occupancy, start=1):
        for o, oc, p in zip(t.octants(i), occ, t.parents(i)):
            lines.append(f"{i} {o} {oc} {p}")
    return "\n".join(lines) + "\n"
