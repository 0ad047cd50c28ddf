"""Context segments, decode groups and the feature blocks fed to the model.

A block is ``n x m x 3``: for every node row, slot 0 describes the node itself
and slots ``1..m-1`` its ancestors nearest-first; each slot holds
``(occupancy, level, octant)``. Missing ancestors and padding rows are zero.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .octree import Octree

OCC, LEVEL, OCTANT = 0, 1, 2


@dataclass(frozen=True)
class SegmentSpec:
    n: int = 2048
    g: int = 8
    m: int = 4

    def __post_init__(self):
        if self.n < 1 or self.m < 1 or not 1 <= self.g <= self.n:
            raise ValueError(f"invalid segment spec n={self.n} g={self.g} m={self.m}")


@dataclass(frozen=True)
class ContextBlock:
    features: np.ndarray  # (n, m, 3) int64
    valid_len: int
    group_of: np.ndarray  # (n,) int64, 0 on padding rows

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def groups(self):
        return int(self.group_of[: self.valid_len].max()) if self.valid_len else 0


def slice_segments(layer_len: int, n: int):
    return [(s, min(n, layer_len - s)) for s in range(0, layer_len, n)]


def assign_groups(length: int, g: int) -> np.ndarray:
    """Contiguous near-equal blocks; with fewer rows than groups, one row per group."""
    eff = max(length, g)
    j = np.arange(length, dtype=np.int64)
    return np.minimum(j * g // eff + 1, g)


def layer_features(t: Octree, i: int, m: int, known: bool = True) -> np.ndarray:
    """``(N_i, m, 3)`` features for a whole layer.

    Slot 0 occupancy is the true code when ``known`` (needs layer ``i``
    decoded), otherwise 0. Ancestors always carry their true codes.
    """
    size = t.layer_size(i)
    feats = np.zeros((size, m, 3), dtype=np.int64)
    if known:
        feats[:, 0, OCC] = t.occupancy[i - 1]
    feats[:, 0, LEVEL] = i
    feats[:, 0, OCTANT] = t.octants(i)
    idx = np.arange(size)
    for slot in range(1, m):
        layer = i - slot
        if layer < 1:
            break
        idx = t.parents(layer + 1)[idx]
        feats[:, slot, OCC] = t.occupancy[layer - 1][idx]
        feats[:, slot, LEVEL] = layer
        feats[:, slot, OCTANT] = t.octants(layer)[idx]
    return feats


def make_block(rows: np.ndarray, n: int, g: int) -> ContextBlock:
    length = len(rows)
    feats = np.zeros((n,) + rows.shape[1:], dtype=np.int64)
    feats[:length] = rows
    group_of = np.zeros(n, dtype=np.int64)
    group_of[:length] = assign_groups(length, g)
    return ContextBlock(feats, length, group_of)


def build_context_block(t: Octree, i: int, seg, spec: SegmentSpec, known_occupancy=None) -> ContextBlock:
    start, length = seg
    rows = layer_features(t, i, spec.m, known=False)[start:start + length]
    block = make_block(rows, spec.n, spec.g)
    if known_occupancy is not None:
        known = np.asarray(known_occupancy, dtype=np.int64)
        block.features[: len(known), 0, OCC] = known
    return block


def level_branch_input(block: ContextBlock) -> ContextBlock:
    feats = block.features.copy()
    feats[:, 0, OCC] = 0
    return replace(block, features=feats)


def group_branch_input(block: ContextBlock, k: int) -> ContextBlock:
    feats = block.features.copy()
    feats[block.group_of >= k, 0, OCC] = 0
    feats[block.valid_len:, 0, OCC] = 0
    return replace(block, features=feats)


def build_group_mask(group_of: np.ndarray, valid_len: int) -> np.ndarray:
    """Boolean allow-matrix: query row q may read key k iff k's group precedes
    q's, or k == q. Padding rows only see themselves and are never seen."""
    group_of = np.asarray(group_of)
    n = len(group_of)
    allow = np.eye(n, dtype=bool)
    gv = group_of[:valid_len]
    allow[:valid_len, :valid_len] |= gv[None, :] < gv[:, None]
    return allow


def build_level_mask(n: int, valid_len: int) -> np.ndarray:
    """Unrestricted attention among valid rows; padding isolated."""
    allow = np.eye(n, dtype=bool)
    allow[:valid_len, :valid_len] = True
    return allow


def additive_mask(allow: np.ndarray) -> np.ndarray:
    return np.where(allow, 0.0, -np.inf)
