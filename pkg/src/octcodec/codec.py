"""Encode/decode orchestration and the ``.ecmo`` bitstream.

Symbols are coded layer by layer, then segment, then group, then node. Groups
are contiguous runs of a segment, so within a segment this is plain node order.
"""

from __future__ import annotations

import enum
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .coder import BitSink, Decoder, Encoder, ProbabilityTable, quantize_distribution
from .context import (
    SegmentSpec,
    build_group_mask,
    group_branch_input,
    layer_features,
    level_branch_input,
    make_block,
    slice_segments,
)
from .errors import BitstreamError, CorruptionError, GuardError
from .octree import POPCOUNT, Octree, build_octree, reconstruct_voxels
from .pointcloud import (
    CubicBBox,
    PointCloud,
    VoxelSet,
    chamfer,
    compute_bbox,
    d1_psnr,
    dequantize,
    quantize,
)

MAGIC = b"ECMO"
FORMAT_VERSION = 1
FA_MAX_LAYER = 4096
_HEADER = struct.Struct("<4sHB3ddQIIBB32s")
HEADER_SIZE = _HEADER.size


class CodecMode(enum.IntEnum):
    MULTI_GROUP = 0
    LAYER_WISE = 1
    FULLY_AUTOREGRESSIVE = 2


def effective_spec(spec: SegmentSpec, mode: CodecMode) -> SegmentSpec:
    """The (n, g, m) actually used for a mode.

    Layer-wise is multi-group with one group. Fully autoregressive codes a whole
    layer as one segment of singleton groups.
    """
    mode = CodecMode(mode)
    if mode is CodecMode.LAYER_WISE:
        return SegmentSpec(spec.n, 1, spec.m)
    if mode is CodecMode.FULLY_AUTOREGRESSIVE:
        return SegmentSpec(FA_MAX_LAYER, FA_MAX_LAYER, spec.m)
    return spec


@dataclass(frozen=True)
class Header:
    depth: int
    bbox: CubicBBox
    point_count: int
    spec: SegmentSpec
    mode: CodecMode
    model_checksum: bytes
    version: int = FORMAT_VERSION

    def pack(self) -> bytes:
        return _HEADER.pack(MAGIC, self.version, self.depth, *self.bbox.origin, self.bbox.edge,
                            self.point_count, self.spec.n, self.spec.g, self.spec.m, int(self.mode),
                            self.model_checksum)

    @classmethod
    def unpack(cls, data: bytes) -> "Header":
        if len(data) < _HEADER.size:
            raise BitstreamError("stream shorter than its header")
        magic, version, depth, ox, oy, oz, edge, count, n, g, m, mode, checksum = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise BitstreamError("not an ECMO stream")
        if version != FORMAT_VERSION:
            raise BitstreamError(f"format version {version}, this decoder reads {FORMAT_VERSION}")
        try:
            return cls(depth, CubicBBox((ox, oy, oz), edge), count, SegmentSpec(n, g, m),
                       CodecMode(mode), checksum, version)
        except ValueError as exc:
            raise BitstreamError(f"invalid header field: {exc}") from None


@dataclass
class Bitstream:
    header: Header
    payload: bytes

    def to_bytes(self) -> bytes:
        return self.header.pack() + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        return cls(Header.unpack(data), bytes(data[_HEADER.size:]))

    @property
    def payload_bits(self) -> int:
        return 8 * len(self.payload)


@dataclass
class DecodeStats:
    level_branch_invocations: int = 0
    group_branch_invocations: int = 0  # serial group steps: per layer, the max over segments
    group_branch_calls: int = 0  # every group-branch evaluation, all segments
    layer_sizes: list = field(default_factory=list)
    layer_group_steps: list = field(default_factory=list)
    wall_time: float = 0.0


@dataclass
class EncodeResult:
    bitstream: Bitstream
    voxels: VoxelSet
    tree: Octree
    tables: list | None
    enc_time: float

    @property
    def bpp(self) -> float:
        return self.bitstream.payload_bits / self.bitstream.header.point_count


@dataclass
class DecodeResult:
    cloud: PointCloud
    voxels: VoxelSet
    tree: Octree
    stats: DecodeStats
    tables: list | None


# ----------------------------------------------------------------- layer work


def _segment_blocks(feats, spec):
    for start, length in slice_segments(len(feats), spec.n):
        yield start, make_block(feats[start:start + length], spec.n, spec.g)


def segment_distributions(model, block):
    """Teacher-forced distributions for one segment whose occupancy is known."""
    bl = level_branch_input(block)
    mask = build_group_mask(block.group_of, block.valid_len)
    return model.distributions(model.level_hidden(bl), model.group_hidden(bl, block, mask))


def layer_distributions(model, tree: Octree, i: int, spec: SegmentSpec):
    """``(N_i, 255)`` encoder-side distributions for layer ``i``."""
    feats = layer_features(tree, i, spec.m)
    return np.concatenate([segment_distributions(model, blk) for _, blk in _segment_blocks(feats, spec)])


def _check_model(model, depth, spec):
    if depth > model.cfg.max_depth:
        raise GuardError(f"depth {depth} exceeds the model's maximum {model.cfg.max_depth}")
    if spec.m != model.cfg.context_depth:
        raise GuardError(f"context depth m={spec.m} differs from the model's {model.cfg.context_depth}")


def encode_octree(tree: Octree, spec: SegmentSpec, mode: CodecMode, model, debug=False):
    """Arithmetic-code every occupancy symbol; returns ``(payload, tables)``."""
    eff = effective_spec(spec, mode)
    _check_model(model, tree.depth, eff)
    if CodecMode(mode) is CodecMode.FULLY_AUTOREGRESSIVE:
        worst = max(len(o) for o in tree.occupancy)
        if worst > FA_MAX_LAYER:
            raise GuardError(f"fully autoregressive mode needs layers <= {FA_MAX_LAYER} nodes, got {worst}")
    enc = Encoder(BitSink())
    tables = [] if debug else None
    for i in range(1, tree.depth + 1):
        probs = layer_distributions(model, tree, i, eff)
        for sym, p in zip(tree.occupancy[i - 1], probs):
            t = quantize_distribution(p)
            enc.encode(int(sym), t)
            if debug:
                tables.append(t)
    return enc.finish(), tables


def decode_octree(payload: bytes, depth: int, spec: SegmentSpec, mode: CodecMode, model,
                  max_nodes: int | None = None, debug=False):
    """Inverse of :func:`encode_octree`. ``max_nodes`` bounds every layer size
    (the voxel count can never exceed the point count)."""
    eff = effective_spec(spec, mode)
    _check_model(model, depth, eff)
    limit = max_nodes if max_nodes is not None else math.inf
    if CodecMode(mode) is CodecMode.FULLY_AUTOREGRESSIVE:
        limit = min(limit, FA_MAX_LAYER)
    dec = Decoder(payload)
    tree = Octree(depth, [])
    stats = DecodeStats()
    tables = [] if debug else None
    t0 = time.perf_counter()
    for i in range(1, depth + 1):
        size = tree.layer_size(i)
        if size > limit:
            raise CorruptionError(f"layer {i} claims {size} nodes, more than the stream allows ({limit})")
        stats.layer_sizes.append(size)
        feats = layer_features(tree, i, eff.m, known=False)
        decoded = np.zeros(size, dtype=np.int64)
        steps = 0
        for start, block in _segment_blocks(feats, eff):
            bl = level_branch_input(block)
            mask = build_group_mask(block.group_of, block.valid_len)
            hl = model.level_hidden(bl)
            stats.level_branch_invocations += 1
            ngroups = block.groups
            steps = max(steps, ngroups)
            valid_groups = block.group_of[: block.valid_len]
            for k in range(1, ngroups + 1):
                rows = np.flatnonzero(valid_groups == k)
                if not len(rows):
                    continue
                bg = group_branch_input(block, k)
                probs = model.distributions(hl, model.group_hidden(bl, bg, mask))
                stats.group_branch_calls += 1
                for r in rows:
                    t = quantize_distribution(probs[r])
                    sym = dec.decode(t)
                    block.features[r, 0, 0] = sym
                    decoded[start + r] = sym
                    if debug:
                        tables.append(t)
        stats.group_branch_invocations += steps
        stats.layer_group_steps.append(steps)
        tree = tree.with_layer(decoded)
    final = int(POPCOUNT[tree.occupancy[-1]].sum())
    if final > limit:
        raise CorruptionError(f"stream describes {final} voxels, more than the stream allows ({limit})")
    stats.wall_time = time.perf_counter() - t0
    return tree, stats, tables


# ----------------------------------------------------------- cloud-level API


def encode(pc: PointCloud, depth: int, spec: SegmentSpec, mode: CodecMode, model, debug=False,
           bbox: CubicBBox | None = None) -> EncodeResult:
    t0 = time.perf_counter()
    bbox = bbox if bbox is not None else compute_bbox(pc)
    vs = quantize(pc, bbox, depth)
    tree = build_octree(vs)
    payload, tables = encode_octree(tree, spec, mode, model, debug)
    header = Header(depth, bbox, len(pc), spec, CodecMode(mode), model.checksum)
    return EncodeResult(Bitstream(header, payload), vs, tree, tables, time.perf_counter() - t0)


def decode(bs: Bitstream | bytes, model, debug=False) -> DecodeResult:
    if not isinstance(bs, Bitstream):
        bs = Bitstream.from_bytes(bs)
    h = bs.header
    if h.model_checksum != model.checksum:
        raise BitstreamError("stream was coded with a different model (checksum mismatch)")
    tree, stats, tables = decode_octree(bs.payload, h.depth, h.spec, h.mode, model,
                                        max_nodes=h.point_count, debug=debug)
    vs = reconstruct_voxels(tree)
    return DecodeResult(dequantize(vs, h.bbox), vs, tree, stats, tables)


def encode_fully_autoregressive(pc: PointCloud, depth: int, model, m: int | None = None, debug=False):
    m = m if m is not None else model.cfg.context_depth
    return encode(pc, depth, SegmentSpec(FA_MAX_LAYER, FA_MAX_LAYER, m), CodecMode.FULLY_AUTOREGRESSIVE,
                  model, debug)


# ------------------------------------------------------------- baselines


def symbol_counts(trees) -> np.ndarray:
    counts = np.zeros(255, dtype=np.int64)
    for t in trees:
        for occ in t.occupancy:
            counts += np.bincount(occ - 1, minlength=255)
    return counts


def static_table(counts) -> ProbabilityTable:
    counts = np.asarray(counts, dtype=np.float64)
    return quantize_distribution(counts / counts.sum())


def static_payload(tree: Octree, table: ProbabilityTable) -> bytes:
    enc = Encoder(BitSink())
    for occ in tree.occupancy:
        for s in occ:
            enc.encode(int(s), table)
    return enc.finish()


# ---------------------------------------------------------------- report

REPORT_FIELDS = ["file", "depth", "n", "g", "m", "mode", "bpp", "d1_psnr", "chamfer", "lossless",
                 "enc_time", "dec_time", "level_invocations", "group_invocations"]


def eval_report(pc: PointCloud, enc: EncodeResult, dec: DecodeResult, file="", peak: float | None = None) -> dict:
    """One CSV row. PSNR peak defaults to the bounding-box edge."""
    h = enc.bitstream.header
    peak = h.bbox.edge if peak is None else peak
    return {
        "file": str(file),
        "depth": h.depth,
        "n": h.spec.n,
        "g": h.spec.g,
        "m": h.spec.m,
        "mode": h.mode.name.lower().replace("_", "-"),
        "bpp": enc.bitstream.payload_bits / len(pc),
        "d1_psnr": d1_psnr(pc, dec.cloud, peak),
        "chamfer": chamfer(pc, dec.cloud),
        "lossless": dec.voxels == enc.voxels,
        "enc_time": enc.enc_time,
        "dec_time": dec.stats.wall_time,
        "level_invocations": dec.stats.level_branch_invocations,
        "group_invocations": dec.stats.group_branch_invocations,
    }
