"""Dual-branch masked-attention context model.

The level branch sees only ancestors (slot-0 occupancy zeroed) and attends
freely inside a segment. The group branch reads sibling occupancy through the
multi-group mask. It runs two streams with shared weights: a content stream
that carries each row's own occupancy and a query stream that never does.
Query row ``q`` attends to the content of the rows the mask allows plus its
own query state. That makes the output of a group-``k`` row a function of
groups ``< k`` only, whatever the input holds for later groups. One
teacher-forced pass at encode time then matches the per-group passes of the
decoder bit for bit.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import astuple, dataclass

import numpy as np

from . import autograd as ag
from .context import ContextBlock
from .errors import ConfigMismatchError, ModelCorruptionError

NUM_SYMBOLS = 255
MODEL_MAGIC = b"OCTM"
MODEL_VERSION = 1
_HEADER = struct.Struct("<4sHIIIIIIQQ32s")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    layers_per_branch: int = 2
    ffn_mult: int = 4
    context_depth: int = 4
    max_depth: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if self.layers_per_branch < 1 or self.context_depth < 1 or self.max_depth < 1:
            raise ValueError("layers_per_branch, context_depth and max_depth must be >= 1")


def param_shapes(cfg: ModelConfig):
    d, f = cfg.d_model, cfg.d_model * cfg.ffn_mult
    shapes = [
        ("emb.occ", (256, d)),
        ("emb.level", (cfg.max_depth + 1, d)),
        ("emb.octant", (9, d)),
        ("emb.proj_w", (cfg.context_depth * d, d)),
        ("emb.proj_b", (d,)),
    ]
    for branch in ("level", "group"):
        for layer in range(cfg.layers_per_branch):
            p = f"{branch}.{layer}."
            shapes += [
                (p + "wq", (d, d)), (p + "wk", (d, d)), (p + "wv", (d, d)),
                (p + "wo", (d, d)), (p + "bo", (d,)),
                (p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
                (p + "w1", (d, f)), (p + "b1", (f,)),
                (p + "w2", (f, d)), (p + "b2", (d,)),
                (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
            ]
    shapes += [("head.w", (2 * d, NUM_SYMBOLS)), ("head.b", (NUM_SYMBOLS,))]
    return shapes


def param_class(name: str) -> str:
    """Coarse grouping used by gradient checks and reports."""
    if name.startswith("emb."):
        return "embedding"
    if name.startswith("head."):
        return "fusion"
    leaf = name.rsplit(".", 1)[1]
    if leaf in ("wq", "wk", "wv", "wo", "bo"):
        return "attention"
    if leaf.startswith("ln"):
        return "norm"
    return "ffn"


class ContextModel:
    def __init__(self, cfg: ModelConfig, params: dict):
        self.cfg = cfg
        self.params = params
        self._checksum = None
        self._pad_row = None

    def touch(self):
        """Invalidate cached values after an in-place parameter update."""
        self._checksum = None
        self._pad_row = None

    def flat(self) -> bytes:
        return b"".join(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes()
                        for n, _ in param_shapes(self.cfg))

    @property
    def checksum(self) -> bytes:
        if self._checksum is None:
            h = hashlib.sha256()
            h.update(struct.pack("<7Q", *astuple(self.cfg)))
            h.update(self.flat())
            self._checksum = h.digest()
        return self._checksum

    def tensors(self, requires_grad=False):
        return {k: ag.Tensor(v, requires_grad) for k, v in self.params.items()}

    # -- inference entry points used by the codec; all trim to valid rows

    def level_hidden(self, block_level: ContextBlock) -> np.ndarray:
        L = block_level.valid_len
        feats = _check_features(block_level.features[None, :L], self.cfg)
        allow = np.ones((1, L, L), dtype=bool)
        P = self.tensors()
        h = embed_features(P, feats)
        return level_forward(P, h, allow, self.cfg).data[0]

    def group_hidden(self, block_level: ContextBlock, block_group: ContextBlock, mask) -> np.ndarray:
        L = block_level.valid_len
        fl = _check_features(block_level.features[None, :L], self.cfg)
        fg = _check_features(block_group.features[None, :L], self.cfg)
        allow = np.asarray(mask, dtype=bool)[None, :L, :L]
        P = self.tensors()
        return group_forward(P, embed_features(P, fl), embed_features(P, fg), allow, self.cfg).data[0]

    def distributions(self, level_h: np.ndarray, group_h: np.ndarray) -> np.ndarray:
        P = self.tensors()
        logits = fuse(P, ag.Tensor(level_h[None]), ag.Tensor(group_h[None])).data[0]
        if not np.all(np.isfinite(logits)):
            raise ModelCorruptionError("non-finite logits")
        return softmax_np(logits)

    def padding_distribution(self) -> np.ndarray:
        """Output for an isolated all-zero row, the value every padding row gets."""
        if self._pad_row is None:
            m = self.cfg.context_depth
            blk = ContextBlock(np.zeros((1, m, 3), dtype=np.int64), 1, np.zeros(1, dtype=np.int64))
            self._pad_row = self.distributions(self.level_hidden(blk),
                                               self.group_hidden(blk, blk, np.ones((1, 1), bool)))[0]
        return self._pad_row


def softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_features(feats, cfg):
    occ, lvl, octant = feats[..., 0], feats[..., 1], feats[..., 2]
    if feats.shape[-2] != cfg.context_depth:
        raise ValueError(f"block has {feats.shape[-2]} context slots, model expects {cfg.context_depth}")
    if feats.size and (occ.min() < 0 or occ.max() > 255 or lvl.min() < 0 or lvl.max() > cfg.max_depth
                       or octant.min() < 0 or octant.max() > 7):
        raise ValueError("feature symbol out of range")
    return feats


def init_model(cfg: ModelConfig) -> ContextModel:
    """Scaled-uniform initialization drawn in fixed parameter order from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[1]
        if leaf.endswith("_g"):
            params[name] = np.ones(shape)
        elif leaf.endswith("_b") or leaf in ("bo", "b1", "b2", "proj_b") or name == "head.b":
            params[name] = np.zeros(shape)
        elif name in ("emb.occ", "emb.level", "emb.octant"):
            params[name] = rng.uniform(-0.5, 0.5, shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            if name == "head.w":
                bound *= 0.1  # near-uniform predictions at start
            params[name] = rng.uniform(-bound, bound, shape)
    return ContextModel(cfg, params)


# ------------------------------------------------------------------ forward


def embed_features(P, feats: np.ndarray):
    """``(B, L, m, 3)`` integer features to ``(B, L, d)`` hidden states.

    Each slot contributes occupancy + level + octant embeddings. The slots are
    concatenated and projected, so the model can tell the parent's code from
    the grandparent's.
    """
    occ = feats[..., 0]
    lvl = feats[..., 1]
    octant = np.where(lvl > 0, feats[..., 2] + 1, 0)
    e = ag.add(ag.add(ag.embedding(P["emb.occ"], occ), ag.embedding(P["emb.level"], lvl)),
               ag.embedding(P["emb.octant"], octant))
    B, L, m, d = e.shape
    return ag.add(ag.matmul(ag.reshape(e, (B, L, m * d)), P["emb.proj_w"]), P["emb.proj_b"])


def _split_heads(x, heads):
    B, L, d = x.shape
    return ag.transpose(ag.reshape(x, (B, L, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    B, H, L, dh = x.shape
    return ag.reshape(ag.transpose(x, (0, 2, 1, 3)), (B, L, H * dh))


def _attention(P, p, hq, hkv, allow, heads, two_stream):
    dh = hq.shape[-1] // heads
    inv = 1.0 / math.sqrt(dh)
    allow4 = allow[:, None, :, :]
    q = _split_heads(ag.matmul(hq, P[p + "wq"]), heads)
    k = _split_heads(ag.matmul(hkv, P[p + "wk"]), heads)
    v = _split_heads(ag.matmul(hkv, P[p + "wv"]), heads)
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), inv)
    if two_stream:
        L = hq.shape[1]
        eye = np.eye(L, dtype=bool)
        k_self = _split_heads(ag.matmul(hq, P[p + "wk"]), heads)
        v_self = _split_heads(ag.matmul(hq, P[p + "wv"]), heads)
        s_self = ag.scale(ag.sum_last(ag.mul(q, k_self)), inv)
        probs = ag.masked_softmax(ag.where(eye, s_self, scores), allow4)
        out = ag.add(ag.matmul(ag.where(eye, 0.0, probs), v),
                     ag.mul(ag.sum_last(ag.where(eye, probs, 0.0)), v_self))
    else:
        out = ag.matmul(ag.masked_softmax(scores, allow4), v)
    return ag.add(ag.matmul(_merge_heads(out), P[p + "wo"]), P[p + "bo"])


def _block(P, p, hq, hkv, allow, heads, two_stream=False):
    a = _attention(P, p, hq, hkv, allow, heads, two_stream)
    h = ag.layer_norm(ag.add(hq, a), P[p + "ln1_g"], P[p + "ln1_b"])
    f = ag.gelu(ag.add(ag.matmul(h, P[p + "w1"]), P[p + "b1"]))
    f = ag.add(ag.matmul(f, P[p + "w2"]), P[p + "b2"])
    return ag.layer_norm(ag.add(h, f), P[p + "ln2_g"], P[p + "ln2_b"])


def level_forward(P, h, allow, cfg):
    for layer in range(cfg.layers_per_branch):
        h = _block(P, f"level.{layer}.", h, h, allow, cfg.heads)
    return h


def group_forward(P, h_query, h_content, allow, cfg):
    last = cfg.layers_per_branch - 1
    for layer in range(cfg.layers_per_branch):
        p = f"group.{layer}."
        new_query = _block(P, p, h_query, h_content, allow, cfg.heads, two_stream=True)
        if layer < last:
            h_content = _block(P, p, h_content, h_content, allow, cfg.heads)
        h_query = new_query
    return h_query


def fuse(P, level_h, group_h):
    return ag.add(ag.matmul(ag.concat([level_h, group_h], axis=-1), P["head.w"]), P["head.b"])


def forward_logits(P, feats_level, feats_group, allow_level, allow_group, cfg):
    """Batched logits ``(B, L, 255)``; index ``s - 1`` is symbol ``s``."""
    h_level = embed_features(P, feats_level)
    hl = level_forward(P, h_level, allow_level, cfg)
    hg = group_forward(P, h_level, embed_features(P, feats_group), allow_group, cfg)
    return fuse(P, hl, hg)


# ------------------------------------------------------- module-level API


def embed(block: ContextBlock, model: ContextModel) -> np.ndarray:
    feats = _check_features(block.features[None], model.cfg)
    return embed_features(model.tensors(), feats).data[0]


def branch_forward(h: np.ndarray, mask, model: ContextModel, branch: str, content=None) -> np.ndarray:
    """Run one branch on hidden states ``h`` (rows x d).

    ``branch="level"`` takes no mask (padding is the caller's business);
    ``branch="group"`` requires the group mask, and ``content`` carries the
    occupancy-bearing stream (defaults to ``h``).
    """
    if (mask is None) != (branch == "level"):
        raise ValueError("a mask is required for, and only for, the group branch")
    P = model.tensors()
    L = h.shape[0]
    if branch == "level":
        return level_forward(P, ag.Tensor(h[None]), np.ones((1, L, L), bool), model.cfg).data[0]
    content = h if content is None else content
    return group_forward(P, ag.Tensor(h[None]), ag.Tensor(content[None]),
                         np.asarray(mask, bool)[None], model.cfg).data[0]


def predict(block_level: ContextBlock, block_group: ContextBlock, mask, model: ContextModel) -> np.ndarray:
    """``(n, 255)`` distributions; column ``s - 1`` is the probability of symbol ``s``."""
    L = block_level.valid_len
    hl = model.level_hidden(block_level)
    hg = model.group_hidden(block_level, block_group, mask)
    out = np.empty((block_level.n, NUM_SYMBOLS))
    out[:L] = model.distributions(hl, hg)
    if L < block_level.n:
        out[L:] = model.padding_distribution()
    return out


def loss(distributions, symbols, weights, base=math.e) -> float:
    """Weighted mean negative log-probability of the true symbols."""
    symbols = np.asarray(symbols, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    if np.any((w > 0) & ((symbols < 1) | (symbols > NUM_SYMBOLS))):
        raise ValueError("weighted row carries a symbol outside 1..255")
    idx = np.clip(symbols, 1, NUM_SYMBOLS) - 1
    p = np.take_along_axis(np.asarray(distributions), idx[..., None], axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        nll = np.where(w > 0, -np.log(np.where(w > 0, p, 1.0)), 0.0)
    return float((nll * w).sum() / w.sum() / math.log(base))


# ---------------------------------------------------------------- file I/O


def save_model(model: ContextModel, path):
    body = model.flat()
    header = _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, *astuple(model.cfg), len(body) // 8, model.checksum)
    with open(path, "wb") as f:
        f.write(header)
        f.write(body)


def load_model(path, expected: ModelConfig | None = None) -> ContextModel:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ModelCorruptionError(f"{path}: truncated header")
    magic, version, *fields = _HEADER.unpack_from(raw)
    if magic != MODEL_MAGIC:
        raise ModelCorruptionError(f"{path}: not a model file")
    if version != MODEL_VERSION:
        raise ModelCorruptionError(f"{path}: model version {version}, expected {MODEL_VERSION}")
    *cfg_fields, count, checksum = fields
    try:
        cfg = ModelConfig(*cfg_fields)
    except ValueError as exc:
        raise ModelCorruptionError(f"{path}: invalid config: {exc}") from None
    if expected is not None and cfg != expected:
        raise ConfigMismatchError(f"{path}: file holds {cfg}, expected {expected}")
    shapes = param_shapes(cfg)
    total = sum(int(np.prod(s)) for _, s in shapes)
    body = raw[_HEADER.size:]
    if count != total or len(body) != 8 * total:
        raise ModelCorruptionError(f"{path}: parameter payload has wrong length")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise ModelCorruptionError(f"{path}: non-finite parameters")
    params, pos = {}, 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        params[name] = flat[pos:pos + size].reshape(shape).copy()
        pos += size
    model = ContextModel(cfg, params)
    if model.checksum != checksum:
        raise ModelCorruptionError(f"{path}: checksum mismatch")
    return model
