"""Teacher-forced training, random-masking pretraining and Adam."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .context import SegmentSpec, assign_groups, layer_features, slice_segments
from .errors import TrainingError
from .model import NUM_SYMBOLS, ContextModel, forward_logits
from .octree import Octree


@dataclass
class Example:
    """One context segment with its true occupancy in slot 0."""

    features: np.ndarray  # (L, m, 3)
    group_of: np.ndarray  # (L,)


@dataclass
class Batch:
    features: np.ndarray  # (B, L, m, 3), full occupancy on valid rows
    valid: np.ndarray  # (B, L) bool
    group_of: np.ndarray  # (B, L)

    @property
    def targets(self):
        return self.features[:, :, 0, 0]

    def level_features(self):
        f = self.features.copy()
        f[:, :, 0, 0] = 0
        return f

    def level_allow(self):
        B, L = self.valid.shape
        allow = self.valid[:, :, None] & self.valid[:, None, :]
        allow |= np.eye(L, dtype=bool)[None]
        return allow

    def group_allow(self):
        B, L = self.valid.shape
        g = self.group_of
        allow = (g[:, None, :] < g[:, :, None]) & self.valid[:, :, None] & self.valid[:, None, :]
        allow |= np.eye(L, dtype=bool)[None]
        return allow


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def octree_examples(tree: Octree, spec: SegmentSpec):
    out = []
    for i in range(1, tree.depth + 1):
        feats = layer_features(tree, i, spec.m)
        for start, length in slice_segments(len(feats), spec.n):
            out.append(Example(feats[start:start + length], assign_groups(length, spec.g)))
    return out


def make_batch(examples) -> Batch:
    L = max(len(e.features) for e in examples)
    m = examples[0].features.shape[1]
    B = len(examples)
    feats = np.zeros((B, L, m, 3), dtype=np.int64)
    valid = np.zeros((B, L), dtype=bool)
    groups = np.zeros((B, L), dtype=np.int64)
    for b, e in enumerate(examples):
        n = len(e.features)
        feats[b, :n] = e.features
        valid[b, :n] = True
        groups[b, :n] = e.group_of
    return Batch(feats, valid, groups)


def make_batches(examples, max_rows=4096):
    """Length-sorted batches bounded by ``batch size x padded length``."""
    order = sorted(range(len(examples)), key=lambda i: len(examples[i].features))
    batches, cur = [], []
    for i in order:
        L = len(examples[i].features)
        if cur and (len(cur) + 1) * L > max_rows:
            batches.append(make_batch([examples[j] for j in cur]))
            cur = []
        cur.append(i)
    if cur:
        batches.append(make_batch([examples[j] for j in cur]))
    return batches


def _loss_and_grads(model, feats_level, feats_group, allow_level, allow_group, targets, weights):
    P = model.tensors(requires_grad=True)
    logits = forward_logits(P, feats_level, feats_group, allow_level, allow_group, model.cfg)
    idx = np.clip(targets, 1, NUM_SYMBOLS) - 1
    out = ag.cross_entropy(logits, idx, weights)
    value = float(out.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value}; max |logit| {np.abs(logits.data).max():.3g}")
    out.backward()
    return value, {k: t.grad for k, t in P.items()}


def adam_update(model: ContextModel, grads, opt: AdamState, lr: float):
    opt.step += 1
    b1c = 1.0 - opt.beta1 ** opt.step
    b2c = 1.0 - opt.beta2 ** opt.step
    for name, g in grads.items():
        if g is None:
            continue
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(g)
            opt.v[name] = np.zeros_like(g)
        v = opt.v[name]
        m *= opt.beta1
        m += (1 - opt.beta1) * g
        v *= opt.beta2
        v += (1 - opt.beta2) * g * g
        if lr:
            model.params[name] -= lr * (m / b1c) / (np.sqrt(v / b2c) + opt.eps)
    model.touch()


def batch_loss_and_grads(batch: Batch, model: ContextModel):
    """Multi-group teacher-forced objective: one pass scores every group."""
    return _loss_and_grads(model, batch.level_features(), batch.features, batch.level_allow(),
                           batch.group_allow(), batch.targets, batch.valid.astype(np.float64))


def train_step(batch: Batch, model: ContextModel, opt: AdamState, lr: float = 1e-3) -> float:
    value, grads = batch_loss_and_grads(batch, model)
    adam_update(model, grads, opt, lr)
    return value


def random_mask(batch: Batch, mask_prob: float, rng: np.random.Generator):
    """Rows whose slot-0 occupancy gets hidden; resampled once if none is."""
    for _ in range(2):
        hidden = (rng.random(batch.valid.shape) < mask_prob) & batch.valid
        if hidden.any():
            return hidden
    raise TrainingError("random masking left no supervised rows")


def pretrain_loss_and_grads(batch: Batch, model: ContextModel, hidden: np.ndarray):
    feats = batch.features.copy()
    feats[:, :, 0, 0] = np.where(hidden, 0, feats[:, :, 0, 0])
    allow = batch.level_allow()  # no multi-group mask
    return _loss_and_grads(model, batch.level_features(), feats, allow, allow, batch.targets,
                           hidden.astype(np.float64))


def pretrain_step(batch: Batch, model: ContextModel, opt: AdamState, lr: float = 1e-3,
                  mask_prob: float = 0.5, rng: np.random.Generator | None = None) -> float:
    rng = rng if rng is not None else np.random.default_rng(opt.step)
    hidden = random_mask(batch, mask_prob, rng)
    value, grads = pretrain_loss_and_grads(batch, model, hidden)
    adam_update(model, grads, opt, lr)
    return value


def evaluate(model: ContextModel, batches) -> float:
    """Mean nats per node under the multi-group objective, without gradients."""
    total, count = 0.0, 0.0
    P = model.tensors()
    for b in batches:
        logits = forward_logits(P, b.level_features(), b.features, b.level_allow(), b.group_allow(), model.cfg)
        idx = np.clip(b.targets, 1, NUM_SYMBOLS) - 1
        w = b.valid.astype(np.float64)
        total += float(ag.cross_entropy(logits, idx, w).data) * w.sum()
        count += w.sum()
    return total / count


def fit(model: ContextModel, batches, epochs: int, lr: float = 1e-3, seed: int = 0,
        opt: AdamState | None = None, pretrain: bool = False, mask_prob: float = 0.5,
        max_steps: int | None = None, on_epoch=None):
    """Run ``epochs`` passes over ``batches`` in a seeded shuffled order.

    Returns the optimizer state and a list of per-epoch mean losses.
    """
    opt = opt if opt is not None else AdamState()
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        losses = []
        for bi in rng.permutation(len(batches)):
            if max_steps is not None and opt.step >= max_steps:
                break
            if pretrain:
                losses.append(pretrain_step(batches[bi], model, opt, lr, mask_prob, rng))
            else:
                losses.append(train_step(batches[bi], model, opt, lr))
        if not losses:
            break
        history.append(float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(epoch, history[-1], opt)
    return opt, history
