"""Shared oracles and fixtures for the test suite."""

from __future__ import annotations

import numpy as np

from octcodec.context import SegmentSpec
from octcodec.model import param_class
from octcodec.octree import build_octree
from octcodec.pointcloud import compute_bbox, quantize
from octcodec.synth import KINDS, make_cloud
from octcodec.train import batch_loss_and_grads, make_batch, octree_examples

PARAM_CLASSES = ("embedding", "attention", "ffn", "norm", "fusion")


def cloud_tree(kind, points, seed, depth):
    pc = make_cloud(kind, points, seed)
    return build_octree(quantize(pc, compute_bbox(pc), depth))


def small_batch(spec: SegmentSpec, depth=4, points=40, clouds=2, seed=0):
    ex = []
    for i in range(clouds):
        ex += octree_examples(cloud_tree(KINDS[i % 4], points, seed + i, depth), spec)
    return make_batch(ex)


def used_entries(model, name, batch):
    """Flat indices of parameter ``name`` that can influence the loss."""
    shape = model.params[name].shape
    if name in ("emb.occ", "emb.level", "emb.octant"):
        f = batch.features
        if name == "emb.occ":
            rows = np.unique(np.concatenate([f[..., 0].ravel(), [0]]))
        elif name == "emb.level":
            rows = np.unique(f[..., 1])
        else:
            rows = np.unique(np.where(f[..., 1] > 0, f[..., 2] + 1, 0))
        return np.concatenate([np.arange(r * shape[1], (r + 1) * shape[1]) for r in rows])
    return np.arange(int(np.prod(shape)))


GRAD_FLOOR = 1e-7


def gradient_check(model, batch, per_class=25, h=1e-4, seed=0, floor=GRAD_FLOOR):
    """Compare reverse-mode gradients with central differences.

    Entries are drawn at random per parameter class. An entry whose analytic
    gradient is below ``floor`` is redrawn: with a loss near 5 nats, rounding
    alone moves a central difference at ``h = 1e-4`` by about 1e-11, so
    smaller gradients cannot be resolved to a 1e-4 relative error.

    Returns ``{class: [(name, flat_index, analytic, numeric, rel_err), ...]}``.
    """
    rng = np.random.default_rng(seed)
    _, grads = batch_loss_and_grads(batch, model)
    by_class = {c: [n for n in model.params if param_class(n) == c] for c in PARAM_CLASSES}
    out = {}
    for cls, names in by_class.items():
        rows = []
        for _ in range(per_class):
            while True:
                name = names[rng.integers(len(names))]
                flat = int(rng.choice(used_entries(model, name, batch)))
                if abs(grads[name].reshape(-1)[flat]) >= floor:
                    break
            p = model.params[name].reshape(-1)
            old = p[flat]
            p[flat] = old + h
            model.touch()
            up, _ = batch_loss_and_grads(batch, model)
            p[flat] = old - h
            model.touch()
            down, _ = batch_loss_and_grads(batch, model)
            p[flat] = old
            model.touch()
            num = (up - down) / (2 * h)
            ana = float(grads[name].reshape(-1)[flat])
            denom = max(abs(ana), abs(num))
            rel = abs(ana - num) / denom if denom > 0 else 0.0
            rows.append((name, flat, ana, num, rel))
        out[cls] = rows
    return out
