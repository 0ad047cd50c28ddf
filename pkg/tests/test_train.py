import numpy as np
import pytest

from helpers import small_batch
from octcodec import autograd as ag
from octcodec.context import SegmentSpec, build_group_mask
from octcodec.errors import TrainingError
from octcodec.model import ModelConfig, forward_logits, init_model
from octcodec.train import (
    AdamState,
    evaluate,
    fit,
    make_batches,
    octree_examples,
    pretrain_loss_and_grads,
    pretrain_step,
    random_mask,
    train_step,
)
from helpers import cloud_tree

CFG = ModelConfig(d_model=16, heads=2, ffn_mult=2, context_depth=3, seed=2)
SPEC = SegmentSpec(16, 4, 3)


def test_group_allow_matches_group_mask():
    b = small_batch(SPEC)
    allow = b.group_allow()
    for i in range(len(b.valid)):
        assert np.array_equal(allow[i], build_group_mask(b.group_of[i], int(b.valid[i].sum())))


def test_loss_decreases_over_50_steps():
    batch = small_batch(SPEC, depth=4, points=30, clouds=20, seed=100)
    model = init_model(CFG)
    opt = AdamState()
    losses = [train_step(batch, model, opt, 1e-3) for _ in range(50)]
    avg = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(avg) < 0)
    assert opt.step == 50


def test_zero_lr_leaves_parameters():
    model = init_model(CFG)
    before = model.checksum
    train_step(small_batch(SPEC), model, AdamState(), lr=0.0)
    assert model.checksum == before


def test_fit_is_reproducible():
    batches = make_batches(sum((octree_examples(cloud_tree("plane", 40, s, 4), SPEC) for s in range(4)), []), 128)
    runs = []
    for _ in range(2):
        model = init_model(CFG)
        _, hist = fit(model, batches, 2, seed=5)
        runs.append((hist, model.checksum))
    assert runs[0] == runs[1]


def test_make_batches_bound_rows():
    ex = sum((octree_examples(cloud_tree("sphere-surface", 60, s, 5), SPEC) for s in range(3)), [])
    batches = make_batches(ex, 64)
    assert sum(int(b.valid.sum()) for b in batches) == sum(len(e.features) for e in ex)
    for b in batches:
        assert b.valid.shape[0] == 1 or b.valid.size <= 64


def test_pretrain_full_masking_is_level_visibility():
    batch = small_batch(SPEC)
    model = init_model(CFG)
    hidden = batch.valid.copy()
    value, _ = pretrain_loss_and_grads(batch, model, hidden)
    P = model.tensors()
    allow = batch.level_allow()
    lf = batch.level_features()
    logits = forward_logits(P, lf, lf, allow, allow, model.cfg)
    ref = ag.cross_entropy(logits, np.clip(batch.targets, 1, 255) - 1, batch.valid.astype(float))
    assert value == float(ref.data)


def test_pretrain_loss_only_on_hidden_rows():
    batch = small_batch(SPEC)
    model = init_model(CFG)
    hidden = random_mask(batch, 0.5, np.random.default_rng(0))
    assert hidden.any() and not hidden[~batch.valid].any()
    v1, _ = pretrain_loss_and_grads(batch, model, hidden)
    # changing a visible row's true target changes its input, not the weighted rows' targets
    P = model.tensors()
    feats = batch.features.copy()
    feats[:, :, 0, 0] = np.where(hidden, 0, feats[:, :, 0, 0])
    allow = batch.level_allow()
    logits = forward_logits(P, batch.level_features(), feats, allow, allow, model.cfg)
    ref = ag.cross_entropy(logits, np.clip(batch.targets, 1, 255) - 1, hidden.astype(float))
    assert v1 == float(ref.data)


def test_pretrain_without_masked_rows_fails():
    batch = small_batch(SPEC)
    with pytest.raises(TrainingError):
        pretrain_step(batch, init_model(CFG), AdamState(), mask_prob=0.0, rng=np.random.default_rng(0))


def test_nan_loss_aborts():
    model = init_model(CFG)
    model.params["head.b"][:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train_step(small_batch(SPEC), model, AdamState())


def test_evaluate_matches_mean_loss():
    batches = make_batches(octree_examples(cloud_tree("gaussian-blobs", 50, 1, 4), SPEC), 10_000)
    assert len(batches) == 1
    model = init_model(CFG)
    v = evaluate(model, batches)
    from octcodec.train import batch_loss_and_grads
    assert np.isclose(v, batch_loss_and_grads(batches[0], model)[0])
