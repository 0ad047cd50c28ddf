import itertools
import math

import numpy as np
import pytest

from helpers import PARAM_CLASSES, gradient_check, small_batch
from octcodec import autograd as ag
from octcodec.context import (
    SegmentSpec,
    assign_groups,
    build_group_mask,
    group_branch_input,
    level_branch_input,
    make_block,
)
from octcodec.errors import ConfigMismatchError, ModelCorruptionError
from octcodec.model import (
    NUM_SYMBOLS,
    ModelConfig,
    branch_forward,
    embed,
    forward_logits,
    init_model,
    load_model,
    loss,
    param_class,
    param_shapes,
    predict,
    save_model,
)


def random_block(rng, n=8, g=4, m=3, valid=8, max_level=6):
    rows = np.stack([rng.integers(1, 256, size=(valid, m)), rng.integers(1, max_level + 1, size=(valid, m)),
                     rng.integers(0, 8, size=(valid, m))], axis=-1)
    return make_block(rows, n, g)


def test_init_determinism():
    a, b = init_model(ModelConfig(seed=3)), init_model(ModelConfig(seed=3))
    assert a.checksum == b.checksum
    assert init_model(ModelConfig(seed=4)).checksum != a.checksum
    with pytest.raises(ValueError):
        ModelConfig(d_model=65, heads=4)


def test_every_parameter_has_a_class():
    classes = {param_class(n) for n, _ in param_shapes(ModelConfig())}
    assert classes == set(PARAM_CLASSES)
    shapes = dict(param_shapes(ModelConfig()))
    assert shapes["emb.occ"] == (256, 64) and shapes["emb.octant"] == (9, 64)
    assert shapes["emb.level"] == (17, 64) and shapes["head.w"] == (128, NUM_SYMBOLS)


def test_embed_properties(small_model, rng):
    zero = make_block(np.zeros((0, 3, 3), dtype=np.int64), 5, 2)
    e = embed(zero, small_model)
    assert np.array_equal(e, np.broadcast_to(e[0], e.shape))
    blk = random_block(rng, m=3)
    blk.features[3] = blk.features[1]
    e = embed(blk, small_model)
    assert np.array_equal(e[3], e[1])
    changed = blk.features.copy()
    changed[2, 2, 0] = (changed[2, 2, 0] % 255) + 1
    e2 = embed(make_block(changed[:8], 8, 4), small_model)
    diff = np.flatnonzero(np.any(e2 != e, axis=1))
    assert diff.tolist() == [2]


def test_embed_rejects_out_of_range(small_model, rng):
    blk = random_block(rng)
    blk.features[0, 0, 0] = 256
    with pytest.raises(ValueError):
        embed(blk, small_model)


def test_branch_forward_permutation_equivariance_exhaustive(small_model, rng):
    n, g = 8, 4
    groups = assign_groups(n, g)
    mask = build_group_mask(groups, n)
    h = rng.normal(size=(n, small_model.cfg.d_model))
    c = rng.normal(size=(n, small_model.cfg.d_model))
    base_g = branch_forward(h, mask, small_model, "group", content=c)
    base_l = branch_forward(h, None, small_model, "level")
    blocks = [np.flatnonzero(groups == k) for k in range(1, g + 1)]
    for choice in itertools.product(*[list(itertools.permutations(b)) for b in blocks]):
        perm = np.concatenate(choice)
        out = branch_forward(h[perm], mask[np.ix_(perm, perm)], small_model, "group", content=c[perm])
        assert np.allclose(out, base_g[perm], rtol=0, atol=1e-12)
        assert np.allclose(branch_forward(h[perm], None, small_model, "level"), base_l[perm], atol=1e-12)


def test_branch_forward_mask_contract(small_model, rng):
    h = rng.normal(size=(4, small_model.cfg.d_model))
    with pytest.raises(ValueError):
        branch_forward(h, None, small_model, "group")
    with pytest.raises(ValueError):
        branch_forward(h, np.ones((4, 4), bool), small_model, "level")
    one = branch_forward(h[:1], None, small_model, "level")
    assert np.all(np.isfinite(one))


def test_fully_allowed_mask_is_plain_softmax(rng):
    x = rng.normal(size=(2, 5, 5))
    e = np.exp(x - x.max(-1, keepdims=True))
    assert np.allclose(ag.masked_softmax(ag.Tensor(x), np.ones((5, 5), bool)).data, e / e.sum(-1, keepdims=True),
                       rtol=0, atol=1e-15)
    w = ag.masked_softmax(ag.Tensor(x[:, :1, :1]), np.ones((1, 1), bool)).data
    assert np.all(w == 1.0)


def _predict(model, block, k=None):
    bl = level_branch_input(block)
    bg = block if k is None else group_branch_input(block, k)
    return predict(bl, bg, build_group_mask(block.group_of, block.valid_len), model)


def test_untrained_predictions_near_uniform():
    model = init_model(ModelConfig(seed=0))
    rng = np.random.default_rng(0)
    lo, hi = 1.0, 0.0
    for _ in range(5):
        p = _predict(model, random_block(rng, n=16, m=4, valid=13))
        lo, hi = min(lo, p.min()), max(hi, p.max())
        assert np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-9)
    assert 0.5 / 255 <= lo and hi <= 2 / 255
    # frozen measurement at seed 0
    assert abs(lo - 0.0030850) < 1e-6 and abs(hi - 0.0049426) < 1e-6


def test_group_causality_single_pass(small_model, rng):
    blk = random_block(rng, n=8, g=4)
    base = _predict(small_model, blk)
    groups = blk.group_of
    for row in range(8):
        pert = blk.features.copy()
        pert[row, 0, 0] = (pert[row, 0, 0] % 255) + 1
        p = _predict(small_model, make_block(pert, 8, 4))
        same = groups <= groups[row]
        assert np.array_equal(p[same], base[same])
        assert not np.array_equal(p[~same], base[~same]) or not (~same).any()


def test_level_branch_ignores_current_layer(small_model, rng):
    blk = random_block(rng)
    other = blk.features.copy()
    other[:, 0, 0] = rng.integers(0, 256, size=8)
    h1 = small_model.level_hidden(level_branch_input(blk))
    h2 = small_model.level_hidden(level_branch_input(make_block(other, 8, 4)))
    assert np.array_equal(h1, h2)


def test_padding_rows_get_padding_distribution(small_model, rng):
    blk = random_block(rng, n=8, valid=5)
    p = _predict(small_model, blk)
    assert np.array_equal(p[5], small_model.padding_distribution())
    assert np.array_equal(p[:5], _predict(small_model, random_block(np.random.default_rng(12345), n=5, valid=5)))


def test_batching_does_not_change_results(small_model, rng):
    a, b = random_block(rng), random_block(rng)
    P = small_model.tensors()

    def logits(blocks):
        f = np.stack([x.features for x in blocks])
        fl = f.copy()
        fl[:, :, 0, 0] = 0
        allow = np.stack([build_group_mask(x.group_of, x.valid_len) for x in blocks])
        full = np.ones_like(allow)
        return forward_logits(P, fl, f, full, allow, small_model.cfg).data

    both = logits([a, b])
    assert np.array_equal(both[0], logits([a])[0]) and np.array_equal(both[1], logits([b])[0])


def test_loss_examples():
    onehot = np.zeros((2, 255))
    onehot[:, 6] = 1.0
    assert loss(onehot, [7, 7], [1, 1]) == 0.0
    uniform = np.full((3, 255), 1 / 255)
    assert math.isclose(loss(uniform, [1, 2, 3], [1, 1, 1]), math.log(255))
    assert math.isclose(loss(uniform, [1, 2, 3], [1, 1, 1], base=2), math.log2(255))
    p = np.random.default_rng(0).dirichlet(np.ones(255), size=4)
    assert math.isclose(loss(p, [1, 2, 3, 4], [1, 0, 1, 0]), loss(p[[0, 2]], [1, 3], [1, 1]))
    with pytest.raises(ValueError):
        loss(p, [0, 2, 3, 4], [1, 1, 1, 1])


def test_save_load(tmp_path, small_model):
    path = tmp_path / "m.octm"
    save_model(small_model, path)
    assert load_model(path).checksum == small_model.checksum
    assert load_model(path, expected=small_model.cfg).checksum == small_model.checksum
    with pytest.raises(ConfigMismatchError):
        load_model(path, expected=ModelConfig())
    raw = path.read_bytes()
    (tmp_path / "t.octm").write_bytes(raw[:-8])
    with pytest.raises(ModelCorruptionError):
        load_model(tmp_path / "t.octm")
    (tmp_path / "h.octm").write_bytes(raw[:20])
    with pytest.raises(ModelCorruptionError):
        load_model(tmp_path / "h.octm")
    flipped = bytearray(raw)
    flipped[-3] ^= 0x10
    (tmp_path / "f.octm").write_bytes(bytes(flipped))
    with pytest.raises(ModelCorruptionError):
        load_model(tmp_path / "f.octm")
    nan = bytearray(raw)
    nan[-8:] = np.array([np.nan], "<f8").tobytes()
    (tmp_path / "n.octm").write_bytes(bytes(nan))
    with pytest.raises(ModelCorruptionError):
        load_model(tmp_path / "n.octm")


def test_non_finite_logits_raise(small_model, rng):
    broken = init_model(small_model.cfg)
    broken.params["head.b"][3] = np.inf
    broken.touch()
    with pytest.raises(ModelCorruptionError):
        _predict(broken, random_block(rng))


def test_gradient_check_every_class():
    model = init_model(ModelConfig(d_model=16, heads=2, ffn_mult=2, context_depth=3, seed=1))
    batch = small_batch(SegmentSpec(16, 4, 3))
    result = gradient_check(model, batch, per_class=25)
    for cls in PARAM_CLASSES:
        worst = max(r[4] for r in result[cls])
        assert len(result[cls]) >= 25 and worst < 1e-4, (cls, worst)
