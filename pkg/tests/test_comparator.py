import numpy as np
import pytest

from pgcn.autodiff import Tensor
from pgcn.autodiff.gradcheck import check_gradients
from pgcn.comparator import (
    ComparatorNet,
    ComparisonResult,
    PairExample,
    comparison_loss,
    downsample_mask,
    make_pairs,
    train_comparator,
)
from pgcn.config import ModelConfig, TrainConfig
from pgcn.errors import ConfigurationError, DimensionError
from pgcn.generator import GenerationNet

SMALL = ModelConfig(cmp_widths=(4, 8, 8), cmp_fc_hidden=8)


def small_net(seed=0, share=True):
    return ComparatorNet(SMALL, np.random.default_rng(seed), share_third=share)


def test_mask_is_quarter_size():
    net = small_net()
    rng = np.random.default_rng(0)
    for h, w in [(32, 32), (64, 64), (16, 48)]:
        a = rng.random((2, 3, h, w), dtype=np.float32)
        p, mask = net.compare(a, a)
        assert mask.shape == (2, h // 4, w // 4)
        assert p.shape == (2,)
        assert 0 <= p.min() and p.max() <= 1 and 0 <= mask.min() and mask.max() <= 1


def test_mask_is_56_for_224_tiles():
    net = small_net()
    a = np.zeros((3, 224, 224), np.float32)
    _, mask = net.compare(a, a)
    assert mask.shape == (56, 56)


def test_bad_shapes_rejected():
    net = small_net()
    with pytest.raises(DimensionError):
        net(Tensor(np.zeros((1, 3, 32, 32), np.float32)), Tensor(np.zeros((1, 3, 16, 16), np.float32)))
    with pytest.raises(DimensionError):
        net(Tensor(np.zeros((1, 3, 30, 30), np.float32)), Tensor(np.zeros((1, 3, 30, 30), np.float32)))


def test_compare_is_deterministic():
    net = small_net()
    a = np.random.default_rng(1).random((3, 32, 32), dtype=np.float32)
    p1, m1 = net.compare(a, a)
    p2, m2 = net.compare(a, a)
    assert p1 == p2
    np.testing.assert_array_equal(m1, m2)


def test_third_block_is_one_object():
    net = small_net()
    assert net.branch1.block3 is net.branch2.block3
    assert net.branch1.block1 is not net.branch2.block1
    net.branch1.block3.conv.weight.data[0, 0, 0, 0] = 42.0
    assert net.branch2.block3.conv.weight.data[0, 0, 0, 0] == 42.0
    names = [n for n, _ in net.named_parameters()]
    assert not any(n.startswith("branch2.block3") for n in names)


def _batch(seed=0, b=4, r=32):
    rng = np.random.default_rng(seed)
    a = rng.random((b, 3, r, r), dtype=np.float32)
    bb = rng.random((b, 3, r, r), dtype=np.float32)
    y = np.array([1, -1] * (b // 2), np.float32)
    gt = (rng.random((b, r // 4, r // 4)) < 0.3).astype(np.float32)
    gt[y == 1] = 0
    return a, bb, y, gt


def test_shared_gradient_is_sum_of_unshared_copies():
    a, b, y, gt = _batch()
    shared, unshared = small_net(share=True), small_net(share=False)
    for net in (shared, unshared):
        net.zero_grad()
        comparison_loss(net(Tensor(a), Tensor(b)), y, gt).backward()
    for name in ("conv.weight", "conv.bias", "bn.weight", "bn.bias"):
        head, leaf = name.split(".")
        g = getattr(getattr(shared.branch1.block3, head), leaf).grad
        g1 = getattr(getattr(unshared.branch1.block3, head), leaf).grad
        g2 = getattr(getattr(unshared.branch2.block3, head), leaf).grad
        np.testing.assert_allclose(g, g1 + g2, rtol=1e-5, atol=1e-7)
        assert np.abs(g1).sum() > 0 and np.abs(g2).sum() > 0


def _result(p, mask, logit=None):
    p = np.asarray(p, np.float32)
    logit = np.log(p / (1 - p + 1e-12) + 1e-12) if logit is None else np.asarray(logit, np.float32)
    return ComparisonResult(Tensor(p), Tensor(logit.astype(np.float32)), Tensor(np.asarray(mask, np.float32)))


@pytest.mark.parametrize("variant", ["corrected", "paper_verbatim"])
def test_loss_plug_in_values(variant):
    zeros = np.zeros((1, 4, 4), np.float32)
    assert float(comparison_loss(_result([1.0], zeros), [1], zeros, variant).data) == pytest.approx(0.5)
    assert float(comparison_loss(_result([1.0], zeros), [-1], zeros, variant).data) == pytest.approx(2.5)


@pytest.mark.parametrize("l1", ["sum", "mean"])
def test_mask_term_monotonicity(l1):
    gt = np.zeros((1, 4, 4), np.float32)
    corrected, verbatim = [], []
    for v in np.linspace(0.0, 1.0, 11):
        mask = np.full((1, 4, 4), v, np.float32)
        corrected.append(float(comparison_loss(_result([1.0], mask), [1], gt, "corrected", l1).data))
        verbatim.append(float(comparison_loss(_result([1.0], mask), [1], gt, "paper_verbatim", l1).data))
    assert np.all(np.diff(corrected) > 0)
    assert np.all(np.diff(verbatim) < 0)
    assert corrected[0] == pytest.approx(0.5)
    assert all(0.5 < c < 1.0 for c in corrected[1:])


def test_hinge_dead_zone_and_range():
    zeros = np.zeros((3, 4, 4), np.float32)
    loss = comparison_loss(_result([1.0, 1.0, 1.0], zeros), [1, 1, 1], zeros)
    assert float(loss.data) == pytest.approx(0.5)  # mask term only
    for p in np.linspace(0, 1, 5):
        for y in (-1, 1):
            total = float(comparison_loss(_result([p], zeros[:1]), [y], zeros[:1]).data)
            assert 0.0 <= total - 0.5 <= 2.0


def test_hinge_logit_variant_uses_logit():
    zeros = np.zeros((1, 4, 4), np.float32)
    res = _result([0.9], zeros, logit=[3.0])
    assert float(comparison_loss(res, [1], zeros, "paper_verbatim_hinge_logit").data) == pytest.approx(0.5)
    assert float(comparison_loss(res, [-1], zeros, "paper_verbatim_hinge_logit").data) == pytest.approx(4.5)


def test_loss_rejects_unknown_variant_and_shape():
    zeros = np.zeros((1, 4, 4), np.float32)
    with pytest.raises(ConfigurationError):
        comparison_loss(_result([0.5], zeros), [1], zeros, "bogus")
    with pytest.raises(DimensionError):
        comparison_loss(_result([0.5], zeros), [1], np.zeros((1, 8, 8), np.float32))


def test_loss_gradients_match_finite_differences():
    net = small_net(seed=3)
    a, b, _, gt = _batch(seed=4)
    y = np.ones(4, np.float32)  # with P < 1 the hinge stays on its linear piece
    ta, tb = Tensor(a), Tensor(b)
    picked = [(n, p) for n, p in net.named_parameters() if n.endswith(("conv.weight", "fc1.weight", "fc2.weight"))]

    def loss():
        return comparison_loss(net(ta, tb), y, np.zeros_like(gt), "corrected", "mean")

    results = check_gradients(loss, picked, np.random.default_rng(0), probes=3)
    bad = [r for r in results if not r.ok]
    assert not bad, bad[:5]


def test_downsample_mask_matches_cell_oracle():
    rng = np.random.default_rng(0)
    mask = rng.random((32, 24)) < 0.05
    small = downsample_mask(mask)
    for i in range(8):
        for j in range(6):
            assert small[i, j] == float(mask[4 * i:4 * i + 4, 4 * j:4 * j + 4].any())


def _tile_sets(n=4, r=32, count=2):
    rng = np.random.default_rng(0)
    return [rng.random((n, n, 3, r, r)).astype(np.float32) for _ in range(count)]


def test_make_pairs_balance_and_masks():
    pairs = make_pairs(lambda a, b: b.copy(), _tile_sets(), np.random.default_rng(0), 11,
                       defect_size=(6, 10))
    assert len(pairs) == 10
    assert sum(p.y == 1 for p in pairs) == 5
    for p in pairs:
        assert p.gt_mask.shape == (8, 8)
        if p.y == 1:
            assert not p.gt_mask.any()
        else:
            assert p.gt_mask.any()
            assert not np.array_equal(p.patch_a, p.patch_b)


def test_pair_example_invariants():
    with pytest.raises(ValueError):
        PairExample(np.zeros(1), np.zeros(1), 1, np.ones((2, 2)))
    with pytest.raises(ValueError):
        PairExample(np.zeros(1), np.zeros(1), -1, np.zeros((2, 2)))


def test_training_leaves_generator_untouched():
    gen = GenerationNet(ModelConfig(c=8, window_m=1, tile_resolution=32, encoder_depths=(2, 2, 2, 2),
                                    decoder_depths=(1, 1, 1, 1)), np.random.default_rng(0))
    before = {k: v.copy() for k, v in gen.state_dict().items()}
    sets = _tile_sets()
    pairs = make_pairs(gen.generate_third, sets, np.random.default_rng(1), 8, defect_size=(6, 10))
    net = small_net()
    losses = train_comparator(net, pairs, TrainConfig(cmp_batch_size=4, cmp_learning_rate=1e-3),
                              np.random.default_rng(2), steps=3)
    assert len(losses) == 3 and all(np.isfinite(losses))
    grad_norm = sum(float(np.square(p.grad).sum()) for p in gen.parameters() if p.grad is not None)
    assert grad_norm == 0.0
    for k, v in gen.state_dict().items():
        assert v.tobytes() == before[k].tobytes()
