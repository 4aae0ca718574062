import numpy as np
import pytest

from pgcn.autodiff import Parameter, Tensor, conv2d
from pgcn.autodiff.gradcheck import check_gradients
from pgcn.errors import ConfigurationError, DimensionError
from pgcn.swin import (
    MASK_VALUE,
    LinearProject,
    PatchEmbed,
    PatchExpanding,
    PatchMerging,
    StagePlan,
    SwinBlock,
    WindowAttention,
    WindowConfig,
    merge_neighborhoods,
    patch_embed,
    pixel_shuffle,
    window_attention,
    window_partition,
    window_reverse,
)


def dense_window_attention(x, attn: WindowAttention, m: int, shift: int):
    """Global attention over every token of an H×W map with a block mask.

    Pairs in different (rolled) windows are excluded outright; pairs in the
    same window but different roll regions get MASK_VALUE.  Positions are
    tracked in original coordinates, so no partition/reverse is involved.
    """
    h, w, c = x.shape
    heads = attn.num_heads
    d = c // heads
    tokens = x.reshape(-1, c).astype(np.float64)
    qkv = tokens @ attn.qkv.weight.data + attn.qkv.bias.data
    q, k, v = (qkv[:, i * c:(i + 1) * c].reshape(-1, heads, d) for i in range(3))
    rows, cols = np.divmod(np.arange(h * w), w)
    rr, rc = (rows - shift) % h, (cols - shift) % w  # rolled coordinates

    def region(p, n):
        if shift == 0:
            return 0
        return 0 if p < n - m else (1 if p < n - shift else 2)

    win = (rr // m) * (w // m) + rc // m
    reg = np.array([region(a, h) * 3 + region(b, w) for a, b in zip(rr, rc)])
    table = attn.relative_bias_table.data
    out = np.zeros((h * w, heads, d))
    for i in range(h * w):
        for hd in range(heads):
            logits = np.full(h * w, -np.inf)
            for j in range(h * w):
                if win[i] != win[j]:
                    continue
                dy = (rr[i] % m) - (rr[j] % m) + m - 1
                dx = (rc[i] % m) - (rc[j] % m) + m - 1
                val = q[i, hd] @ k[j, hd] / np.sqrt(d) + table[dy * (2 * m - 1) + dx, hd]
                if reg[i] != reg[j]:
                    val += MASK_VALUE
                logits[j] = val
            p = np.exp(logits - logits.max())
            p /= p.sum()
            out[i, hd] = p @ v[:, hd]
    y = out.reshape(h * w, c) @ attn.proj.weight.data + attn.proj.bias.data
    return y.reshape(h, w, c)


def windowed(x, attn, m, shift):
    h, w, _ = x.shape
    t = Tensor(x)
    mask = None
    if shift:
        from pgcn.autodiff import roll
        from pgcn.swin import shifted_window_mask

        t = roll(t, (-shift, -shift), (0, 1))
        mask = shifted_window_mask(h, w, m, shift)
    y = window_reverse(attn(window_partition(t, m), mask), m, h, w, batched=False)
    if shift:
        from pgcn.autodiff import roll

        y = roll(y, (shift, shift), (0, 1))
    return y.data


def test_window_partition_shapes():
    x = Tensor(np.random.default_rng(0).normal(size=(7, 7, 5)))
    w = window_partition(x, 7)
    assert w.shape == (1, 49, 5)
    np.testing.assert_array_equal(w.data[0], x.data.reshape(49, 5))
    assert window_partition(Tensor(np.zeros((14, 14, 3))), 7).shape == (4, 49, 3)


def test_window_round_trip_exact():
    x = np.random.default_rng(1).normal(size=(2, 14, 21, 6)).astype(np.float32)
    back = window_reverse(window_partition(Tensor(x), 7), 7, 14, 21)
    np.testing.assert_array_equal(back.data, x)


def test_window_partition_indivisible():
    with pytest.raises(DimensionError):
        window_partition(Tensor(np.zeros((10, 14, 3))), 7)


def test_attention_single_token_is_value_projection():
    rng = np.random.default_rng(2)
    attn = WindowAttention(rng, 16, 1, 2, relative_bias=False)
    x = rng.normal(size=(5, 1, 16)).astype(np.float32)
    out = attn(Tensor(x)).data
    v = x @ attn.qkv.weight.data[:, 32:] + attn.qkv.bias.data[32:]
    np.testing.assert_allclose(out, v @ attn.proj.weight.data + attn.proj.bias.data, atol=1e-6)


def test_attention_uniform_qk_gives_mean_of_v():
    rng = np.random.default_rng(3)
    attn = WindowAttention(rng, 8, 2, 1, relative_bias=False)
    attn.qkv.weight.data[:, :16] = 0.0  # Q = K = 0
    attn.proj.weight.data[:] = np.eye(8)
    x = rng.normal(size=(1, 4, 8)).astype(np.float32)
    v = x[0] @ attn.qkv.weight.data[:, 16:]
    np.testing.assert_allclose(attn(Tensor(x)).data[0], np.broadcast_to(v.mean(0), (4, 8)), atol=1e-6)


@pytest.mark.parametrize("shift", [0, 3])
def test_windowed_equals_dense_masked_attention(shift):
    rng = np.random.default_rng(4)
    attn = WindowAttention(rng, 24, 7, 3)
    attn.relative_bias_table.data[:] = rng.normal(0, 0.5, attn.relative_bias_table.shape)
    x = rng.normal(size=(14, 14, 24)).astype(np.float32)
    np.testing.assert_allclose(windowed(x, attn, 7, shift), dense_window_attention(x, attn, 7, shift), atol=1e-5)


def test_attention_mask_shape_error():
    rng = np.random.default_rng(5)
    attn = WindowAttention(rng, 8, 2, 1)
    with pytest.raises(DimensionError):
        attn(Tensor(np.zeros((4, 4, 8))), np.zeros((3, 4, 4), dtype=np.float32))


def test_attention_gradients():
    rng = np.random.default_rng(6)
    attn = WindowAttention(rng, 16, 2, 2)
    for p in attn.parameters():
        p.data[:] = rng.normal(0, 0.3, p.shape)
    x = Parameter(rng.normal(size=(4, 4, 16)))
    w = rng.normal(size=(4, 4, 16)).astype(np.float32)
    res = check_gradients(lambda: (attn(x) * w).sum(), [("x", x)] + attn.named_parameters(), rng, probes=3)
    assert all(r.ok for r in res), [r for r in res if not r.ok]


def test_swin_block_identity_when_output_projections_zero():
    rng = np.random.default_rng(7)
    blk = SwinBlock(rng, 16, 2, 2, (4, 4), shifted=True)
    blk.attn.proj.weight.data[:] = 0
    blk.mlp.fc2.weight.data[:] = 0
    x = rng.normal(size=(1, 4, 4, 16)).astype(np.float32)
    np.testing.assert_allclose(blk(Tensor(x)).data, x, atol=1e-6)


def test_shifted_block_equals_plain_on_constant_input():
    rng = np.random.default_rng(8)
    plain = SwinBlock(rng, 16, 2, 2, (4, 4), shifted=False)
    shifted = SwinBlock(np.random.default_rng(0), 16, 2, 2, (4, 4), shifted=True)
    shifted.load_state_dict(plain.state_dict())
    x = np.broadcast_to(rng.normal(size=16), (1, 4, 4, 16)).astype(np.float32)
    # all tokens equal → relative bias is the only per-pair variation; zero it
    for blk in (plain, shifted):
        blk.attn.relative_bias_table.data[:] = 0
    np.testing.assert_allclose(shifted(Tensor(x)).data, plain(Tensor(x)).data, atol=1e-6)


def test_shifted_block_matches_step_by_step_reference():
    rng = np.random.default_rng(9)
    blk = SwinBlock(rng, 24, 3, 7, (14, 14), shifted=True)
    blk.attn.relative_bias_table.data[:] = rng.normal(0, 0.5, blk.attn.relative_bias_table.shape)
    x = rng.normal(size=(14, 14, 24)).astype(np.float32)

    def ln(a, mod):
        mu = a.mean(-1, keepdims=True)
        var = a.var(-1, keepdims=True)
        return (a - mu) / np.sqrt(var + 1e-5) * mod.weight.data + mod.bias.data

    y = x + dense_window_attention(ln(x, blk.norm1), blk.attn, 7, 3)
    hdn = ln(y, blk.norm2) @ blk.mlp.fc1.weight.data + blk.mlp.fc1.bias.data
    g = 0.5 * hdn * (1 + np.tanh(np.sqrt(2 / np.pi) * (hdn + 0.044715 * hdn**3)))
    ref = y + g @ blk.mlp.fc2.weight.data + blk.mlp.fc2.bias.data
    np.testing.assert_allclose(blk(Tensor(x[None])).data[0], ref, atol=1e-4)


def test_swin_block_rejects_bad_resolution():
    rng = np.random.default_rng(10)
    with pytest.raises(DimensionError):
        SwinBlock(rng, 8, 1, 7, (10, 10), shifted=False)


def test_patch_embed_shapes_and_oracle():
    rng = np.random.default_rng(11)
    pe = PatchEmbed(rng, 24)
    tile = rng.random((3, 224, 224)).astype(np.float32)
    out = pe(Tensor(tile))
    assert out.shape == (56, 56, 24)
    ref = conv2d(Tensor(tile), pe.weight, pe.bias, stride=4).data.transpose(1, 2, 0)
    np.testing.assert_array_equal(out.data, ref)


def test_patch_embed_constant_image_constant_tokens():
    rng = np.random.default_rng(12)
    pe = PatchEmbed(rng, 8)
    out = pe(Tensor(np.full((3, 16, 16), 0.3))).data.reshape(-1, 8)
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-7)


def test_patch_embed_indivisible():
    with pytest.raises(DimensionError):
        patch_embed(Tensor(np.zeros((3, 10, 12))), Tensor(np.zeros((4, 3, 4, 4))), None)


def test_patch_merging_shapes_and_gather_oracle():
    rng = np.random.default_rng(13)
    assert PatchMerging(rng, 5)(Tensor(np.zeros((1, 2, 2, 5)))).shape == (1, 1, 1, 10)
    assert PatchMerging(rng, 4)(Tensor(np.zeros((1, 56, 56, 4)))).shape == (1, 28, 28, 8)
    x = rng.normal(size=(2, 4, 6, 3)).astype(np.float32)
    got = merge_neighborhoods(Tensor(x)).data
    for b in range(2):
        for i in range(2):
            for j in range(3):
                expect = np.concatenate([x[b, 2 * i, 2 * j], x[b, 2 * i + 1, 2 * j],
                                         x[b, 2 * i, 2 * j + 1], x[b, 2 * i + 1, 2 * j + 1]])
                np.testing.assert_array_equal(got[b, i, j], expect)
    with pytest.raises(DimensionError):
        merge_neighborhoods(Tensor(np.zeros((1, 3, 4, 2))))


def test_patch_expanding_shapes_and_rearrangement_oracle():
    rng = np.random.default_rng(14)
    pe = PatchExpanding(rng, 8)
    assert pe(Tensor(np.zeros((1, 1, 1, 8)))).shape == (1, 2, 2, 4)
    pm = PatchMerging(rng, 6)
    x = Tensor(np.zeros((1, 8, 8, 6)))
    assert PatchExpanding(rng, 12)(pm(x)).shape == x.shape
    y = rng.normal(size=(1, 3, 2, 12)).astype(np.float32)
    got = pixel_shuffle(Tensor(y), 2).data
    for i in range(3):
        for j in range(2):
            for a in range(2):
                for b in range(2):
                    np.testing.assert_array_equal(got[0, 2 * i + a, 2 * j + b], y[0, i, j, (2 * a + b) * 3:(2 * a + b + 1) * 3])
    with pytest.raises(DimensionError):
        PatchExpanding(rng, 7)


def test_linear_project():
    rng = np.random.default_rng(15)
    lp = LinearProject(rng, 72)
    x = rng.normal(size=(1, 56, 56, 72)).astype(np.float32)
    out = lp(Tensor(x))
    assert out.shape == (1, 56, 56, 24)
    ref = x.reshape(-1, 72) @ lp.proj.weight.data + lp.proj.bias.data
    np.testing.assert_allclose(out.data.reshape(-1, 24), ref, atol=1e-6)
    lp.proj.weight.data[:] = np.vstack([np.eye(24), np.zeros((48, 24))])
    np.testing.assert_allclose(lp(Tensor(x)).data, x[..., :24], atol=1e-6)
    with pytest.raises(DimensionError):
        LinearProject(rng, 10)


def test_layers_are_pure_functions():
    rng = np.random.default_rng(16)
    blk = SwinBlock(rng, 16, 2, 2, (4, 4), shifted=True)
    x = Tensor(rng.normal(size=(2, 4, 4, 16)))
    assert blk(x).data.tobytes() == blk(x).data.tobytes()


def test_config_types():
    assert WindowConfig(7, 3, 3).shift == 3
    with pytest.raises(ConfigurationError):
        WindowConfig(7, 2, 3)
    assert StagePlan(2, 48).num_heads == 6
    with pytest.raises(ConfigurationError):
        StagePlan(3, 24, "encoder")
