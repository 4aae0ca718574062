"""Windowed / shifted-window self-attention and the resolution-changing layers.

Feature maps are channel-last ``B×H×W×C`` tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from pgcn.autodiff import functional as F
from pgcn.autodiff.nn import LayerNorm, Linear, Module, Parameter, trunc_normal
from pgcn.autodiff.tensor import DTYPE, Tensor, as_tensor, concat, matmul, reshape, roll, transpose
from pgcn.errors import ConfigurationError, DimensionError

MASK_VALUE = -1e4
HEAD_DIM = 8


@dataclass(frozen=True)
class WindowConfig:
    window_size: int = 7
    shift: int = 0
    num_heads: int = 3
    head_dim: int = HEAD_DIM

    def __post_init__(self):
        if self.window_size < 1 or self.num_heads < 1 or self.head_dim < 1:
            raise ConfigurationError("window_size, num_heads and head_dim must be positive")
        if self.shift not in (0, self.window_size // 2):
            raise ConfigurationError(f"shift must be 0 or {self.window_size // 2}, got {self.shift}")


@dataclass(frozen=True)
class StagePlan:
    depth: int
    dim: int
    role: Literal["encoder", "decoder"] = "encoder"

    def __post_init__(self):
        if self.depth < 0 or self.dim < 1:
            raise ConfigurationError(f"invalid stage plan depth={self.depth} dim={self.dim}")
        if self.role == "encoder" and self.depth % 2:
            raise ConfigurationError(f"encoder stage depth must be even, got {self.depth}")

    @property
    def num_heads(self) -> int:
        if self.dim % HEAD_DIM:
            raise ConfigurationError(f"stage dim {self.dim} not divisible by head_dim {HEAD_DIM}")
        return self.dim // HEAD_DIM


def encoder_plans(c: int, depths) -> list[StagePlan]:
    return [StagePlan(d, c * 2**i, "encoder") for i, d in enumerate(depths)]


# -- window bookkeeping ----------------------------------------------------------

def window_partition(x: Tensor, m: int) -> Tensor:
    """``B×H×W×C`` → ``(B·nW)×M²×C`` (``H×W×C`` → ``nW×M²×C``)."""
    x = as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    b, h, w, c = x.shape
    if h % m or w % m:
        raise DimensionError(f"window_partition: {h}×{w} not divisible by window {m}")
    x = reshape(x, (b, h // m, m, w // m, m, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (b * (h // m) * (w // m), m * m, c))


def window_reverse(windows: Tensor, m: int, h: int, w: int, batched: bool = True) -> Tensor:
    windows = as_tensor(windows)
    if h % m or w % m:
        raise DimensionError(f"window_reverse: {h}×{w} not divisible by window {m}")
    nw = (h // m) * (w // m)
    c = windows.shape[-1]
    b = windows.shape[0] // nw
    x = reshape(windows, (b, h // m, w // m, m, m, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    x = reshape(x, (b, h, w, c))
    return x if batched else reshape(x, (h, w, c))


def relative_position_index(m: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.transpose(1, 2, 0) + (m - 1)
    return rel[..., 0] * (2 * m - 1) + rel[..., 1]


def shifted_window_mask(h: int, w: int, m: int, shift: int) -> np.ndarray:
    """Additive ``nW×M²×M²`` mask separating regions that a cyclic roll brought together."""
    region = np.zeros((h, w), dtype=np.int64)
    label = 0
    for hs in (slice(0, -m), slice(-m, -shift), slice(-shift, None)):
        for ws in (slice(0, -m), slice(-m, -shift), slice(-shift, None)):
            region[hs, ws] = label
            label += 1
    win = region.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    diff = win[:, None, :] != win[:, :, None]
    return np.where(diff, MASK_VALUE, 0.0).astype(DTYPE)


# -- attention -----------------------------------------------------------------------

def window_attention(windows: Tensor, qkv_weight: Tensor, qkv_bias: Tensor | None,
                     proj_weight: Tensor, proj_bias: Tensor | None, num_heads: int,
                     relative_bias: Tensor | None = None, attn_mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention inside each window.

    ``softmax(QKᵀ/√d + bias + mask)·V`` followed by the output projection.
    ``attn_mask`` has shape ``nW×N×N`` and windows are ordered batch-major.
    """
    windows = as_tensor(windows)
    bw, n, c = windows.shape
    if c % num_heads:
        raise DimensionError(f"window_attention: {c} channels not divisible by {num_heads} heads")
    d = c // num_heads
    if attn_mask is not None:
        nw = attn_mask.shape[0]
        if attn_mask.shape != (nw, n, n) or bw % nw:
            raise DimensionError(f"window_attention: mask {attn_mask.shape} incompatible with windows {windows.shape}")
    qkv = F.linear(windows, qkv_weight, qkv_bias)
    qkv = transpose(reshape(qkv, (bw, n, 3, num_heads, d)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = matmul(q * (1.0 / math.sqrt(d)), transpose(k, (0, 1, 3, 2)))
    if relative_bias is not None:
        scores = scores + relative_bias
    if attn_mask is not None:
        nw = attn_mask.shape[0]
        scores = reshape(scores, (bw // nw, nw, num_heads, n, n)) + Tensor(attn_mask[None, :, None])
        scores = reshape(scores, (bw, num_heads, n, n))
    attn = F.softmax(scores, axis=-1)
    out = transpose(matmul(attn, v), (0, 2, 1, 3))
    return F.linear(reshape(out, (bw, n, c)), proj_weight, proj_bias)


class WindowAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, window: int, num_heads: int,
                 relative_bias: bool = True):
        self.num_heads = num_heads
        self.window = window
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        if relative_bias:
            self.relative_bias_table = Parameter(trunc_normal(rng, ((2 * window - 1) ** 2, num_heads)))
            self._rel_index = relative_position_index(window)
        else:
            self.relative_bias_table = None

    def bias(self) -> Tensor | None:
        if self.relative_bias_table is None:
            return None
        n = self.window * self.window
        b = self.relative_bias_table[self._rel_index.reshape(-1)]
        return transpose(reshape(b, (n, n, self.num_heads)), (2, 0, 1))

    def forward(self, windows: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return window_attention(windows, self.qkv.weight, self.qkv.bias, self.proj.weight,
                                self.proj.bias, self.num_heads, self.bias(), mask)


class Mlp(Module):
    def __init__(self, rng: np.random.Generator, dim: int, ratio: int = 4):
        self.fc1 = Linear(rng, dim, ratio * dim)
        self.fc2 = Linear(rng, ratio * dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class SwinBlock(Module):
    """Pre-norm residual block: ``x + W-MSA(LN(x))`` then ``+ MLP(LN(·))``.

    The shifted variant rolls by ``-shift``, attends with the region mask and
    rolls back.  When the feature map is a single window the shift is dropped,
    as there is nothing to connect across.
    """

    def __init__(self, rng: np.random.Generator, dim: int, num_heads: int, window: int,
                 resolution: tuple[int, int], shifted: bool, relative_bias: bool = True):
        h, w = resolution
        if h % window or w % window:
            raise DimensionError(f"SwinBlock: resolution {h}×{w} not a multiple of window {window}")
        self.window = window
        self.resolution = resolution
        self.shift = window // 2 if shifted and min(h, w) > window else 0
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(rng, dim, window, num_heads, relative_bias)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim)
        self._mask = shifted_window_mask(h, w, window, self.shift) if self.shift else None

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        if (h, w) != self.resolution:
            raise DimensionError(f"SwinBlock built for {self.resolution}, got {h}×{w}")
        y = self.norm1(x)
        if self.shift:
            y = roll(y, (-self.shift, -self.shift), (1, 2))
        y = self.attn(window_partition(y, self.window), self._mask)
        y = window_reverse(y, self.window, h, w)
        if self.shift:
            y = roll(y, (self.shift, self.shift), (1, 2))
        x = x + y
        return x + self.mlp(self.norm2(x))


def swin_blocks(rng, dim: int, depth: int, window: int, resolution, relative_bias: bool = True) -> list[SwinBlock]:
    heads = StagePlan(depth, dim, "decoder").num_heads
    return [SwinBlock(rng, dim, heads, window, resolution, shifted=bool(i % 2), relative_bias=relative_bias)
            for i in range(depth)]


# -- resolution-changing layers -------------------------------------------------------

def patch_embed(tile: Tensor, weight: Tensor, bias: Tensor | None, patch: int = 4) -> Tensor:
    """Stride-``patch`` convolution, returned channel-last (``B×H/4×W/4×C``)."""
    tile = as_tensor(tile)
    h, w = tile.shape[-2:]
    if h % patch or w % patch:
        raise DimensionError(f"patch_embed: tile {h}×{w} not divisible by patch {patch}")
    squeeze = tile.ndim == 3
    if squeeze:
        tile = reshape(tile, (1,) + tile.shape)
    y = transpose(F.conv2d(tile, weight, bias, stride=patch), (0, 2, 3, 1))
    return reshape(y, y.shape[1:]) if squeeze else y


class PatchEmbed(Module):
    def __init__(self, rng: np.random.Generator, dim: int, patch: int = 4, in_ch: int = 3):
        self.patch = patch
        self.weight = Parameter(trunc_normal(rng, (dim, in_ch, patch, patch)))
        self.bias = Parameter(np.zeros(dim, dtype=DTYPE))

    def forward(self, tile: Tensor) -> Tensor:
        return patch_embed(tile, self.weight, self.bias, self.patch)


def merge_neighborhoods(x: Tensor) -> Tensor:
    """Concatenate each 2×2 neighbourhood: order (0,0), (1,0), (0,1), (1,1) as (row, col)."""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"patch_merging: odd spatial dims {h}×{w}")
    y = reshape(x, (b, h // 2, 2, w // 2, 2, c))
    y = transpose(y, (0, 1, 3, 4, 2, 5))
    return reshape(y, (b, h // 2, w // 2, 4 * c))


class PatchMerging(Module):
    def __init__(self, rng: np.random.Generator, dim: int):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(rng, 4 * dim, 2 * dim, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return self.reduction(self.norm(merge_neighborhoods(x)))


def pixel_shuffle(x: Tensor, r: int = 2) -> Tensor:
    """``B×H×W×(r·r·c)`` → ``B×rH×rW×c``; channel blocks fill the r×r cell row-major."""
    b, h, w, cc = x.shape
    if cc % (r * r):
        raise DimensionError(f"pixel_shuffle: {cc} channels not divisible by {r * r}")
    c = cc // (r * r)
    y = reshape(x, (b, h, w, r, r, c))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (b, h * r, w * r, c))


class PatchExpanding(Module):
    """Linear C→2C, then rearrange to a 2× larger map with C/2 channels."""

    def __init__(self, rng: np.random.Generator, dim: int):
        if dim % 2:
            raise DimensionError(f"patch_expanding: channel count {dim} must be even")
        self.dim = dim
        self.expand = Linear(rng, dim, 2 * dim, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise DimensionError(f"patch_expanding: expected {self.dim} channels, got {x.shape[-1]}")
        return pixel_shuffle(self.expand(x), 2)


class LinearProject(Module):
    """Per-token 3C → C projection."""

    def __init__(self, rng: np.random.Generator, in_dim: int):
        if in_dim % 3:
            raise DimensionError(f"linear_project: {in_dim} channels not divisible by 3")
        self.proj = Linear(rng, in_dim, in_dim // 3)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.proj.weight.shape[0]:
            raise DimensionError(f"linear_project: expected {self.proj.weight.shape[0]} channels, got {x.shape[-1]}")
        return self.proj(x)


__all__ = [
    "WindowConfig", "StagePlan", "encoder_plans", "window_partition", "window_reverse",
    "relative_position_index", "shifted_window_mask", "window_attention", "WindowAttention",
    "SwinBlock", "swin_blocks", "patch_embed", "PatchEmbed", "merge_neighborhoods", "PatchMerging",
    "pixel_shuffle", "PatchExpanding", "LinearProject", "concat", "MASK_VALUE",
]
