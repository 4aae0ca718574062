"""Two-encoder / one-decoder network that predicts the next tile of a row."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numpy as np

from pgcn.autodiff import functional as F
from pgcn.autodiff.nn import Linear, Module
from pgcn.autodiff.optim import Adam
from pgcn.autodiff.tensor import Tensor, concat, no_grad, transpose
from pgcn.config import ModelConfig, TrainConfig
from pgcn.errors import ConfigurationError, DimensionError, NumericHealthError
from pgcn.swin import LinearProject, PatchEmbed, PatchExpanding, PatchMerging, swin_blocks

log = logging.getLogger(__name__)

Direction = Literal["left_to_right", "right_to_left"]


@dataclass
class StageFeatures:
    s1: Tensor
    s2: Tensor
    s3: Tensor
    s4: Tensor

    def stages(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.s1, self.s2, self.s3, self.s4


class Stage(Module):
    def __init__(self, pre: Module | None, blocks: list):
        self.pre = pre
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        if self.pre is not None:
            x = self.pre(x)
        for blk in self.blocks:
            x = blk(x)
        return x


class Encoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        c, m, r = cfg.c, cfg.window_m, cfg.tile_resolution
        self.resolution = r
        self.embed = PatchEmbed(rng, c)
        stages = []
        for i, depth in enumerate(cfg.encoder_depths):
            dim = c * 2**i
            res = r // (4 * 2**i)
            pre = PatchMerging(rng, dim // 2) if i else None
            stages.append(Stage(pre, swin_blocks(rng, dim, depth, m, (res, res), cfg.relative_bias)))
        self.stages = stages

    def forward(self, tile: Tensor) -> StageFeatures:
        if tile.ndim != 4 or tile.shape[1:] != (3, self.resolution, self.resolution):
            raise DimensionError(
                f"encode: expected B×3×{self.resolution}×{self.resolution} tiles, got {tile.shape}")
        x = self.embed(tile)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return StageFeatures(*feats)


class Decoder(Module):
    """Stage i consumes encoder stage 5−i plus the previous decoder output."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        c, m, r = cfg.c, cfg.window_m, cfg.tile_resolution
        stages = []
        for i, depth in enumerate(cfg.decoder_depths):
            if i < 3:
                in_dim = c * 2 ** (3 - i)
                pre: Module = PatchExpanding(rng, in_dim)
                dim = in_dim // 2
                res = r // (16 // 2**i)
            else:
                pre = LinearProject(rng, 3 * c)
                dim, res = c, r // 4
            stages.append(Stage(pre, swin_blocks(rng, dim, depth, m, (res, res), cfg.relative_bias)))
        self.stages = stages

    def forward(self, e1: StageFeatures, e2: StageFeatures, return_inputs: bool = False):
        for k, (a, b) in enumerate(zip(e1.stages(), e2.stages()), start=1):
            if a.shape != b.shape:
                raise DimensionError(f"decode: encoder stage {k} shapes differ, {a.shape} vs {b.shape}")
        inputs, outputs = [], []
        x = e1.s4 + e2.s4
        for i, stage in enumerate(self.stages):
            if i in (1, 2):
                skip = (e1.s3, e1.s2)[i - 1] + (e2.s3, e2.s2)[i - 1]
                if skip.shape != outputs[-1].shape:
                    raise DimensionError(
                        f"decode: stage {i + 1} skip {skip.shape} vs previous output {outputs[-1].shape}")
                x = skip + outputs[-1]
            elif i == 3:
                x = concat([e1.s1, e2.s1, outputs[-1]], axis=-1)
            inputs.append(x)
            outputs.append(stage(x))
        return (outputs, inputs) if return_inputs else outputs


class FusionHead(Module):
    """Project each decoder output to C, upsample to H/4, fuse with two MLPs."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        c = cfg.c
        self.out_res = cfg.tile_resolution // 4
        self.proj = [Linear(rng, d, c) for d in (4 * c, 2 * c, c, c)]
        self.mlp1 = Linear(rng, 4 * c, 4 * c)
        self.mlp2 = Linear(rng, 4 * c, 3)

    def forward(self, outs: Sequence[Tensor]) -> Tensor:
        r = self.out_res
        maps = []
        for proj, d in zip(self.proj, outs):
            y = transpose(proj(d), (0, 3, 1, 2))
            maps.append(F.resize_bilinear(y, r, r))
        fused = transpose(concat(maps, axis=1), (0, 2, 3, 1))
        hidden = F.gelu(self.mlp1(fused))
        return transpose(F.sigmoid(self.mlp2(hidden)), (0, 3, 1, 2))


class GenerationNet(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder1 = Encoder(rng, cfg)
        self.encoder2 = self.encoder1 if cfg.share_encoders else Encoder(rng, cfg)
        self.decoder = Decoder(rng, cfg)
        self.fusion = FusionHead(rng, cfg)

    def encode(self, tile: Tensor, which: int = 1) -> StageFeatures:
        if which not in (1, 2):
            raise ValueError("which must be 1 or 2")
        return (self.encoder1 if which == 1 else self.encoder2)(tile)

    def decode(self, e1: StageFeatures, e2: StageFeatures, return_inputs: bool = False):
        return self.decoder(e1, e2, return_inputs)

    def fuse_and_predict(self, outs: Sequence[Tensor]) -> Tensor:
        return self.fusion(outs)

    def forward(self, a, b) -> Tensor:
        """Predict the tile following ``b`` at full tile resolution, values in [0, 1]."""
        a = a if isinstance(a, Tensor) else Tensor(a)
        b = b if isinstance(b, Tensor) else Tensor(b)
        quarter = self.fuse_and_predict(self.decode(self.encode(a, 1), self.encode(b, 2)))
        r = self.cfg.tile_resolution
        return F.resize_bilinear(quarter, r, r)

    def generate_third(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Inference helper; accepts single tiles or batches."""
        single = np.ndim(a) == 3
        if single:
            a, b = a[None], b[None]
        with no_grad():
            out = self.forward(Tensor(a), Tensor(b)).data
        return out[0] if single else out


# -- training data ---------------------------------------------------------------

@dataclass
class TileTriple:
    a: np.ndarray
    b: np.ndarray
    target: np.ndarray
    direction: Direction
    row: int
    col: int  # 0-based column of the predicted tile
    image_index: int = 0


def mirror(tile: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(tile[..., ::-1])


def triple_for(tiles: np.ndarray, row: int, col: int, direction: Direction, image_index: int = 0) -> TileTriple:
    """Conditioning pair and target for the tile at ``(row, col)``.

    Right-to-left examples are mirrored horizontally so that one network
    always continues a row towards its right edge.
    """
    n = tiles.shape[1]
    if direction == "left_to_right":
        if col < 2:
            raise ValueError(f"left_to_right needs two predecessors, col={col}")
        return TileTriple(tiles[row, col - 2], tiles[row, col - 1], tiles[row, col], direction, row, col, image_index)
    if col > n - 3:
        raise ValueError(f"right_to_left needs two successors, col={col}, n={n}")
    return TileTriple(mirror(tiles[row, col + 2]), mirror(tiles[row, col + 1]), mirror(tiles[row, col]),
                      direction, row, col, image_index)


def sample_triple_positions(n: int, rng: np.random.Generator, count: int) -> np.ndarray:
    """``count`` × (row, start column) uniform over row-local consecutive triples."""
    if n < 3:
        raise ConfigurationError(f"grid n={n} is too small for tile triples (need n ≥ 3)")
    rows = rng.integers(0, n, size=count)
    starts = rng.integers(0, n - 2, size=count)
    return np.stack([rows, starts], axis=1)


def sample_triples(tiles: np.ndarray, rng: np.random.Generator, count: int, image_index: int = 0) -> list[TileTriple]:
    """Random adjacent triples from an ``n×n×3×R×R`` tile array.

    Each sampled triple yields two examples: the right tile predicted from the
    left pair, and the left tile predicted from the (mirrored) right pair.
    """
    out = []
    for row, start in sample_triple_positions(tiles.shape[0], rng, count):
        out.append(triple_for(tiles, int(row), int(start) + 2, "left_to_right", image_index))
        out.append(triple_for(tiles, int(row), int(start), "right_to_left", image_index))
    return out


def stack_triples(triples: Sequence[TileTriple]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.stack([t.a for t in triples]), np.stack([t.b for t in triples]),
            np.stack([t.target for t in triples]))


# -- training --------------------------------------------------------------------

StepCallback = Callable[[int, float], None]


def train_generation(
    net: GenerationNet,
    tile_sets: Sequence[np.ndarray],
    train: TrainConfig,
    rng: np.random.Generator,
    steps: int | None = None,
    on_step: StepCallback | None = None,
    on_checkpoint: Callable[[GenerationNet], None] | None = None,
) -> list[float]:
    """Minimise the MSE between predicted and true third tiles.

    ``tile_sets`` holds one ``n×n×3×R×R`` array per normal training image.
    On a non-finite loss the weights are left as they were after the last
    good step and :class:`NumericHealthError` is raised.
    """
    steps = train.steps if steps is None else steps
    opt = Adam(net.named_parameters(), train.learning_rate)
    per_step = max(1, train.batch_size // 2)
    losses: list[float] = []
    net.train()
    for step in range(steps):
        triples = []
        for idx in rng.integers(0, len(tile_sets), size=per_step):
            triples.extend(sample_triples(tile_sets[idx], rng, 1, int(idx)))
        a, b, target = stack_triples(triples)
        opt.zero_grad()
        loss = F.mse_loss(net(Tensor(a), Tensor(b)), Tensor(target))
        value = float(loss.data)
        if not np.isfinite(value):
            if on_checkpoint is not None:
                on_checkpoint(net)
            raise NumericHealthError(f"non-finite generation loss at step {step}")
        loss.backward()
        opt.step()
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
        if train.checkpoint_every and on_checkpoint is not None and (step + 1) % train.checkpoint_every == 0:
            on_checkpoint(net)
    net.eval()
    return losses


def evaluate_generation(net: GenerationNet, tile_sets: Sequence[np.ndarray], batch: int = 16) -> float:
    """Mean per-pixel MSE over every left-to-right and right-to-left triple."""
    triples = []
    for idx, tiles in enumerate(tile_sets):
        n = tiles.shape[0]
        for row in range(n):
            for col in range(n):
                if col >= 2:
                    triples.append(triple_for(tiles, row, col, "left_to_right", idx))
                if col <= n - 3:
                    triples.append(triple_for(tiles, row, col, "right_to_left", idx))
    total, count = 0.0, 0
    for i in range(0, len(triples), batch):
        a, b, t = stack_triples(triples[i:i + batch])
        pred = net.generate_third(a, b)
        total += float(((pred.astype(np.float64) - t) ** 2).sum())
        count += t.size
    return total / count
