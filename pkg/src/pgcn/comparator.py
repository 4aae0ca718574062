"""Pseudo-siamese tile comparator: similarity probability plus a quarter-size difference mask."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from pgcn.autodiff import functional as F
from pgcn.autodiff.nn import BatchNorm2d, Conv2d, Linear, Module
from pgcn.autodiff.optim import Adam
from pgcn.autodiff.tensor import Tensor, concat, no_grad
from pgcn.config import LOSS_VARIANTS, ModelConfig, TrainConfig
from pgcn.data import DefectSpec, inject_defect
from pgcn.errors import ConfigurationError, DimensionError, NumericHealthError
from pgcn.generator import stack_triples, triple_for


class ConvBlock(Module):
    """3×3 conv (stride 1, pad 1) → batch norm → ReLU or sigmoid."""

    def __init__(self, rng: np.random.Generator, cin: int, cout: int, activation: str = "relu"):
        self.conv = Conv2d(rng, cin, cout, 3, 1, 1)
        self.bn = BatchNorm2d(cout)
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return F.relu(y) if self.activation == "relu" else F.sigmoid(y)


class Branch(Module):
    def __init__(self, block1: ConvBlock, block2: ConvBlock, block3: ConvBlock):
        self.block1 = block1
        self.block2 = block2
        self.block3 = block3

    def forward(self, x: Tensor) -> Tensor:
        x = F.max_pool2d(self.block1(x))
        x = F.max_pool2d(self.block2(x))
        return self.block3(x)


@dataclass
class ComparisonResult:
    p: Tensor  # (B,) similarity in [0, 1]
    logit: Tensor  # (B,) pre-sigmoid score
    mask: Tensor  # (B, h/4, w/4) difference mask in [0, 1]


class ComparatorNet(Module):
    """Two conv branches whose third block is one shared object."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, share_third: bool = True):
        w1, w2, w3 = cfg.cmp_widths
        shared = ConvBlock(rng, w2, w3)
        self.branch1 = Branch(ConvBlock(rng, 3, w1), ConvBlock(rng, w1, w2), shared)
        third = shared if share_third else copy.deepcopy(shared)
        self.branch2 = Branch(ConvBlock(rng, 3, w1), ConvBlock(rng, w1, w2), third)
        self.fc1 = Linear(rng, 2 * w3, cfg.cmp_fc_hidden)
        self.fc2 = Linear(rng, cfg.cmp_fc_hidden, 1)
        self.mask1 = ConvBlock(rng, 2 * w3, w2, "relu")
        self.mask2 = ConvBlock(rng, w2, 1, "sigmoid")

    def forward(self, a, b) -> ComparisonResult:
        a = a if isinstance(a, Tensor) else Tensor(a)
        b = b if isinstance(b, Tensor) else Tensor(b)
        if a.shape != b.shape or a.ndim != 4 or a.shape[-2] % 4 or a.shape[-1] % 4:
            raise DimensionError(f"compare: inputs {a.shape} and {b.shape} must match, B×3×H×W with H, W divisible by 4")
        feats = concat([self.branch1(a), self.branch2(b)], axis=1)
        pooled = feats.mean(axis=(2, 3))
        logit = self.fc2(F.relu(self.fc1(pooled))).reshape(-1)
        mask = self.mask2(self.mask1(feats))
        return ComparisonResult(F.sigmoid(logit), logit, mask.reshape(mask.shape[0], *mask.shape[2:]))

    def compare(self, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Inference: ``(P, mask)`` as arrays; accepts single tiles or batches."""
        single = np.ndim(a) == 3
        if single:
            a, b = a[None], b[None]
        was_training = self.training
        self.eval()
        with no_grad():
            res = self.forward(Tensor(a), Tensor(b))
        self.train(was_training)
        p, mask = res.p.data, res.mask.data
        return (p[0], mask[0]) if single else (p, mask)


# -- loss --------------------------------------------------------------------------

@dataclass
class PairExample:
    patch_a: np.ndarray  # original tile (possibly defective)
    patch_b: np.ndarray  # generated tile
    y: int  # +1 matching, -1 non-matching
    gt_mask: np.ndarray  # quarter resolution, float {0, 1}

    def __post_init__(self):
        if self.y not in (-1, 1):
            raise ValueError("y must be -1 or +1")
        if self.y == 1 and np.any(self.gt_mask):
            raise ValueError("matching pair must have an all-zero mask")
        if self.y == -1 and not np.any(self.gt_mask):
            raise ValueError("non-matching pair needs a non-empty mask")


def comparison_loss(result: ComparisonResult, y, gt_mask, variant: str = "corrected", l1: str = "mean") -> Tensor:
    """Batch mean of mask term + hinge term.

    ``paper_verbatim`` uses ``1/(1+e^x)`` on the L1 mask mismatch ``x``;
    ``corrected`` uses ``e^x/(1+e^x)``, which is minimised by a perfect mask.
    ``paper_verbatim_hinge_logit`` is the verbatim mask term with the hinge
    applied to the pre-sigmoid logit.  ``l1="sum"`` sums absolute pixel
    differences; ``"mean"`` averages them.
    """
    if variant not in LOSS_VARIANTS:
        raise ConfigurationError(f"unknown comparison loss variant {variant!r}")
    if l1 not in ("sum", "mean"):
        raise ConfigurationError(f"l1 must be 'sum' or 'mean', got {l1!r}")
    gt = gt_mask if isinstance(gt_mask, Tensor) else Tensor(gt_mask)
    if gt.shape != result.mask.shape:
        raise DimensionError(f"comparison_loss: gt mask {gt.shape} vs predicted {result.mask.shape}")
    yt = Tensor(np.asarray(y, dtype=np.float32).reshape(result.p.shape))
    diff = F.tabs(result.mask - gt)
    axes = tuple(range(1, diff.ndim))
    x = diff.sum(axis=axes) if l1 == "sum" else diff.mean(axis=axes)
    mask_term = F.sigmoid(x) if variant == "corrected" else F.sigmoid(x * -1.0)
    score = result.logit if variant == "paper_verbatim_hinge_logit" else result.p
    hinge = F.relu(1.0 - yt * score)
    return (mask_term + hinge).mean()


# -- training pairs ----------------------------------------------------------------------

def downsample_mask(mask: np.ndarray, factor: int = 4) -> np.ndarray:
    """Max-pool a boolean/float mask by ``factor`` (dims must divide)."""
    h, w = mask.shape
    if h % factor or w % factor:
        raise DimensionError(f"mask {h}×{w} not divisible by {factor}")
    return mask.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3)).astype(np.float32)


GenerateFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def make_pairs(generate: GenerateFn, tile_sets: Sequence[np.ndarray], rng: np.random.Generator, count: int,
               defect_kinds: Sequence[str] = ("blotch", "scratch"), defect_size: tuple[int, int] = (8, 20),
               defect_intensity: float = 0.6, batch: int = 32) -> list[PairExample]:
    """Half matching (true tile, generated tile), half non-matching (defective tile, generated tile).

    Positions and sweep directions are drawn uniformly; ``count`` is rounded
    down to an even number.
    """
    half = count // 2
    n = tile_sets[0].shape[0]
    triples = []
    for _ in range(2 * half):
        idx = int(rng.integers(len(tile_sets)))
        row = int(rng.integers(n))
        if rng.random() < 0.5:
            triples.append(triple_for(tile_sets[idx], row, int(rng.integers(2, n)), "left_to_right", idx))
        else:
            triples.append(triple_for(tile_sets[idx], row, int(rng.integers(0, n - 2)), "right_to_left", idx))
    generated = []
    for i in range(0, len(triples), batch):
        a, b, _ = stack_triples(triples[i:i + batch])
        generated.append(generate(a, b))
    generated = np.concatenate(generated) if generated else np.zeros((0,))
    pairs = []
    for i, (t, gen) in enumerate(zip(triples, generated)):
        target = t.target
        q = (target.shape[1] // 4, target.shape[2] // 4)
        if i < half:
            pairs.append(PairExample(target, gen, 1, np.zeros(q, dtype=np.float32)))
            continue
        kind = defect_kinds[int(rng.integers(len(defect_kinds)))]
        while True:
            spec = DefectSpec(kind, tuple(defect_size), defect_intensity, int(rng.integers(2**31)))
            bad, mask = inject_defect(target, spec)
            if mask.any():
                break
        pairs.append(PairExample(bad, gen, -1, downsample_mask(mask)))
    return pairs


def _stack_pairs(pairs: Sequence[PairExample]):
    return (np.stack([p.patch_a for p in pairs]), np.stack([p.patch_b for p in pairs]),
            np.array([p.y for p in pairs], dtype=np.float32), np.stack([p.gt_mask for p in pairs]))


def train_comparator(net: ComparatorNet, pairs: Sequence[PairExample], train: TrainConfig,
                     rng: np.random.Generator, steps: int | None = None,
                     on_step: Callable[[int, float], None] | None = None,
                     on_checkpoint: Callable[[ComparatorNet], None] | None = None) -> list[float]:
    """Minimise :func:`comparison_loss` over random mini-batches of ``pairs``."""
    steps = train.cmp_steps if steps is None else steps
    opt = Adam(net.named_parameters(), train.cmp_learning_rate)
    losses: list[float] = []
    net.train()
    bs = min(train.cmp_batch_size, len(pairs))
    for step in range(steps):
        idx = rng.choice(len(pairs), size=bs, replace=False)
        a, b, y, gt = _stack_pairs([pairs[i] for i in idx])
        opt.zero_grad()
        loss = comparison_loss(net(Tensor(a), Tensor(b)), y, gt, train.loss_variant, train.mask_l1)
        value = float(loss.data)
        if not np.isfinite(value):
            if on_checkpoint is not None:
                on_checkpoint(net)
            raise NumericHealthError(f"non-finite comparison loss at step {step}")
        loss.backward()
        opt.step()
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
    net.eval()
    return losses


def separation_stats(net: ComparatorNet, pairs: Sequence[PairExample], batch: int = 32) -> dict[str, float]:
    """Mean P per class and mean mask activation inside/outside defect regions."""
    ps, masks = [], []
    for i in range(0, len(pairs), batch):
        a, b, _, _ = _stack_pairs(pairs[i:i + batch])
        p, m = net.compare(a, b)
        ps.append(p)
        masks.append(m)
    p = np.concatenate(ps)
    m = np.concatenate(masks)
    y = np.array([q.y for q in pairs])
    gt = np.stack([q.gt_mask for q in pairs]) > 0
    bad = y == -1
    return {
        "p_match": float(p[~bad].mean()),
        "p_defect": float(p[bad].mean()),
        "mask_inside": float(m[bad][gt[bad]].mean()),
        "mask_outside": float(m[bad][~gt[bad]].mean()),
    }
