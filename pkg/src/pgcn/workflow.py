"""Glue between datasets, the two networks and the detector, shared by the CLI and tests."""
from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np

from pgcn.autodiff.functional import resize_array
from pgcn.comparator import ComparatorNet, make_pairs, train_comparator
from pgcn.config import Config
from pgcn.data import Entry, read_image
from pgcn.generator import GenerationNet, train_generation
from pgcn.pipeline import Detector, split_grid

log = logging.getLogger(__name__)


def seeded_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent streams for each stochastic stage, all derived from one seed."""
    names = ("gen_init", "gen_train", "cmp_init", "cmp_pairs", "cmp_train")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {k: np.random.default_rng(s) for k, s in zip(names, children)}


def tile_set(image: np.ndarray, n: int, resolution: int) -> np.ndarray:
    """``n×n×3×R×R`` network-resolution tiles of one image."""
    tiles = split_grid(image, n).tiles
    if tiles.shape[-1] != resolution or tiles.shape[-2] != resolution:
        tiles = resize_array(tiles, resolution, resolution)
    return np.ascontiguousarray(tiles, dtype=np.float32)


def tile_sets(images: Sequence[np.ndarray] | Sequence[Entry], n: int, resolution: int) -> list[np.ndarray]:
    out = []
    for img in images:
        if isinstance(img, Entry):
            img = read_image(img.image)
        out.append(tile_set(img, n, resolution))
    return out


def fit_generator(cfg: Config, sets: Sequence[np.ndarray], on_step: Callable[[int, float], None] | None = None,
                  on_checkpoint=None) -> tuple[GenerationNet, list[float]]:
    rngs = seeded_rngs(cfg.train.seed)
    net = GenerationNet(cfg.model, rngs["gen_init"])
    losses = train_generation(net, sets, cfg.train, rngs["gen_train"], on_step=on_step, on_checkpoint=on_checkpoint)
    return net, losses


def fit_comparator(cfg: Config, generator: GenerationNet, sets: Sequence[np.ndarray],
                   on_step: Callable[[int, float], None] | None = None,
                   on_checkpoint=None) -> tuple[ComparatorNet, list[float]]:
    """Train the comparator on pairs built from a frozen generator."""
    rngs = seeded_rngs(cfg.train.seed)
    generator.eval()
    d = cfg.data
    pairs = make_pairs(generator.generate_third, sets, rngs["cmp_pairs"], cfg.train.cmp_pairs,
                       d.defect_kinds, tuple(d.defect_size), d.defect_intensity)
    net = ComparatorNet(cfg.model, rngs["cmp_init"])
    losses = train_comparator(net, pairs, cfg.train, rngs["cmp_train"], on_step=on_step,
                              on_checkpoint=on_checkpoint)
    return net, losses


def detector(cfg: Config, generator: GenerationNet, comparator: ComparatorNet) -> Detector:
    return Detector(generator, comparator, cfg.infer.tau)
