"""Full-image detection: grid split, two row sweeps, thresholding and intersection."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Literal

import numpy as np

from pgcn.autodiff.functional import resize_array
from pgcn.errors import ConfigurationError, DimensionError

Direction = Literal["left_to_right", "right_to_left"]
DIRECTIONS: tuple[Direction, Direction] = ("left_to_right", "right_to_left")

NORMAL, ABNORMAL, UNDEFINED = 0, 1, -1

# generate(a, b) -> predicted tiles; compare(original, predicted) -> (P, quarter mask)
GenerateFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
CompareFn = Callable[[np.ndarray, np.ndarray], "tuple[np.ndarray, np.ndarray]"]


@dataclass
class TileGrid:
    n: int
    tile_h: int
    tile_w: int
    tiles: np.ndarray  # n×n×3×tile_h×tile_w, row-major
    offset: tuple[int, int]  # (top, left) of the crop in the source image

    @property
    def shape(self) -> tuple[int, int]:
        return self.n * self.tile_h, self.n * self.tile_w

    def tile(self, index: int) -> np.ndarray:
        """1-based raster index, as in a 1..n² numbering."""
        r, c = divmod(index - 1, self.n)
        return self.tiles[r, c]

    def assemble(self) -> np.ndarray:
        n, th, tw = self.n, self.tile_h, self.tile_w
        return self.tiles.transpose(2, 0, 3, 1, 4).reshape(3, n * th, n * tw)


def crop_box(h: int, w: int, n: int) -> tuple[int, int, int, int]:
    """Center crop ``(top, left, height, width)`` to the largest dims divisible by ``n``."""
    ch, cw = h - h % n, w - w % n
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def center_crop(arr: np.ndarray, n: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    top, left, ch, cw = crop_box(h, w, n)
    return arr[..., top:top + ch, left:left + cw]


def split_grid(image: np.ndarray, n: int) -> TileGrid:
    if n < 3:
        raise ConfigurationError(f"grid n={n} must be at least 3: each sweep needs two predecessors")
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"split_grid expects a 3×H×W image, got {image.shape}")
    h, w = image.shape[1:]
    if h < n or w < n:
        raise DimensionError(f"image {h}×{w} is smaller than a {n}×{n} grid")
    top, left, ch, cw = crop_box(h, w, n)
    th, tw = ch // n, cw // n
    crop = image[:, top:top + ch, left:left + cw]
    tiles = crop.reshape(3, n, th, n, tw).transpose(1, 3, 0, 2, 4)
    return TileGrid(n, th, tw, np.ascontiguousarray(tiles, dtype=np.float32), (top, left))


@dataclass
class DirectionalMaps:
    direction: Direction
    prob: np.ndarray  # n×n, NaN where undefined
    cls: np.ndarray  # n×n int8: NORMAL, ABNORMAL or UNDEFINED
    canvas: np.ndarray  # cropped-image-sized mask, NaN where undefined

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.prob)


def defined_columns(n: int, direction: Direction) -> range:
    """0-based columns a sweep can predict."""
    return range(2, n) if direction == "left_to_right" else range(0, n - 2)


def _resize_batch(x: np.ndarray, res: int | None) -> np.ndarray:
    if res is None:
        return x
    return resize_array(x, res, res)


def sweep(grid: TileGrid, direction: Direction, generate: GenerateFn, compare: CompareFn,
          resolution: int | None = None, batch: int = 32) -> DirectionalMaps:
    """Predict every tile that has two same-row predecessors in sweep order and compare.

    Right-to-left predictions run on horizontally mirrored tiles; the mask is
    flipped back before pasting.  ``resolution`` resizes tiles to the network
    input size (``None`` leaves them untouched).
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    n, th, tw = grid.n, grid.tile_h, grid.tile_w
    t = grid.tiles
    if direction == "right_to_left":
        t = t[:, ::-1, ..., ::-1]  # mirror the whole row: column j becomes n-1-j
    positions = [(r, c) for r in range(n) for c in range(2, n)]
    prob = np.full((n, n), np.nan, dtype=np.float32)
    canvas = np.full(grid.shape, np.nan, dtype=np.float32)
    for i in range(0, len(positions), batch):
        chunk = positions[i:i + batch]
        a = _resize_batch(np.stack([t[r, c - 2] for r, c in chunk]), resolution)
        b = _resize_batch(np.stack([t[r, c - 1] for r, c in chunk]), resolution)
        orig = _resize_batch(np.stack([t[r, c] for r, c in chunk]), resolution)
        pred = generate(a, b)
        p, masks = compare(orig, pred)
        for (r, c), pk, mk in zip(chunk, np.asarray(p).reshape(-1), masks):
            col = c if direction == "left_to_right" else n - 1 - c
            mk = resize_array(np.asarray(mk, dtype=np.float32), th, tw)
            if direction == "right_to_left":
                mk = mk[:, ::-1]
            prob[r, col] = pk
            canvas[r * th:(r + 1) * th, col * tw:(col + 1) * tw] = np.clip(mk, 0.0, 1.0)
    cls = np.where(np.isnan(prob), UNDEFINED, NORMAL).astype(np.int8)
    return DirectionalMaps(direction, prob, cls, canvas)


def threshold_classify(maps: DirectionalMaps, tau: float) -> DirectionalMaps:
    """Abnormal where P < tau, normal where P ≥ tau, undefined stays undefined."""
    if not 0.0 < tau < 1.0:
        raise ConfigurationError(f"tau={tau} must lie in (0, 1)")
    cls = np.full(maps.prob.shape, UNDEFINED, dtype=np.int8)
    d = maps.defined
    cls[d] = np.where(maps.prob[d] < tau, ABNORMAL, NORMAL)
    return replace(maps, cls=cls)


@dataclass
class DetectionResult:
    final_cls: np.ndarray  # n×n uint8, 1 = abnormal
    anomaly_map: np.ndarray  # cropped-image-sized soft map in [0, 1]
    image_score: float
    tile_scores: np.ndarray  # n×n combined anomaly per tile
    left: DirectionalMaps | None = None
    right: DirectionalMaps | None = None


def _not_inherited(cls: np.ndarray, direction: Direction) -> np.ndarray:
    """Abnormal verdicts whose two conditioning tiles were not themselves flagged."""
    abn = cls == ABNORMAL
    upstream = np.zeros_like(abn)
    if direction == "left_to_right":
        upstream[:, 1:] |= abn[:, :-1]
        upstream[:, 2:] |= abn[:, :-2]
    else:
        upstream[:, :-1] |= abn[:, 1:]
        upstream[:, :-2] |= abn[:, 2:]
    return abn & ~upstream


def intersect(left: DirectionalMaps, right: DirectionalMaps) -> DetectionResult:
    """Combine the two directional verdicts into one tile map plus soft maps.

    Where both directions classify a tile, it is abnormal only if both say
    so.  Where only one does (row borders), its abnormal verdict is kept
    unless one of the two tiles it was predicted from was flagged by the same
    direction, since then the error may simply have been carried forward.
    Soft tile scores and mask canvases are combined by minimum.
    """
    if left.prob.shape != right.prob.shape or left.canvas.shape != right.canvas.shape:
        raise DimensionError(f"intersect: grids differ, {left.prob.shape}/{left.canvas.shape} "
                             f"vs {right.prob.shape}/{right.canvas.shape}")
    lc, rc = left.cls, right.cls
    l_def, r_def = lc != UNDEFINED, rc != UNDEFINED
    final = np.where(l_def & r_def, (lc == ABNORMAL) & (rc == ABNORMAL),
                     np.where(l_def, _not_inherited(lc, left.direction),
                              r_def & _not_inherited(rc, right.direction))).astype(np.uint8)
    with np.errstate(invalid="ignore"):
        tile_scores = np.fmin(1.0 - left.prob, 1.0 - right.prob)
        canvas = np.fmin(left.canvas, right.canvas)
    tile_scores = np.nan_to_num(tile_scores, nan=0.0)
    anomaly = np.clip(np.nan_to_num(canvas, nan=0.0), 0.0, 1.0)
    return DetectionResult(final, anomaly, float(tile_scores.max()), tile_scores, left, right)


def detect(image: np.ndarray, generate: GenerateFn, compare: CompareFn, n: int, tau: float = 0.5,
           resolution: int | None = None) -> DetectionResult:
    grid = split_grid(image, n)
    maps = [threshold_classify(sweep(grid, d, generate, compare, resolution), tau) for d in DIRECTIONS]
    return intersect(*maps)


class Detector:
    """Binds trained networks to :func:`detect`."""

    def __init__(self, generator, comparator, tau: float = 0.5):
        self.generator = generator
        self.comparator = comparator
        self.tau = tau
        self.resolution = generator.cfg.tile_resolution

    def __call__(self, image: np.ndarray, n: int) -> DetectionResult:
        self.generator.eval()
        self.comparator.eval()
        return detect(image, self.generator.generate_third, self.comparator.compare, n, self.tau, self.resolution)
