"""AUROC, ROC curves, dataset evaluation and the grid-size search."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from pgcn.data import Entry, read_image, read_mask
from pgcn.errors import ConfigurationError, UndefinedMetricError
from pgcn.pipeline import DetectionResult, center_crop

log = logging.getLogger(__name__)


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    return s, y


def auroc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counted half (Mann-Whitney U)."""
    s, y = _check(scores, labels)
    ranks = rankdata(s)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) starting at (0, 0), one point per distinct score."""
    s, y = _check(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return np.r_[0.0, fp / fp[-1]], np.r_[0.0, tp / tp[-1]]


# -- dataset evaluation ---------------------------------------------------------------

@dataclass
class ImageRecord:
    path: str
    label: str
    score: float
    result: DetectionResult | None = None


@dataclass
class EvalResult:
    n: int
    image_auroc: float
    pixel_auroc: float
    records: list[ImageRecord] = field(default_factory=list)
    image_labels: np.ndarray | None = None
    image_scores: np.ndarray | None = None


DetectFn = Callable[[np.ndarray, int], DetectionResult]


def evaluate(detect_fn: DetectFn, entries: Sequence[Entry], n: int, keep_results: bool = False) -> EvalResult:
    """Image AUROC over per-image scores, pixel AUROC over soft maps vs cropped masks."""
    records, pix_scores, pix_labels = [], [], []
    for e in entries:
        img = read_image(e.image)
        res = detect_fn(img, n)
        if e.mask is not None:
            gt = read_mask(e.mask)
        else:
            gt = np.zeros(img.shape[1:], dtype=bool)
        gt = center_crop(gt, n)
        pix_scores.append(res.anomaly_map.reshape(-1))
        pix_labels.append(gt.reshape(-1))
        records.append(ImageRecord(str(e.image), e.label, res.image_score, res if keep_results else None))
    labels = np.array([r.label != "good" for r in records], dtype=int)
    scores = np.array([r.score for r in records])
    image = auroc(scores, labels)
    pixel = auroc(np.concatenate(pix_scores), np.concatenate(pix_labels).astype(int))
    return EvalResult(n, image, pixel, records, labels, scores)


@dataclass
class GridSearchResult:
    best_n: int
    table: list[tuple[int, float, float]]  # (n, image_auroc, pixel_auroc)


def grid_search_n(candidates: Sequence[int], run: Callable[[int], tuple[float, float]]) -> GridSearchResult:
    """Pick the grid size with the best image AUROC; ties go to the smaller n."""
    if not candidates:
        raise ConfigurationError("grid search needs at least one candidate")
    for n in candidates:
        if n < 3:
            raise ConfigurationError(f"grid candidate n={n} must be at least 3")
    table = []
    best_n, best = None, -np.inf
    for n in sorted(set(candidates)):
        img, pix = run(n)
        log.info("grid n=%d image_auroc=%.4f pixel_auroc=%.4f", n, img, pix)
        table.append((n, img, pix))
        if img > best:
            best_n, best = n, img
    return GridSearchResult(best_n, table)
