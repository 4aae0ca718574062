"""MVTec-layout ingestion, synthetic periodic textures and defect injection.

Images are float32 ``3×H×W`` arrays in [0, 1]; masks are boolean ``H×W``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from PIL import Image

from pgcn.errors import ConfigurationError, IngestionError

log = logging.getLogger(__name__)

FAMILIES = ("sine_grating", "checker", "tiled_motif")
DEFECT_KINDS = ("blotch", "scratch", "paste")


# -- image I/O ---------------------------------------------------------------------

def read_image(path: str | Path) -> np.ndarray:
    """Decode to ``3×H×W`` float32 in [0, 1]; gray inputs are replicated to RGB."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: str | Path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(np.transpose(img, (1, 2, 0)))).save(path)


def write_gray(path: str | Path, gray: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(gray), mode="L").save(path)


# -- MVTec ingestion --------------------------------------------------------------------

@dataclass(frozen=True)
class Entry:
    image: Path
    label: str  # "good" or the defect kind
    mask: Path | None = None

    @property
    def is_defect(self) -> bool:
        return self.label != "good"


@dataclass
class DatasetIndex:
    split: Literal["train", "test"]
    entries: list[Entry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


def _pngs(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() == ".png") if folder.is_dir() else []


def load_mvtec(root: str | Path, category: str) -> tuple[DatasetIndex, DatasetIndex]:
    """Index ``category/{train,test,ground_truth}`` in lexicographic path order.

    Raises :class:`IngestionError` listing every defect image without a mask.
    """
    base = Path(root) / category
    if not base.is_dir():
        raise IngestionError(f"no category directory at {base}")
    train = DatasetIndex("train", [Entry(p, "good") for p in _pngs(base / "train" / "good")])
    stray = sorted(d.name for d in (base / "train").iterdir() if d.is_dir() and d.name != "good") \
        if (base / "train").is_dir() else []
    if stray:
        raise IngestionError(f"train split must contain only 'good' images, found {stray}")
    test = DatasetIndex("test")
    missing = []
    test_dir = base / "test"
    kinds = sorted(d.name for d in test_dir.iterdir() if d.is_dir()) if test_dir.is_dir() else []
    for kind in kinds:
        for img in _pngs(test_dir / kind):
            if kind == "good":
                test.entries.append(Entry(img, "good"))
                continue
            mask = base / "ground_truth" / kind / f"{img.stem}_mask.png"
            if not mask.is_file():
                missing.append(f"{kind}/{img.stem}")
                continue
            test.entries.append(Entry(img, kind, mask))
    if missing:
        raise IngestionError(f"defect images without ground-truth mask: {', '.join(missing)}")
    return train, test


# -- synthetic textures ------------------------------------------------------------------

@dataclass
class TextureSpec:
    family: str = "sine_grating"
    period: int = 16
    orientation: float = 0.0
    palette: Sequence[Sequence[float]] = ((0.2, 0.3, 0.5), (0.8, 0.7, 0.4))
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown texture family {self.family!r}")
        if not 8 <= self.period <= 64:
            raise ConfigurationError(f"texture period {self.period} outside [8, 64]")
        if not 0.0 <= self.noise_sigma <= 0.1:
            raise ConfigurationError(f"noise_sigma {self.noise_sigma} outside [0, 0.1]")
        if len(self.palette) not in (2, 3):
            raise ConfigurationError("palette needs two or three colours")


def synth_texture(spec: TextureSpec, dims: tuple[int, int], seed: int) -> np.ndarray:
    """Render a periodic texture with a seed-dependent phase.

    With orientation 0 the pattern repeats every ``period`` pixels along x
    (and along y for the checker and motif families).
    """
    h, w = dims
    if min(h, w) < 2 * spec.period:
        raise ConfigurationError(f"image {h}×{w} smaller than two periods of {spec.period}")
    rng = np.random.default_rng(seed)
    palette = np.asarray(spec.palette, dtype=np.float64)
    p = spec.period
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    th = math.radians(spec.orientation)
    u = xx * math.cos(th) + yy * math.sin(th)
    v = -xx * math.sin(th) + yy * math.cos(th)
    off_u, off_v = rng.integers(0, p, size=2)
    if spec.family == "sine_grating":
        t = 0.5 + 0.5 * np.sin(2 * math.pi * (u + off_u) / p)
        img = _blend(palette, t)
    elif spec.family == "checker":
        half = p / 2
        t = (np.floor((u + off_u) / half) + np.floor((v + off_v) / half)) % 2
        img = palette[t.astype(int)].transpose(2, 0, 1)
    else:
        motif_rng = np.random.default_rng([p, *np.round(palette * 1000).astype(int).ravel().tolist()])
        motif = _motif(motif_rng, p, palette)
        k = int(round(spec.orientation / 90.0)) % 4
        motif = np.rot90(motif, k, axes=(1, 2))
        reps = (1, h // p + 2, w // p + 2)
        big = np.tile(motif, reps)
        img = big[:, off_v:off_v + h, off_u:off_u + w]
    if spec.noise_sigma > 0:
        img = img + rng.normal(0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def _blend(palette: np.ndarray, t: np.ndarray) -> np.ndarray:
    if len(palette) == 2:
        out = palette[0][:, None, None] * (1 - t) + palette[1][:, None, None] * t
    else:
        lo = np.clip(2 * t, 0, 1)
        hi = np.clip(2 * t - 1, 0, 1)
        out = (palette[0][:, None, None] * (1 - lo) + palette[1][:, None, None] * (lo - hi)
               + palette[2][:, None, None] * hi)
    return out


def _motif(rng: np.random.Generator, p: int, palette: np.ndarray) -> np.ndarray:
    """One ``3×p×p`` cell: a disc and a bar in palette colours over the first colour."""
    yy, xx = np.mgrid[0:p, 0:p]
    cell = np.empty((3, p, p))
    cell[:] = palette[0][:, None, None]
    cy, cx = rng.uniform(0.3, 0.7, size=2) * p
    r = rng.uniform(0.15, 0.3) * p
    disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    cell[:, disc] = palette[1][:, None]
    bar_row = int(rng.integers(0, p))
    bar = np.abs(yy - bar_row) < max(1, p // 8)
    cell[:, bar & ~disc] = palette[-1][:, None]
    return cell


# -- defects -----------------------------------------------------------------------------

@dataclass
class DefectSpec:
    kind: str = "blotch"
    size_range: tuple[int, int] = (12, 24)
    intensity: float = 0.6
    seed: int = 0
    center: tuple[int, int] | None = None  # (y, x); random when omitted

    def __post_init__(self):
        if self.kind not in DEFECT_KINDS:
            raise ConfigurationError(f"unknown defect kind {self.kind!r}")
        if not -1.0 <= self.intensity <= 1.0:
            raise ConfigurationError(f"defect intensity {self.intensity} outside [-1, 1]")
        lo, hi = self.size_range
        if lo < 0 or hi < lo:
            raise ConfigurationError(f"invalid defect size range {self.size_range}")


def _shift_pixels(img: np.ndarray, region: np.ndarray, shift: float) -> np.ndarray:
    """Move each pixel of ``region`` by ``±shift``, whichever direction changes it more."""
    out = img.copy()
    vals = img[:, region]
    up = np.clip(vals + shift, 0, 1)
    down = np.clip(vals - shift, 0, 1)
    use_up = np.abs(up - vals).sum(0) >= np.abs(down - vals).sum(0)
    out[:, region] = np.where(use_up, up, down)
    return out


def inject_defect(image: np.ndarray, spec: DefectSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(defective image, mask)``; the mask is exactly the set of changed pixels."""
    _, h, w = image.shape
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.size_range
    size = int(rng.integers(lo, hi + 1)) if hi > lo else lo
    if size == 0 or spec.intensity == 0:
        return image.copy(), np.zeros((h, w), dtype=bool)
    if size > min(h, w):
        raise ConfigurationError(f"defect size {size} exceeds image {h}×{w}")
    yy, xx = np.mgrid[0:h, 0:w]
    half = size / 2.0
    if spec.center is not None:
        cy, cx = spec.center
    else:
        cy = rng.uniform(half, h - half)
        cx = rng.uniform(half, w - half)
    if spec.kind == "blotch":
        # size is the diameter; the 0.3 px inset keeps the raster area below πr²
        rad = max(half - 0.3, 0.0)
        region = (yy - cy + 0.5) ** 2 + (xx - cx + 0.5) ** 2 <= rad * rad
        out = _shift_pixels(image, region, abs(spec.intensity))
    elif spec.kind == "scratch":
        angle = rng.uniform(0, math.pi)
        dy, dx = math.sin(angle), math.cos(angle)
        py, px = yy + 0.5 - cy, xx + 0.5 - cx
        along = py * dy + px * dx
        across = np.abs(-py * dx + px * dy)
        width = max(2.0, size / 8.0)
        region = (np.abs(along) <= half) & (across <= width / 2)
        out = _shift_pixels(image, region, abs(spec.intensity))
    else:
        # cut-paste: move a square patch from elsewhere in the image
        s = size
        y0, x0 = int(round(cy - half)), int(round(cx - half))
        y0, x0 = min(max(y0, 0), h - s), min(max(x0, 0), w - s)
        out = image.copy()
        # on a periodic texture a paste can land in phase; redraw a few times
        for _ in range(16):
            sy, sx = int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1))
            patch = image[:, sy:sy + s, sx:sx + s]
            if spec.intensity < 0:
                patch = 1.0 - patch
            out[:, y0:y0 + s, x0:x0 + s] = patch[:, ::-1, :] if rng.random() < 0.5 else patch[:, :, ::-1]
            if np.any(out != image):
                break
    mask = np.any(out != image, axis=0)
    out = np.where(mask[None], out, image).astype(np.float32)
    return out, mask


# -- synthetic dataset tree ---------------------------------------------------------------

def texture_specs(raw: Sequence[dict]) -> list[TextureSpec]:
    return [TextureSpec(**{**d, "palette": tuple(tuple(c) for c in d.get("palette", TextureSpec.palette))})
            for d in raw]


def write_synthetic_dataset(root: str | Path, category: str, textures: Sequence[TextureSpec], *,
                            image_size: int, n_train: int, n_test_good: int, n_test_defect: int,
                            defect_kinds: Sequence[str], defect_size: tuple[int, int],
                            defect_intensity: float, seed: int) -> Path:
    """Write an MVTec-style tree.  Images cycle through ``textures``; defects through ``defect_kinds``."""
    base = Path(root) / category
    dims = (image_size, image_size)
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(n_train + n_test_good + 2 * n_test_defect)
    k = 0
    for i in range(n_train):
        write_image(base / "train" / "good" / f"{i:03d}.png", synth_texture(textures[i % len(textures)], dims, int(seeds[k])))
        k += 1
    (base / "test" / "good").mkdir(parents=True, exist_ok=True)
    for i in range(n_test_good):
        write_image(base / "test" / "good" / f"{i:03d}.png", synth_texture(textures[i % len(textures)], dims, int(seeds[k])))
        k += 1
    for i in range(n_test_defect):
        kind = defect_kinds[i % len(defect_kinds)]
        img = synth_texture(textures[i % len(textures)], dims, int(seeds[k]))
        spec = DefectSpec(kind, tuple(defect_size), defect_intensity, int(seeds[k + 1]))
        k += 2
        bad, mask = inject_defect(img, spec)
        write_image(base / "test" / kind / f"{i:03d}.png", bad)
        write_gray(base / "ground_truth" / kind / f"{i:03d}_mask.png", mask.astype(np.float32))
    return base
