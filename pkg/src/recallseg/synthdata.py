"""Procedural scenes, the conditional replay generator and its classifier.

Dataset classes are told apart by colour: class ``c`` owns a hue band on
the colour wheel, while backgrounds are low-chroma textures.  Hues of the
lower and upper half of the id range alternate around the wheel, so every
later class sits next to an earlier one and the two are easy to confuse.

The generator speaks its own vocabulary of :class:`GenClass` triples
(shape family, colour band, size band).  Several entries share each
dataset hue and a few distractors match no dataset class, so the
class-mapping step has real work to do.
"""
from __future__ import annotations

import colorsys
import os
import struct
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import BACKGROUND, ClassSet, Dataset, Image, LabelMap, RecallError, Sample, save_dataset, save_image_png

SHAPE_FAMILIES = ("disk", "square", "hbar", "vbar", "diamond")
SIZE_BANDS = {"small": (2, 3), "medium": (4, 5), "large": (6, 7)}
TEXTURES = ("flat", "gradient", "speckle")

_OBJ_SAT = (0.75, 0.95)
_OBJ_VAL = (0.70, 0.95)
_BG_SAT_MAX = 0.12
_BG_VAL = (0.20, 0.80)
_CHROMA_THRESHOLD = 0.30
_PLACEMENT_RETRIES = 200
_MIN_RADIUS = 2


class PlacementFailure(RecallError):
    """Shapes could not be placed without overlap; the canvas is too small."""


@dataclass(frozen=True)
class SceneConfig:
    canvas: tuple[int, int] = (32, 32)
    num_classes: int = 10
    shapes_per_image: tuple[int, int] = (1, 3)
    background_texture: str = "gradient"
    noise_std: float = 0.03
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "canvas", tuple(int(v) for v in self.canvas))
        object.__setattr__(self, "shapes_per_image", tuple(int(v) for v in self.shapes_per_image))
        lo, hi = self.shapes_per_image
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if not (1 <= lo <= hi <= 4):
            raise ValueError("shapes_per_image must be a range inside [1, 4]")
        if self.background_texture not in TEXTURES:
            raise ValueError(f"background_texture must be one of {TEXTURES}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def universe(self) -> ClassSet:
        return ClassSet(range(self.num_classes + 1))


def class_hue(c: int, num_classes: int) -> float:
    """Hue centre (in [0, 1)) of dataset class ``c``."""
    if not 1 <= c <= num_classes:
        raise ValueError(f"class {c} outside 1..{num_classes}")
    half = (num_classes + 1) // 2
    pos = 2 * (c - 1) if c <= half else 2 * (c - 1 - half) + 1
    return pos / num_classes


def _hue_jitter(num_classes: int) -> float:
    return 1.0 / (6.0 * num_classes)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


# --------------------------------------------------------------------------
# rasterisation


def _shape_mask(family: str, radius: int, cy: int, cx: int, shape: tuple[int, int]) -> np.ndarray:
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    dy, dx = yy - cy, xx - cx
    if family == "disk":
        return dy * dy + dx * dx <= radius * radius
    if family == "square":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    half_w = max(1, radius // 2)
    if family == "hbar":
        return (np.abs(dy) <= half_w) & (np.abs(dx) <= radius)
    if family == "vbar":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= half_w)
    if family == "diamond":
        return np.abs(dy) + np.abs(dx) <= radius
    raise ValueError(f"unknown shape family {family!r}")


def _extent(family: str, radius: int) -> tuple[int, int]:
    half_w = max(1, radius // 2)
    if family == "hbar":
        return half_w, radius
    if family == "vbar":
        return radius, half_w
    return radius, radius


def _background(rng: np.random.Generator, shape: tuple[int, int], texture: str) -> np.ndarray:
    h, w = shape

    def grey() -> np.ndarray:
        return _hsv_to_rgb(rng.random(), rng.uniform(0.0, _BG_SAT_MAX), rng.uniform(*_BG_VAL))

    if texture == "flat":
        return np.broadcast_to(grey(), (h, w, 3)).copy()
    if texture == "gradient":
        a, b = grey(), grey()
        angle = rng.uniform(0.0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        proj = np.cos(angle) * (xx / max(w - 1, 1)) + np.sin(angle) * (yy / max(h - 1, 1))
        t = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)
        return a[None, None, :] * (1 - t[..., None]) + b[None, None, :] * t[..., None]
    if texture == "speckle":
        base = np.broadcast_to(grey(), (h, w, 3)).copy()
        dots = rng.random((h, w)) < 0.12
        base[dots] = grey()
        return base
    raise ValueError(f"unknown texture {texture!r}")


def _finish(rng: np.random.Generator, rgb: np.ndarray, noise_std: float) -> Image:
    if noise_std > 0:
        rgb = rgb + rng.normal(0.0, noise_std, size=rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)
    # quantised to 8 bits so images round-trip exactly through PNG
    return Image(np.rint(rgb * 255.0) / 255.0)


def _place(
    rng: np.random.Generator,
    occupied: np.ndarray,
    family: str,
    radius: int,
) -> tuple[np.ndarray, int]:
    """Random non-touching position; shrinks the radius (not below 2) as retries run out."""
    h, w = occupied.shape
    per_radius = _PLACEMENT_RETRIES // 4
    r = radius
    while r >= _MIN_RADIUS:
        ey, ex = _extent(family, r)
        if h >= 2 * ey + 1 and w >= 2 * ex + 1:
            for _ in range(per_radius):
                cy = int(rng.integers(ey, h - ey))
                cx = int(rng.integers(ex, w - ex))
                mask = _shape_mask(family, r, cy, cx, (h, w))
                if not (ndimage.binary_dilation(mask) & occupied).any():
                    return mask, r
        r -= 1
    raise PlacementFailure(f"could not place a {family} of radius {radius} on a {h}x{w} canvas")


def render_scene(cfg: SceneConfig, class_multiset: Sequence[int], seed: int, name: str = "") -> Sample:
    """Render one labelled scene holding one shape per entry of ``class_multiset``."""
    for c in class_multiset:
        if not 1 <= int(c) <= cfg.num_classes:
            raise ValueError(f"class {c} is not a non-background class of this config")
    rng = np.random.default_rng(seed)
    shape = cfg.canvas
    rgb = _background(rng, shape, cfg.background_texture)
    labels = np.full(shape, BACKGROUND, dtype=np.uint8)
    occupied = np.zeros(shape, dtype=bool)
    jitter = _hue_jitter(cfg.num_classes)
    for c in class_multiset:
        family = SHAPE_FAMILIES[int(rng.integers(len(SHAPE_FAMILIES)))]
        band = list(SIZE_BANDS.values())[int(rng.integers(len(SIZE_BANDS)))]
        radius = int(rng.integers(band[0], band[1] + 1))
        mask, _ = _place(rng, occupied, family, radius)
        hue = class_hue(int(c), cfg.num_classes) + rng.uniform(-jitter, jitter)
        color = _hsv_to_rgb(hue, rng.uniform(*_OBJ_SAT), rng.uniform(*_OBJ_VAL))
        rgb[mask] = color
        labels[mask] = int(c)
        occupied |= mask
    return Sample(_finish(rng, rgb, cfg.noise_std), LabelMap(labels), name)


def _draw_classes(rng: np.random.Generator, cfg: SceneConfig) -> list[int]:
    lo, hi = cfg.shapes_per_image
    n = int(rng.integers(lo, hi + 1))
    return [int(c) for c in rng.integers(1, cfg.num_classes + 1, size=n)]


def gen_dataset(cfg: SceneConfig, n_train: int, n_test: int) -> tuple[Dataset, Dataset]:
    """Train/test datasets; each split draws from its own seed stream."""
    if n_train < 1:
        raise ValueError("n_train must be at least 1")
    if n_test < 0:
        raise ValueError("n_test must be non-negative")
    splits = []
    for split_id, (tag, n) in enumerate((("train", n_train), ("test", n_test))):
        samples = []
        for i in range(n):
            ss = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(split_id, i))
            draw_seed, render_seed = ss.generate_state(2, dtype=np.uint64)
            classes = _draw_classes(np.random.default_rng(int(draw_seed)), cfg)
            samples.append(render_scene(cfg, classes, int(render_seed), name=f"{tag}_{i:05d}"))
        splits.append(Dataset(tuple(samples), cfg.universe, tag))
    return splits[0], splits[1]


def write_fixture(train: Dataset, test: Dataset, directory: str | os.PathLike) -> None:
    save_dataset(train, os.path.join(directory, "train"))
    save_dataset(test, os.path.join(directory, "test"))


def web_image(cfg: SceneConfig, c: int, i: int, seed: int = 0, canvas: tuple[int, int] = (40, 48)) -> Image:
    """The ``i``-th weakly labelled "web" image for class ``c``.

    It shows ``c`` plus, half of the time, one unrelated class, on a canvas
    of a different size so the retrieval path must resize and crop.
    """
    web_cfg = replace(cfg, canvas=canvas, shapes_per_image=(1, 2))
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(2, c, i))
    draw_seed, render_seed = ss.generate_state(2, dtype=np.uint64)
    rng = np.random.default_rng(int(draw_seed))
    classes = [c]
    if rng.random() < 0.5:
        classes.append(int(rng.integers(1, cfg.num_classes + 1)))
    return render_scene(web_cfg, classes, int(render_seed)).image


def make_retrieval_fixture(
    cfg: SceneConfig,
    directory: str | os.PathLike,
    class_names: dict[int, str],
    per_class: int,
    seed: int = 0,
    canvas: tuple[int, int] = (40, 48),
) -> None:
    """Write ``per_class`` web images per class into one folder per class query."""
    for c, query in sorted(class_names.items()):
        folder = os.path.join(directory, query)
        os.makedirs(folder, exist_ok=True)
        for i in range(per_class):
            save_image_png(web_image(cfg, c, i, seed, canvas), os.path.join(folder, f"{i:04d}.png"))


# --------------------------------------------------------------------------
# conditional generator


@dataclass(frozen=True)
class GenClass:
    id: int
    family: str
    hue: float
    size_band: str
    sat_band: tuple[float, float] = _OBJ_SAT
    val_band: tuple[float, float] = _OBJ_VAL
    hue_jitter: float = 0.015


@dataclass(frozen=True)
class GenVocabulary:
    classes: tuple[GenClass, ...]
    canvas: tuple[int, int] = (32, 32)
    noise_std: float = 0.03

    def __len__(self) -> int:
        return len(self.classes)

    def __getitem__(self, i: int) -> GenClass:
        return self.classes[i]


def default_vocabulary(num_classes: int = 10, size: int = 24, canvas=(32, 32), noise_std=0.03, seed=7) -> GenVocabulary:
    """Two shape/size variants per dataset hue plus dark distractors, ids shuffled."""
    if size < num_classes:
        raise ValueError("the generator vocabulary must be at least as large as the dataset class list")
    rng = np.random.default_rng(seed)
    per_class = 2 if size >= 2 * num_classes else 1
    jitter = _hue_jitter(num_classes)
    entries = []
    for c in range(1, num_classes + 1):
        hue = class_hue(c, num_classes)
        families = rng.permutation(len(SHAPE_FAMILIES))[:per_class]
        for fam, band in zip(families, ("small", "large")):
            entries.append(dict(family=SHAPE_FAMILIES[fam], hue=hue, size_band=band, hue_jitter=jitter))
    n_distractors = size - len(entries)
    for k in range(n_distractors):
        hue = (k + 0.25) / n_distractors
        entries.append(
            dict(
                family=SHAPE_FAMILIES[k % len(SHAPE_FAMILIES)],
                hue=hue,
                size_band="medium",
                val_band=(0.42, 0.50),
                hue_jitter=jitter,
            )
        )
    order = rng.permutation(len(entries))
    classes = tuple(GenClass(id=i, **entries[j]) for i, j in enumerate(order))
    return GenVocabulary(classes, tuple(canvas), noise_std)


def conditional_generate(vocab: GenVocabulary, c_gen: GenClass | int, seed: int) -> Image:
    """One unlabeled image holding a single instance of ``c_gen``."""
    g = vocab[c_gen] if isinstance(c_gen, (int, np.integer)) else c_gen
    rng = np.random.default_rng(seed)
    texture = TEXTURES[int(rng.integers(len(TEXTURES)))]
    rgb = _background(rng, vocab.canvas, texture)
    lo, hi = SIZE_BANDS[g.size_band]
    radius = int(rng.integers(lo, hi + 1))
    mask, _ = _place(rng, np.zeros(vocab.canvas, dtype=bool), g.family, radius)
    hue = g.hue + rng.uniform(-g.hue_jitter, g.hue_jitter)
    rgb[mask] = _hsv_to_rgb(hue, rng.uniform(*g.sat_band), rng.uniform(*g.val_band))
    return _finish(rng, rgb, vocab.noise_std)


# --------------------------------------------------------------------------
# generator-space classifier

_GRID_WEIGHT = 0.5
_SHAPE_WEIGHT = 2.0
_COLOR_WEIGHT = 8.0


def image_features(image: Image) -> np.ndarray:
    """3x3 grid of mean RGB, then area fraction, log aspect ratio and mean RGB of the largest coloured blob."""
    px = image.pixels
    h, w, _ = px.shape
    grid = []
    for rows in np.array_split(np.arange(h), 3):
        for cols in np.array_split(np.arange(w), 3):
            grid.append(px[np.ix_(rows, cols)].reshape(-1, 3).mean(axis=0))
    chroma = px.max(axis=2) - px.min(axis=2)
    blobs, n = ndimage.label(chroma > _CHROMA_THRESHOLD)
    if n == 0:
        area, log_aspect, color = 0.0, 0.0, np.zeros(3)
    else:
        sizes = np.bincount(blobs.ravel())[1:]
        biggest = blobs == (int(np.argmax(sizes)) + 1)
        ys, xs = np.nonzero(biggest)
        area = biggest.sum() / (h * w)
        log_aspect = np.log((ys.max() - ys.min() + 1) / (xs.max() - xs.min() + 1))
        color = px[biggest].mean(axis=0)
    return np.concatenate(
        [
            _GRID_WEIGHT * np.concatenate(grid),
            _SHAPE_WEIGHT * np.array([10.0 * area, log_aspect]),
            _COLOR_WEIGHT * color,
        ]
    )


@dataclass(frozen=True, eq=False)
class GenClassifier:
    centroids: np.ndarray
    temperature: float = 0.25

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        c = np.array(self.centroids, dtype=np.float64)
        c.flags.writeable = False
        object.__setattr__(self, "centroids", c)

    @property
    def num_classes(self) -> int:
        return self.centroids.shape[0]


def build_classifier(vocab: GenVocabulary, prototypes: int = 8, temperature: float = 0.25) -> GenClassifier:
    centroids = []
    for g in vocab.classes:
        feats = [image_features(conditional_generate(vocab, g, prototype_seed(g.id, j))) for j in range(prototypes)]
        centroids.append(np.mean(feats, axis=0))
    return GenClassifier(np.array(centroids), temperature)


def prototype_seed(gen_id: int, j: int) -> int:
    return 1_000_003 * (gen_id + 1) + j


def classify(clf: GenClassifier, image: Image) -> np.ndarray:
    """Softmax over negative centroid distances divided by the temperature."""
    f = image_features(image)
    d = np.sqrt(((clf.centroids - f) ** 2).sum(axis=1))
    z = -d / clf.temperature
    z -= z.max()
    p = np.exp(z)
    return p / p.sum()


def serialize_classifier(clf: GenClassifier) -> bytes:
    k, d = clf.centroids.shape
    return struct.pack("<4sHII d", b"RCGC", 1, k, d, clf.temperature) + clf.centroids.astype("<f8").tobytes()


def serialize_vocabulary(vocab: GenVocabulary) -> bytes:
    """Fixed-width table of generator class parameters (its storage cost)."""
    out = [struct.pack("<4sHIII", b"RCGV", 1, len(vocab), vocab.canvas[0], vocab.canvas[1])]
    for g in vocab.classes:
        out.append(
            struct.pack(
                "<IBBddddddd",
                g.id,
                SHAPE_FAMILIES.index(g.family),
                list(SIZE_BANDS).index(g.size_band),
                g.hue,
                g.hue_jitter,
                g.sat_band[0],
                g.sat_band[1],
                g.val_band[0],
                g.val_band[1],
                vocab.noise_std,
            )
        )
    return b"".join(out)


FEATURE_DIM = 9 * 3 + 2 + 3


def classifier_nbytes(num_gen_classes: int, feature_dim: int = FEATURE_DIM) -> int:
    return struct.calcsize("<4sHII d") + 8 * num_gen_classes * feature_dim


def vocabulary_nbytes(num_gen_classes: int) -> int:
    return struct.calcsize("<4sHIII") + num_gen_classes * struct.calcsize("<IBBddddddd")
