"""Domain data model: class sets, images, label maps, samples and datasets.

Every type here is immutable once built; numpy buffers are flagged read-only.
Samples interchange on disk as PNG pairs (``<name>.png`` RGB and
``<name>.labels.png`` 8-bit grayscale holding the class id).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image as PILImage

BACKGROUND = 0


class RecallError(Exception):
    """Base class for all errors raised by this package."""


class InvalidLabel(RecallError):
    pass


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class ClassSet:
    """Immutable ordered set of class ids; iterates in ascending id order."""

    __slots__ = ("_ids", "_set")

    def __init__(self, ids: Iterable[int] = ()):
        members = sorted({int(i) for i in ids})
        if members and members[0] < 0:
            raise InvalidLabel(f"class ids must be non-negative, got {members[0]}")
        self._ids = tuple(members)
        self._set = frozenset(members)

    @property
    def ids(self) -> tuple[int, ...]:
        return self._ids

    def __iter__(self) -> Iterator[int]:
        return iter(self._ids)

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, c: object) -> bool:
        return c in self._set

    def __or__(self, other: Iterable[int]) -> "ClassSet":
        return ClassSet(self._set | set(other))

    def __and__(self, other: Iterable[int]) -> "ClassSet":
        return ClassSet(self._set & set(other))

    def __sub__(self, other: Iterable[int]) -> "ClassSet":
        return ClassSet(self._set - set(other))

    def __le__(self, other: "ClassSet") -> bool:
        return self._set <= set(other)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, ClassSet):
            return self._ids == other._ids
        if isinstance(other, (set, frozenset)):
            return self._set == other
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self._ids)

    def __repr__(self) -> str:
        return "ClassSet({" + ", ".join(map(str, self._ids)) + "})"

    def isdisjoint(self, other: Iterable[int]) -> bool:
        return self._set.isdisjoint(other)

    def foreground(self) -> "ClassSet":
        return ClassSet(c for c in self._ids if c != BACKGROUND)

    def to_array(self) -> np.ndarray:
        return np.array(self._ids, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class Image:
    """RGB raster, H x W x 3 floats in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if px is self.pixels:
            px = px.copy()
        object.__setattr__(self, "pixels", _freeze(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "Image":
        return cls(np.asarray(arr, dtype=np.float64) / 255.0)

    def to_uint8(self) -> np.ndarray:
        return np.rint(self.pixels * 255.0).astype(np.uint8)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel class ids, stored one unsigned byte per pixel."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError(f"label map must be HxW, got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() > 255):
            raise InvalidLabel("class ids must fit in one unsigned byte")
        lab = lab.astype(np.uint8, copy=True)
        object.__setattr__(self, "labels", _freeze(lab))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape  # type: ignore[return-value]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelMap):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)

    __hash__ = None  # type: ignore[assignment]


def present_classes(labels: LabelMap) -> ClassSet:
    return ClassSet(np.unique(labels.labels).tolist())


def mask_to(labels: LabelMap, keep: Iterable[int], b: int = BACKGROUND) -> LabelMap:
    """Keep pixels whose class is in ``keep``; every other pixel becomes ``b``."""
    keep_ids = np.array(sorted(set(keep)), dtype=np.int64)
    lab = labels.labels
    out = np.where(np.isin(lab, keep_ids), lab, b)
    return LabelMap(out)


@dataclass(frozen=True, eq=False)
class Sample:
    image: Image
    labels: LabelMap
    name: str = ""
    present: ClassSet = field(init=False, repr=False)

    def __post_init__(self):
        if (self.image.height, self.image.width) != self.labels.shape:
            raise ValueError(
                f"image {self.image.height}x{self.image.width} and labels "
                f"{self.labels.shape[0]}x{self.labels.shape[1]} differ in size"
            )
        object.__setattr__(self, "present", present_classes(self.labels))

    @property
    def present_classes(self) -> ClassSet:
        return self.present

    def with_labels(self, labels: LabelMap) -> "Sample":
        return Sample(self.image, labels, self.name)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return self.name == other.name and self.image == other.image and self.labels == other.labels

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    class_universe: ClassSet
    split_tag: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.split_tag not in ("train", "test"):
            raise ValueError(f"split_tag must be 'train' or 'test', got {self.split_tag!r}")
        for s in self.samples:
            if not s.present <= self.class_universe:
                raise InvalidLabel(
                    f"sample {s.name!r} has classes {s.present} outside universe {self.class_universe}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.samples]


# --------------------------------------------------------------------------
# PNG interchange


def save_image_png(image: Image, path: str | os.PathLike) -> None:
    PILImage.fromarray(image.to_uint8(), mode="RGB").save(path, format="PNG")


def load_image_png(path: str | os.PathLike) -> Image:
    with PILImage.open(path) as im:
        return Image.from_uint8(np.asarray(im.convert("RGB")))


def save_sample(sample: Sample, directory: str | os.PathLike, name: str | None = None) -> str:
    name = name or sample.name
    if not name:
        raise ValueError("sample needs a name to be saved")
    save_image_png(sample.image, os.path.join(directory, f"{name}.png"))
    PILImage.fromarray(sample.labels.labels, mode="L").save(
        os.path.join(directory, f"{name}.labels.png"), format="PNG"
    )
    return name


def load_sample(directory: str | os.PathLike, name: str) -> Sample:
    image = load_image_png(os.path.join(directory, f"{name}.png"))
    with PILImage.open(os.path.join(directory, f"{name}.labels.png")) as im:
        if im.mode != "L":
            raise InvalidLabel(f"{name}.labels.png must be 8-bit grayscale, got mode {im.mode}")
        labels = LabelMap(np.asarray(im))
    return Sample(image, labels, name)


def save_dataset(dataset: Dataset, directory: str | os.PathLike) -> None:
    """Write samples as PNG pairs plus ``manifest.json`` (names, split, universe)."""
    os.makedirs(directory, exist_ok=True)
    for s in dataset.samples:
        save_sample(s, directory)
    manifest = {
        "split": dataset.split_tag,
        "class_universe": list(dataset.class_universe.ids),
        "samples": dataset.names,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_dataset(directory: str | os.PathLike) -> Dataset:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    samples = [load_sample(directory, n) for n in manifest["samples"]]
    return Dataset(tuple(samples), ClassSet(manifest["class_universe"]), manifest["split"])


def subset(dataset: Dataset, indices: Sequence[int], relabel: ClassSet | None = None) -> Dataset:
    """Dataset of the chosen samples, optionally masked to ``relabel``."""
    chosen = [dataset.samples[i] for i in indices]
    if relabel is not None:
        chosen = [s.with_labels(mask_to(s.labels, relabel)) for s in chosen]
    return Dataset(tuple(chosen), dataset.class_universe, dataset.split_tag)
