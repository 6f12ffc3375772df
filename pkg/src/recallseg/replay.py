"""Replay block: image sources, class mapping, pseudo-labelling and inpainting.

A source turns a past class into unlabeled images, either by sampling the
conditional generator (through a class-mapping table built from training
images) or by keyword retrieval from a fixture directory or HTTP endpoint.
Helper decoders sharing the frozen step-0 encoder then annotate them.
"""
from __future__ import annotations

import io
import json
import logging
import os
import time
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from PIL import Image as PILImage

from .core import BACKGROUND, ClassSet, Image, LabelMap, RecallError, Sample, save_sample
from .segmodel import Decoder, Encoder, SegModel, encode, decode, label_lookup
from .synthdata import GenClassifier, GenVocabulary, SceneConfig, classify, conditional_generate, web_image

log = logging.getLogger(__name__)


class EmptyEvidence(RecallError):
    pass


class SourceExhausted(RecallError):
    def __init__(self, message: str, images: list[Image], shortfall: int):
        super().__init__(message)
        self.images = images
        self.shortfall = shortfall


class RetrievalError(RecallError):
    pass


class ModelCoverage(RecallError):
    pass


class UnmappedClass(RecallError):
    pass


# --------------------------------------------------------------------------
# class mapping


def class_scores(step_images: Sequence[Image], clf: GenClassifier) -> np.ndarray:
    """Summed classifier probability vectors over the evidence images."""
    if len(step_images) == 0:
        raise EmptyEvidence("class mapping needs at least one image")
    total = np.zeros(clf.num_classes)
    for im in step_images:
        total += classify(clf, im)
    return total


def map_class(
    c: int,
    step_images: Sequence[Image],
    clf: GenClassifier,
    table: dict[int, int] | None = None,
) -> int:
    """Generator class with the highest summed probability over ``step_images``.

    With a mapping ``table`` the result is stored there; a class already in
    the table keeps its stored generator class.
    """
    if table is not None and c in table:
        return table[c]
    g = int(np.argmax(class_scores(step_images, clf)))
    if table is not None:
        table[c] = g
    return g


# --------------------------------------------------------------------------
# retrieval back-ends


class Fetcher(Protocol):
    def fetch(self, query: str, n: int) -> list[Image]: ...


def _decode_png(data: bytes) -> Image | None:
    try:
        with PILImage.open(io.BytesIO(data)) as im:
            return Image.from_uint8(np.asarray(im.convert("RGB")))
    except Exception:  # undecodable payloads are skipped, not fatal
        return None


class FixtureFetcher:
    """Directory-per-query store of PNG files; returns the first ``n`` that decode."""

    def __init__(self, root: str | os.PathLike):
        self.root = os.fspath(root)

    def fetch(self, query: str, n: int) -> list[Image]:
        folder = os.path.join(self.root, query)
        if not os.path.isdir(folder):
            return []
        out: list[Image] = []
        for fname in sorted(os.listdir(folder)):
            if len(out) >= n:
                break
            if not fname.lower().endswith(".png"):
                continue
            with open(os.path.join(folder, fname), "rb") as fh:
                im = _decode_png(fh.read())
            if im is not None:
                out.append(im)
        return out


class HttpFetcher:
    """``GET {base_url}/search?q=..&n=..`` returns a JSON list of PNG URLs."""

    def __init__(self, base_url: str, timeout: float = 10.0, retries: int = 2):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries

    def _get(self, url: str) -> bytes:
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                with urllib.request.urlopen(url, timeout=self.timeout) as resp:
                    return resp.read()
            except (urllib.error.URLError, OSError) as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(0.05 * (attempt + 1))
        raise RetrievalError(f"GET {url} failed after {self.retries + 1} attempts: {last}")

    def fetch(self, query: str, n: int) -> list[Image]:
        qs = urllib.parse.urlencode({"q": query, "n": n})
        body = self._get(f"{self.base_url}/search?{qs}")
        try:
            urls = json.loads(body)
        except json.JSONDecodeError as exc:
            raise RetrievalError(f"search endpoint returned invalid JSON: {exc}") from exc
        if not isinstance(urls, list):
            raise RetrievalError("search endpoint must return a JSON array of image URLs")
        out: list[Image] = []
        for u in urls:
            if len(out) >= n:
                break
            try:
                data = self._get(urllib.parse.urljoin(self.base_url + "/", str(u)))
            except RetrievalError as exc:
                log.warning("skipping image: %s", exc)
                continue
            im = _decode_png(data)
            if im is not None:
                out.append(im)
        return out


class SyntheticWebFetcher:
    """Renders the web-style fixture on demand instead of reading it from disk.

    ``names`` maps class ids to query strings; unknown queries return nothing.
    Images match what ``make_retrieval_fixture`` would write.
    """

    def __init__(self, cfg: SceneConfig, names: dict[int, str], pool: int, seed: int = 0):
        self.cfg = cfg
        self.by_query = {q: c for c, q in names.items()}
        self.pool = pool
        self.seed = seed

    def fetch(self, query: str, n: int) -> list[Image]:
        c = self.by_query.get(query)
        if c is None:
            return []
        return [web_image(self.cfg, c, i, self.seed) for i in range(min(n, self.pool))]


def fit_to_canvas(image: Image, canvas: tuple[int, int]) -> Image:
    """Resize so the image covers ``canvas``, then centre-crop to it."""
    h, w = canvas
    if (image.height, image.width) == (h, w):
        return image
    scale = max(h / image.height, w / image.width)
    nh, nw = max(h, round(image.height * scale)), max(w, round(image.width * scale))
    pil = PILImage.fromarray(image.to_uint8(), mode="RGB").resize((nw, nh), PILImage.BILINEAR)
    top, left = (nh - h) // 2, (nw - w) // 2
    return Image.from_uint8(np.asarray(pil)[top : top + h, left : left + w])


# --------------------------------------------------------------------------
# source blocks


@dataclass
class FetchResult:
    images: list[Image]
    shortfall: int = 0


@dataclass
class GeneratorSource:
    vocab: GenVocabulary
    classifier: GenClassifier
    mapping: dict[int, int] = field(default_factory=dict)
    kind: str = "generator"

    def fit(self, c: int, step_images: Sequence[Image]) -> int:
        return map_class(c, step_images, self.classifier, self.mapping)

    def fetch(self, c: int, n: int, seed: int) -> FetchResult:
        if c not in self.mapping:
            raise UnmappedClass(f"class {c} has no generator class yet")
        g = self.mapping[c]
        seeds = np.random.SeedSequence(entropy=seed, spawn_key=(c,)).generate_state(max(n, 1), dtype=np.uint64)
        return FetchResult([conditional_generate(self.vocab, g, int(s)) for s in seeds[:n]])


@dataclass
class RetrievalSource:
    fetcher: Fetcher
    names: dict[int, str]
    canvas: tuple[int, int] = (32, 32)
    kind: str = "retrieval"

    def fit(self, c: int, step_images: Sequence[Image]) -> None:
        # keyword retrieval has nothing to learn
        return None

    def fetch(self, c: int, n: int, seed: int) -> FetchResult:
        if c not in self.names:
            raise UnmappedClass(f"class {c} has no query string")
        if n == 0:
            return FetchResult([])
        images = [fit_to_canvas(im, self.canvas) for im in self.fetcher.fetch(self.names[c], n)[:n]]
        return FetchResult(images, n - len(images))


SourceBlock = GeneratorSource | RetrievalSource


def source_fetch(src: SourceBlock, c: int, count: int, seed: int, strict: bool = False) -> FetchResult:
    """``count`` unlabeled images for class ``c``; under-delivery is reported as shortfall.

    With ``strict`` a shortfall raises :class:`SourceExhausted` instead.
    """
    res = src.fetch(c, count, seed)
    if strict and res.shortfall:
        raise SourceExhausted(f"class {c}: {res.shortfall} of {count} images unavailable", res.images, res.shortfall)
    return res


def default_class_names(num_classes: int) -> dict[int, str]:
    return {c: f"class_{c:02d}" for c in range(1, num_classes + 1)}


# --------------------------------------------------------------------------
# label evaluation


@dataclass
class HelperDecoderBank:
    per_step: list[tuple[ClassSet, Decoder]] = field(default_factory=list)

    def add(self, classes: ClassSet, dec: Decoder) -> None:
        expected = classes | {BACKGROUND}
        if dec.class_list != expected:
            raise ValueError(f"helper decoder classes {dec.class_list} must equal {expected}")
        self.per_step.append((ClassSet(classes), dec))

    def __len__(self) -> int:
        return len(self.per_step)

    def __getitem__(self, i: int) -> tuple[ClassSet, Decoder]:
        return self.per_step[i]


def annotate(bank_entry: tuple[ClassSet, Decoder], enc: Encoder, image: Image) -> LabelMap:
    _, dec = bank_entry
    z = decode(dec, encode(enc, image))
    return LabelMap(dec.class_list.to_array()[np.argmax(z, axis=-1)])


@dataclass
class ReplaySet:
    samples: list[Sample] = field(default_factory=list)
    per_class_count: int = 0
    origin_step: list[int] = field(default_factory=list)
    origin_class: list[int] = field(default_factory=list)
    shortfall: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)


def build_replay_set(
    src: SourceBlock,
    bank: HelperDecoderBank,
    enc: Encoder,
    past_steps: Sequence[ClassSet],
    n_per_class: int,
    seed: int,
) -> ReplaySet:
    """N_r images per past class, each labelled by the helper of its own step."""
    if len(bank) < len(past_steps):
        raise ModelCoverage(f"bank holds {len(bank)} helpers for {len(past_steps)} past steps")
    out = ReplaySet(per_class_count=n_per_class)
    for i, classes in enumerate(past_steps):
        entry = bank[i]
        for c in classes.foreground():
            class_seed = int(np.random.SeedSequence(entropy=seed, spawn_key=(i, c)).generate_state(1)[0])
            res = source_fetch(src, c, n_per_class, class_seed)
            if res.shortfall:
                out.shortfall[c] = res.shortfall
            for j, im in enumerate(res.images):
                out.samples.append(Sample(im, annotate(entry, enc, im), f"replay_s{i}_c{c:02d}_{j:04d}"))
                out.origin_step.append(i)
                out.origin_class.append(c)
    return out


def dump_replay_set(replay: ReplaySet, directory: str | os.PathLike) -> None:
    os.makedirs(directory, exist_ok=True)
    for s in replay.samples:
        save_sample(s, directory)


# --------------------------------------------------------------------------
# background self-inpainting


def inpaint_labels(
    labels: np.ndarray,
    prev_logits: np.ndarray,
    prev_classes: ClassSet,
    step_classes: ClassSet,
    past_classes: ClassSet | None = None,
) -> np.ndarray:
    """Keep current-step labels; elsewhere take the previous model's argmax over past classes."""
    past = (prev_classes - step_classes) if past_classes is None else past_classes
    cols = label_lookup(prev_classes)[past.to_array()]
    best = past.to_array()[np.argmax(prev_logits[..., cols], axis=-1)]
    keep = np.isin(labels, step_classes.to_array())
    return np.where(keep, labels, best).astype(np.uint8)


def inpaint(
    sample: Sample,
    prev_model: SegModel,
    step_classes: ClassSet,
    past_classes: ClassSet | None = None,
) -> Sample:
    """Relabel every pixel outside ``step_classes`` with the previous model's past-class argmax."""
    prev_classes = prev_model.class_list
    if past_classes is not None and not past_classes <= prev_classes:
        missing = past_classes - prev_classes
        raise ModelCoverage(f"previous model lacks past classes {missing}")
    z = decode(prev_model.decoder, encode(prev_model.encoder, sample.image))
    new = inpaint_labels(sample.labels.labels, z, prev_classes, step_classes, past_classes)
    return sample.with_labels(LabelMap(new))
