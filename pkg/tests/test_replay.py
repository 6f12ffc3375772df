from __future__ import annotations

import io
import json
import threading
import urllib.parse
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image as PILImage

from recallseg.core import BACKGROUND, ClassSet, Image, LabelMap, Sample, save_image_png
from recallseg.replay import (
    EmptyEvidence,
    FixtureFetcher,
    GeneratorSource,
    HelperDecoderBank,
    HttpFetcher,
    ModelCoverage,
    RetrievalError,
    ReplaySet,
    RetrievalSource,
    SourceExhausted,
    SyntheticWebFetcher,
    UnmappedClass,
    annotate,
    build_replay_set,
    class_scores,
    default_class_names,
    dump_replay_set,
    fit_to_canvas,
    inpaint,
    inpaint_labels,
    map_class,
    source_fetch,
)
from recallseg.segmodel import Decoder, Encoder, SegModel, decode, encode, init_decoder, init_encoder
from recallseg.synthdata import (
    FEATURE_DIM,
    GenClassifier,
    SceneConfig,
    build_classifier,
    default_vocabulary,
    make_retrieval_fixture,
)

from conftest import random_sample


@pytest.fixture(scope="module")
def vocab():
    return default_vocabulary(10, 24)


@pytest.fixture(scope="module")
def clf(vocab):
    return build_classifier(vocab)


def _png_bytes(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


# -- class mapping ---------------------------------------------------------


def _naive_inpaint(labels, prev_logits, prev_classes, step_classes):
    out = labels.copy()
    ids = list(prev_classes.ids)
    past = [c for c in ids if c not in step_classes]
    for y in range(labels.shape[0]):
        for x in range(labels.shape[1]):
            if labels[y, x] in step_classes:
                continue
            best = max(past, key=lambda c: (prev_logits[y, x, ids.index(c)], -c))
            out[y, x] = best
    return out


@given(st.integers(0, 2**31 - 1))
def test_map_class_is_exhaustive_argmax_and_order_free(seed):
    rng = np.random.default_rng(seed)
    clf = GenClassifier(rng.normal(0, 2, size=(7, FEATURE_DIM)), temperature=float(rng.uniform(0.5, 4)))
    evidence = [Image(rng.random((8, 8, 3))) for _ in range(int(rng.integers(1, 5)))]
    scores = class_scores(evidence, clf)
    best = max(range(7), key=lambda g: (scores[g], -g))
    assert map_class(3, evidence, clf) == best
    assert map_class(3, evidence[::-1], clf) == best


def test_map_class_uses_table(clf, rng):
    table = {4: 11}
    assert map_class(4, [Image(rng.random((8, 8, 3)))], clf, table) == 11
    g = map_class(5, [Image(rng.random((8, 8, 3)))], clf, table)
    assert table[5] == g


def test_map_class_needs_evidence(clf):
    with pytest.raises(EmptyEvidence):
        map_class(1, [], clf)


# -- sources ---------------------------------------------------------------


def test_generator_source_is_deterministic_and_unmapped_raises(vocab, clf):
    src = GeneratorSource(vocab, clf)
    with pytest.raises(UnmappedClass):
        src.fetch(1, 2, seed=0)
    src.mapping[1] = 0
    a, b = src.fetch(1, 3, seed=5), src.fetch(1, 3, seed=5)
    assert all(x == y for x, y in zip(a.images, b.images)) and a.shortfall == 0
    assert not src.fetch(1, 3, seed=6).images[0] == a.images[0]


def test_fixture_fetcher_shortfall(tmp_path):
    folder = tmp_path / "class_01"
    folder.mkdir()
    for i in range(3):
        save_image_png(Image(np.full((10, 12, 3), i / 4)), folder / f"{i}.png")
    (folder / "broken.png").write_bytes(b"not a png")
    src = RetrievalSource(FixtureFetcher(tmp_path), {1: "class_01"}, canvas=(8, 8))
    res = source_fetch(src, 1, 5, seed=0)
    assert len(res.images) == 3 and res.shortfall == 2
    assert all((im.height, im.width) == (8, 8) for im in res.images)
    with pytest.raises(SourceExhausted) as info:
        source_fetch(src, 1, 5, seed=0, strict=True)
    assert info.value.shortfall == 2 and len(info.value.images) == 3


def test_fixture_fetcher_unknown_query(tmp_path):
    assert FixtureFetcher(tmp_path).fetch("nothing", 4) == []
    with pytest.raises(UnmappedClass):
        RetrievalSource(FixtureFetcher(tmp_path), {}).fetch(3, 1, 0)


def test_synthetic_web_fetcher_matches_fixture(tmp_path):
    cfg = SceneConfig(canvas=(32, 32), num_classes=3)
    names = default_class_names(3)
    make_retrieval_fixture(cfg, tmp_path, names, per_class=2)
    disk = FixtureFetcher(tmp_path).fetch(names[2], 2)
    live = SyntheticWebFetcher(cfg, names, pool=2).fetch(names[2], 5)
    assert len(live) == 2
    assert all(np.array_equal(a.to_uint8(), b.to_uint8()) for a, b in zip(disk, live))
    assert SyntheticWebFetcher(cfg, names, pool=2).fetch("unknown", 3) == []


def test_fit_to_canvas():
    img = Image(np.random.default_rng(0).random((40, 48, 3)))
    out = fit_to_canvas(img, (32, 32))
    assert (out.height, out.width) == (32, 32)
    assert fit_to_canvas(out, (32, 32)) is out


@pytest.fixture
def http_server():
    images = {"a.png": _png_bytes(np.full((6, 6, 3), 200, np.uint8)), "b.png": _png_bytes(np.zeros((6, 6, 3), np.uint8))}
    hits = {"search": 0}

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def do_GET(self):
            url = urllib.parse.urlparse(self.path)
            if url.path == "/search":
                hits["search"] += 1
                q = urllib.parse.parse_qs(url.query)
                body = json.dumps(["a.png", "missing.png", "b.png"] if q["q"][0] == "cat" else "oops").encode()
                self.send_response(200)
            elif url.path.lstrip("/") in images:
                body = images[url.path.lstrip("/")]
                self.send_response(200)
            else:
                body = b""
                self.send_response(404)
            self.end_headers()
            self.wfile.write(body)

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}", hits
    server.shutdown()
    server.server_close()


def test_http_fetcher_skips_missing_images(http_server):
    url, hits = http_server
    out = HttpFetcher(url, timeout=2.0, retries=0).fetch("cat", 5)
    assert len(out) == 2 and hits["search"] == 1
    assert out[0].to_uint8()[0, 0, 0] == 200


def test_http_fetcher_rejects_non_list(http_server):
    url, _ = http_server
    with pytest.raises(RetrievalError):
        HttpFetcher(url, timeout=2.0, retries=0).fetch("dog", 2)


def test_http_fetcher_unreachable_endpoint():
    with pytest.raises(RetrievalError):
        HttpFetcher("http://127.0.0.1:9", timeout=0.5, retries=1).fetch("cat", 1)


# -- annotation and replay sets --------------------------------------------


def test_zero_helper_annotates_background(rng):
    enc = init_encoder(5, 8, seed=0).freeze()
    lab = annotate((ClassSet([3, 4]), init_decoder([0, 3, 4], 8)), enc, Image(rng.random((8, 8, 3))))
    assert (lab.labels == BACKGROUND).all()


def test_bank_rejects_mismatched_decoder():
    bank = HelperDecoderBank()
    with pytest.raises(ValueError):
        bank.add(ClassSet([1, 2]), init_decoder([0, 1], 4))
    bank.add(ClassSet([1, 2]), init_decoder([0, 1, 2], 4))
    assert len(bank) == 1


def test_replay_set_balance_and_labels(vocab, clf, tmp_path):
    enc = init_encoder(5, 8, seed=2).freeze()
    rng = np.random.default_rng(0)
    bank = HelperDecoderBank()
    steps = [ClassSet([0, 1, 2, 3]), ClassSet([4])]
    bank.add(ClassSet([1, 2, 3]), Decoder(ClassSet([0, 1, 2, 3]), rng.normal(size=(9, 4))))
    bank.add(ClassSet([4]), Decoder(ClassSet([0, 4]), rng.normal(size=(9, 2))))
    src = GeneratorSource(vocab, clf, mapping={c: c for c in range(1, 5)})
    rs = build_replay_set(src, bank, enc, steps, 50, seed=3)
    assert len(rs) == 200 and not rs.shortfall
    counts = {c: rs.origin_class.count(c) for c in range(1, 5)}
    assert counts == {1: 50, 2: 50, 3: 50, 4: 50}
    for s, i in zip(rs.samples, rs.origin_step):
        assert s.present <= (steps[i] | {BACKGROUND})
    dump_replay_set(ReplaySet(samples=rs.samples[:2]), tmp_path)
    assert len(list(tmp_path.glob("*.labels.png"))) == 2


def test_replay_set_needs_all_helpers(vocab, clf):
    with pytest.raises(ModelCoverage):
        build_replay_set(GeneratorSource(vocab, clf), HelperDecoderBank(), init_encoder(5, 4), [ClassSet([0, 1])], 1, 0)


# -- inpainting ------------------------------------------------------------


@given(st.integers(0, 2**31 - 1))
def test_inpaint_labels_matches_two_branch_rule(seed):
    rng = np.random.default_rng(seed)
    prev = ClassSet([0] + sorted(rng.choice(np.arange(1, 9), size=3, replace=False).tolist()))
    step = ClassSet(rng.choice(np.arange(9, 12), size=int(rng.integers(1, 3)), replace=False).tolist())
    pool = np.array(list(step.ids) + [0])
    labels = rng.choice(pool, size=(5, 6)).astype(np.uint8)
    z = rng.normal(size=(5, 6, len(prev)))
    if seed % 3 == 0:
        z = np.round(z)  # exercise ties
    got = inpaint_labels(labels, z, prev, step)
    assert np.array_equal(got, _naive_inpaint(labels, z, prev, step))


def test_inpaint_uses_previous_model(rng):
    model = SegModel(init_encoder(5, 6, seed=1), Decoder(ClassSet([0, 1, 2]), rng.normal(size=(7, 3))))
    s = random_sample(rng, 6, 6, classes=(0, 5))
    out = inpaint(s, model, ClassSet([5]))
    z = decode(model.decoder, encode(model.encoder, s.image))
    expect = np.where(s.labels.labels == 5, 5, np.array([0, 1, 2])[z.argmax(-1)])
    assert np.array_equal(out.labels.labels, expect)


def test_inpaint_with_everything_current_is_identity(rng):
    model = SegModel(init_encoder(5, 4), init_decoder([0, 1], 4))
    s = random_sample(rng, 6, 6, classes=(3, 4))
    assert inpaint(s, model, ClassSet([3, 4])).labels == s.labels


def test_inpaint_coverage_error(rng):
    model = SegModel(init_encoder(5, 4), init_decoder([0, 1], 4))
    with pytest.raises(ModelCoverage):
        inpaint(random_sample(rng), model, ClassSet([2]), past_classes=ClassSet([0, 1, 3]))
