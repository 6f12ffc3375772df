"""Incremental training: the initial step, replay-and-inpaint steps, baselines and memory accounting.

Once the encoder is frozen after the initial step every later update touches
decoder weights only, so features of each image are computed once and kept
in a cache keyed by sample name.
"""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .config import ExperimentConfig
from .core import BACKGROUND, ClassSet, Dataset, RecallError, Sample
from .protocol import TaskPartition, TaskSchedule, build_partition, make_schedule, parse_schedule_name
from .replay import (
    FixtureFetcher,
    GeneratorSource,
    HelperDecoderBank,
    HttpFetcher,
    ReplaySet,
    RetrievalSource,
    SourceBlock,
    SyntheticWebFetcher,
    build_replay_set,
    default_class_names,
    inpaint_labels,
)
from .report import ExperimentReport, StepReport, confusion_over, step_metrics, write_report
from .segmodel import (
    Decoder,
    Gradients,
    OptimizerState,
    SegModel,
    _batch_pixel_weights,
    _with_bias,
    decoder_loss_grad,
    decoder_nbytes,
    encode,
    grad,
    grow_decoder,
    init_decoder,
    init_encoder,
    label_columns,
    model_nbytes,
    serialize_model,
    sgd_step,
)
from .synthdata import (
    build_classifier,
    classifier_nbytes,
    default_vocabulary,
    gen_dataset,
    vocabulary_nbytes,
)

log = logging.getLogger(__name__)

SOURCE_URL_ENV = "RECALL_SOURCE_URL"


class EmptyPool(RecallError):
    pass


def derive_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)).generate_state(1)[0])


# purpose tags for derived seeds
_S_ENCODER, _S_MAIN, _S_HELPER, _S_REPLAY, _S_SNR = range(5)


# --------------------------------------------------------------------------
# batch streams


def _cycle(n: int, rng: np.random.Generator) -> Iterator[int]:
    while True:
        yield from rng.permutation(n).tolist()


def interleaved_batches(
    new_data: Sequence[Sample],
    replay: Sequence[Sample] | ReplaySet | None,
    r_new: int,
    r_old: int,
    batch_size: int,
    seed: int,
) -> Iterator[list[Sample]]:
    """Endless batches of ``batch_size*r_new/(r_new+r_old)`` new samples followed by replay samples.

    Each pool walks its own seeded permutation and reshuffles when used up.
    """
    if r_new < 1 or r_old < 0:
        raise ValueError("r_new must be >= 1 and r_old >= 0")
    if batch_size % (r_new + r_old):
        raise ValueError(f"r_new + r_old = {r_new + r_old} must divide batch_size = {batch_size}")
    new_pool = list(new_data)
    old_pool = list(replay.samples if isinstance(replay, ReplaySet) else (replay or []))
    if not new_pool:
        raise EmptyPool("the current-step pool is empty")
    if r_old and not old_pool:
        raise EmptyPool("the replay pool is empty but r_old > 0")
    n_new = batch_size * r_new // (r_new + r_old)
    n_old = batch_size - n_new
    ss_new, ss_old = np.random.SeedSequence(seed).spawn(2)
    it_new = _cycle(len(new_pool), np.random.default_rng(ss_new))
    it_old = _cycle(len(old_pool), np.random.default_rng(ss_old)) if n_old else iter(())
    while True:
        batch = [new_pool[next(it_new)] for _ in range(n_new)]
        batch += [old_pool[next(it_old)] for _ in range(n_old)]
        yield batch


# --------------------------------------------------------------------------
# training loops


class FeatureCache:
    """Biased frozen-encoder features per sample name, as (H*W, F+1) rows."""

    def __init__(self, encoder):
        if not encoder.frozen:
            raise RecallError("features can only be cached under a frozen encoder")
        self.encoder = encoder
        self._rows: dict[str, np.ndarray] = {}

    def rows(self, sample: Sample) -> np.ndarray:
        key = sample.name
        hit = self._rows.get(key) if key else None
        if hit is None:
            f = encode(self.encoder, sample.image)
            hit = _with_bias(f.reshape(-1, f.shape[-1]))
            if key:
                self._rows[key] = hit
        return hit

    def forget(self, prefix: str) -> None:
        for k in [k for k in self._rows if k.startswith(prefix)]:
            del self._rows[k]


def train(
    model: SegModel,
    batches: Iterator[list[Sample]],
    n_steps: int,
    lr0: float,
    lr_end: float,
    cfg: ExperimentConfig,
    trainable: str = "decoder-only",
    cache: FeatureCache | None = None,
) -> SegModel:
    """``n_steps`` momentum-SGD iterations under the polynomial schedule."""
    state = OptimizerState(lr0=lr0, lr_end=lr_end, power=cfg.power, momentum=cfg.momentum, total_steps=max(1, n_steps))
    for _ in range(n_steps):
        batch = next(batches)
        if trainable == "all" or cache is None:
            g = grad(model, batch, trainable)
        else:
            dec = model.decoder
            feats = np.concatenate([cache.rows(s) for s in batch], axis=0)
            cols = np.concatenate([label_columns(s.labels.labels, dec.class_list).ravel() for s in batch])
            pw = _batch_pixel_weights([s.labels.labels.size for s in batch])
            loss, g_dec, _ = decoder_loss_grad(feats, cols, dec.weights, pw)
            g = Gradients(decoder=g_dec, loss=loss)
        model, state = sgd_step(model, g, state)
    return model


def _restricted(sample: Sample, keep: ClassSet) -> Sample:
    lut = np.zeros(256, dtype=bool)
    lut[keep.to_array()] = True
    lab = sample.labels.labels
    if lut[lab].all():
        return sample
    return sample.with_labels(type(sample.labels)(np.where(lut[lab], lab, BACKGROUND)))


# --------------------------------------------------------------------------
# run state


@dataclass
class RunState:
    cfg: ExperimentConfig
    schedule: TaskSchedule
    model: SegModel | None = None
    bank: HelperDecoderBank = field(default_factory=HelperDecoderBank)
    source: SourceBlock | None = None
    cache: FeatureCache | None = None
    checkpoints: list[bytes] = field(default_factory=list)
    ledger: list[dict] = field(default_factory=list)
    store: list[Sample] = field(default_factory=list)
    step: int = -1

    @property
    def mapping(self) -> dict[int, int]:
        return self.source.mapping if isinstance(self.source, GeneratorSource) else {}

    @property
    def store_bytes(self) -> int:
        return sum(sample_nbytes(s) for s in self.store)


def sample_nbytes(sample: Sample) -> int:
    """Raw storage of one sample: RGB bytes plus one label byte per pixel."""
    return sample.image.to_uint8().nbytes + sample.labels.labels.nbytes


def sample_nbytes_for(canvas: tuple[int, int]) -> int:
    return canvas[0] * canvas[1] * 4


def make_source(cfg: ExperimentConfig) -> SourceBlock | None:
    kind = cfg.source_kind
    if kind is None:
        return None
    if kind == "generator":
        vocab = default_vocabulary(cfg.num_classes, cfg.vocab_size, cfg.canvas, cfg.noise_std)
        return GeneratorSource(vocab, build_classifier(vocab, temperature=cfg.classifier_temperature))
    names = default_class_names(cfg.num_classes)
    url = os.environ.get(SOURCE_URL_ENV) or cfg.retrieval_url
    if url and not cfg.offline:
        fetcher = HttpFetcher(url, cfg.retrieval_timeout, cfg.retrieval_retries)
    elif cfg.retrieval_dir:
        fetcher = FixtureFetcher(cfg.retrieval_dir)
    else:
        fetcher = SyntheticWebFetcher(cfg.scene, names, cfg.retrieval_pool, seed=cfg.seed)
    return RetrievalSource(fetcher, names, cfg.canvas)


def _fit_source(state: RunState, data: Dataset, classes: ClassSet) -> None:
    if state.source is None:
        return
    for c in classes.foreground():
        evidence = [s.image for s in data if c in s.present]
        if evidence:
            state.source.fit(c, evidence)


def _train_helper(state: RunState, data: Dataset, classes: ClassSet, k: int) -> None:
    cfg = state.cfg
    helper_classes = classes | {BACKGROUND}
    helper = SegModel(state.model.encoder, init_decoder(helper_classes, cfg.feature_dim))
    n = cfg.helper_steps() * len(classes.foreground())
    samples = [_restricted(s, helper_classes) for s in data]
    batches = interleaved_batches(samples, None, 1, 0, cfg.batch_size, derive_seed(cfg.seed, _S_HELPER, k))
    helper = train(helper, batches, n, cfg.helper_lr0, cfg.helper_lr_end, cfg, cache=state.cache)
    state.bank.add(classes.foreground(), helper.decoder)


def _snr_store(state: RunState, data: Dataset, classes: ClassSet, k: int) -> dict:
    """Keep real samples of this step's new classes within the helper-decoder byte budget."""
    cfg = state.cfg
    fg = classes.foreground()
    budget = int(cfg.snr_budget_scale * decoder_nbytes(cfg.feature_dim, len(fg) + 1))
    per_sample = sample_nbytes_for(cfg.canvas)
    quota = max(1, budget // (len(fg) * per_sample))
    rng = np.random.default_rng(derive_seed(cfg.seed, _S_SNR, k))
    taken: set[str] = {s.name for s in state.store}
    stored = 0
    for c in fg:
        pool = [s for s in data if c in s.present and s.name not in taken]
        for i in rng.permutation(len(pool))[:quota].tolist():
            state.store.append(pool[i])
            taken.add(pool[i].name)
            stored += per_sample
    return {"snr_budget": budget, "snr_stored": stored, "snr_floor_allowance": max(0, stored - budget)}


def run_initial_step(cfg: ExperimentConfig, t0: Dataset, c0: ClassSet, schedule: TaskSchedule | None = None) -> RunState:
    """Train the initial model on all weights, freeze its encoder, then fit the replay machinery."""
    if len(t0) == 0:
        raise EmptyPool("the initial step has no training images")
    if schedule is None:
        schedule = schedule_for(cfg)
    state = RunState(cfg, schedule, source=make_source(cfg))
    enc = init_encoder(cfg.patch_size, cfg.feature_dim, derive_seed(cfg.seed, _S_ENCODER))
    model = SegModel(enc, init_decoder(c0, cfg.feature_dim))
    n = cfg.steps_per_class() * len(c0.foreground())
    batches = interleaved_batches(list(t0), None, 1, 0, cfg.batch_size, derive_seed(cfg.seed, _S_MAIN, 0))
    model = train(model, batches, n, cfg.lr0, cfg.lr_end, cfg, trainable="all")
    state.model = SegModel(model.encoder.freeze(), model.decoder)
    state.cache = FeatureCache(state.model.encoder)
    extra: dict = {}
    if cfg.uses_replay:
        _train_helper(state, t0, c0, 0)
        _fit_source(state, t0, c0)
    if cfg.method == "snr":
        extra = _snr_store(state, t0, c0, 0)
    state.step = 0
    state.checkpoints.append(serialize_model(state.model))
    state.ledger.append(extra)
    return state


def _replay_samples(state: RunState, k: int) -> ReplaySet:
    cfg = state.cfg
    past = [state.schedule.steps[i].foreground() for i in range(k)]
    return build_replay_set(state.source, state.bank, state.model.encoder, past, cfg.n_replay, derive_seed(cfg.seed, _S_REPLAY, k))


def run_incremental_step(state: RunState, cfg: ExperimentConfig, tk: Dataset, ck: ClassSet) -> RunState:
    """One incremental step: inpaint, replay, grow, train, then fit the source and helper for ``ck``."""
    k = state.step + 1
    prev = state.model
    past = state.schedule.learned_until(k - 1)
    if not past <= prev.class_list:
        raise RecallError(f"model classes {prev.class_list} do not cover {past}")
    extra: dict = {}
    # (1) background inpainting with the frozen snapshot of the previous model
    new_samples = list(tk)
    if cfg.uses_inpainting:
        ck_b = ClassSet(ck)
        out = []
        for s in new_samples:
            z = (state.cache.rows(s) @ prev.decoder.weights).reshape(s.labels.shape + (-1,))
            lab = inpaint_labels(s.labels.labels, z, prev.class_list, ck_b, past)
            out.append(s.with_labels(type(s.labels)(lab)))
        new_samples = out
    # (2) replay set over all past classes
    replay: ReplaySet | None = None
    if cfg.uses_replay:
        state.cache.forget("replay_")
        replay = _replay_samples(state, k)
        extra["replay_samples"] = len(replay)
        extra["replay_shortfall"] = {str(c): v for c, v in sorted(replay.shortfall.items())}
    # (3) grow, (4) train the decoder on the union
    model = SegModel(prev.encoder, grow_decoder(prev.decoder, ck))
    r_old = cfg.r_old if replay is not None else 0
    r_new = cfg.r_new if replay is not None else 1
    batches = interleaved_batches(new_samples, replay, r_new, r_old, cfg.batch_size, derive_seed(cfg.seed, _S_MAIN, k))
    state.model = train(model, batches, cfg.steps_per_class() * len(ck), cfg.lr0, cfg.lr_end, cfg, cache=state.cache)
    # (5) source mapping and helper decoder on the original labels
    if cfg.uses_replay:
        _fit_source(state, tk, ClassSet(ck))
        _train_helper(state, tk, ClassSet(ck), k)
    state.step = k
    state.checkpoints.append(serialize_model(state.model))
    state.ledger.append(extra)
    return state


def run_snr_baseline(state: RunState, cfg: ExperimentConfig, tk: Dataset, ck: ClassSet) -> RunState:
    """Replay the accumulated store of real samples, then add this step's share to it."""
    k = state.step + 1
    prev = state.model
    model = SegModel(prev.encoder, grow_decoder(prev.decoder, ck))
    stored = list(state.store)
    r_old = cfg.r_old if stored else 0
    r_new = cfg.r_new if stored else 1
    batches = interleaved_batches(list(tk), stored, r_new, r_old, cfg.batch_size, derive_seed(cfg.seed, _S_MAIN, k))
    state.model = train(model, batches, cfg.steps_per_class() * len(ck), cfg.lr0, cfg.lr_end, cfg, cache=state.cache)
    extra = _snr_store(state, tk, ClassSet(ck), k)
    state.step = k
    state.checkpoints.append(serialize_model(state.model))
    state.ledger.append(extra)
    return state


def run_joint(cfg: ExperimentConfig, train_set: Dataset, universe: ClassSet) -> RunState:
    """Upper bound: one all-weights pass over the whole training set with full labels."""
    schedule = TaskSchedule((universe,), cfg.setup)
    state = RunState(cfg, schedule)
    enc = init_encoder(cfg.patch_size, cfg.feature_dim, derive_seed(cfg.seed, _S_ENCODER))
    model = SegModel(enc, init_decoder(universe, cfg.feature_dim))
    batches = interleaved_batches(list(train_set), None, 1, 0, cfg.batch_size, derive_seed(cfg.seed, _S_MAIN, 0))
    model = train(model, batches, cfg.steps_per_class() * len(universe.foreground()), cfg.lr0, cfg.lr_end, cfg, trainable="all")
    state.model = SegModel(model.encoder.freeze(), model.decoder)
    state.cache = FeatureCache(state.model.encoder)
    state.step = 0
    state.checkpoints.append(serialize_model(state.model))
    state.ledger.append({})
    return state


# --------------------------------------------------------------------------
# memory accounting


def memory_footprint(
    method: str,
    step: int,
    cfg: ExperimentConfig,
    step_sizes: Sequence[int] | None = None,
    snr_counts: Sequence[int] | None = None,
) -> int:
    """Bytes held while training step ``step``: the model plus what replay needs from earlier steps.

    ``step_sizes`` gives the number of training images per step (for the
    ``saving-images`` reference); ``snr_counts`` the samples stored per step.
    """
    schedule = schedule_for(cfg)
    if not 0 <= step < schedule.num_steps:
        raise ValueError(f"step {step} outside 0..{schedule.num_steps - 1}")
    n_classes = len(schedule.learned_until(step))
    if method == "joint":
        n_classes = len(schedule.universe)
    total = model_nbytes(cfg.patch_size, cfg.feature_dim, n_classes)
    if method in ("ft", "inpaint-only", "joint") or step == 0:
        return total
    if method == "saving-images":
        if step_sizes is None:
            raise ValueError("saving-images needs step_sizes")
        return total + sample_nbytes_for(cfg.canvas) * sum(step_sizes[:step])
    if method == "snr":
        if snr_counts is None:
            raise ValueError("snr needs snr_counts")
        return total + sample_nbytes_for(cfg.canvas) * sum(snr_counts[:step])
    helpers = sum(decoder_nbytes(cfg.feature_dim, len(schedule.steps[i].foreground()) + 1) for i in range(step))
    kind = cfg.replace(method=method).source_kind
    if kind == "generator":
        helpers += classifier_nbytes(cfg.vocab_size) + vocabulary_nbytes(cfg.vocab_size)
    return total + helpers


def measured_footprint(state: RunState) -> int:
    """The same quantity as :func:`memory_footprint`, counted from serialised objects."""
    from .segmodel import serialize_decoder
    from .synthdata import serialize_classifier, serialize_vocabulary

    total = len(state.checkpoints[-1])
    k = state.step
    cfg = state.cfg
    if cfg.method in ("ft", "inpaint-only", "joint") or k == 0:
        return total
    if cfg.method == "snr":
        return total + sum(state.ledger[i].get("snr_stored", 0) for i in range(k))
    total += sum(len(serialize_decoder(state.bank[i][1])) for i in range(k))
    if isinstance(state.source, GeneratorSource):
        total += len(serialize_classifier(state.source.classifier)) + len(serialize_vocabulary(state.source.vocab))
    return total


# --------------------------------------------------------------------------
# experiment driver

_DATA_CACHE: dict[tuple, tuple[Dataset, Dataset]] = {}


def experiment_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    key = (cfg.scene, cfg.n_train, cfg.n_test)
    if key not in _DATA_CACHE:
        if len(_DATA_CACHE) > 4:
            _DATA_CACHE.clear()
        _DATA_CACHE[key] = gen_dataset(cfg.scene, cfg.n_train, cfg.n_test)
    return _DATA_CACHE[key]


def schedule_for(cfg: ExperimentConfig) -> TaskSchedule:
    sizes = parse_schedule_name(cfg.schedule, cfg.num_classes)
    return make_schedule(cfg.num_classes, sizes, cfg.class_order, cfg.setup, cfg.seed)


def _evaluate(state: RunState, test: Dataset, coverage: ClassSet, current: ClassSet, initial: ClassSet) -> dict:
    cfg = state.cfg
    dec: Decoder = state.model.decoder
    ids = dec.class_list.to_array()
    h, w = cfg.canvas

    def predict(i: int) -> np.ndarray:
        s = test[i]
        return ids[np.argmax(state.cache.rows(s) @ dec.weights, axis=-1)].reshape(h, w)

    for s in test:  # fill the cache before worker threads read it
        state.cache.rows(s)
    cm = confusion_over(test, coverage, predict, cfg.num_classes + 1, cfg.eval_workers)
    return step_metrics(cm, coverage, initial, current)


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | os.PathLike | None = None,
    data: tuple[Dataset, Dataset] | None = None,
) -> ExperimentReport:
    """Run every step of ``cfg.method``, evaluating on the whole test set after each step.

    With ``out_dir`` the report, config and checkpoints go to
    ``out_dir/<run name>``; a failing run still writes what it has.
    """
    from .config import save_config

    train_set, test = data if data is not None else experiment_data(cfg)
    schedule = schedule_for(cfg)
    report = ExperimentReport(cfg.method, cfg.setup, cfg.schedule, cfg.seed, cfg.num_classes, cfg.computation_dict())
    run_dir = os.path.join(os.fspath(out_dir), cfg.run_name()) if out_dir is not None else None
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        save_config(cfg, os.path.join(run_dir, "config.json"))

    def record(state: RunState, coverage: ClassSet, current: ClassSet, initial: ClassSet, t_start: float) -> None:
        metrics = _evaluate(state, test, coverage, current, initial)
        ledger = dict(state.ledger[-1])
        ledger["helpers"] = len(state.bank)
        ledger["model_bytes"] = len(state.checkpoints[-1])
        report.steps.append(
            StepReport(
                step=state.step,
                coverage=coverage.ids,
                mem_bytes=measured_footprint(state),
                ledger=ledger,
                wall_ms=(time.perf_counter() - t_start) * 1e3 if cfg.record_wall_clock else None,
                **metrics,
            )
        )
        if run_dir and cfg.write_checkpoints:
            ck_dir = os.path.join(run_dir, "checkpoints")
            os.makedirs(ck_dir, exist_ok=True)
            with open(os.path.join(ck_dir, f"step_{state.step}.bin"), "wb") as fh:
                fh.write(state.checkpoints[-1])

    try:
        if cfg.method == "joint":
            t = time.perf_counter()
            universe = schedule.universe
            state = run_joint(cfg, train_set, universe)
            record(state, universe, universe, schedule.initial_classes, t)
        else:
            partition: TaskPartition = build_partition(train_set, schedule, cfg.disjoint_assign)
            t = time.perf_counter()
            state = run_initial_step(cfg, partition[0], schedule.steps[0], schedule)
            record(state, schedule.learned_until(0), schedule.steps[0], schedule.initial_classes, t)
            for k in range(1, schedule.num_steps):
                t = time.perf_counter()
                step_fn = run_snr_baseline if cfg.method == "snr" else run_incremental_step
                state = step_fn(state, cfg, partition[k], schedule.steps[k])
                record(state, schedule.learned_until(k), schedule.steps[k], schedule.initial_classes, t)
    except Exception as exc:
        report.status = "failed"
        report.error = f"{type(exc).__name__}: {exc}"
        if run_dir:
            write_report(report, run_dir)
        raise
    if run_dir:
        write_report(report, run_dir)
    return report
