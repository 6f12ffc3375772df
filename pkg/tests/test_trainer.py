from __future__ import annotations

import os

import numpy as np
import pytest

from recallseg.config import ExperimentConfig
from recallseg.core import BACKGROUND, ClassSet, RecallError
from recallseg.protocol import build_partition
from recallseg.replay import GeneratorSource, ReplaySet, RetrievalSource
from recallseg.report import to_csv, to_json
from recallseg.segmodel import decoder_nbytes, deserialize_model, init_encoder, model_nbytes
from recallseg.trainer import (
    EmptyPool,
    FeatureCache,
    experiment_data,
    interleaved_batches,
    measured_footprint,
    memory_footprint,
    run_experiment,
    run_incremental_step,
    run_initial_step,
    run_snr_baseline,
    sample_nbytes,
    sample_nbytes_for,
    schedule_for,
)

from conftest import random_sample

TINY = ExperimentConfig(
    num_classes=4,
    n_train=60,
    n_test=16,
    schedule="2-1",
    fast=True,
    fast_steps_per_class=6,
    batch_size=4,
    n_replay=3,
    feature_dim=8,
    vocab_size=12,
)


def _pools(rng, n_new=7, n_old=5):
    new = [random_sample(rng, name=f"new{i}") for i in range(n_new)]
    old = [random_sample(rng, name=f"old{i}") for i in range(n_old)]
    return new, old


def _steps(cfg):
    train, _ = experiment_data(cfg)
    schedule = schedule_for(cfg)
    part = build_partition(train, schedule, cfg.disjoint_assign)
    state = run_initial_step(cfg, part[0], schedule.steps[0], schedule)
    states = [state]
    for k in range(1, schedule.num_steps):
        fn = run_snr_baseline if cfg.method == "snr" else run_incremental_step
        state = fn(state, cfg, part[k], schedule.steps[k])
        states.append(state)
    return state, part


# -- batch streams ---------------------------------------------------------


@pytest.mark.parametrize("r_new,r_old,bs", [(1, 1, 4), (1, 3, 8), (3, 1, 8), (2, 1, 6)])
def test_every_batch_has_declared_composition(rng, r_new, r_old, bs):
    new, old = _pools(rng)
    stream = interleaved_batches(new, old, r_new, r_old, bs, seed=3)
    want_new = bs * r_new // (r_new + r_old)
    for _ in range(120):
        batch = next(stream)
        names = [s.name for s in batch]
        assert len(batch) == bs
        assert sum(n.startswith("new") for n in names) == want_new
        assert sum(n.startswith("old") for n in names) == bs - want_new


def test_each_pool_is_visited_evenly(rng):
    new, old = _pools(rng, 4, 3)
    stream = interleaved_batches(new, old, 1, 1, 2, seed=0)
    seen = [s.name for _ in range(12) for s in next(stream)]
    assert all(seen.count(f"new{i}") == 3 for i in range(4))
    assert all(seen.count(f"old{i}") == 4 for i in range(3))


def test_batches_are_deterministic(rng):
    new, old = _pools(rng)
    a = interleaved_batches(new, ReplaySet(samples=old), 1, 1, 4, seed=9)
    b = interleaved_batches(new, old, 1, 1, 4, seed=9)
    for _ in range(10):
        assert [s.name for s in next(a)] == [s.name for s in next(b)]


def test_batch_stream_errors(rng):
    new, old = _pools(rng)
    with pytest.raises(EmptyPool):
        next(interleaved_batches([], old, 1, 1, 4, 0))
    with pytest.raises(EmptyPool):
        next(interleaved_batches(new, [], 1, 1, 4, 0))
    with pytest.raises(ValueError):
        next(interleaved_batches(new, old, 1, 2, 4, 0))


def test_feature_cache_needs_frozen_encoder():
    with pytest.raises(RecallError):
        FeatureCache(init_encoder(5, 4))


# -- training steps --------------------------------------------------------


@pytest.fixture(scope="module")
def recall_run():
    return _steps(TINY)


def test_encoder_frozen_after_initial_step(recall_run):
    state, _ = recall_run
    models = [deserialize_model(b) for b in state.checkpoints]
    assert len(models) == 3
    assert all(m.encoder.frozen for m in models)
    for m in models[1:]:
        assert np.array_equal(m.encoder.weights, models[0].encoder.weights)
    assert [m.class_list.ids for m in models] == [(0, 1, 2), (0, 1, 2, 3), (0, 1, 2, 3, 4)]


def test_helper_bank_matches_steps(recall_run):
    state, _ = recall_run
    schedule = state.schedule
    assert len(state.bank) == schedule.num_steps
    for i in range(schedule.num_steps):
        classes, dec = state.bank[i]
        assert classes == schedule.steps[i].foreground()
        assert dec.class_list == schedule.steps[i] | {BACKGROUND}
    assert isinstance(state.source, GeneratorSource)
    assert set(state.mapping) == {1, 2, 3, 4}


def test_replay_is_balanced_per_class(recall_run):
    state, _ = recall_run
    assert state.ledger[1]["replay_samples"] == 3 * 2
    assert state.ledger[2]["replay_samples"] == 3 * 3


def test_ft_keeps_no_replay_machinery():
    state, _ = _steps(TINY.replace(method="ft"))
    assert len(state.bank) == 0 and state.source is None and not state.store


def test_snr_stores_at_least_one_sample_per_new_class():
    cfg = TINY.replace(method="snr")
    state, part = _steps(cfg)
    schedule = state.schedule
    for k, led in enumerate(state.ledger):
        n_fg = len(schedule.steps[k].foreground())
        assert led["snr_budget"] == decoder_nbytes(cfg.feature_dim, n_fg + 1)
        assert led["snr_stored"] >= n_fg * sample_nbytes_for(cfg.canvas)
        assert led["snr_floor_allowance"] == max(0, led["snr_stored"] - led["snr_budget"])
        step_names = set(part[k].names)
        assert sum(s.name in step_names for s in state.store) * sample_nbytes_for(cfg.canvas) == led["snr_stored"]
    assert state.store_bytes == sum(sample_nbytes(s) for s in state.store)


def test_retrieval_source_is_offline_by_default():
    state, _ = _steps(TINY.replace(method="recall-retrieval"))
    assert isinstance(state.source, RetrievalSource)
    assert state.ledger[-1]["replay_shortfall"] == {}


def test_incremental_step_rejects_uncovered_model(recall_run):
    state, part = recall_run
    stale = type(state)(state.cfg, state.schedule, deserialize_model(state.checkpoints[0]), cache=state.cache, step=1)
    with pytest.raises(RecallError, match="do not cover"):
        run_incremental_step(stale, state.cfg, part[2], state.schedule.steps[2])


# -- memory ----------------------------------------------------------------


@pytest.mark.parametrize("method", ["recall-gen", "recall-retrieval", "replay-only", "ft", "inpaint-only", "snr"])
def test_closed_form_memory_matches_serialised_bytes(method):
    cfg = TINY.replace(method=method)
    state, part = _steps(cfg)
    counts = [led.get("snr_stored", 0) // sample_nbytes_for(cfg.canvas) for led in state.ledger]
    k = state.step
    assert memory_footprint(method, k, cfg, snr_counts=counts) == measured_footprint(state)


def test_memory_at_step_zero_is_the_model():
    for m in ["recall-gen", "snr", "ft", "recall-retrieval"]:
        assert memory_footprint(m, 0, TINY, step_sizes=[1], snr_counts=[1]) == model_nbytes(5, 8, 3)


def test_saving_images_grows_linearly():
    sizes = [10, 4, 4]
    vals = [memory_footprint("saving-images", k, TINY, step_sizes=sizes) for k in range(3)]
    models = [model_nbytes(5, 8, n) for n in (3, 4, 5)]
    per = sample_nbytes_for(TINY.canvas)
    assert [v - m for v, m in zip(vals, models)] == [0, 10 * per, 14 * per]


def test_memory_footprint_errors():
    with pytest.raises(ValueError):
        memory_footprint("ft", 7, TINY)
    with pytest.raises(ValueError):
        memory_footprint("saving-images", 1, TINY)


# -- experiment driver -----------------------------------------------------


def test_report_has_one_row_per_step(tmp_path):
    rep = run_experiment(TINY, tmp_path)
    assert [s.step for s in rep.steps] == [0, 1, 2]
    assert rep.steps[0].miou_new is None and rep.steps[-1].miou_new is not None
    assert rep.steps[1].coverage == (0, 1, 2, 3)
    run_dir = tmp_path / TINY.run_name()
    for name in ["config.json", "report.csv", "report.json", "checkpoints/step_0.bin", "checkpoints/step_2.bin"]:
        assert (run_dir / name).is_file()
    assert rep.steps[0].wall_ms is None


def test_runs_are_reproducible_across_worker_counts():
    a = run_experiment(TINY.replace(method="ft"))
    b = run_experiment(TINY.replace(method="ft", eval_workers=3))
    assert to_csv(a) == to_csv(b) and to_json(a) == to_json(b)


def test_joint_is_single_step():
    rep = run_experiment(TINY.replace(method="joint"))
    assert len(rep.steps) == 1 and rep.final.coverage == (0, 1, 2, 3, 4)


def test_failed_run_writes_partial_report(tmp_path, monkeypatch):
    import recallseg.trainer as tr

    def boom(*a, **k):
        raise RecallError("synthetic failure")

    monkeypatch.setattr(tr, "run_incremental_step", boom)
    with pytest.raises(RecallError):
        tr.run_experiment(TINY.replace(method="ft"), tmp_path)
    text = (tmp_path / TINY.replace(method="ft").run_name() / "report.json").read_text()
    assert '"status": "failed"' in text and "synthetic failure" in text
