from __future__ import annotations

import json

import numpy as np
import pytest

from recallseg.config import ConfigError, ExperimentConfig, config_schema, load_config, save_config
from recallseg.core import ClassSet, Dataset
from recallseg.metrics import ConfusionMatrix, accumulate
from recallseg.report import (
    ExperimentReport,
    StepReport,
    confusion_over,
    csv_columns,
    fmt_value,
    read_report,
    step_metrics,
    summary_table,
    to_csv,
    write_report,
)

from conftest import random_sample


def _report() -> ExperimentReport:
    s0 = StepReport(0, (0, 1, 2), {0: 1.0, 1: 0.5, 2: None}, {0: 1.0, 1: 0.5, 2: None}, 0.5, None, 0.75, 0.5, 100)
    s1 = StepReport(1, (0, 1, 2, 3), {0: 1.0, 1: 0.5, 2: 0.25, 3: 0.0}, {0: 1.0, 1: 1.0, 2: 0.5, 3: 0.0}, 0.375, 0.0, 0.4375, 0.0, 120)
    return ExperimentReport("ft", "disjoint", "2-1", 0, 3, {"seed": 0}, [s0, s1])


def test_step_metrics_groups():
    gt = np.array([[0, 1, 2, 3]])
    pred = np.array([[0, 1, 3, 3]])
    cm = accumulate(ConfusionMatrix.empty(4), gt, pred)
    m = step_metrics(cm, ClassSet([0, 1, 2, 3]), ClassSet([1, 2]), ClassSet([3]))
    assert m["miou_old"] == 0.5  # iou(1)=1, iou(2)=0
    assert m["miou_new"] == 0.5  # iou(3)=1/2
    assert m["miou_all"] == pytest.approx((1 + 1 + 0 + 0.5) / 4)
    assert m["pa_new"] == 1.0


def test_step_metrics_without_new_classes():
    cm = accumulate(ConfusionMatrix.empty(3), np.array([[0, 1]]), np.array([[0, 1]]))
    assert step_metrics(cm, ClassSet([0, 1, 2]), ClassSet([1, 2]), ClassSet([0, 1, 2]))["miou_new"] is None


def test_confusion_masks_unseen_classes_and_is_shard_free(rng):
    samples = tuple(random_sample(rng, 4, 4, classes=(0, 1, 2, 3), name=f"t{i}") for i in range(7))
    test = Dataset(samples, ClassSet(range(4)), "test")
    pred = [rng.integers(0, 3, size=(4, 4)) for _ in range(7)]
    one = confusion_over(test, ClassSet([0, 1, 2]), pred.__getitem__, 4, workers=1)
    many = confusion_over(test, ClassSet([0, 1, 2]), pred.__getitem__, 4, workers=4)
    assert one == many
    assert one.counts[3].sum() == 0  # class 3 counted as background in the ground truth


def test_csv_layout():
    text = to_csv(_report())
    lines = text.splitlines()
    assert lines[0].split(",") == csv_columns(3)
    assert lines[0].startswith("step,setup,method,miou_old,miou_new,miou_all,pa_new,mem_bytes,wall_ms,iou_0")
    assert lines[1].split(",")[4] == "" and lines[1].split(",")[-1] == ""
    assert lines[2].split(",")[3] == "0.375000"


def test_report_round_trip(tmp_path):
    rep = _report()
    write_report(rep, tmp_path)
    back = read_report(tmp_path)
    assert back.to_dict() == rep.to_dict()
    doc = json.loads((tmp_path / "report.json").read_text())
    assert "background" in doc["convention"]


def test_summary_table():
    rep = _report()
    failed = ExperimentReport("snr", "disjoint", "2-1", 1, 3, {}, [], status="failed", error="x")
    rows = summary_table([rep, failed]).splitlines()
    assert rows[1].startswith("ft,2-1,disjoint,0,2,complete,0.375000,0.000000,0.437500,120")
    assert rows[2] == "snr,2-1,disjoint,1,0,failed,,,,"


def test_fmt_value():
    assert fmt_value(None) == "" and fmt_value(0.5) == "0.500000" and fmt_value(3) == "3"


# -- config ----------------------------------------------------------------


def test_config_round_trip_and_hash(tmp_path):
    cfg = ExperimentConfig(schedule="5-5", seed=3)
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg
    assert cfg.config_hash() == cfg.replace(seed=9, eval_workers=4).config_hash()
    assert cfg.config_hash() != cfg.replace(lr0=0.1).config_hash()
    assert cfg.run_name().endswith("-s3") and cfg.run_name().startswith("recall-gen-5-5-disjoint-")


@pytest.mark.parametrize(
    "kw",
    [dict(method="magic"), dict(setup="mixed"), dict(r_new=0), dict(r_new=1, r_old=2, batch_size=16), dict(eval_workers=0)],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kw)


def test_config_rejects_unknown_keys_and_bad_json(tmp_path):
    (tmp_path / "a.json").write_text('{"lr": 0.1}')
    with pytest.raises(ConfigError, match="unknown config keys: lr"):
        load_config(tmp_path / "a.json")
    (tmp_path / "b.json").write_text("{")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(tmp_path / "b.json")
    (tmp_path / "c.json").write_text("[1]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")


def test_step_counts():
    cfg = ExperimentConfig()
    assert cfg.steps_per_class() == 1000
    assert cfg.replace(setup="overlapped").steps_per_class() == 1500
    assert cfg.replace(fast=True).steps_per_class() == 100
    assert cfg.replace(fast=True, setup="overlapped").steps_per_class() == 150


def test_schema_lists_every_field():
    names = [n for n, _, _ in config_schema()]
    assert names[0] == "canvas" and "lr0" in names and len(names) == len(set(names))
