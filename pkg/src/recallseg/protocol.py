"""Incremental class schedules and the disjoint / overlapped training splits."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import BACKGROUND, ClassSet, Dataset, RecallError, mask_to

SETUPS = ("disjoint", "overlapped")


class InvalidSchedule(RecallError):
    pass


class EmptyStep(RecallError):
    pass


@dataclass(frozen=True)
class TaskSchedule:
    steps: tuple[ClassSet, ...]
    setup: str = "disjoint"
    class_order: tuple[int, ...] = ()

    def __post_init__(self):
        if self.setup not in SETUPS:
            raise InvalidSchedule(f"setup must be one of {SETUPS}")
        if not self.steps or BACKGROUND not in self.steps[0]:
            raise InvalidSchedule("the first step must contain the background class")
        seen: set[int] = set()
        for s in self.steps:
            if not s.isdisjoint(seen):
                raise InvalidSchedule("steps must be pairwise disjoint")
            seen |= set(s)

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    @property
    def universe(self) -> ClassSet:
        return ClassSet(c for s in self.steps for c in s)

    def learned_until(self, k: int) -> ClassSet:
        """C_{0->k}."""
        out: set[int] = set()
        for s in self.steps[: k + 1]:
            out |= set(s)
        return ClassSet(out)

    def step_with_background(self, k: int) -> ClassSet:
        return self.steps[k] | {BACKGROUND}

    @property
    def initial_classes(self) -> ClassSet:
        return self.steps[0].foreground()

    @property
    def incremental_classes(self) -> ClassSet:
        return ClassSet(c for s in self.steps[1:] for c in s)

    @property
    def name(self) -> str:
        sizes = [len(self.steps[0].foreground())] + [len(s) for s in self.steps[1:]]
        if len(sizes) == 1:
            return f"{sizes[0]}"
        tail = set(sizes[1:])
        if len(tail) == 1:
            return f"{sizes[0]}-{sizes[1]}"
        return "-".join(map(str, sizes))


@dataclass(frozen=True)
class TaskPartition:
    per_step: tuple[Dataset, ...]
    schedule: TaskSchedule
    indices: tuple[tuple[int, ...], ...]  # dataset positions behind each step

    def __len__(self) -> int:
        return len(self.per_step)

    def __getitem__(self, k: int) -> Dataset:
        return self.per_step[k]


def make_schedule(
    num_classes: int,
    step_sizes: Sequence[int],
    order: str = "ascending",
    setup: str = "disjoint",
    seed: int = 0,
) -> TaskSchedule:
    sizes = [int(s) for s in step_sizes]
    if sum(sizes) != num_classes or not sizes or sizes[0] < 1 or min(sizes) < 1:
        raise InvalidSchedule(f"step sizes {sizes} must be positive and sum to {num_classes}")
    classes = np.arange(1, num_classes + 1)
    if order == "seeded-permutation":
        classes = np.random.default_rng(seed).permutation(classes)
    elif order != "ascending":
        raise InvalidSchedule(f"unknown class order {order!r}")
    steps, start = [], 0
    for k, n in enumerate(sizes):
        chunk = classes[start : start + n].tolist()
        steps.append(ClassSet(chunk + [BACKGROUND]) if k == 0 else ClassSet(chunk))
        start += n
    return TaskSchedule(tuple(steps), setup, tuple(int(c) for c in classes))


def parse_schedule_name(name: str, num_classes: int) -> list[int]:
    """'5-1' over 10 classes -> [5, 1, 1, 1, 1, 1]; '5-5' -> [5, 5]; '4-3-3' verbatim."""
    parts = [int(p) for p in name.split("-")]
    if len(parts) == 2 and parts[0] + parts[1] != num_classes:
        rest = num_classes - parts[0]
        if rest % parts[1]:
            raise InvalidSchedule(f"schedule {name!r} does not tile {num_classes} classes")
        return [parts[0]] + [parts[1]] * (rest // parts[1])
    return parts


def _build(dataset: Dataset, schedule: TaskSchedule, groups: list[list[int]]) -> TaskPartition:
    per_step = []
    for k, idx in enumerate(groups):
        if not idx:
            raise EmptyStep(f"step {k} ({schedule.steps[k]}) has no eligible images")
        keep = schedule.step_with_background(k)
        samples = tuple(dataset.samples[i].with_labels(mask_to(dataset.samples[i].labels, keep)) for i in idx)
        per_step.append(Dataset(samples, dataset.class_universe, dataset.split_tag))
    return TaskPartition(tuple(per_step), schedule, tuple(tuple(g) for g in groups))


def build_disjoint(dataset: Dataset, schedule: TaskSchedule, assign: str = "earliest") -> TaskPartition:
    """Disjoint split.

    T_0 takes every image with a pixel of C_0 other than background.  Each
    remaining image goes to exactly one later step among those whose
    classes it shows: the earliest one by default, or the latest one (so
    earlier incremental classes can appear in it, labelled background).
    """
    if schedule.setup != "disjoint":
        raise InvalidSchedule("build_disjoint needs a disjoint schedule")
    if assign not in ("latest", "earliest"):
        raise ValueError("assign must be 'latest' or 'earliest'")
    groups: list[list[int]] = [[] for _ in schedule.steps]
    c0 = schedule.initial_classes
    for i, s in enumerate(dataset.samples):
        if not s.present.isdisjoint(c0):
            groups[0].append(i)
            continue
        eligible = [k for k in range(1, schedule.num_steps) if not s.present.isdisjoint(schedule.steps[k])]
        if eligible:
            groups[eligible[-1] if assign == "latest" else eligible[0]].append(i)
    return _build(dataset, schedule, groups)


def build_overlapped(dataset: Dataset, schedule: TaskSchedule) -> TaskPartition:
    """Overlapped split: T_0 holds images with only C_0 pixels, T_k every image showing C_k."""
    if schedule.setup != "overlapped":
        raise InvalidSchedule("build_overlapped needs an overlapped schedule")
    groups: list[list[int]] = [[] for _ in schedule.steps]
    c0 = schedule.steps[0]
    for i, s in enumerate(dataset.samples):
        if s.present <= c0:
            groups[0].append(i)
        for k in range(1, schedule.num_steps):
            if not s.present.isdisjoint(schedule.steps[k]):
                groups[k].append(i)
    return _build(dataset, schedule, groups)


def build_partition(dataset: Dataset, schedule: TaskSchedule, assign: str = "earliest") -> TaskPartition:
    if schedule.setup == "disjoint":
        return build_disjoint(dataset, schedule, assign)
    return build_overlapped(dataset, schedule)


def save_partition_manifest(partition: TaskPartition, path: str | os.PathLike) -> None:
    doc = {
        "setup": partition.schedule.setup,
        "steps": [list(s.ids) for s in partition.schedule.steps],
        "per_step": [ds.names for ds in partition.per_step],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def load_partition_manifest(path: str | os.PathLike) -> dict:
    with open(path) as fh:
        return json.load(fh)
