"""Experiment configuration: one JSON object, every field optional.

Unknown keys are rejected so that typos fail loudly.  ``config_hash``
fingerprints everything except the seed and the output-only switches, and
names the run directory together with the seed.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

from .core import RecallError
from .synthdata import SceneConfig

METHODS = ("recall-gen", "recall-retrieval", "inpaint-only", "replay-only", "ft", "snr", "joint")

# switches that change what gets written, never what gets computed
_OUTPUT_ONLY = ("record_wall_clock", "eval_workers", "write_checkpoints")


class ConfigError(RecallError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    canvas: tuple[int, int] = (32, 32)
    num_classes: int = 10
    shapes_per_image: tuple[int, int] = (1, 3)
    background_texture: str = "gradient"
    noise_std: float = 0.03
    n_train: int = 400
    n_test: int = 200
    # protocol
    schedule: str = "5-1"
    setup: str = "disjoint"
    class_order: str = "ascending"
    disjoint_assign: str = "earliest"
    # method
    method: str = "recall-gen"
    replay_source: str = "generator"
    n_replay: int = 16
    r_new: int = 1
    r_old: int = 1
    batch_size: int = 16
    # model
    patch_size: int = 5
    feature_dim: int = 32
    # optimisation
    steps_per_class_disjoint: int = 1000
    steps_per_class_overlapped: int = 1500
    helper_steps_per_class: int = 1000
    fast: bool = False
    fast_steps_per_class: int = 100
    lr0: float = 0.3
    lr_end: float = 0.003
    power: float = 0.9
    momentum: float = 0.9
    helper_lr0: float = 0.1
    helper_lr_end: float = 0.001
    # generator source
    vocab_size: int = 24
    classifier_temperature: float = 0.25
    # retrieval source
    retrieval_dir: str | None = None
    retrieval_url: str | None = None
    retrieval_pool: int = 16
    retrieval_timeout: float = 10.0
    retrieval_retries: int = 2
    offline: bool = False
    # store-and-replay baseline
    snr_budget_scale: float = 1.0
    # seeds
    seed: int = 0
    data_seed: int | None = None
    # output
    eval_workers: int = 1
    record_wall_clock: bool = False
    write_checkpoints: bool = True

    def __post_init__(self):
        object.__setattr__(self, "canvas", tuple(int(v) for v in self.canvas))
        object.__setattr__(self, "shapes_per_image", tuple(int(v) for v in self.shapes_per_image))
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.setup not in ("disjoint", "overlapped"):
            raise ConfigError("setup must be 'disjoint' or 'overlapped'")
        if self.replay_source not in ("generator", "retrieval"):
            raise ConfigError("replay_source must be 'generator' or 'retrieval'")
        if self.r_new < 1 or self.r_old < 0:
            raise ConfigError("r_new must be >= 1 and r_old >= 0")
        if self.batch_size % (self.r_new + self.r_old):
            raise ConfigError(
                f"r_new + r_old = {self.r_new + self.r_old} must divide batch_size = {self.batch_size}"
            )
        if self.n_replay < 0 or self.batch_size < 1:
            raise ConfigError("n_replay must be >= 0 and batch_size >= 1")
        if self.disjoint_assign not in ("earliest", "latest"):
            raise ConfigError("disjoint_assign must be 'earliest' or 'latest'")
        if self.eval_workers < 1:
            raise ConfigError("eval_workers must be >= 1")

    # -- derived ------------------------------------------------------------

    @property
    def scene(self) -> SceneConfig:
        return SceneConfig(
            canvas=self.canvas,
            num_classes=self.num_classes,
            shapes_per_image=self.shapes_per_image,
            background_texture=self.background_texture,
            noise_std=self.noise_std,
            seed=self.seed if self.data_seed is None else self.data_seed,
        )

    @property
    def uses_inpainting(self) -> bool:
        return self.method in ("recall-gen", "recall-retrieval", "inpaint-only")

    @property
    def uses_replay(self) -> bool:
        return self.method in ("recall-gen", "recall-retrieval", "replay-only")

    @property
    def source_kind(self) -> str | None:
        if self.method == "recall-gen":
            return "generator"
        if self.method == "recall-retrieval":
            return "retrieval"
        if self.method == "replay-only":
            return self.replay_source
        return None

    def steps_per_class(self) -> int:
        base = self.fast_steps_per_class if self.fast else self.steps_per_class_disjoint
        if self.setup == "overlapped":
            return base * 3 // 2 if self.fast else self.steps_per_class_overlapped
        return base

    def helper_steps(self) -> int:
        return self.fast_steps_per_class if self.fast else self.helper_steps_per_class

    # -- (de)serialisation --------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["canvas"] = list(self.canvas)
        d["shapes_per_image"] = list(self.shapes_per_image)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def computation_dict(self) -> dict:
        """Every field that can change a result (drops the output-only switches)."""
        return {k: v for k, v in self.to_dict().items() if k not in _OUTPUT_ONLY}

    def config_hash(self) -> str:
        d = {k: v for k, v in self.computation_dict().items() if k != "seed"}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:10]

    def run_name(self) -> str:
        return f"{self.method}-{self.schedule}-{self.setup}-{self.config_hash()}-s{self.seed}"


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return ExperimentConfig.from_dict(doc)


def save_config(cfg: ExperimentConfig, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_schema() -> list[tuple[str, str, object]]:
    """(name, type, default) for every field, in declaration order."""
    out = []
    for f in fields(ExperimentConfig):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()  # type: ignore[misc]
        out.append((f.name, str(f.type), default))
    return out
