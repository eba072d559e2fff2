"""Experiment specification: a YAML document with world/model/train/channel/eval sections.

Every field has a default; unknown keys are rejected with their line number.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from typing import Any, Optional

import yaml

from .evaluator import VARIANTS, EvalConfig
from .fusion import AnchorConfig
from .pillars import BevGrid
from .pipeline import ModelConfig
from .scene import WorldConfig
from .trainer import TrainConfig


class SpecError(ValueError):
    def __init__(self, msg: str, line: Optional[int] = None, key: str = ""):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{key + ': ' if key else ''}{msg}")
        self.line = line
        self.key = key


@dataclass(frozen=True)
class DataSpec:
    n_train: int = 20
    n_test: int = 6
    test_seed_offset: int = 1000


@dataclass(frozen=True)
class ChannelSpec:
    per_byte_cost: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class SweepSpec:
    variants: tuple = VARIANTS
    latencies_ms: tuple = (0, 100, 200, 300, 500)


@dataclass(frozen=True)
class ExperimentSpec:
    seed: int
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataSpec = DataSpec()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    channel: ChannelSpec = ChannelSpec()
    eval: EvalConfig = EvalConfig()
    sweep: SweepSpec = SweepSpec()

    def with_seed(self, seed: int) -> "ExperimentSpec":
        return build_spec({**self.as_dict(), "seed": seed})

    def as_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @property
    def hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def model_config(self) -> ModelConfig:
        return replace(self.model, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def world_config(self, scenario_seed: int) -> WorldConfig:
        return replace(self.world, seed=scenario_seed)

    def train_seeds(self) -> list:
        return [self.seed * 100_003 + k for k in range(self.data.n_train)]

    def test_seeds(self) -> list:
        return [self.seed * 100_003 + self.data.test_seed_offset + k for k in range(self.data.n_test)]


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, (list, tuple)) else v


def _key_lines(text: str) -> dict:
    """(section, key) -> 1-based line of that key in the YAML text."""
    out: dict = {}
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return out
    if not isinstance(root, yaml.MappingNode):
        return out
    for k, v in root.value:
        out[(k.value,)] = k.start_mark.line + 1
        if isinstance(v, yaml.MappingNode):
            for k2, v2 in v.value:
                out[(k.value, k2.value)] = k2.start_mark.line + 1
                if isinstance(v2, yaml.MappingNode):
                    for k3, _ in v2.value:
                        out[(k.value, k2.value, k3.value)] = k3.start_mark.line + 1
    return out


def _build(cls, values: dict, path: tuple, lines: dict, nested: dict):
    if not isinstance(values, dict):
        raise SpecError("expected a mapping", lines.get(path), ".".join(path))
    names = {f.name for f in fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, val in values.items():
        kpath = path + (key,)
        if key not in names:
            raise SpecError("unknown key", lines.get(kpath), ".".join(kpath))
        if key in nested:
            kwargs[key] = _build(nested[key], val, kpath, lines, {})
        else:
            kwargs[key] = _tuplify(val)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise SpecError(str(e), lines.get(path), ".".join(path)) from e


SECTIONS = {
    "world": (WorldConfig, {}),
    "data": (DataSpec, {}),
    "model": (ModelConfig, {"grid": BevGrid, "anchors": AnchorConfig}),
    "train": (TrainConfig, {}),
    "channel": (ChannelSpec, {}),
    "eval": (EvalConfig, {}),
    "sweep": (SweepSpec, {}),
}


def build_spec(doc: dict, lines: Optional[dict] = None) -> ExperimentSpec:
    lines = lines or {}
    if not isinstance(doc, dict):
        raise SpecError("spec must be a mapping")
    if "seed" not in doc:
        raise SpecError("seed is mandatory", None, "seed")
    seed = doc["seed"]
    if not isinstance(seed, int) or seed < 0:
        raise SpecError("seed must be a non-negative integer", lines.get(("seed",)), "seed")
    kwargs: dict[str, Any] = {"seed": seed}
    for key, val in doc.items():
        if key == "seed":
            continue
        if key not in SECTIONS:
            raise SpecError("unknown section", lines.get((key,)), key)
        cls, nested = SECTIONS[key]
        kwargs[key] = _build(cls, val or {}, (key,), lines, nested)
    spec = ExperimentSpec(**kwargs)
    unknown = [v for v in spec.sweep.variants if v not in VARIANTS]
    if unknown:
        raise SpecError(f"unknown variants {unknown}", lines.get(("sweep", "variants")), "sweep.variants")
    try:
        spec.world.validate()
    except ValueError as e:
        raise SpecError(str(e), lines.get(("world",)), "world") from e
    return spec


def parse_spec(text: str) -> ExperimentSpec:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise SpecError(f"invalid YAML: {getattr(e, 'problem', e)}", mark.line + 1 if mark else None) from e
    return build_spec(doc if doc is not None else {}, _key_lines(text))


def dump_spec(spec: ExperimentSpec) -> str:
    return yaml.safe_dump(spec.as_dict(), sort_keys=False)
