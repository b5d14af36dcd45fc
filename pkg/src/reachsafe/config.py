"""Run configurations: JSON documents validated into dataclasses."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError

DEFAULT_HORIZON = 2.0


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_hash(doc: dict) -> str:
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


def load_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``key.sub=value`` overrides; values parse as JSON, else as strings."""
    out = copy.deepcopy(doc)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError(f"override {item!r} has an empty key")
        node = out
        for p in parts[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {item!r}: {p!r} is not an object")
            node = nxt
        node[parts[-1]] = _parse_value(raw)
    return out


class _Block:
    """Strict ``from_dict`` for dataclass configs: unknown keys are errors."""

    @classmethod
    def from_dict(cls, d: Optional[dict]):
        d = dict(d or {})
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"{cls.__name__}: unknown fields {unknown}")
        try:
            obj = cls(**d)
        except TypeError as e:
            raise ConfigError(f"{cls.__name__}: {e}") from None
        obj.validate()
        return obj

    def validate(self):
        pass

    def to_dict(self) -> dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


@dataclass
class GenDemosConfig(_Block):
    output_dir: str
    episodes: int = 40
    seed: int = 0
    model: Optional[dict] = None  # HOCBF document; defaults to the ground-truth power model
    scenario: dict = field(default_factory=dict)
    planner: dict = field(default_factory=dict)

    def validate(self):
        _require(isinstance(self.episodes, int) and self.episodes >= 1, "episodes must be a positive integer")
        _require(isinstance(self.seed, int), "seed must be an integer")


@dataclass
class LearnConfig(_Block):
    output_dir: str
    demos: str
    dynamics: dict
    barrier: dict
    alpha_kinds: list = field(default_factory=lambda: ["power", "power"])
    init_params: Optional[list] = None
    weights: dict = field(default_factory=dict)
    lr: float = 0.001
    steps: int = 10000
    provider: dict = field(default_factory=lambda: {"mode": "worst-case"})
    seed: int = 0
    momentum: float = 0.0

    def validate(self):
        _require(isinstance(self.steps, int) and self.steps >= 0, "steps must be a nonnegative integer")
        _require(self.lr > 0, "lr must be positive")
        _require(len(self.alpha_kinds) in (1, 2), "alpha_kinds must list one or two kinds")
        if self.init_params is not None:
            _require(len(self.init_params) == len(self.alpha_kinds), "init_params must match alpha_kinds")


@dataclass
class SolveConfig(_Block):
    output_dir: str
    dynamics: dict
    boundary: dict
    grid: dict
    kind: str = "worst-case"
    horizon: float = DEFAULT_HORIZON
    model: Optional[str] = None  # path to model.json (constrained kind)
    scheme: str = "upwind1"
    dissipation: str = "local"
    cfl: float = 0.5
    n_slices: Optional[int] = 11
    name: Optional[str] = None

    def validate(self):
        _require(self.kind in ("worst-case", "constrained", "wc-hj", "hocbf-hj"), f"unknown solve kind {self.kind!r}")
        _require(self.horizon > 0, "horizon must be positive")
        for k in ("lower", "upper", "points"):
            _require(k in self.grid, f"grid needs {k!r}")
        if self.hamiltonian == "constrained":
            _require(bool(self.model), "constrained kind needs a model path")

    @property
    def hamiltonian(self) -> str:
        return {"wc-hj": "worst-case", "hocbf-hj": "constrained"}.get(self.kind, self.kind)


@dataclass
class CompareConfig(_Block):
    output_dir: str
    concepts: dict
    reference: str
    candidate: str
    grid: Optional[dict] = None
    t: Optional[float] = None
    state_filter: Optional[dict] = None
    threshold: float = 0.0
    levelsets: list = field(default_factory=list)
    controls: list = field(default_factory=list)

    def validate(self):
        for k in (self.reference, self.candidate):
            _require(k in self.concepts, f"concept {k!r} not defined")


@dataclass
class EvalConfig(_Block):
    output_dir: str
    concepts: dict
    log: Optional[str] = None
    synthetic: Optional[dict] = None
    t: Optional[float] = None
    evaluate: Optional[list] = None

    def validate(self):
        _require((self.log is None) != (self.synthetic is None), "give exactly one of log or synthetic")
