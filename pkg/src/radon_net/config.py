"""Run configuration: one JSON document, validated before any work starts."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Mapping, Optional

from .dataset import DatasetError, PreprocessSpec
from .evaluation import DEFAULT_MAX_PAIRS, SCENARIOS
from .model import MODES, REFERENCE_INPUT_SHAPE, ConfigError, LayerSpec, infer_shapes, reference_spec
from .training import OptimizerConfig, SamplerConfig

DEFAULTS: dict[str, Any] = {
    "manifest": None,
    "out": "run",
    "epochs": 1,
    "init_weights": None,
    "layer_map": None,
    "model": {
        "layers": [layer.to_dict() for layer in reference_spec()],
        "input_shape": list(REFERENCE_INPUT_SHAPE),
        "mode": "untied",
        "seed": 0,
        "freeze": [],
    },
    "preprocess": PreprocessSpec().to_dict(),
    "sampler": SamplerConfig().to_dict(),
    "optimizer": OptimizerConfig().to_dict(),
    "eval": {
        "scenarios": ["both_known", "both_novel", "mixed", "all"],
        "max_pairs": DEFAULT_MAX_PAIRS,
        "seed": 0,
        "samples_per_cell": 16,
    },
}


def _merge(base: dict, override: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "layer_map":
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


class RunConfig:
    """Merged, validated configuration.  ``data`` is the JSON-ready dict."""

    def __init__(self, data: Mapping):
        self.data = _merge(DEFAULTS, data)
        self._validate()

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Mapping] = None) -> "RunConfig":
        data: dict = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text(encoding="utf-8"))
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
            if not isinstance(data, dict):
                raise ConfigError(f"config {path} must hold a JSON object")
        merged = _merge(DEFAULTS, data)
        for dotted, value in (overrides or {}).items():
            if value is None:
                continue
            node = merged
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return cls(merged)

    def _validate(self) -> None:
        d = self.data
        m = d["model"]
        if m["mode"] not in MODES:
            raise ConfigError(f"model.mode must be one of {MODES}, got {m['mode']!r}")
        if not isinstance(m["layers"], list):
            raise ConfigError("model.layers must be a list of layer objects")
        self.layers = [LayerSpec.from_dict(x) for x in m["layers"]]
        try:
            self.preprocess = PreprocessSpec.from_dict(d["preprocess"])
        except (DatasetError, TypeError) as exc:
            raise ConfigError(f"preprocess: {exc}") from None
        self.input_shape = tuple(int(x) for x in m["input_shape"])
        if self.input_shape != self.preprocess.shape:
            raise ConfigError(f"model.input_shape {list(self.input_shape)} does not match preprocess output "
                              f"{list(self.preprocess.shape)}")
        infer_shapes(self.layers, self.input_shape)
        try:
            self.sampler = SamplerConfig(**d["sampler"])
            self.optimizer = OptimizerConfig(**d["optimizer"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"sampler/optimizer: {exc}") from None
        if not isinstance(d["epochs"], int) or d["epochs"] < 0:
            raise ConfigError(f"epochs must be a non-negative integer, got {d['epochs']!r}")
        ev = d["eval"]
        bad = [s for s in ev["scenarios"] if s not in SCENARIOS]
        if bad:
            raise ConfigError(f"eval.scenarios: unknown scenario {bad[0]!r}; choose from {list(SCENARIOS)}")
        if int(ev["max_pairs"]) < 2:
            raise ConfigError("eval.max_pairs must be >= 2")

    def require(self, key: str) -> Any:
        value = self.data.get(key)
        if value in (None, ""):
            raise ConfigError(f"missing required config key {key!r}")
        return value

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        return path
