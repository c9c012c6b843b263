"""Run configuration: one flat JSON document with dotted keys.

A config file maps ``section.key`` to a value, e.g. ``{"train.lr": 0.001,
"model.embed_dim": 64}``; nested ``{"train": {"lr": ...}}`` is accepted
too.  Command-line overrides use the same dotted names (``--train.lr 0.001``).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import __version__
from .dataset import PreprocessConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

KINDS = ("epoch", "sequence")


@dataclass
class DataConfig:
    dataset: str = ""          # processed dataset directory
    folds: str = ""            # folds.json; empty = derive from the dataset
    out_dir: str = "runs"
    k: int = 5
    fold_seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class RunConfig:
    kind: str = "epoch"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        self.model.validate()
        if self.data.k < 2:
            raise ConfigError(f"data.k must be >= 2, got {self.data.k}")

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {"kind": self.kind, "seed": self.seed}
        for section in ("model", "train", "data", "preprocess"):
            for k, v in getattr(self, section).to_dict().items():
                flat[f"{section}.{k}"] = v
        return flat

    def to_json(self) -> str:
        doc = {"artifact_version": __version__, **self.to_flat()}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "RunConfig":
        sections: dict[str, dict[str, Any]] = {"model": {}, "train": {}, "data": {}, "preprocess": {}}
        top: dict[str, Any] = {}
        for key, value in flat.items():
            if key == "artifact_version":
                continue
            head, _, rest = key.partition(".")
            if rest:
                if head not in sections:
                    raise ConfigError(f"unknown config section {head!r} in {key!r}")
                sections[head][rest] = value
            elif key in ("kind", "seed"):
                top[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        data_known = {f.name for f in dataclasses.fields(DataConfig)}
        bad = set(sections["data"]) - data_known
        if bad:
            raise ConfigError(f"unknown data config keys: {sorted(bad)}")
        cfg = cls(
            kind=str(top.get("kind", "epoch")),
            seed=int(top.get("seed", 0)),
            model=ModelConfig.from_dict(sections["model"]),
            train=TrainConfig.from_dict(sections["train"]),
            data=DataConfig(**sections["data"]),
            preprocess=PreprocessConfig.from_dict(sections["preprocess"]),
        )
        cfg.validate()
        return cfg


def flatten(doc: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    """Nested section dicts become dotted keys; dict-valued leaves such as
    ``preprocess.channels`` are kept whole."""
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and not prefix and k in ("model", "train", "data", "preprocess"):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_value(text: str) -> Any:
    """Override values are JSON when they parse as JSON, else plain strings."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(args: list[str]) -> dict[str, Any]:
    """``["--train.lr", "0.001", "--kind=sequence"]`` -> ``{"train.lr": 0.001, "kind": "sequence"}``."""
    out, i = {}, 0
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--"):
            raise ConfigError(f"expected a --section.key override, got {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"override {tok} has no value")
            key, value = tok[2:], args[i + 1]
            i += 2
        out[key] = parse_value(value)
    return out


def load_run_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None,
                    **defaults: Any) -> RunConfig:
    """Merge ``defaults`` < config file < ``overrides`` into a RunConfig.

    The top-level ``seed`` also seeds training unless ``train.seed`` is
    given explicitly.
    """
    flat: dict[str, Any] = dict(defaults)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        flat.update(flatten(doc))
    flat.update(overrides or {})
    if "seed" in flat and "train.seed" not in flat:
        flat["train.seed"] = flat["seed"]
    try:
        return RunConfig.from_flat(flat)
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from None
