"""Run configuration: one JSON document with ``dataset``, ``network`` and
``train`` sections plus ``output_dir`` and ``threshold``.

Command-line flags override file values; the merged result is written back
next to the run outputs as ``config.json`` and is enough to repeat the run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .data import DatasetSpec
from .errors import ConfigError
from .network import NetworkSpec
from .training import TrainConfig


@dataclass
class DataSource:
    """Where training data comes from: a directory or the synthetic generator."""

    root: str | None = None
    synthetic: str | None = None  # "small" | "large"
    count: int = 16
    size: int = 64
    val_count: int = 4
    train_names: list[str] | None = None  # explicit split lists override val_fraction
    val_names: list[str] | None = None

    def validate(self) -> None:
        if (self.root is None) == (self.synthetic is None):
            raise ConfigError("exactly one of dataset root or synthetic scale must be set")
        if self.synthetic is not None:
            if self.synthetic not in ("small", "large"):
                raise ConfigError(f"synthetic scale must be 'small' or 'large', got {self.synthetic!r}")
            if self.count < 1 or self.val_count < 1:
                raise ConfigError("synthetic count and val_count must be at least 1")
        elif not Path(self.root).is_dir():
            raise ConfigError(f"dataset root {self.root} does not exist")


@dataclass
class RunConfig:
    source: DataSource = field(default_factory=DataSource)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"
    threshold: float = 0.5

    def validate(self) -> None:
        self.source.validate()
        self.network.validate()
        self.train.validate()
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "source": asdict(self.source),
            "dataset": asdict(self.dataset),
            "network": self.network.to_dict(),
            "train": self.train.to_dict(),
            "output_dir": self.output_dir,
            "threshold": self.threshold,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write_snapshot(self, directory: str | Path) -> Path:
        path = Path(directory) / "config.json"
        path.write_text(self.dumps())
        return path


def _build(cls, values: dict[str, Any], section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def _tuples(d: dict[str, Any], keys: tuple[str, ...]) -> dict[str, Any]:
    return {k: tuple(v) if k in keys and isinstance(v, list) else v for k, v in d.items()}


def from_dict(doc: dict[str, Any]) -> RunConfig:
    unknown = set(doc) - {"source", "dataset", "network", "train", "output_dir", "threshold"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    net = doc.get("network", {})
    network = NetworkSpec.from_dict(net) if net else NetworkSpec()
    return RunConfig(
        source=_build(DataSource, doc.get("source", {}), "source"),
        dataset=_build(DatasetSpec, _tuples(doc.get("dataset", {}), ("input_size", "resize")), "dataset"),
        network=network,
        train=_build(TrainConfig, doc.get("train", {}), "train"),
        output_dir=doc.get("output_dir", "runs/default"),
        threshold=float(doc.get("threshold", 0.5)),
    )


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(doc)


def merge(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Recursive dict update; ``None`` in ``overrides`` means "not given"."""
    out = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out
