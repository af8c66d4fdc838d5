"""Run configuration: ``key = value`` files with section headers.

Precedence, per key: command-line flag > ``COVE_SEED`` (seed only) >
config file > built-in default.

Recognised sections and keys::

    [data]   dataset, split_seed, output_dir
    [train]  every TrainConfig field; experts and init_from are comma lists
    [eval]   ks (comma list), k_gate, last_item_only
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .trainer import TrainConfig

SEED_ENV = "COVE_SEED"


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str | None = None
    split_seed: int = 0
    output_dir: str = "runs/default"
    ks: tuple[int, ...] = (10, 20)
    k_gate: int | None = None
    last_item_only: bool = False

    def validate(self) -> "RunConfig":
        self.train.validate()
        if not self.ks or any(k < 1 for k in self.ks):
            raise ConfigError(f"ks must be positive cutoffs, got {self.ks}")
        if self.k_gate is not None and not 1 <= self.k_gate <= len(self.train.experts):
            raise ConfigError(f"k_gate must lie in [1, {len(self.train.experts)}], got {self.k_gate}")
        return self


_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_RUN_KEYS = {
    "data": {"dataset": str, "split_seed": int, "output_dir": str},
    "eval": {"ks": "ints", "k_gate": "optint", "last_item_only": bool},
}


def _convert(key: str, raw: Any, kind) -> Any:
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if kind == "ints":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if kind == "list":
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        if kind == "optint":
            return None if raw.lower() in ("", "none") else int(raw)
        if kind == "optfloat":
            return None if raw.lower() in ("", "none") else float(raw)
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def _train_kind(name: str):
    return {"experts": "list", "init_from": "list", "gate_learning_rate": "optfloat",
            "eval_k_gate": "optint", "learning_rate": float}.get(name, _TRAIN_FIELDS[name].type)


def _kind_of(t):
    return {"int": int, "float": float, "str": str, "bool": bool}.get(t, t) if isinstance(t, str) else t


def load_run_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Merge defaults, an optional config file, ``COVE_SEED`` and flag overrides.

    ``overrides`` uses flat keys (``learning_rate``, ``dataset``, ``ks`` ...);
    None values are ignored.
    """
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                allowed = _TRAIN_FIELDS if section == "train" else _RUN_KEYS.get(section)
                if allowed is None:
                    raise ConfigError(f"{path}: unknown section [{section}]")
                if key not in allowed:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                values[key] = raw
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        values["seed"] = env_seed
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value

    train_kwargs, run_kwargs = {}, {}
    run_types = {k: t for sec in _RUN_KEYS.values() for k, t in sec.items()}
    for key, raw in values.items():
        if key in _TRAIN_FIELDS:
            train_kwargs[key] = _convert(key, raw, _kind_of(_train_kind(key)))
        elif key in run_types:
            run_kwargs[key] = _convert(key, raw, run_types[key])
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    try:
        train = TrainConfig(**train_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(train=train, **run_kwargs).validate()
