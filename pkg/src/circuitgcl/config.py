"""Sectioned key=value run configuration.

A run is described by a small text file:

    [run]
    seed = 42

    [pretrain]
    hidden_dim = 256
    epochs = 50

    [train]
    task = coupling
    loss = gai

Lines starting with # or ; are comments.  Section and key names are
validated against a fixed schema so typos fail loudly.  Command-line flags
override file values, and the fully resolved configuration is written back
out as a snapshot next to each command's outputs, so a run can always be
reproduced from its artifacts.

Seed resolution order: flag, then [run] seed, then the CIRCUITGCL_SEED
environment variable.  No seed at all is an error.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

from ._errors import ConfigError
from .netlist import LabelSpec
from .scatter import PretrainConfig
from .synth import SynthConfig
from .tasks import EDGE_REGRESSION, NODE_CLASSIFICATION, TaskConfig

SEED_ENV_VAR = "CIRCUITGCL_SEED"

_PATH_KEYS = ("netlist", "spf", "graph", "out", "homo", "encoder", "model",
              "report", "embeddings")

# section -> key -> coercion type
_SCHEMA = {
    "run": {"seed": int},
    "paths": {k: str for k in _PATH_KEYS},
    "synth": {"cells": int, "coupling_density": float, "noise_sigma": float},
    "labels": {"lo": float, "hi": float, "n_classes": int},
    "pretrain": {
        "hidden_dim": int, "n_layers": int, "activation": str,
        "dropout_rate": float, "epochs": int, "learning_rate": float,
        "ema_tau": float, "scatter_weight": float, "eps": float,
        "degree_feature": bool, "ema_per_step": bool,
        "subgraph_threshold": int, "subgraph_hops": int,
        "subgraph_fanout": int,
    },
    "train": {
        "task": str, "loss": str, "epochs": int, "learning_rate": float,
        "batch_size": int, "hidden_dim": int, "n_layers": int,
        "activation": str, "dropout_rate": float, "degree_feature": bool,
        "n_classes": int, "gmm_components": int, "sigma_noise": float,
        "focal_gamma": float, "fine_tune_embeddings": bool,
    },
    "eval": {"excluded_classes": str},
}

_SECTION_RE = re.compile(r"^\[([a-z_]+)\]$")
_KEY_RE = re.compile(r"^[a-z_]+$")

_TASK_NAMES = {"coupling": EDGE_REGRESSION, "gcap": NODE_CLASSIFICATION}


def _coerce(section, key, raw, lineno=None):
    kind = _SCHEMA[section][key]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw, 10)
        if kind is float:
            value = float(raw)
            if value != value or value in (float("inf"), float("-inf")):
                raise ValueError(raw)
            return value
        return raw
    except ValueError:
        raise ConfigError(
            f"cannot read {section}.{key}: {raw!r} is not a valid "
            f"{kind.__name__}", lineno) from None


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text):
    """Parse sectioned key=value text into {section: {key: value}}."""
    sections = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        header = _SECTION_RE.match(stripped)
        if header:
            name = header.group(1)
            if name not in _SCHEMA:
                raise ConfigError(f"unknown section [{name}]", lineno)
            current = name
            sections.setdefault(name, {})
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected key = value, got {stripped!r}",
                              lineno)
        if current is None:
            raise ConfigError("key = value before any [section] header",
                              lineno)
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not _KEY_RE.match(key):
            raise ConfigError(f"bad key name {key!r}", lineno)
        if key not in _SCHEMA[current]:
            raise ConfigError(f"unknown key {key!r} in section [{current}]",
                              lineno)
        if key in sections[current]:
            raise ConfigError(f"duplicate key {key!r} in section [{current}]",
                              lineno)
        sections[current][key] = _coerce(current, key, raw, lineno)
    return sections


def parse_config_file(path):
    with open(path, "r") as fh:
        return parse_config_text(fh.read())


def format_config(sections):
    """Canonical serialization: sorted sections and keys, typed values."""
    chunks = []
    for name in sorted(sections):
        body = sections[name]
        if not body:
            continue
        chunks.append(f"[{name}]")
        for key in sorted(body):
            chunks.append(f"{key} = {_format_value(body[key])}")
        chunks.append("")
    return "\n".join(chunks)


@dataclass
class RunConfig:
    """Fully resolved run settings: file values with flag overrides applied."""

    seed: int
    sections: dict = field(default_factory=dict)

    def _section(self, name):
        return self.sections.get(name, {})

    def pretrain_config(self):
        return PretrainConfig(seed=self.seed, **self._section("pretrain"))

    def synth_config(self):
        body = dict(self._section("synth"))
        cells = body.pop("cells", None)
        if cells is not None:
            body["n_cells"] = cells
        return SynthConfig(seed=self.seed, **body)

    def label_spec(self):
        return LabelSpec(**self._section("labels"))

    def task_config(self):
        body = dict(self._section("train"))
        task = body.pop("task", "coupling")
        if task not in _TASK_NAMES:
            raise ConfigError(f"unknown task {task!r}; choose from "
                              f"{sorted(_TASK_NAMES)}")
        loss = body.pop("loss", None)
        kwargs = {"task": _TASK_NAMES[task], "seed": self.seed}
        if loss is not None:
            kwargs["loss_kind"] = loss
        return TaskConfig(**kwargs, **body)

    def task_name(self):
        return self._section("train").get("task", "coupling")

    def excluded_classes(self):
        raw = self._section("eval").get("excluded_classes", "2").strip()
        if not raw:
            return frozenset()
        try:
            return frozenset(int(tok) for tok in raw.split(","))
        except ValueError:
            raise ConfigError(
                f"excluded_classes must be comma-separated integers, "
                f"got {raw!r}") from None

    def path(self, key):
        return self._section("paths").get(key)

    def snapshot_text(self):
        merged = {name: dict(body) for name, body in self.sections.items()
                  if body}
        merged.setdefault("run", {})["seed"] = self.seed
        return format_config(merged)


def resolve(config_path=None, overrides=None, seed_flag=None, env=None):
    """Merge config file, flag overrides, and the seed sources into a
    RunConfig.  `overrides` maps (section, key) to already-typed values."""
    env = os.environ if env is None else env
    sections = parse_config_file(config_path) if config_path else {}
    for (section, key), value in (overrides or {}).items():
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"unknown option {section}.{key}")
        if value is None:
            continue
        sections.setdefault(section, {})[key] = value
    seed = seed_flag
    if seed is None:
        seed = sections.get("run", {}).get("seed")
    if seed is None:
        raw = env.get(SEED_ENV_VAR)
        if raw is not None:
            seed = _coerce("run", "seed", raw)
    if seed is None:
        raise ConfigError(
            f"a seed is required: pass --seed, set [run] seed in the config "
            f"file, or export {SEED_ENV_VAR}")
    sections.setdefault("run", {})["seed"] = int(seed)
    return RunConfig(seed=int(seed), sections=sections)
