"""Flat key=value run configuration files.

One file drives a whole run: model topology, optimizer schedule, loss
weights, latent prior, and the synthetic dataset.  Keys are flat (no
sections); the colliding ``seed`` fields are disambiguated as
``model_seed``, ``train_seed``, ``latent_seed`` and ``data_seed``.  Blank
lines and full-line ``#`` comments are allowed.  Unknown or repeated keys
are rejected, and every parse error cites its line number.  Any key may
be omitted, in which case the dataclass default applies.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import SynthConfig
from .errors import ConfigError
from .flow import LatentSpec, ModelConfig
from .losses import LossWeights
from .training import TrainConfig


# ---------------------------------------------------------------------------
# scalar text round trip (shared with the checkpoint's config block)
# ---------------------------------------------------------------------------

def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return repr(float(v))  # shortest text that parses back bitwise
    return str(v)


def parse_scalar(kind: str, text: str):
    """Parse one value; raises ValueError on malformed input."""
    if kind == "bool":
        if text not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text == "true"
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "str":
        return text
    raise ValueError(f"unsupported field type {kind!r}")


def field_kind(f) -> str:
    return f.type if isinstance(f.type, str) else f.type.__name__


# ---------------------------------------------------------------------------
# the flat key table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    synth: SynthConfig = SynthConfig()
    n_pairs: int = 250
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.n_pairs < 2:
            raise ConfigError(f"n_pairs must be >= 2, got {self.n_pairs}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(
                f"train_fraction must lie in (0, 1), got {self.train_fraction}")


# (section, dataclass, fields to skip, key renames) — flattening recipe.
_SECTIONS = (
    ("model", ModelConfig, (), {"seed": "model_seed"}),
    ("train", TrainConfig, ("loss_weights", "latent"), {"seed": "train_seed"}),
    ("loss", LossWeights, (), {}),
    ("latent", LatentSpec, (), {"kind": "latent_kind", "seed": "latent_seed"}),
    ("synth", SynthConfig, (), {"seed": "data_seed"}),
)
_RUN_KEYS = (("n_pairs", "int"), ("train_fraction", "float"))


def _key_table():
    """Ordered {flat key: (section, field name, scalar kind)}."""
    table = {}
    for section, cls, skip, renames in _SECTIONS:
        for f in dataclasses.fields(cls):
            if f.name in skip:
                continue
            key = renames.get(f.name, f.name)
            if key in table:
                raise AssertionError(f"flat key collision: {key}")
            table[key] = (section, f.name, field_kind(f))
    for key, kind in _RUN_KEYS:
        table[key] = ("run", key, kind)
    return table


KEY_TABLE = _key_table()


def run_config_keys():
    """All accepted keys, in canonical file order."""
    return tuple(KEY_TABLE)


def format_run_config(cfg: RunConfig) -> str:
    """Canonical text: every key, declaration order, repr-exact floats."""
    sections = {
        "model": cfg.model,
        "train": cfg.train,
        "loss": cfg.train.loss_weights,
        "latent": cfg.train.latent,
        "synth": cfg.synth,
        "run": cfg,
    }
    lines = []
    for key, (section, field, _) in KEY_TABLE.items():
        lines.append(f"{key}={format_value(getattr(sections[section], field))}")
    return "\n".join(lines) + "\n"


def parse_run_config(text: str) -> RunConfig:
    values = {}   # flat key -> parsed value
    seen = {}     # flat key -> line number
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", line=lineno)
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in KEY_TABLE:
            raise ConfigError(f"unknown key {key!r}", line=lineno)
        if key in seen:
            raise ConfigError(
                f"key {key!r} repeats (first set on line {seen[key]})", line=lineno)
        seen[key] = lineno
        _, _, kind = KEY_TABLE[key]
        try:
            values[key] = parse_scalar(kind, value)
        except ValueError as err:
            raise ConfigError(f"key {key!r}: {err}", line=lineno) from None
    return build_run_config(values)


def build_run_config(values: dict) -> RunConfig:
    """Assemble a RunConfig from flat {key: parsed value} overrides."""
    by_section = {section: {} for section, _, _, _ in _SECTIONS}
    by_section["run"] = {}
    for key, value in values.items():
        if key not in KEY_TABLE:
            raise ConfigError(f"unknown key {key!r}")
        section, field, _ = KEY_TABLE[key]
        by_section[section][field] = value
    model = ModelConfig(**by_section["model"])
    weights = LossWeights(**by_section["loss"])
    latent = LatentSpec(**by_section["latent"])
    train = TrainConfig(loss_weights=weights, latent=latent, **by_section["train"])
    synth = SynthConfig(**by_section["synth"])
    return RunConfig(model=model, train=train, synth=synth, **by_section["run"])


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"{path}: {err.strerror or err}") from None
    try:
        return parse_run_config(text)
    except ConfigError as err:
        raise ConfigError(f"{path}: {err}") from None
