"""Run configuration: INI-style sections, CLI overrides and seed derivation.

Example file::

    [run]
    seed = 0
    mlm_on = true
    task_batching_on = false

    [backbone]
    d_model = 64

    [cpt]
    steps = 500

    [cl]
    tau = 0.03

    [data]
    n_caption = 240

Seeds: every component seed is derived from the master seed as the first
32-bit word of ``numpy.random.SeedSequence([master, crc32(name)])``.
"""

from __future__ import annotations

import configparser
import dataclasses
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .contrastive import ClConfig
from .cpt import CptConfig
from .errors import ConfigError
from .synth import SynthSpec

TOGGLES = ("mlm_on", "mae_on", "text_pairs_on", "longform_pairs_on", "task_batching_on")

# Table rows of the ablation study and the toggles that reproduce them.
ABLATIONS = {
    "full": {},
    "w/o MLM": {"mlm_on": False},
    "w/o MAE": {"mae_on": False},
    "w/o MLM & MAE": {"mlm_on": False, "mae_on": False},
    "w/o text-only pairs": {"text_pairs_on": False},
    "w/o long-form pairs": {"longform_pairs_on": False},
    "w/o task-aware batching": {"task_batching_on": False},
}


def derive_seed(master: int, name: str) -> int:
    return int(np.random.SeedSequence([int(master), zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass
class RunSettings:
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs"
    mlm_on: bool = True
    mae_on: bool = True
    text_pairs_on: bool = True
    longform_pairs_on: bool = True
    task_batching_on: bool = True
    log_every: int = 50


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    cpt: CptConfig = field(default_factory=CptConfig)
    cl: ClConfig = field(default_factory=ClConfig)
    data: SynthSpec = field(default_factory=SynthSpec)

    SECTIONS = ("run", "backbone", "cpt", "cl", "data")

    @property
    def seed(self) -> int:
        return self.run.seed

    def seed_for(self, component: str) -> int:
        return derive_seed(self.run.seed, component)

    def cpt_config(self) -> CptConfig:
        return dataclasses.replace(self.cpt, mlm_on=self.run.mlm_on, mae_on=self.run.mae_on,
                                   seed=self.seed_for("cpt"))

    def cl_config(self) -> ClConfig:
        return dataclasses.replace(self.cl, task_batching=self.run.task_batching_on, seed=self.seed_for("cl"))

    def synth_spec(self) -> SynthSpec:
        return dataclasses.replace(self.data, d_patch=self.backbone.d_patch,
                                   vocab_size=self.backbone.vocab_size, seed=self.seed_for("data"))

    def enabled_tasks(self) -> list[str]:
        tasks = ["caption"]
        if self.run.text_pairs_on:
            tasks.insert(0, "text")
        if self.run.longform_pairs_on:
            tasks.append("longform")
        return tasks

    def to_ini(self) -> str:
        lines = []
        for name in self.SECTIONS:
            lines.append(f"[{name}]")
            section = getattr(self, name)
            for f in fields(section):
                v = getattr(section, f.name)
                lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
            lines.append("")
        return "\n".join(lines)


def _coerce(value: str, typ: str, key: str):
    try:
        if typ == "bool":
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return value.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from None


def apply_overrides(config: RunConfig, items: dict[str, str]) -> RunConfig:
    """Apply ``{"section.key": "value"}`` overrides, revalidating each section."""
    grouped: dict[str, dict[str, str]] = {}
    for dotted, value in items.items():
        section, sep, key = dotted.partition(".")
        if not sep:
            section, key = "run", dotted
        grouped.setdefault(section, {})[key] = value
    updates = {}
    for section, kv in grouped.items():
        if section not in RunConfig.SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        current = getattr(config, section)
        types = {f.name: f.type for f in fields(current)}
        changes = {}
        for key, value in kv.items():
            if key not in types:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            changes[key] = value if not isinstance(value, str) else _coerce(value, str(types[key]), f"{section}.{key}")
        updates[section] = dataclasses.replace(current, **changes)
    return dataclasses.replace(config, **updates)


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    config = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case
        parser.read(path, encoding="utf-8")
        items = {f"{s}.{k}": v for s in parser.sections() for k, v in parser.items(s)}
        config = apply_overrides(config, items)
    if overrides:
        config = apply_overrides(config, overrides)
    return config
