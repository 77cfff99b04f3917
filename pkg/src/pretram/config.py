"""Sectioned run configuration shared by every command.

The file is INI-style text with the sections [data], [patch], [model],
[pretrain], [finetune], [eval] and [sweep]. Every key is optional; absent keys
take the documented defaults and unknown keys are rejected.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .scenegen import DataConfig, MapConfig, Palette, SceneConfig, SPLITS
from .trainer import FinetuneConfig, PretrainConfig, SweepSpec

SECTIONS = ("data", "patch", "model", "pretrain", "finetune", "eval", "sweep")
PALETTE_KEYS = ("palette_background", "palette_drivable", "palette_sidewalk", "palette_crossing")

# keys the [model] section does not own: they come from [data], [patch] and [finetune]
_MODEL_DERIVED = ("context_px", "hist_len", "fut_len", "num_modes")

DOCS = {
    "data": "Synthetic maps and scenes (map raster, lattice and agent simulation parameters).",
    "patch": "Agent-centric and trajectory-decoupled patch cropping.",
    "model": "Encoder, projection and prediction head sizes.",
    "pretrain": "Contrastive pre-training schedule and objective.",
    "finetune": "Prediction fine-tuning schedule and checkpoint loading.",
    "eval": "Evaluation split and retrieval batching.",
    "sweep": "Data-efficiency sweep grid (comma-separated lists).",
}


@dataclass
class PatchConfig:
    context_px: int = 64

    def validate(self) -> None:
        if self.context_px < 8:
            raise ConfigError("context_px must be >= 8")


@dataclass
class EvalConfig:
    split: str = "test"
    batch_scenes: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.split not in SPLITS:
            raise ConfigError(f"eval split must be one of {SPLITS}")
        if self.batch_scenes < 1:
            raise ConfigError("eval batch_scenes must be >= 1")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def model_config(self) -> ModelConfig:
        """Model hyper-parameters with the sequence lengths, patch size and mode count filled in."""
        return replace(
            self.model,
            context_px=self.patch.context_px,
            hist_len=self.data.scene.hist_len,
            fut_len=self.data.scene.fut_len,
            num_modes=self.finetune.num_modes,
        )

    def validate(self) -> None:
        self.data.map.validate()
        self.data.scene.validate()
        if min(self.data.num_maps, self.data.train_scenes, self.data.test_scenes) < 1 or self.data.val_scenes < 0:
            raise ConfigError("num_maps, train_scenes and test_scenes must be >= 1")
        self.patch.validate()
        self.eval.validate()
        for part in (self.pretrain, self.finetune, self.sweep):
            try:
                part.validate()
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        if not 0 <= self.model.dropout_p < 1:
            raise ConfigError("dropout_p must lie in [0, 1)")

    def echo(self) -> dict:
        """Plain nested dict of every effective value, embedded in run outputs."""
        return {sec: dict(_section_items(self, sec)) for sec in SECTIONS}


# ------------------------------------------------------------------ key tables

def _section_objects(cfg: RunConfig, section: str) -> list:
    """Dataclass instances whose fields populate a section, in key order."""
    return {
        "data": [cfg.data, cfg.data.map, cfg.data.scene],
        "patch": [cfg.patch],
        "model": [cfg.model],
        "pretrain": [cfg.pretrain],
        "finetune": [cfg.finetune],
        "eval": [cfg.eval],
        "sweep": [cfg.sweep],
    }[section]


def _own_fields(obj) -> list[str]:
    names = [f.name for f in fields(obj)]
    if isinstance(obj, DataConfig):
        names = [n for n in names if n not in ("map", "scene")]
    if isinstance(obj, ModelConfig):
        names = [n for n in names if n not in _MODEL_DERIVED]
    return names


def _section_items(cfg: RunConfig, section: str):
    for obj in _section_objects(cfg, section):
        for name in _own_fields(obj):
            yield name, getattr(obj, name)
    if section == "data":
        for key in PALETTE_KEYS:
            yield key, getattr(Palette, key.split("_", 1)[1].upper())


# ------------------------------------------------------------------- encoding

def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_like(default, text: str, where: str):
    """Coerce text to the type of the default value."""
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t for t in (s.strip() for s in text.split(",")) if t]
            proto = default[0] if default else ""
            return tuple(_parse_like(proto, t, where) for t in items)
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def loads(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str  # keys are case-sensitive field names
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {unknown}; expected {list(SECTIONS)}")
    cfg = RunConfig()
    for section in SECTIONS:
        if not parser.has_section(section):
            continue
        owners = {}
        for obj in _section_objects(cfg, section):
            for name in _own_fields(obj):
                owners[name] = obj
        for key, raw in parser.items(section):
            where = f"{source} [{section}] {key}"
            if section == "data" and key in PALETTE_KEYS:
                _check_palette(key, raw, where)
                continue
            if key not in owners:
                raise ConfigError(f"{where}: unknown key")
            obj = owners[key]
            setattr(obj, key, _parse_like(getattr(obj, key), raw, where))
    cfg.validate()
    return cfg


def _check_palette(key: str, raw: str, where: str) -> None:
    """Palette colors are fixed by the dataset format; only the standard value is accepted."""
    expected = getattr(Palette, key.split("_", 1)[1].upper())
    try:
        value = tuple(int(v) for v in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"{where}: palette colors are 'r, g, b' integers") from exc
    if value != tuple(expected):
        raise ConfigError(f"{where}: palette is fixed by the map format; expected {_format(tuple(expected))}")


def load(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return loads(text, source=str(p))


def dumps(cfg: RunConfig, with_docs: bool = False) -> str:
    out = io.StringIO()
    for i, section in enumerate(SECTIONS):
        if i:
            out.write("\n")
        if with_docs:
            out.write(f"# {DOCS[section]}\n")
        out.write(f"[{section}]\n")
        for key, value in _section_items(cfg, section):
            out.write(f"{key} = {_format(value)}\n")
    return out.getvalue()


def reference() -> str:
    """Commented listing of every key with its default value."""
    header = "# Run configuration reference. Every key is optional; the values shown are the defaults.\n\n"
    return header + dumps(RunConfig(), with_docs=True)


__all__ = [
    "EvalConfig",
    "MapConfig",
    "PatchConfig",
    "RunConfig",
    "SceneConfig",
    "dumps",
    "load",
    "loads",
    "reference",
]
