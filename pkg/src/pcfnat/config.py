"""Run configuration files.

A config is a YAML mapping with an integer ``version`` (currently 1) and
optional sections ``model``, ``train``, ``fbank`` and ``data`` whose keys
are the fields of :class:`ModelConfig`, :class:`TrainConfig`,
:class:`FbankConfig` and :class:`DataConfig`.  Omitted keys take their
defaults; unknown keys are an error, with the closest valid key suggested::

    version: 1
    model:
      variant: pcf
      layers_per_block: 3
    train:
      batch_size: 64
      lr_peak: 0.5
"""
from __future__ import annotations

import difflib
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import DataConfig
from .errors import ConfigError, ParseError
from .features import FbankConfig
from .model import ModelConfig
from .train import TrainConfig

CONFIG_VERSION = 1
SECTIONS = {"model": ModelConfig, "train": TrainConfig, "fbank": FbankConfig, "data": DataConfig}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fbank: FbankConfig = field(default_factory=FbankConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {"version": CONFIG_VERSION, **{k: getattr(self, k).to_dict() for k in SECTIONS}}


def _key_lines(text: str) -> dict:
    """``{(section, key): line}`` for the first two mapping levels."""
    lines = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if not isinstance(root, yaml.MappingNode):
        return lines
    for knode, vnode in root.value:
        lines[(None, knode.value)] = knode.start_mark.line + 1
        if isinstance(vnode, yaml.MappingNode):
            for k2, _ in vnode.value:
                lines[(knode.value, k2.value)] = k2.start_mark.line + 1
    return lines


def _reject_unknown(keys, allowed, section, path, lines):
    where = "the top level" if section is None else f"section {section!r}"
    for key in keys:
        if key not in allowed:
            hint = difflib.get_close_matches(str(key), list(allowed), n=1)
            extra = f"; did you mean {hint[0]!r}?" if hint else f"; valid keys: {', '.join(sorted(allowed))}"
            raise ParseError(f"unknown key {key!r} in {where}{extra}", path,
                             lines.get((section, str(key))))


def parse_config(doc, path=None, lines=None) -> RunConfig:
    lines = lines or {}
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ParseError("config must be a mapping", path)
    if "version" not in doc:
        raise ParseError(f"missing 'version' (expected {CONFIG_VERSION})", path)
    if doc["version"] != CONFIG_VERSION:
        raise ParseError(f"unsupported config version {doc['version']!r} (expected {CONFIG_VERSION})", path)
    _reject_unknown(doc, {"version", *SECTIONS}, None, path, lines)
    out = {}
    for name, cls in SECTIONS.items():
        section = doc.get(name) or {}
        if not isinstance(section, dict):
            raise ParseError(f"section {name!r} must be a mapping", path, lines.get((None, name)))
        _reject_unknown(section, {f.name for f in fields(cls)}, name, path, lines)
        try:
            out[name] = cls.from_dict(section)
        except (ConfigError, TypeError) as e:
            raise ParseError(f"section {name!r}: {e}", path, lines.get((None, name))) from None
    return RunConfig(**out)


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ParseError(f"invalid YAML: {getattr(e, 'problem', e)}", path, line) from None
    return parse_config(doc, path, _key_lines(text))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
