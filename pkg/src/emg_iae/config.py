"""Run configuration: one JSON document with a section per component."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .baseline import BaselineConfig
from .forward_model import VolumeConductorConfig
from .informed_ae.decoder import DecoderContext, PhysicalScalerBounds
from .informed_ae.encoder import EncoderConfig
from .informed_ae.training import TrainConfig
from .synth import ArrayConfig, SynthConfig


class ConfigError(ValueError):
    pass


class RunConfig(BaseModel):
    """All tunables of a pipeline run. Unknown keys are rejected at every level.

    ``scaler`` may be omitted, in which case the innervation-zone bounds
    follow the electrode array (first to last electrode).
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    synth: SynthConfig = Field(default_factory=SynthConfig)
    array: ArrayConfig = Field(default_factory=ArrayConfig)
    volume_conductor: VolumeConductorConfig = Field(default_factory=VolumeConductorConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    baseline: BaselineConfig = Field(default_factory=BaselineConfig)
    scaler: PhysicalScalerBounds | None = None

    def scaler_bounds(self) -> PhysicalScalerBounds:
        return self.scaler or PhysicalScalerBounds.for_array(self.array.electrode_array())

    def decoder_context(self) -> DecoderContext:
        return DecoderContext(self.array.electrode_array(), self.array.sampling_grid(),
                              self.synth.template_fibre(), self.volume_conductor)

    def to_json(self) -> dict:
        return self.model_dump(mode="json")

    def hash(self) -> str:
        return config_hash(self)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.to_json(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _set_dotted(tree: dict, dotted: str, value: Any):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {k} is not a section")
    node[keys[-1]] = value


def parse_override(item: str) -> tuple[str, Any]:
    """``section.key=value`` with ``value`` read as JSON, falling back to a plain string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config_tree(source: str | Path | dict | None) -> dict:
    """Raw JSON tree of a config file; ``"default"`` or ``None`` gives an empty tree."""
    if source is None or source == "default":
        return {}
    if isinstance(source, dict):
        return json.loads(json.dumps(source))
    path = Path(source)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} not found")
    try:
        tree = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return tree


def build_config(tree: dict, overrides: list[str] | None = None) -> RunConfig:
    tree = json.loads(json.dumps(tree))
    for item in overrides or []:
        _set_dotted(tree, *parse_override(item))
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(source: str | Path | dict | None = "default", overrides: list[str] | None = None) -> RunConfig:
    return build_config(load_config_tree(source), overrides)


def has_entry(tree: dict, dotted: str) -> bool:
    node: Any = tree
    for k in dotted.split("."):
        if not isinstance(node, dict) or k not in node:
            return False
        node = node[k]
    return True
