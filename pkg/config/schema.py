# config/schema.py
import configparser
import logging
import os
import typing
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Type

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from config import settings
from core.evaluation import EvaluationConfig
from core.tracker import TrackerConfig
from core.trainer import TrainConfig
from data.synth import SynthConfig
from network.backbone import BackboneConfig
from network.fusion import FusionConfig
from network.iou_net import IoUHeadConfig
from network.model_predictor import PredictorConfig
from utils.exceptions import ConfigError

logger = logging.getLogger(__name__)


class GeneralConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    jobs: int = Field(default=1, ge=1)


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train_root: str = settings.DEFAULT_TRAIN_ROOT
    test_root: str = settings.DEFAULT_TEST_ROOT
    results_root: str = settings.DEFAULT_RESULTS_ROOT
    checkpoint_dir: str = settings.DEFAULT_CHECKPOINT_DIR
    exclusion_list: Optional[str] = None


SECTIONS: Dict[str, Type[BaseModel]] = {
    "general": GeneralConfig,
    "data": DataConfig,
    "synth": SynthConfig,
    "backbone": BackboneConfig,
    "fusion": FusionConfig,
    "predictor": PredictorConfig,
    "iou_head": IoUHeadConfig,
    "train": TrainConfig,
    "tracker": TrackerConfig,
    "evaluation": EvaluationConfig,
}


class GlobalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    general: GeneralConfig = Field(default_factory=GeneralConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    predictor: PredictorConfig = Field(default_factory=PredictorConfig)
    iou_head: IoUHeadConfig = Field(default_factory=IoUHeadConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    tracker: TrackerConfig = Field(default_factory=TrackerConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)


def _is_collection(annotation) -> bool:
    origin = typing.get_origin(annotation)
    if origin is typing.Union:
        return any(_is_collection(arg) for arg in typing.get_args(annotation) if arg is not type(None))
    return origin in (tuple, list, set, frozenset)


def _coerce(model: Type[BaseModel], raw: Dict[str, str]) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for key, value in raw.items():
        info = model.model_fields.get(key)
        if info is not None and _is_collection(info.annotation):
            values[key] = [item.strip() for item in value.split(",") if item.strip()]
        elif value.strip() == "" or value.strip().lower() == "none":
            values[key] = None
        else:
            values[key] = value.strip()
    return values


def parse_overrides(overrides: Iterable[str]) -> Dict[str, Dict[str, str]]:
    """`section.key=value` strings -> {section: {key: value}}."""
    parsed: Dict[str, Dict[str, str]] = {}
    errors = []
    for item in overrides:
        target, sep, value = item.partition("=")
        section, dot, key = target.strip().partition(".")
        if not sep or not dot or not section or not key:
            errors.append(f"Malformed override {item!r}; expected section.key=value")
            continue
        parsed.setdefault(section, {})[key] = value
    if errors:
        raise ConfigError(errors)
    return parsed


def resolve_config_path(explicit: Optional[str]) -> Optional[Path]:
    """--config flag, then the MFTRACK_CONFIG environment variable."""
    candidate = explicit or os.environ.get(settings.CONFIG_ENV_VAR)
    return Path(candidate) if candidate else None


def load_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> GlobalConfig:
    """Read an INI file and apply overrides; every validation error is collected
    before a ConfigError is raised."""
    raw: Dict[str, Dict[str, str]] = {}
    errors: List[str] = []
    if path is not None:
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path)
        except configparser.Error as e:
            raise ConfigError(f"Cannot parse {path}: {e}") from e
        raw = {section: dict(parser.items(section)) for section in parser.sections()}
        logger.debug(f"Loaded config sections {sorted(raw)} from {path}")
    for section, values in parse_overrides(overrides).items():
        raw.setdefault(section, {}).update(values)

    sections = {}
    for name in sorted(set(raw) - set(SECTIONS)):
        errors.append(f"[{name}] unknown section")
    for name, model in SECTIONS.items():
        try:
            sections[name] = model(**_coerce(model, raw.get(name, {})))
        except ValidationError as e:
            for error in e.errors():
                location = ".".join(str(part) for part in error["loc"]) or "<section>"
                errors.append(f"[{name}] {location}: {error['msg']}")
    if errors:
        raise ConfigError(errors)
    # train.seed follows general.seed unless it is set explicitly
    if "seed" not in raw.get("train", {}):
        sections["train"] = sections["train"].model_copy(update={"seed": sections["general"].seed})
    return GlobalConfig(**sections)


def describe_keys(sections: Iterable[str]) -> str:
    """Help text listing every section.key a command consumes."""
    lines = []
    for name in sections:
        keys = ", ".join(SECTIONS[name].model_fields)
        lines.append(f"[{name}] {keys}")
    return "\n".join(lines)


def require_paths(paths: Sequence[Tuple[str, Optional[str]]]):
    missing = [f"{label}: {value}" for label, value in paths if value is not None and not Path(value).exists()]
    if missing:
        raise ConfigError([f"Path does not exist ({item})" for item in missing])
