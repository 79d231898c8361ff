# network/fusion.py
from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, Mapping, Optional, Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from network.backbone import FeatureBundle, Modality
from utils.exceptions import ConfigError, GeometryError

COMPONENTS: FrozenSet[str] = frozenset({"backbone", "iou_head", "predictor"})


class FusionLevel(str, Enum):
    SINGLE_RGB = "single_rgb"
    SINGLE_TIR = "single_tir"
    PIXEL = "pixel"
    FEATURE = "feature"
    RESPONSE = "response"


class FusionConfig(BaseModel):
    """Which fusion level is active and what each component consumes.

    For response-level fusion ``predictor_input`` is ``fused`` and means one
    predictor per modality with the two response maps summed."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    level: FusionLevel = FusionLevel.FEATURE
    iou_input: Optional[Modality] = None
    predictor_input: Optional[Modality] = None
    tir_lr_multiplier: float = Field(default=1.0, gt=0)
    finetune: FrozenSet[str] = COMPONENTS

    @model_validator(mode="before")
    @classmethod
    def fill_forced_inputs(cls, data):
        if not isinstance(data, dict):
            return data
        data = dict(data)
        level = FusionLevel(data.get("level", FusionLevel.FEATURE))
        forced = {
            FusionLevel.SINGLE_RGB: (Modality.RGB, Modality.RGB),
            FusionLevel.SINGLE_TIR: (Modality.TIR, Modality.TIR),
            FusionLevel.PIXEL: (Modality.FUSED, Modality.FUSED),
            FusionLevel.FEATURE: (Modality.FUSED, Modality.FUSED),
            FusionLevel.RESPONSE: (Modality.RGB, Modality.FUSED),
        }[level]
        for key, value in zip(("iou_input", "predictor_input"), forced):
            if data.get(key) is None:
                data[key] = value
        return data

    @model_validator(mode="after")
    def validate_routing(self):
        level, iou, pred = self.level, self.iou_input, self.predictor_input
        if level == FusionLevel.SINGLE_RGB and (iou, pred) != (Modality.RGB, Modality.RGB):
            raise ValueError("single_rgb routes rgb to every component")
        if level == FusionLevel.SINGLE_TIR and (iou, pred) != (Modality.TIR, Modality.TIR):
            raise ValueError("single_tir routes tir to every component")
        if level == FusionLevel.PIXEL and (iou, pred) != (Modality.FUSED, Modality.FUSED):
            raise ValueError("pixel-level fusion feeds the fused input to every component")
        if level == FusionLevel.RESPONSE and (iou == Modality.FUSED or pred != Modality.FUSED):
            raise ValueError("response-level fusion needs iou_input in {rgb, tir} and summed predictors")
        unknown = set(self.finetune) - COMPONENTS
        if unknown:
            raise ValueError(f"Unknown fine-tune components: {sorted(unknown)}")
        return self

    @property
    def backbones(self) -> Tuple[Modality, ...]:
        """Feature extractors this configuration instantiates."""
        if self.level == FusionLevel.SINGLE_RGB:
            return (Modality.RGB,)
        if self.level == FusionLevel.SINGLE_TIR:
            return (Modality.TIR,)
        if self.level == FusionLevel.PIXEL:
            return (Modality.FUSED,)
        if self.level == FusionLevel.RESPONSE:
            return Modality.RGB, Modality.TIR
        used = {self.iou_input, self.predictor_input}
        if Modality.FUSED in used:
            return Modality.RGB, Modality.TIR
        return tuple(m for m in (Modality.RGB, Modality.TIR) if m in used)

    @property
    def predictor_streams(self) -> Tuple[Modality, ...]:
        if self.level == FusionLevel.RESPONSE:
            return Modality.RGB, Modality.TIR
        return (self.predictor_input,)


@dataclass(frozen=True)
class RoutedFeatures:
    iou: FeatureBundle
    predictor: Tuple[FeatureBundle, ...]


def fuse_features(x_v: torch.Tensor, x_t: torch.Tensor) -> torch.Tensor:
    """x^F = [x^V | x^T] along the channel axis (-3)."""
    if x_v.shape[-2:] != x_t.shape[-2:] or x_v.shape[:-3] != x_t.shape[:-3]:
        raise GeometryError(f"Cannot fuse features of shapes {tuple(x_v.shape)} and {tuple(x_t.shape)}")
    return torch.cat([x_v, x_t], dim=-3)


def fuse_response(s_v: torch.Tensor, s_t: torch.Tensor) -> torch.Tensor:
    """s^F = s^V + s^T"""
    if s_v.shape != s_t.shape:
        raise GeometryError(f"Response maps differ in shape: {tuple(s_v.shape)} vs {tuple(s_t.shape)}")
    return s_v + s_t


def fuse_bundles(rgb: FeatureBundle, tir: FeatureBundle) -> FeatureBundle:
    return FeatureBundle(
        block3=fuse_features(rgb.block3, tir.block3),
        block4=fuse_features(rgb.block4, tir.block4),
        stride3=rgb.stride3,
        stride4=rgb.stride4,
        modality=Modality.FUSED,
    )


def route_inputs(config: FusionConfig, bundles: Mapping[Modality, FeatureBundle]) -> RoutedFeatures:
    missing = [m.value for m in config.backbones if m not in bundles]
    if missing:
        raise ConfigError(f"Missing feature bundles for {missing} under {config.level.value} fusion")

    if config.level == FusionLevel.PIXEL:
        fused = bundles[Modality.FUSED]
        return RoutedFeatures(iou=fused, predictor=(fused,))

    cache: Dict[Modality, FeatureBundle] = dict(bundles)

    def resolve(modality: Modality) -> FeatureBundle:
        if modality not in cache:
            cache[modality] = fuse_bundles(bundles[Modality.RGB], bundles[Modality.TIR])
        return cache[modality]

    if config.level == FusionLevel.RESPONSE:
        return RoutedFeatures(iou=resolve(config.iou_input),
                              predictor=(bundles[Modality.RGB], bundles[Modality.TIR]))
    return RoutedFeatures(iou=resolve(config.iou_input), predictor=(resolve(config.predictor_input),))


def _row(level: FusionLevel, iou: Optional[Modality] = None, pred: Optional[Modality] = None,
         tir_x10: bool = False, finetune=COMPONENTS) -> FusionConfig:
    return FusionConfig(level=level, iou_input=iou, predictor_input=pred,
                        tir_lr_multiplier=10.0 if tir_x10 else 1.0, finetune=frozenset(finetune))


RGB, TIR, FUSED = Modality.RGB, Modality.TIR, Modality.FUSED

# Named configurations: every row of the fusion-mechanism table plus three
# feature/response grid completions (marked False).
ABLATION_ROWS: Dict[str, Tuple[FusionConfig, bool]] = {
    "single_rgb": (_row(FusionLevel.SINGLE_RGB, finetune=()), True),
    "single_tir": (_row(FusionLevel.SINGLE_TIR, finetune=()), True),
    "single_tir/ft=iou,pred": (_row(FusionLevel.SINGLE_TIR, finetune=("iou_head", "predictor")), True),
    "single_tir/ft=backbone,pred": (_row(FusionLevel.SINGLE_TIR, finetune=("backbone", "predictor")), True),
    "single_tir/ft=all": (_row(FusionLevel.SINGLE_TIR), True),
    "single_rgb/ft=all": (_row(FusionLevel.SINGLE_RGB), True),
    "pixel": (_row(FusionLevel.PIXEL), True),
    "response/iou=rgb": (_row(FusionLevel.RESPONSE, RGB), True),
    "response/iou=tir": (_row(FusionLevel.RESPONSE, TIR), True),
    "feature/iou=rgb/pred=fused": (_row(FusionLevel.FEATURE, RGB, FUSED), True),
    "feature/iou=tir/pred=fused": (_row(FusionLevel.FEATURE, TIR, FUSED), True),
    "feature/iou=fused/pred=rgb": (_row(FusionLevel.FEATURE, FUSED, RGB), True),
    "feature/iou=fused/pred=tir": (_row(FusionLevel.FEATURE, FUSED, TIR), True),
    "feature/iou=fused/pred=fused": (_row(FusionLevel.FEATURE, FUSED, FUSED), True),
    "feature/iou=fused/pred=fused/tirx10": (_row(FusionLevel.FEATURE, FUSED, FUSED, tir_x10=True), True),
    "feature/iou=rgb/pred=tir": (_row(FusionLevel.FEATURE, RGB, TIR), False),
    "feature/iou=tir/pred=rgb": (_row(FusionLevel.FEATURE, TIR, RGB), False),
    "response/iou=tir/tirx10": (_row(FusionLevel.RESPONSE, TIR, tir_x10=True), False),
}


def fusion_row(name: str) -> FusionConfig:
    try:
        return ABLATION_ROWS[name][0]
    except KeyError:
        raise ConfigError(f"Unknown fusion row {name!r}") from None
