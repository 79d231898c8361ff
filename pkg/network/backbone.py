# network/backbone.py
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Literal, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, field_validator

from config import settings
from utils.exceptions import GeometryError

FIRST_LAYER = "stages.0.conv.weight"

StateDict = Dict[str, torch.Tensor]


class Modality(str, Enum):
    RGB = "rgb"
    TIR = "tir"
    FUSED = "fused"


class BackboneConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    input_channels: Literal[1, 3, 4] = 3
    block_channel_widths: Tuple[int, int, int, int] = settings.BLOCK_CHANNEL_WIDTHS
    block_strides: Tuple[int, int, int, int] = settings.BLOCK_STRIDES
    weight_init_seed: int = settings.WEIGHT_INIT_SEED

    @field_validator("block_channel_widths", "block_strides")
    def validate_positive(cls, v):
        if any(x <= 0 for x in v):
            raise ValueError("Widths and strides must be positive")
        return v

    @property
    def stride3(self) -> int:
        return math.prod(self.block_strides[:3])

    @property
    def stride4(self) -> int:
        return math.prod(self.block_strides)


@dataclass(frozen=True)
class FeatureBundle:
    """block3 / block4 maps of shape (N, C, h, w) for one modality."""

    block3: torch.Tensor
    block4: torch.Tensor
    stride3: int
    stride4: int
    modality: Modality

    def select(self, index) -> "FeatureBundle":
        return replace(self, block3=self.block3[index], block4=self.block4[index])

    @property
    def channels(self) -> Tuple[int, int]:
        return self.block3.shape[-3], self.block4.shape[-3]


class ConvStage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2)
        self.norm = nn.GroupNorm(math.gcd(8, out_channels), out_channels)
        self.act = nn.SiLU()
        self.stride = stride

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.act(self.norm(self.conv(x)))
        if self.stride > 1:
            # floor(H / stride) output rows
            x = F.avg_pool2d(x, self.stride)
        return x


class Backbone(nn.Module):
    """Four conv stages; block3 and block4 are the outputs of the last two.
    The first layer is 7×7 so that its input slices can be extended or collapsed."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        widths = config.block_channel_widths
        in_channels = (config.input_channels,) + widths[:-1]
        kernels = (settings.FIRST_LAYER_KERNEL, 3, 3, 3)
        self.stages = nn.ModuleList(
            ConvStage(c_in, c_out, k, s)
            for c_in, c_out, k, s in zip(in_channels, widths, kernels, config.block_strides)
        )

    def first_layer_preactivation(self, image: torch.Tensor) -> torch.Tensor:
        return self.stages[0].conv(image)

    def forward(self, image: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        x = image
        for stage in self.stages[:3]:
            x = stage(x)
        return x, self.stages[3](x)


def image_to_tensor(image: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    """H×W×C array -> (1, C, H, W) tensor; (N, C, H, W) tensors pass through."""
    if isinstance(image, torch.Tensor):
        return image if image.dim() == 4 else image.unsqueeze(0)
    return torch.from_numpy(np.ascontiguousarray(np.asarray(image).transpose(2, 0, 1))).unsqueeze(0)


def extract_features(image: Union[np.ndarray, torch.Tensor], backbone: Backbone,
                     modality: Modality = Modality.RGB) -> FeatureBundle:
    config = backbone.config
    x = image_to_tensor(image).to(next(backbone.parameters()).dtype)
    if x.shape[1] != config.input_channels:
        raise GeometryError(f"Backbone expects {config.input_channels} channels, got {x.shape[1]}")
    height, width = x.shape[-2:]
    if height // config.stride4 < 1 or width // config.stride4 < 1:
        raise GeometryError(f"Input {height}×{width} too small for total stride {config.stride4}")
    block3, block4 = backbone(x)
    return FeatureBundle(block3=block3, block4=block4, stride3=config.stride3,
                         stride4=config.stride4, modality=Modality(modality))


def make_pixel_fused_input(rgb, tir, channel_axis: int = -1):
    """I^F = [I^V | I^T]: RGB channels first, then TIR."""
    rgb_shape, tir_shape = list(rgb.shape), list(tir.shape)
    del rgb_shape[channel_axis], tir_shape[channel_axis]
    if rgb_shape != tir_shape:
        raise GeometryError(f"RGB {tuple(rgb.shape)} and TIR {tuple(tir.shape)} are not aligned")
    if isinstance(rgb, torch.Tensor):
        return torch.cat([rgb, tir], dim=channel_axis)
    return np.concatenate([rgb, tir], axis=channel_axis)


def extend_first_layer(params: StateDict, init_rule: str = "mean") -> StateDict:
    """3-channel backbone weights -> 4-channel weights; the new TIR slice is the
    mean of the RGB slices ("mean") or zero ("zero")."""
    weight = params[FIRST_LAYER]
    if weight.shape[1] != 3:
        raise GeometryError(f"First layer has {weight.shape[1]} input channels, expected 3")
    if init_rule == "mean":
        extra = weight.mean(dim=1, keepdim=True)
    elif init_rule == "zero":
        extra = torch.zeros_like(weight[:, :1])
    else:
        raise ValueError(f"Unknown init rule {init_rule!r}")
    extended = dict(params)
    extended[FIRST_LAYER] = torch.cat([weight, extra], dim=1)
    return extended


def collapse_first_layer(params: StateDict) -> StateDict:
    """3-channel weights -> 1-channel weights equivalent to feeding the gray
    image replicated over the RGB slices."""
    weight = params[FIRST_LAYER]
    if weight.shape[1] != 3:
        raise GeometryError(f"First layer has {weight.shape[1]} input channels, expected 3")
    collapsed = dict(params)
    collapsed[FIRST_LAYER] = weight.sum(dim=1, keepdim=True)
    return collapsed


def build_backbone(config: BackboneConfig, input_channels: int) -> Backbone:
    return Backbone(config.model_copy(update={"input_channels": input_channels}))
