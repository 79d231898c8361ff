# network/net.py
import json
import logging
import zipfile
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Optional, Set, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from pydantic import ValidationError

from network.backbone import (
    BackboneConfig,
    FeatureBundle,
    Modality,
    StateDict,
    build_backbone,
    collapse_first_layer,
    extend_first_layer,
    make_pixel_fused_input,
)
from network.fusion import FusionConfig, FusionLevel, RoutedFeatures, route_inputs
from network.iou_net import IoUHeadConfig, IoUNet
from network.model_predictor import ModelPredictor, PredictorConfig
from utils.exceptions import CheckpointError, DatasetError

logger = logging.getLogger(__name__)

INPUT_CHANNELS = {Modality.RGB: 3, Modality.TIR: 1, Modality.FUSED: 4}
PARAMETER_GROUPS = ("backbone_rgb", "backbone_tir", "predictor", "iou_head")
OPTIMIZER_PREFIX = "optim."


class MultiModalNet(nn.Module):
    """Per-modality feature extractors, one model predictor per response stream
    and the IoU head, wired by a FusionConfig."""

    def __init__(self, fusion: FusionConfig, backbone: Optional[BackboneConfig] = None,
                 predictor: Optional[PredictorConfig] = None, iou_head: Optional[IoUHeadConfig] = None):
        super().__init__()
        self.fusion = fusion
        self.backbone_config = backbone or BackboneConfig()
        self.predictor_config = predictor or PredictorConfig()
        self.iou_config = iou_head or IoUHeadConfig()

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.backbone_config.weight_init_seed)
            self.backbones = nn.ModuleDict({
                modality.value: build_backbone(self.backbone_config, INPUT_CHANNELS[modality])
                for modality in fusion.backbones
            })
            self.predictors = nn.ModuleList(
                ModelPredictor(self.stream_channels(modality)[1], self.predictor_config)
                for modality in fusion.predictor_streams
            )
            self.iou_head = IoUNet(self.stream_channels(fusion.iou_input), self.iou_config)

    def stream_channels(self, modality: Modality) -> Tuple[int, int]:
        """(block3, block4) channel counts of the features routed for a modality."""
        widths = self.backbone_config.block_channel_widths
        single = (widths[2], widths[3])
        if modality == Modality.FUSED and self.fusion.level != FusionLevel.PIXEL:
            return 2 * single[0], 2 * single[1]
        return single

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def prepare_inputs(self, rgb: torch.Tensor, tir: torch.Tensor) -> Dict[Modality, torch.Tensor]:
        """(N, 3, H, W) and (N, 1, H, W) images -> the inputs this fusion level reads."""
        inputs = {}
        for modality in self.fusion.backbones:
            if modality == Modality.RGB:
                inputs[modality] = rgb
            elif modality == Modality.TIR:
                inputs[modality] = tir
            else:
                inputs[modality] = make_pixel_fused_input(rgb, tir, channel_axis=1)
        return inputs

    def extract(self, images: Mapping[Modality, torch.Tensor]) -> Dict[Modality, FeatureBundle]:
        config = self.backbone_config
        bundles = {}
        for modality, image in images.items():
            block3, block4 = self.backbones[modality.value](image.to(self.dtype))
            bundles[modality] = FeatureBundle(block3=block3, block4=block4, stride3=config.stride3,
                                              stride4=config.stride4, modality=modality)
        return bundles

    def route(self, bundles: Mapping[Modality, FeatureBundle]) -> RoutedFeatures:
        return route_inputs(self.fusion, bundles)

    def features(self, rgb: torch.Tensor, tir: torch.Tensor) -> RoutedFeatures:
        return self.route(self.extract(self.prepare_inputs(rgb, tir)))

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        groups: Dict[str, List[nn.Parameter]] = {}
        for modality, module in self.backbones.items():
            name = "backbone_tir" if modality == Modality.TIR.value else "backbone_rgb"
            groups[name] = list(module.parameters())
        groups["predictor"] = list(self.predictors.parameters())
        groups["iou_head"] = list(self.iou_head.parameters())
        return groups

    def group_prefixes(self) -> Dict[str, str]:
        """State-dict key prefix of every parameter group."""
        prefixes = {}
        for modality in self.backbones:
            name = "backbone_tir" if modality == Modality.TIR.value else "backbone_rgb"
            prefixes[name] = f"backbones.{modality}."
        prefixes["predictor"] = "predictors."
        prefixes["iou_head"] = "iou_head."
        return prefixes

    def manifest(self) -> dict:
        return {
            "fusion": self.fusion.model_dump(mode="json"),
            "backbone": self.backbone_config.model_dump(mode="json"),
            "predictor": self.predictor_config.model_dump(mode="json"),
            "iou_head": self.iou_config.model_dump(mode="json"),
        }


def _manifest_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_checkpoint(net: MultiModalNet, path: Union[str, Path], step: int = 0,
                    optimizer: Optional[torch.optim.Optimizer] = None) -> Path:
    """Write <path>.npz with named arrays and <path>.json with layers, shapes and configs."""
    path = Path(path).with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: tensor.detach().cpu().numpy() for name, tensor in net.state_dict().items()}
    if optimizer is not None:
        names = {id(param): name for name, param in net.named_parameters()}
        for group in optimizer.param_groups:
            for param in group["params"]:
                buffer = optimizer.state.get(param, {}).get("momentum_buffer")
                if buffer is not None:
                    arrays[OPTIMIZER_PREFIX + names[id(param)]] = buffer.detach().cpu().numpy()
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    manifest = dict(net.manifest(), step=step,
                    layers={name: list(array.shape) for name, array in arrays.items()})
    _manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.debug(f"Saved checkpoint {path} at step {step}")
    return path


def read_checkpoint(path: Union[str, Path]) -> Tuple[dict, Dict[str, np.ndarray]]:
    path = Path(path).with_suffix(".npz")
    manifest_path = _manifest_path(path)
    if not path.is_file() or not manifest_path.is_file():
        raise DatasetError("Missing checkpoint archive or manifest", path)
    try:
        manifest = json.loads(manifest_path.read_text())
        with np.load(path) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (OSError, EOFError, ValueError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"Unreadable checkpoint: {e}", path) from e
    if not isinstance(manifest, dict):
        raise CheckpointError("Checkpoint manifest is not a JSON object", manifest_path)
    return manifest, arrays


def load_checkpoint(path: Union[str, Path], dtype: torch.dtype = torch.float32
                    ) -> Tuple[MultiModalNet, int, Dict[str, torch.Tensor]]:
    """Rebuild the network from a checkpoint; returns (net, step, momentum buffers by parameter name)."""
    manifest, arrays = read_checkpoint(path)
    try:
        net = MultiModalNet(
            FusionConfig(**manifest["fusion"]),
            BackboneConfig(**manifest["backbone"]),
            PredictorConfig(**manifest["predictor"]),
            IoUHeadConfig(**manifest["iou_head"]),
        ).to(dtype)
        state = {name: torch.from_numpy(array) for name, array in arrays.items()
                 if not name.startswith(OPTIMIZER_PREFIX)}
        net.load_state_dict(state)
        step = int(manifest.get("step", 0))
    except (KeyError, TypeError, ValueError, ValidationError, RuntimeError) as e:
        raise CheckpointError(f"Checkpoint does not describe a loadable network: {e}", Path(path)) from e
    momentum = {name[len(OPTIMIZER_PREFIX):]: torch.from_numpy(array)
                for name, array in arrays.items() if name.startswith(OPTIMIZER_PREFIX)}
    return net, step, momentum


def _backbone_source(modality: str, pretrained: StateDict) -> StateDict:
    prefix = f"backbones.{Modality.RGB.value}."
    params = {name[len(prefix):]: tensor for name, tensor in pretrained.items() if name.startswith(prefix)}
    if not params:
        return {}
    if modality == Modality.TIR.value:
        params = collapse_first_layer(params)
    elif modality == Modality.FUSED.value:
        params = extend_first_layer(params, "mean")
    return {f"backbones.{modality}.{name}": tensor for name, tensor in params.items()}


def transfer_pretrained(net: MultiModalNet, pretrained: StateDict) -> FrozenSet[str]:
    """Initialise net from RGB-trained weights; returns the parameter groups that were loaded.

    A component is copied only when every one of its tensors matches in shape."""
    target = net.state_dict()
    candidates: StateDict = {}
    for modality in net.backbones:
        candidates.update(_backbone_source(modality, pretrained))
    for index in range(len(net.predictors)):
        prefix = f"predictors.{index}."
        candidates.update({prefix + name[len("predictors.0."):]: tensor for name, tensor in pretrained.items()
                           if name.startswith("predictors.0.")})
    candidates.update({name: tensor for name, tensor in pretrained.items() if name.startswith("iou_head.")})

    update: StateDict = {}
    loaded: Set[str] = set()
    for group, prefix in net.group_prefixes().items():
        names = [name for name in target if name.startswith(prefix)]
        if names and all(name in candidates and candidates[name].shape == target[name].shape for name in names):
            update.update({name: candidates[name].to(target[name].dtype) for name in names})
            loaded.add(group)
    net.load_state_dict(update, strict=False)
    logger.info(f"Transferred pretrained weights into groups {sorted(loaded)} "
                f"({len(update)} tensors) for {net.fusion.level.value} fusion")
    return frozenset(loaded)
