# core/trainer.py
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from config import settings
from core.tracker import crop_region, patches_to_tensor
from data.models import SampleSet, Sequence
from network.iou_net import iou_regression_loss
from network.model_predictor import boxes_to_centers, classification_loss, gaussian_labels
from network.net import OPTIMIZER_PREFIX, MultiModalNet, read_checkpoint, save_checkpoint
from utils.exceptions import DatasetError, TrainingError
from utils.helpers import box_iou, boxes_to_tensor, jitter_boxes, make_rng

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "L_cls", "L_iou", "L_total"]
LOSS_FILE = "losses.csv"
FINAL_CHECKPOINT = "final"


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    stage: Literal["pretrain", "finetune"] = "finetune"
    n_frames: int = Field(default=settings.N_FRAMES, ge=1)
    batch_size: int = Field(default=settings.BATCH_SIZE, ge=1)
    total_steps: int = Field(default=settings.TOTAL_STEPS, ge=0)
    pretrain_steps: int = Field(default=settings.PRETRAIN_STEPS, ge=0)
    lr_backbone_rgb: float = Field(default=settings.LR_BACKBONE_RGB, gt=0)
    lr_backbone_tir: float = Field(default=settings.LR_BACKBONE_TIR, gt=0)
    lr_predictor: float = Field(default=settings.LR_PREDICTOR, gt=0)
    lr_iou_head: float = Field(default=settings.LR_IOU_HEAD, gt=0)
    finetune_gain: float = Field(default=settings.FINETUNE_GAIN, gt=0)
    iou_loss_weight: float = Field(default=settings.IOU_LOSS_WEIGHT, ge=0)
    momentum: float = Field(default=settings.MOMENTUM, ge=0, lt=1)
    grad_clip_norm: float = Field(default=settings.GRAD_CLIP_NORM, ge=0)
    checkpoint_interval: int = Field(default=settings.CHECKPOINT_INTERVAL, ge=1)
    proposals_per_frame: int = Field(default=settings.PROPOSALS_PER_FRAME, ge=1)
    proposal_sigma: float = Field(default=settings.PROPOSAL_SIGMA, ge=0)
    center_jitter: float = Field(default=settings.CENTER_JITTER, ge=0)
    scale_jitter: float = Field(default=settings.SCALE_JITTER, ge=0)
    search_area_scale: float = Field(default=settings.SEARCH_AREA_SCALE, gt=0)
    search_size: int = Field(default=settings.SEARCH_SIZE, ge=1)
    seed: int = 0

    def base_rate(self, group: str) -> float:
        return {
            "backbone_rgb": self.lr_backbone_rgb,
            "backbone_tir": self.lr_backbone_tir,
            "predictor": self.lr_predictor,
            "iou_head": self.lr_iou_head,
        }[group]


@dataclass(frozen=True)
class Episode:
    train: SampleSet
    test: SampleSet
    sequence: str
    train_indices: Tuple[int, ...]
    test_indices: Tuple[int, ...]


def sample_episode(sequence: Sequence, n_frames: int, rng: np.random.Generator) -> Episode:
    """n_frames training frames from the first half, n_frames test frames from the second."""
    length = len(sequence)
    if length < 2 * n_frames:
        raise DatasetError(f"Sequence {sequence.name} has {length} frames, episodes need {2 * n_frames}")
    half = length // 2
    train = tuple(sorted(int(i) for i in rng.choice(half, size=n_frames, replace=False)))
    test = tuple(sorted(half + int(i) for i in rng.choice(length - half, size=n_frames, replace=False)))

    def sample_set(indices):
        return SampleSet(items=[(sequence.frames[i], sequence.groundtruth[i]) for i in indices])

    return Episode(train=sample_set(train), test=sample_set(test), sequence=sequence.name,
                   train_indices=train, test_indices=test)


def component_of(group: str) -> str:
    return "backbone" if group.startswith("backbone") else group


def learning_rates(net: MultiModalNet, config: TrainConfig,
                   loaded_groups: FrozenSet[str] = frozenset()) -> Dict[str, Optional[float]]:
    """Effective rate per parameter group; None marks a frozen group.

    Fine-tuning multiplies pretrained groups by finetune_gain, freezes pretrained
    components outside the fusion's fine-tune set and trains fresh groups at the
    base rate. backbone_tir is always scaled by tir_lr_multiplier."""
    rates: Dict[str, Optional[float]] = {}
    for group in net.parameter_groups():
        multiplier = net.fusion.tir_lr_multiplier if group == "backbone_tir" else 1.0
        rate = config.base_rate(group) * multiplier
        if config.stage == "finetune" and group in loaded_groups:
            rate = rate * config.finetune_gain if component_of(group) in net.fusion.finetune else None
        rates[group] = rate
    return rates


def crop_sample_set(samples: SampleSet, config: TrainConfig, rng: np.random.Generator, dtype: torch.dtype):
    """Jittered search-region crops -> (rgb (N,3,S,S), tir (N,1,S,S), boxes (N,4) in crop pixels)."""
    rgb_patches, tir_patches, boxes = [], [], []
    for frame, box in samples.items:
        cx, cy = box.center
        offset = rng.normal(0.0, config.center_jitter, size=2) * np.array([box.w, box.h])
        side = config.search_area_scale * np.sqrt(box.area) * float(np.exp(rng.normal(0.0, config.scale_jitter)))
        rgb, transform = crop_region(frame.rgb, (cx + offset[0], cy + offset[1]), side, config.search_size)
        tir, _ = crop_region(frame.tir, (cx + offset[0], cy + offset[1]), side, config.search_size)
        rgb_patches.append(rgb)
        tir_patches.append(tir)
        boxes.append(transform.to_crop(box))
    return patches_to_tensor(rgb_patches, dtype), patches_to_tensor(tir_patches, dtype), boxes_to_tensor(boxes, dtype)


def episode_losses(net: MultiModalNet, episode: Episode, config: TrainConfig,
                   rng: np.random.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    dtype = net.dtype
    train_rgb, train_tir, train_boxes = crop_sample_set(episode.train, config, rng, dtype)
    test_rgb, test_tir, test_boxes = crop_sample_set(episode.test, config, rng, dtype)
    n = train_boxes.shape[0]
    boxes = torch.cat([train_boxes, test_boxes])
    routed = net.features(torch.cat([train_rgb, test_rgb]), torch.cat([train_tir, test_tir]))

    loss_cls = boxes.new_zeros(())
    for predictor, bundle in zip(net.predictors, routed.predictor):
        features = bundle.block4
        feature_boxes = boxes / bundle.stride4
        model = predictor(features[:n], feature_boxes[:n])
        labels = gaussian_labels(boxes_to_centers(feature_boxes[n:]), features.shape[-2:],
                                 predictor.config.label_sigma)
        loss_cls = loss_cls + classification_loss(model.history, features[n:], labels)

    iou_head = net.iou_head
    modulation = iou_head.compute_modulation(routed.iou.select(slice(0, 1)), boxes[:1])
    test_features = iou_head.extract_test_features(routed.iou.select(slice(n, None)))
    proposals = jitter_boxes(test_boxes, config.proposals_per_frame, config.proposal_sigma, rng)
    targets = box_iou(proposals, test_boxes[:, None, :])
    predictions = iou_head.predict_from_features(modulation.expand(test_boxes.shape[0], -1), test_features, proposals)
    return loss_cls, iou_regression_loss(predictions, targets)


def compute_losses(net: MultiModalNet, episodes: List[Episode], config: TrainConfig,
                   rng: np.random.Generator) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Mean L_cls and L_iou over the batch; L_total = L_cls + beta · L_iou."""
    losses = [episode_losses(net, episode, config, rng) for episode in episodes]
    loss_cls = torch.stack([cls for cls, _ in losses]).mean()
    loss_iou = torch.stack([reg for _, reg in losses]).mean()
    return loss_cls, loss_iou, loss_cls + config.iou_loss_weight * loss_iou


@dataclass
class TrainingResult:
    checkpoint: Path
    losses: pd.DataFrame


class Trainer:
    def __init__(self, net: MultiModalNet, config: TrainConfig, loaded_groups: FrozenSet[str] = frozenset()):
        self.net = net
        self.config = config
        self.logger = logging.getLogger(__name__)
        self.rates = learning_rates(net, config, loaded_groups)
        self.step = 0

        param_groups = []
        for name, params in net.parameter_groups().items():
            rate = self.rates[name]
            for param in params:
                param.requires_grad_(rate is not None)
            if rate is not None and params:
                param_groups.append({"params": params, "lr": rate, "name": name})
        self.optimizer = None
        if param_groups:
            self.optimizer = torch.optim.SGD(param_groups, lr=param_groups[0]["lr"], momentum=config.momentum)
        ledger = ", ".join(f"{name}={'frozen' if rate is None else f'{rate:g}'}" for name, rate in self.rates.items())
        self.logger.info(f"Learning-rate ledger ({config.stage}): {ledger}")

    def effective_rates(self) -> Dict[str, float]:
        if self.optimizer is None:
            return {}
        return {group["name"]: group["lr"] for group in self.optimizer.param_groups}

    def sample_batch(self, sequences: List[Sequence], rng: np.random.Generator) -> List[Episode]:
        picks = rng.integers(len(sequences), size=self.config.batch_size)
        return [sample_episode(sequences[int(i)], self.config.n_frames, rng) for i in picks]

    def train_step(self, episodes: List[Episode], rng: np.random.Generator) -> Dict[str, float]:
        if self.optimizer is None:
            raise TrainingError("No trainable parameter groups")
        self.net.train()
        self.optimizer.zero_grad()
        loss_cls, loss_iou, loss_total = compute_losses(self.net, episodes, self.config, rng)
        if not torch.isfinite(loss_total):
            names = sorted({episode.sequence for episode in episodes})
            raise TrainingError(
                f"Non-finite loss at step {self.step}: L_cls={float(loss_cls)}, L_iou={float(loss_iou)}, "
                f"sequences={names}")
        loss_total.backward()
        if self.config.grad_clip_norm > 0:
            params = [param for group in self.optimizer.param_groups for param in group["params"]]
            torch.nn.utils.clip_grad_norm_(params, self.config.grad_clip_norm)
        self.optimizer.step()
        self.step += 1
        return {"L_cls": float(loss_cls), "L_iou": float(loss_iou), "L_total": float(loss_total)}

    def save(self, output_dir: Path, name: Optional[str] = None) -> Path:
        name = name or f"step_{self.step:06d}"
        return save_checkpoint(self.net, output_dir / name, step=self.step, optimizer=self.optimizer)

    def resume(self, checkpoint: Union[str, Path]):
        manifest, arrays = read_checkpoint(checkpoint)
        state = {name: torch.from_numpy(array) for name, array in arrays.items() if not name.startswith(OPTIMIZER_PREFIX)}
        self.net.load_state_dict(state)
        if self.optimizer is not None:
            params = dict(self.net.named_parameters())
            for name, array in arrays.items():
                param = params.get(name[len(OPTIMIZER_PREFIX):]) if name.startswith(OPTIMIZER_PREFIX) else None
                if param is not None and param.requires_grad:
                    self.optimizer.state[param]["momentum_buffer"] = torch.from_numpy(array).to(param.dtype)
        self.step = int(manifest["step"])
        self.logger.info(f"Resumed training from {checkpoint} at step {self.step}")

    def train(self, sequences: List[Sequence], output_dir: Union[str, Path], total_steps: Optional[int] = None,
              resume: Optional[Union[str, Path]] = None) -> TrainingResult:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        total_steps = self.config.total_steps if total_steps is None else total_steps
        eligible = [s for s in sequences if len(s) >= 2 * self.config.n_frames]
        if not eligible:
            raise DatasetError(f"No training sequence has the {2 * self.config.n_frames} frames an episode needs")
        if len(eligible) < len(sequences):
            self.logger.warning(f"Skipping {len(sequences) - len(eligible)} sequences too short for episodes")

        rows: List[dict] = []
        loss_path = output_dir / LOSS_FILE
        if resume is not None:
            self.resume(resume)
            if loss_path.is_file():
                previous = pd.read_csv(loss_path)
                rows = previous[previous["step"] < self.step].to_dict("records")
        if self.step == 0:
            self.save(output_dir)

        if self.optimizer is None:
            self.logger.warning("Every parameter group is frozen; writing the initial weights only")
            total_steps = self.step

        progress = tqdm(range(self.step, total_steps), desc=f"train[{self.config.stage}]", disable=None)
        for step in progress:
            rng = make_rng(self.config.seed, step)
            losses = self.train_step(self.sample_batch(eligible, rng), rng)
            rows.append({"step": step, **losses})
            progress.set_postfix(L_total=f"{losses['L_total']:.4f}")
            if self.step % self.config.checkpoint_interval == 0:
                self.save(output_dir)
                pd.DataFrame(rows, columns=LOSS_COLUMNS).to_csv(loss_path, index=False)

        history = pd.DataFrame(rows, columns=LOSS_COLUMNS)
        history.to_csv(loss_path, index=False)
        checkpoint = self.save(output_dir, FINAL_CHECKPOINT)
        self.logger.info(f"Training finished at step {self.step}; checkpoint {checkpoint}")
        return TrainingResult(checkpoint=checkpoint, losses=history)


def train(sequences: List[Sequence], net: MultiModalNet, config: TrainConfig, output_dir: Union[str, Path],
          loaded_groups: FrozenSet[str] = frozenset(), resume: Optional[Union[str, Path]] = None) -> TrainingResult:
    if not sequences:
        raise DatasetError("Training needs at least one sequence")
    return Trainer(net, config, loaded_groups).train(sequences, output_dir, resume=resume)
