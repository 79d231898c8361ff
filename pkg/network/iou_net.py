# network/iou_net.py
import logging
from typing import Callable, Tuple

import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field

from config import settings
from data.models import BoundingBox
from network.backbone import FeatureBundle
from network.prpool import prroi_pool
from utils.helpers import boxes_to_tensor, from_center_form, tensor_to_box, to_center_form

logger = logging.getLogger(__name__)

ScoreFn = Callable[[torch.Tensor], torch.Tensor]


class IoUHeadConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    reference_pool: int = Field(default=settings.IOU_REFERENCE_POOL, ge=1)
    test_pool: int = Field(default=settings.IOU_TEST_POOL, ge=1)
    branch_channels: int = Field(default=settings.IOU_BRANCH_CHANNELS, ge=1)
    modulation_dim: int = Field(default=settings.IOU_MODULATION_DIM, ge=1)
    hidden_dim: int = Field(default=settings.IOU_HIDDEN_DIM, ge=1)


def _conv(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(in_channels, out_channels, 3, padding=1), nn.SiLU())


class IoUBlockBranch(nn.Module):
    """Reference and test branches for one feature block."""

    def __init__(self, channels: int, config: IoUHeadConfig):
        super().__init__()
        self.config = config
        width = config.branch_channels
        self.reference_conv = _conv(channels, width)
        self.reference_fc = nn.Linear(width * config.reference_pool ** 2, config.modulation_dim)
        self.test_conv = nn.Sequential(_conv(channels, width), _conv(width, width))
        self.test_fc = nn.Linear(width * config.test_pool ** 2, config.modulation_dim)

    def modulation(self, features: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        """(B, C, h, w), (B, 4) -> (B, modulation_dim)"""
        size = self.config.reference_pool
        pooled = prroi_pool(self.reference_conv(features), boxes[:, None, :], (size, size))
        return self.reference_fc(pooled[:, 0].flatten(1))

    def encode(self, test_features: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        """(B, C', h, w) conv output, (B, N, 4) -> (B, N, modulation_dim)"""
        size = self.config.test_pool
        pooled = prroi_pool(test_features, boxes, (size, size))
        return self.test_fc(pooled.flatten(2))


class IoUNet(nn.Module):
    """IoU(B) = g(c(x0, B0) · z(x, B)) over block3 and block4."""

    def __init__(self, channels: Tuple[int, int], config: IoUHeadConfig):
        super().__init__()
        self.config = config
        self.blocks = nn.ModuleList(IoUBlockBranch(c, config) for c in channels)
        width = config.modulation_dim * len(channels)
        self.predictor = nn.Sequential(
            nn.Linear(width, config.hidden_dim), nn.SiLU(),
            nn.Linear(config.hidden_dim, config.hidden_dim), nn.SiLU(),
            nn.Linear(config.hidden_dim, 1),
        )

    @staticmethod
    def _taps(bundle: FeatureBundle):
        return (bundle.block3, bundle.stride3), (bundle.block4, bundle.stride4)

    def compute_modulation(self, reference: FeatureBundle, boxes: torch.Tensor) -> torch.Tensor:
        """Reference bundle (B, ...) and image-space boxes (B, 4) -> c of shape (B, D)."""
        parts = [block.modulation(features, boxes / stride)
                 for block, (features, stride) in zip(self.blocks, self._taps(reference))]
        return torch.cat(parts, dim=-1)

    def extract_test_features(self, test: FeatureBundle) -> Tuple[Tuple[torch.Tensor, int], ...]:
        return tuple((block.test_conv(features), stride)
                     for block, (features, stride) in zip(self.blocks, self._taps(test)))

    def predict_from_features(self, modulation: torch.Tensor, test_features, boxes: torch.Tensor) -> torch.Tensor:
        """modulation (B, D), image-space boxes (B, N, 4) -> (B, N) scores."""
        encoded = torch.cat([block.encode(features, boxes / stride)
                             for block, (features, stride) in zip(self.blocks, test_features)], dim=-1)
        return self.predictor(modulation[:, None, :] * encoded)[..., 0]

    def predict_iou(self, modulation: torch.Tensor, test: FeatureBundle, boxes: torch.Tensor) -> torch.Tensor:
        return self.predict_from_features(modulation, self.extract_test_features(test), boxes)


def refine_boxes(score_fn: ScoreFn, boxes: torch.Tensor, steps: int,
                 step_size: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """Gradient ascent of score_fn over (cx/w0, cy/h0, log w, log h).

    boxes: (N, 4). Returns the best iterate per box and its score."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    boxes = boxes.detach()
    reference = boxes[:, 2:]
    centers = to_center_form(boxes)
    u = torch.cat([centers[:, :2] / reference, torch.log(centers[:, 2:])], dim=-1)

    def to_boxes(params: torch.Tensor) -> torch.Tensor:
        return from_center_form(torch.cat([params[:, :2] * reference, torch.exp(params[:, 2:])], dim=-1))

    best_boxes = boxes.clone()
    best_scores = torch.full((boxes.shape[0],), -torch.inf, dtype=boxes.dtype)
    for step in range(steps + 1):
        with torch.enable_grad():
            u = u.detach().requires_grad_(True)
            candidate = to_boxes(u)
            scores = score_fn(candidate)
            gradient = None
            if step < steps:
                (gradient,) = torch.autograd.grad(scores.sum(), u)
        improved = scores.detach() > best_scores
        best_scores = torch.where(improved, scores.detach(), best_scores)
        best_boxes = torch.where(improved[:, None], candidate.detach(), best_boxes)
        if gradient is not None:
            u = u.detach() + step_size * gradient
    return best_boxes, best_scores


def refine_box(score_fn: ScoreFn, box: BoundingBox, steps: int, step_size: float,
               dtype=torch.float32) -> BoundingBox:
    if steps == 0:
        return box
    refined, _ = refine_boxes(score_fn, boxes_to_tensor([box], dtype=dtype), steps, step_size)
    return tensor_to_box(refined[0])


def refine_candidates(score_fn: ScoreFn, candidates: torch.Tensor, steps: int, step_size: float,
                      top_k: int) -> Tuple[torch.Tensor, float]:
    """Refine every candidate and merge the top_k by score-weighted averaging.

    The merged box is only kept when it scores at least as well as the best
    refined candidate."""
    refined, scores = refine_boxes(score_fn, candidates, steps, step_size)
    k = min(top_k, refined.shape[0])
    top_scores, order = torch.topk(scores, k)
    best, best_score = refined[order[0]], float(top_scores[0])
    weights = top_scores.clamp(min=0)
    if k == 1 or float(weights.sum()) <= 0:
        return best, best_score
    merged_center = (to_center_form(refined[order]) * weights[:, None]).sum(dim=0) / weights.sum()
    merged = from_center_form(merged_center)
    with torch.no_grad():
        merged_score = float(score_fn(merged[None])[0])
    if merged_score >= best_score:
        return merged, merged_score
    return best, best_score


def iou_regression_loss(predictions: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if predictions.shape != targets.shape:
        raise ValueError(f"Shape mismatch: {tuple(predictions.shape)} vs {tuple(targets.shape)}")
    if predictions.numel() == 0:
        raise ValueError("No IoU predictions to score")
    return ((predictions - targets) ** 2).mean()


def frame_score_fn(iou_net: IoUNet, modulation: torch.Tensor, test_features) -> ScoreFn:
    """Bind one frame's modulation (1, D) and test features into a ScoreFn over (N, 4) boxes."""
    def score(candidates: torch.Tensor) -> torch.Tensor:
        return iou_net.predict_from_features(modulation, test_features, candidates[None])[0]
    return score
