# network/model_predictor.py
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator

from config import settings
from network.prpool import prroi_pool
from utils.exceptions import GeometryError

logger = logging.getLogger(__name__)

ResidualFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class LabelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    sigma: float = Field(default=settings.LABEL_SIGMA, gt=0, description="Feature-grid cells")


class PredictorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    filter_size: int = settings.FILTER_SIZE
    label_sigma: float = Field(default=settings.LABEL_SIGMA, gt=0)
    reg_lambda: float = Field(default=settings.REG_LAMBDA, ge=0)
    offline_iterations: int = Field(default=settings.OFFLINE_ITERATIONS, ge=0)

    @field_validator("filter_size")
    def validate_filter_size(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError("Filter size must be a positive odd number")
        return v

    @property
    def label(self) -> LabelConfig:
        return LabelConfig(sigma=self.label_sigma)


@dataclass
class TrainSamples:
    """Feature maps (N, C, h, w) with target centres (N, 2) in cell coordinates
    and optional per-sample weights (N,)."""

    features: torch.Tensor
    centers: torch.Tensor
    weights: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.features.dim() != 4:
            raise GeometryError(f"Samples must be (N, C, h, w), got {tuple(self.features.shape)}")
        if self.centers.shape != (self.features.shape[0], 2):
            raise GeometryError(f"Expected {self.features.shape[0]} centres, got {tuple(self.centers.shape)}")
        if self.weights is not None and self.weights.shape != (self.features.shape[0],):
            raise GeometryError("One weight per sample is required")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class FilterModel:
    filter: torch.Tensor
    history: List[torch.Tensor] = field(default_factory=list)
    reg_lambda: float = settings.REG_LAMBDA

    @property
    def num_iter(self) -> int:
        return len(self.history) - 1


def gaussian_label(center: Tuple[float, float], shape: Tuple[int, int], sigma: float,
                   dtype=torch.float64) -> torch.Tensor:
    """z[p] = exp(-||p - c||² / 2σ²) over an (h, w) grid; c is (x, y) in cells."""
    return gaussian_labels(torch.tensor([center], dtype=dtype), shape, sigma)[0]


def gaussian_labels(centers: torch.Tensor, shape: Tuple[int, int], sigma: float) -> torch.Tensor:
    """(N, 2) centres -> (N, h, w) labels."""
    height, width = shape
    rows = torch.arange(height, dtype=centers.dtype, device=centers.device)
    cols = torch.arange(width, dtype=centers.dtype, device=centers.device)
    dy = rows[None, :, None] - centers[:, 1, None, None]
    dx = cols[None, None, :] - centers[:, 0, None, None]
    return torch.exp(-(dx ** 2 + dy ** 2) / (2 * sigma ** 2))


def boxes_to_centers(boxes: torch.Tensor) -> torch.Tensor:
    """(..., 4) boxes in feature-map units -> (..., 2) centres in cell coordinates."""
    return boxes[..., :2] + boxes[..., 2:] / 2 - 0.5


def compute_response(x: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    """Cross-correlate (N, C, h, w) or (C, h, w) features with a (C, k, k) filter,
    summed over channels; same-size output via zero padding."""
    single = x.dim() == 3
    if single:
        x = x[None]
    if f.dim() != 3 or x.shape[1] != f.shape[0]:
        raise GeometryError(f"Filter {tuple(f.shape)} does not match features {tuple(x.shape)}")
    response = F.conv2d(x, f[None], padding=f.shape[-1] // 2)[:, 0]
    return response[0] if single else response


def _apply_transpose(x: torch.Tensor, r: torch.Tensor, k: int) -> torch.Tensor:
    """Adjoint of compute_response w.r.t. the filter: Σ_j x_j ⋆ r_j -> (C, k, k)."""
    return F.conv2d(x.transpose(0, 1), r[:, None].transpose(0, 1), padding=k // 2)[:, 0]


def filter_objective(f: torch.Tensor, samples: TrainSamples, labels: torch.Tensor,
                     reg_lambda: float) -> torch.Tensor:
    """L(f) = Σ_j w_j ||x_j ∗ f − z_j||² + λ||f||²"""
    residual = compute_response(samples.features, f) - labels
    per_sample = (residual ** 2).sum(dim=(-2, -1))
    if samples.weights is not None:
        per_sample = per_sample * samples.weights
    return per_sample.sum() + reg_lambda * (f ** 2).sum()


def optimize_filter(f0: torch.Tensor, samples: TrainSamples, labels: torch.Tensor,
                    reg_lambda: float, num_iter: int, eps: float = 1e-12) -> FilterModel:
    """Steepest descent on the regularized least-squares filter objective with
    the exact line-search step of the quadratic."""
    if num_iter < 0 or reg_lambda < 0:
        raise ValueError("num_iter and reg_lambda must be non-negative")
    if labels.shape != (len(samples),) + samples.features.shape[-2:]:
        raise GeometryError(f"Labels {tuple(labels.shape)} do not match samples {tuple(samples.features.shape)}")
    k = f0.shape[-1]
    x = samples.features
    weights = samples.weights if samples.weights is not None else torch.ones(len(samples), dtype=x.dtype)
    w = weights[:, None, None]

    f = f0
    history = [f0]
    for _ in range(num_iter):
        residual = compute_response(x, f) - labels
        gradient = _apply_transpose(x, w * residual, k) + reg_lambda * f
        projected = compute_response(x, gradient)
        denominator = (w * projected ** 2).sum() + reg_lambda * (gradient ** 2).sum()
        alpha = (gradient ** 2).sum() / denominator.clamp(min=eps)
        f = f - alpha * gradient
        history.append(f)
    return FilterModel(filter=f, history=history, reg_lambda=reg_lambda)


def least_squares_residual(response: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    return response - label


def classification_loss(history: List[torch.Tensor], features: torch.Tensor, labels: torch.Tensor,
                        num_iter: Optional[int] = None,
                        residual_fn: ResidualFn = least_squares_residual) -> torch.Tensor:
    """(1/N_iter) Σ_i Σ_(x,c) ||l(x ∗ f^(i), z_c)||², iterates from f^(0) onwards."""
    if not history:
        raise ValueError("Filter history is empty")
    if features.shape[0] == 0:
        raise ValueError("Test set is empty")
    normaliser = num_iter if num_iter else max(len(history) - 1, 1)
    total = sum((residual_fn(compute_response(features, f), labels) ** 2).sum() for f in history)
    return total / normaliser


class FilterInitializer(nn.Module):
    """Conv layer followed by precise ROI pooling over the target; averaged over samples."""

    def __init__(self, channels: int, filter_size: int):
        super().__init__()
        self.filter_size = filter_size
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, features: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        if features.shape[0] == 0:
            raise ValueError("Cannot initialize a filter from zero samples")
        pooled = prroi_pool(self.conv(features), boxes[:, None, :], (self.filter_size, self.filter_size))
        return pooled[:, 0].mean(dim=0)


def init_filter(initializer: FilterInitializer, features: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    return initializer(features, boxes)


class ModelPredictor(nn.Module):
    """Initializer + steepest-descent optimizer producing the target filter."""

    def __init__(self, channels: int, config: PredictorConfig):
        super().__init__()
        self.config = config
        self.initializer = FilterInitializer(channels, config.filter_size)

    def forward(self, features: torch.Tensor, boxes: torch.Tensor, num_iter: Optional[int] = None,
                weights: Optional[torch.Tensor] = None) -> FilterModel:
        """features: (N, C, h, w); boxes: (N, 4) in feature-map units."""
        f0 = self.initializer(features, boxes)
        samples = TrainSamples(features, boxes_to_centers(boxes), weights)
        return self.optimize(f0, samples, self.config.offline_iterations if num_iter is None else num_iter)

    def labels_for(self, samples: TrainSamples) -> torch.Tensor:
        return gaussian_labels(samples.centers, samples.features.shape[-2:], self.config.label_sigma)

    def optimize(self, f0: torch.Tensor, samples: TrainSamples, num_iter: int) -> FilterModel:
        return optimize_filter(f0, samples, self.labels_for(samples), self.config.reg_lambda, num_iter)
