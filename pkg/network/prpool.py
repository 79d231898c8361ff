# network/prpool.py
from typing import Tuple, Union

import torch

from data.models import BoundingBox
from utils.exceptions import GeometryError


def _hat_integral(t: torch.Tensor) -> torch.Tensor:
    """Antiderivative of the unit hat max(0, 1 - |t|), zero at t = -1."""
    t = t.clamp(-1.0, 1.0)
    return torch.where(t < 0, 0.5 * (t + 1) ** 2, 1 - 0.5 * (1 - t) ** 2)


def _bin_weights(start: torch.Tensor, size: torch.Tensor, bins: int, length: int) -> torch.Tensor:
    """(B, N) box edges -> (B, N, bins, length) integration weights.

    Sample j of the feature map sits at j + 0.5 and the continuous surface is the
    bilinear interpolation of the samples, replicating the border samples beyond
    the first and last sample centres. The basis functions sum to one everywhere."""
    step = size / bins
    edges = start[..., None] + step[..., None] * torch.arange(bins + 1, dtype=start.dtype, device=start.device)
    index = torch.arange(length, device=start.device)
    t = edges[..., None] - (index.to(start.dtype) + 0.5)
    # Left and right halves of each basis function; the outermost ones extend as 1
    below = t.clamp(max=0.0)
    above = t.clamp(min=0.0)
    left = torch.where(index == 0, below, _hat_integral(below) - 0.5)
    right = torch.where(index == length - 1, above, _hat_integral(above) - 0.5)
    cumulative = left + right
    return cumulative[..., 1:, :] - cumulative[..., :-1, :]


def prroi_pool(features: torch.Tensor, boxes: torch.Tensor, output_size: Tuple[int, int]) -> torch.Tensor:
    """Precise ROI pooling.

    features: (B, C, H, W); boxes: (B, N, 4) as (x, y, w, h) in feature-map units.
    Returns (B, N, C, p, q), each bin the exact average of the bilinear surface
    over its area."""
    if features.dim() != 4 or boxes.dim() != 3 or boxes.shape[-1] != 4:
        raise GeometryError(f"Bad prpool inputs: features {tuple(features.shape)}, boxes {tuple(boxes.shape)}")
    if not torch.isfinite(boxes).all() or (boxes[..., 2:] <= 0).any():
        raise GeometryError("Degenerate box passed to prpool")
    p, q = output_size
    height, width = features.shape[-2:]
    weight_y = _bin_weights(boxes[..., 1], boxes[..., 3], p, height)
    weight_x = _bin_weights(boxes[..., 0], boxes[..., 2], q, width)
    pooled = torch.einsum("bnph,bchw,bnqw->bncpq", weight_y, features, weight_x)
    bin_area = (boxes[..., 2] / q) * (boxes[..., 3] / p)
    return pooled / bin_area[..., None, None, None]


def prpool(x: torch.Tensor, box: Union[BoundingBox, torch.Tensor], output_size: Tuple[int, int]) -> torch.Tensor:
    """Single map (C, h, w) and box -> (C, p, q)."""
    if isinstance(box, BoundingBox):
        box = torch.tensor(box.as_tuple(), dtype=x.dtype)
    return prroi_pool(x[None], box.reshape(1, 1, 4).to(x.dtype), output_size)[0, 0]
