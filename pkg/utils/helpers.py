# utils/helpers.py
import zlib
from typing import Iterable, Union

import numpy as np
import torch

from data.models import BoundingBox


def make_rng(seed: int, *keys: Union[int, str]) -> np.random.Generator:
    """Independent RNG stream for (seed, key...); string keys are hashed stably."""
    entropy = [int(seed)] + [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys]
    return np.random.default_rng(entropy)


def boxes_to_tensor(boxes: Iterable[BoundingBox], dtype=torch.float32) -> torch.Tensor:
    return torch.tensor([box.as_tuple() for box in boxes], dtype=dtype).reshape(-1, 4)


def tensor_to_box(box: torch.Tensor) -> BoundingBox:
    x, y, w, h = (float(v) for v in box.detach().reshape(4).tolist())
    return BoundingBox(x=x, y=y, w=w, h=h)


def to_center_form(boxes: torch.Tensor) -> torch.Tensor:
    """(x, y, w, h) -> (cx, cy, w, h)"""
    return torch.cat([boxes[..., :2] + boxes[..., 2:] / 2, boxes[..., 2:]], dim=-1)


def from_center_form(boxes: torch.Tensor) -> torch.Tensor:
    """(cx, cy, w, h) -> (x, y, w, h)"""
    return torch.cat([boxes[..., :2] - boxes[..., 2:] / 2, boxes[..., 2:]], dim=-1)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise IoU of broadcastable (..., 4) box tensors."""
    top_left = torch.maximum(a[..., :2], b[..., :2])
    bottom_right = torch.minimum(a[..., :2] + a[..., 2:], b[..., :2] + b[..., 2:])
    size = (bottom_right - top_left).clamp(min=0)
    intersection = size[..., 0] * size[..., 1]
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - intersection
    return intersection / union


def jitter_boxes(boxes: torch.Tensor, count: int, sigma: float, rng: np.random.Generator) -> torch.Tensor:
    """Gaussian proposals around (N, 4) boxes: centre offsets and log-scale, both
    sigma times the box size. Returns (N, count, 4)."""
    noise = torch.as_tensor(rng.normal(0.0, sigma, size=(boxes.shape[0], count, 4)), dtype=boxes.dtype)
    centers = to_center_form(boxes)[:, None, :]
    sizes = centers[..., 2:]
    jittered = torch.cat([centers[..., :2] + noise[..., :2] * sizes, sizes * torch.exp(noise[..., 2:])], dim=-1)
    return from_center_form(jittered)

