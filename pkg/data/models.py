# data/models.py
import math
from typing import FrozenSet, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config.settings import FRAME_NAME_FORMAT

# Per-video challenge tags (RGBT210 vocabulary)
ATTRIBUTES: Tuple[str, ...] = (
    "no_occlusion",
    "partial_occlusion",
    "heavy_occlusion",
    "low_illumination",
    "low_resolution",
    "thermal_crossover",
    "deformation",
    "fast_motion",
    "scale_variation",
    "motion_blur",
    "camera_moving",
    "background_clutter",
)


def format_number(value: float) -> str:
    """Shortest decimal text that parses back to the same float."""
    return np.format_float_positional(float(value), trim="-")


class BoundingBox(BaseModel):
    """Axis-aligned box, 0-indexed top-left origin, image pixels."""

    model_config = ConfigDict(frozen=True)

    x: float = Field(..., description="Left edge")
    y: float = Field(..., description="Top edge")
    w: float = Field(..., description="Width")
    h: float = Field(..., description="Height")

    @field_validator("x", "y", "w", "h")
    def validate_finite(cls, v):
        if not math.isfinite(v):
            raise ValueError("Box coordinates must be finite")
        return float(v)

    @field_validator("w", "h")
    def validate_size(cls, v):
        if v <= 0:
            raise ValueError("Box width and height must be positive")
        return v

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(x=cx - w / 2, y=cy - h / 2, w=w, h=h)

    @classmethod
    def from_line(cls, line: str) -> "BoundingBox":
        values = [float(v) for v in line.strip().split(",")]
        if len(values) != 4:
            raise ValueError(f"Expected 4 comma-separated values, got {len(values)}")
        return cls(x=values[0], y=values[1], w=values[2], h=values[3])

    @property
    def center(self) -> Tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return self.x, self.y, self.w, self.h

    def to_line(self) -> str:
        return ",".join(format_number(v) for v in self.as_tuple())

    def inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height


def iou(a: BoundingBox, b: BoundingBox) -> float:
    # Areas from edge differences so that iou(a, a) is exactly 1.0
    ax2, ay2, bx2, by2 = a.x + a.w, a.y + a.h, b.x + b.w, b.y + b.h
    ix = min(ax2, bx2) - max(a.x, b.x)
    iy = min(ay2, by2) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    intersection = ix * iy
    area_a = (ax2 - a.x) * (ay2 - a.y)
    area_b = (bx2 - b.x) * (by2 - b.y)
    return min(1.0, intersection / (area_a + area_b - intersection))


def center_error(a: BoundingBox, b: BoundingBox) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


class FramePair(BaseModel):
    """Aligned RGB (H×W×3) and TIR (H×W×1) images with values in [0, 1]."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    rgb: np.ndarray
    tir: np.ndarray
    index: int = 0

    @model_validator(mode="after")
    def validate_images(self):
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"RGB image must be H×W×3, got {self.rgb.shape}")
        if self.tir.ndim != 3 or self.tir.shape[2] != 1:
            raise ValueError(f"TIR image must be H×W×1, got {self.tir.shape}")
        if self.rgb.shape[:2] != self.tir.shape[:2]:
            raise ValueError(f"RGB {self.rgb.shape[:2]} and TIR {self.tir.shape[:2]} sizes differ")
        for name, image in (("rgb", self.rgb), ("tir", self.tir)):
            if image.size and (image.min() < 0 or image.max() > 1):
                raise ValueError(f"{name} values must lie in [0, 1]")
            image.setflags(write=False)
        return self

    @property
    def size(self) -> Tuple[int, int]:
        """(height, width)"""
        return self.rgb.shape[0], self.rgb.shape[1]

    @property
    def name(self) -> str:
        return FRAME_NAME_FORMAT.format(self.index + 1)


class Sequence(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    name: str
    frames: List[FramePair]
    groundtruth: List[BoundingBox]
    attributes: FrozenSet[str] = Field(default_factory=frozenset)
    # Ground-truth file as read from disk, written back verbatim while the boxes are unchanged
    groundtruth_text: Optional[str] = Field(default=None, repr=False)

    @field_validator("name")
    def validate_name(cls, v):
        if not v.strip():
            raise ValueError("Sequence name cannot be empty")
        return v.strip()

    @field_validator("attributes")
    def validate_attributes(cls, v):
        unknown = sorted(set(v) - set(ATTRIBUTES))
        if unknown:
            raise ValueError(f"Unknown attribute tags: {unknown}")
        return frozenset(v)

    @model_validator(mode="after")
    def validate_lengths(self):
        if len(self.frames) != len(self.groundtruth):
            raise ValueError(
                f"{len(self.frames)} frames but {len(self.groundtruth)} ground-truth boxes")
        if len(self.frames) < 2:
            raise ValueError("A sequence needs at least 2 frames")
        return self

    def __len__(self) -> int:
        return len(self.frames)


class SampleSet(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    items: List[Tuple[FramePair, BoundingBox]]

    @model_validator(mode="after")
    def validate_items(self):
        if not self.items:
            raise ValueError("Sample set cannot be empty")
        sizes = {frame.size for frame, _ in self.items}
        if len(sizes) > 1:
            raise ValueError(f"Mixed frame sizes in sample set: {sorted(sizes)}")
        return self

    def __len__(self) -> int:
        return len(self.items)

    @property
    def frames(self) -> List[FramePair]:
        return [frame for frame, _ in self.items]

    @property
    def boxes(self) -> List[BoundingBox]:
        return [box for _, box in self.items]
