# data/synth.py
import logging
import math
import shutil
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Tuple

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from tqdm import tqdm

from config import settings
from data.dataset import PathLike, list_images, list_sequence_dirs, read_image, write_image
from data.models import BoundingBox, FramePair, Sequence
from utils.exceptions import DatasetError, GeometryError

logger = logging.getLogger(__name__)

Translator = Callable[[np.ndarray], np.ndarray]


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    luminance_weights: Tuple[float, float, float] = settings.LUMINANCE_WEIGHTS
    blur_sigma: float = Field(default=settings.BLUR_SIGMA, ge=0)
    contrast_stretch: bool = settings.CONTRAST_STRETCH
    seed: int = 0

    @field_validator("luminance_weights")
    def validate_weights(cls, v):
        if any(w < 0 for w in v):
            raise ValueError("Luminance weights must be non-negative")
        if abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"Luminance weights must sum to 1, got {sum(v)}")
        return v


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D kernel with radius ceil(2 sigma)."""
    radius = int(math.ceil(2 * sigma))
    return cv2.getGaussianKernel(2 * radius + 1, sigma, ktype=cv2.CV_64F)


def pseudo_tir(rgb: np.ndarray, config: SynthConfig) -> np.ndarray:
    """Heat proxy: weighted luminance, Gaussian blur, optional min-max stretch."""
    luminance = np.asarray(rgb, dtype=np.float64) @ np.asarray(config.luminance_weights, dtype=np.float64)
    if config.blur_sigma > 0:
        kernel = gaussian_kernel(config.blur_sigma)
        luminance = cv2.sepFilter2D(luminance, cv2.CV_64F, kernel, kernel, borderType=cv2.BORDER_REFLECT)
    if config.contrast_stretch:
        low, high = luminance.min(), luminance.max()
        if high - low > 1e-12:
            luminance = (luminance - low) / (high - low)
    return np.clip(luminance, 0.0, 1.0).astype(np.float32)[:, :, None]


class PseudoTirTranslator:
    """Image-in/image-out translator; a learned model can replace it."""

    def __init__(self, config: SynthConfig):
        self.config = config

    def __call__(self, rgb: np.ndarray) -> np.ndarray:
        return pseudo_tir(rgb, self.config)


def build_paired_dataset(rgb_root: PathLike, out_root: PathLike, config: SynthConfig,
                         translator: Optional[Translator] = None,
                         exclude: Iterable[str] = ()) -> int:
    """Mirror an RGB-only dataset and synthesise its ir/ frames."""
    translator = translator or PseudoTirTranslator(config)
    out_root = Path(out_root)
    sequence_dirs = list_sequence_dirs(rgb_root, exclude)
    written = 0
    for sequence_dir in tqdm(sequence_dirs, desc="paired dataset", disable=not sequence_dirs):
        target = out_root / sequence_dir.name
        try:
            color_paths = list_images(sequence_dir / settings.COLOR_DIR)
            (target / settings.COLOR_DIR).mkdir(parents=True, exist_ok=True)
            for color_path in color_paths:
                shutil.copyfile(color_path, target / settings.COLOR_DIR / color_path.name)
                tir = translator(read_image(color_path, 3))
                write_image(target / settings.IR_DIR / f"{color_path.stem}.png", tir)
            # Annotations are transferred untouched
            for name in (settings.GROUNDTRUTH_FILE, settings.ATTRIBUTES_FILE):
                if (sequence_dir / name).is_file():
                    shutil.copyfile(sequence_dir / name, target / name)
        except OSError as e:
            raise DatasetError(f"Failed to build paired sequence: {e}", target) from e
        written += 1
        logger.info(f"Paired sequence {sequence_dir.name}: {len(color_paths)} frames")
    return written


class ToySequenceSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "toy"
    num_frames: int = Field(default=settings.TOY_NUM_FRAMES, ge=2)
    image_size: Tuple[int, int] = settings.TOY_IMAGE_SIZE  # (height, width)
    target_size_range: Tuple[int, int] = settings.TOY_TARGET_SIZE_RANGE
    start_box: Optional[Tuple[float, float, float, float]] = None
    velocity: Optional[Tuple[float, float]] = None  # pixels per frame
    jitter: float = Field(default=0.0, ge=0)
    rgb_corruption: List[Tuple[int, int]] = Field(default_factory=list)  # inclusive frame intervals
    tir_corruption: List[Tuple[int, int]] = Field(default_factory=list)
    distractors: int = Field(default=1, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def validate_ranges(self):
        low, high = self.target_size_range
        if not 0 < low <= high:
            raise ValueError(f"Invalid target size range {self.target_size_range}")
        if high >= min(self.image_size):
            raise ValueError("Target cannot be larger than the image")
        for start, end in self.rgb_corruption + self.tir_corruption:
            if start > end:
                raise ValueError(f"Invalid corruption interval ({start}, {end})")
        return self


def _in_intervals(index: int, intervals: List[Tuple[int, int]]) -> bool:
    return any(start <= index <= end for start, end in intervals)


def _smooth_noise(rng: np.random.Generator, height: int, width: int, channels: int, cell: int = 8) -> np.ndarray:
    coarse = rng.random((max(2, height // cell), max(2, width // cell), channels)).astype(np.float32)
    smooth = cv2.resize(coarse, (width, height), interpolation=cv2.INTER_CUBIC)
    return np.clip(smooth.reshape(height, width, channels), 0.0, 1.0)


def _coverage(x: float, w: float, size: int) -> np.ndarray:
    """Fraction of each pixel [j, j+1) covered by [x, x+w)."""
    j = np.arange(size, dtype=np.float64)
    return np.clip(np.minimum(j + 1, x + w) - np.maximum(j, x), 0.0, 1.0)


def _paint(image: np.ndarray, box: BoundingBox, appearance: np.ndarray) -> np.ndarray:
    height, width = image.shape[:2]
    mask = np.outer(_coverage(box.y, box.h, height), _coverage(box.x, box.w, width))[:, :, None]
    return image * (1 - mask) + appearance * mask


def _checker(height: int, width: int, box: BoundingBox, colors: np.ndarray, cell: float = 3.0) -> np.ndarray:
    rows = np.floor((np.arange(height) + 0.5 - box.y) / cell).astype(int)
    cols = np.floor((np.arange(width) + 0.5 - box.x) / cell).astype(int)
    parity = (rows[:, None] + cols[None, :]) % 2
    return colors[parity]


def _trajectory(spec: ToySequenceSpec, rng: np.random.Generator) -> List[BoundingBox]:
    height, width = spec.image_size
    n = spec.num_frames
    if spec.start_box is not None:
        x0, y0, w, h = spec.start_box
    else:
        w = h = float(rng.integers(spec.target_size_range[0], spec.target_size_range[1] + 1))
    if spec.velocity is not None:
        vx, vy = spec.velocity
    else:
        angle = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.3, 1.0) * settings.TOY_MAX_SPEED
        vx, vy = speed * np.cos(angle), speed * np.sin(angle)
        # Keep the whole trajectory inside the frame
        for axis, extent, size in ((0, width, w), (1, height, h)):
            v = vx if axis == 0 else vy
            room = extent - size - 2 * spec.jitter - 2
            if abs(v) * (n - 1) > room:
                v = math.copysign(max(room, 0) / (n - 1), v)
            if axis == 0:
                vx = v
            else:
                vy = v
    if spec.start_box is None:
        lo_x = spec.jitter + 1 + max(0.0, -vx * (n - 1))
        hi_x = width - w - spec.jitter - 1 - max(0.0, vx * (n - 1))
        lo_y = spec.jitter + 1 + max(0.0, -vy * (n - 1))
        hi_y = height - h - spec.jitter - 1 - max(0.0, vy * (n - 1))
        x0 = rng.uniform(lo_x, max(lo_x, hi_x))
        y0 = rng.uniform(lo_y, max(lo_y, hi_y))

    boxes = []
    for t in range(n):
        dx, dy = rng.uniform(-spec.jitter, spec.jitter, size=2) if spec.jitter > 0 else (0.0, 0.0)
        box = BoundingBox(x=x0 + vx * t + dx, y=y0 + vy * t + dy, w=w, h=h)
        if not box.inside(width, height):
            raise GeometryError(f"Toy target leaves the image at frame {t}: {box.as_tuple()}")
        boxes.append(box)
    return boxes


def generate_toy_sequence(spec: ToySequenceSpec) -> Sequence:
    """Moving textured square, hot in TIR, with scheduled per-modality corruption."""
    rng = np.random.default_rng(spec.seed)
    height, width = spec.image_size
    boxes = _trajectory(spec, rng)

    rgb_background = 0.15 + 0.7 * _smooth_noise(rng, height, width, 3)
    tir_background = 0.2 + 0.15 * _smooth_noise(rng, height, width, 1)
    target_colors = rng.uniform(0.1, 0.9, size=(2, 3)).astype(np.float32)
    target_heat = 0.85

    # Distractors look like the target in RGB but are cold in TIR
    for _ in range(spec.distractors):
        size = boxes[0].w
        distractor = BoundingBox(x=rng.uniform(0, width - size), y=rng.uniform(0, height - size), w=size, h=size)
        rgb_background = _paint(rgb_background, distractor, _checker(height, width, distractor, target_colors))

    frames = []
    for t, box in enumerate(boxes):
        rgb = _paint(rgb_background, box, _checker(height, width, box, target_colors))
        heat = target_heat
        if _in_intervals(t, spec.tir_corruption):
            heat = float(tir_background.mean())
        tir = _paint(tir_background, box, np.full((height, width, 1), heat, dtype=np.float32))
        tir = cv2.GaussianBlur(tir[:, :, 0].astype(np.float32), (0, 0), 1.0)[:, :, None]
        if _in_intervals(t, spec.rgb_corruption):
            rgb = rgb * settings.TOY_DARKEN_FACTOR + rng.normal(0, settings.TOY_NOISE_STD, rgb.shape)
        if _in_intervals(t, spec.tir_corruption):
            tir = tir + rng.normal(0, settings.TOY_NOISE_STD, tir.shape)
        frames.append(FramePair(
            rgb=np.clip(rgb, 0, 1).astype(np.float32),
            tir=np.clip(tir, 0, 1).astype(np.float32),
            index=t,
        ))

    attributes = set()
    if spec.rgb_corruption:
        attributes.add("low_illumination")
    if spec.tir_corruption:
        attributes.add("thermal_crossover")
    if spec.distractors:
        attributes.add("background_clutter")
    speed = math.hypot(boxes[-1].x - boxes[0].x, boxes[-1].y - boxes[0].y) / (len(boxes) - 1)
    if speed > 0.25 * boxes[0].w:
        attributes.add("fast_motion")
    if not attributes:
        attributes.add("no_occlusion")
    return Sequence(name=spec.name, frames=frames, groundtruth=boxes, attributes=frozenset(attributes))


def random_toy_spec(name: str, seed: int, num_frames: int = settings.TOY_NUM_FRAMES,
                    image_size: Tuple[int, int] = settings.TOY_IMAGE_SIZE) -> ToySequenceSpec:
    """Spec with complementary corruption: RGB and TIR fail in disjoint intervals."""
    rng = np.random.default_rng(seed)
    length = max(1, num_frames // 4)
    half = num_frames // 2
    first = int(rng.integers(1, max(2, half - length + 1)))
    second = int(rng.integers(half, max(half + 1, num_frames - length)))
    intervals = [(first, first + length - 1), (second, min(num_frames - 1, second + length - 1))]
    if rng.random() < 0.5:
        intervals.reverse()
    return ToySequenceSpec(
        name=name,
        num_frames=num_frames,
        image_size=image_size,
        jitter=settings.TOY_JITTER,
        rgb_corruption=[intervals[0]],
        tir_corruption=[intervals[1]],
        seed=seed,
    )
