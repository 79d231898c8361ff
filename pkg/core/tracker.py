# core/tracker.py
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Tuple, Union

import cv2
import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from config import settings
from data.models import BoundingBox, FramePair, Sequence, iou
from network.fusion import FusionLevel, fuse_response
from network.iou_net import frame_score_fn, refine_candidates
from network.model_predictor import TrainSamples, boxes_to_centers, compute_response
from network.net import MultiModalNet, load_checkpoint
from utils.exceptions import DatasetError, GeometryError, ProtocolError
from utils.helpers import boxes_to_tensor, jitter_boxes, make_rng, tensor_to_box

logger = logging.getLogger(__name__)

SKIP_CODE, INIT_CODE, FAILURE_CODE = 0, 1, 2
ResultEntry = Union[int, BoundingBox]


class TrackerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    search_area_scale: float = Field(default=settings.SEARCH_AREA_SCALE, gt=0)
    search_size: int = Field(default=settings.SEARCH_SIZE, ge=1)
    memory_capacity: int = Field(default=settings.MEMORY_CAPACITY, ge=1)
    memory_decay: float = Field(default=settings.MEMORY_DECAY, gt=0, le=1)
    update_interval: int = Field(default=settings.UPDATE_INTERVAL, ge=1)
    online_iterations: int = Field(default=settings.ONLINE_ITERATIONS, ge=0)
    init_iterations: int = Field(default=settings.INIT_ITERATIONS, ge=0)
    confidence_threshold: float = settings.CONFIDENCE_THRESHOLD
    num_candidates: int = Field(default=settings.NUM_CANDIDATES, ge=1)
    candidate_jitter: float = Field(default=settings.CANDIDATE_JITTER, ge=0)
    refine_steps: int = Field(default=settings.REFINE_STEPS, ge=0)
    refine_step_size: float = Field(default=settings.REFINE_STEP_SIZE, ge=0)
    refine_top_k: int = Field(default=settings.REFINE_TOP_K, ge=1)
    augment_shift: float = Field(default=settings.INIT_AUGMENT_SHIFT, ge=0)
    augment_flip: bool = settings.INIT_AUGMENT_FLIP


@dataclass(frozen=True)
class CropTransform:
    """Maps between image pixels and a square out_size crop centred at `center`;
    `ratio` is crop pixels per image pixel."""

    center: Tuple[float, float]
    ratio: float
    out_size: int

    def point_to_crop(self, x: float, y: float) -> Tuple[float, float]:
        half = self.out_size / 2
        return (x - self.center[0]) * self.ratio + half, (y - self.center[1]) * self.ratio + half

    def point_to_image(self, x: float, y: float) -> Tuple[float, float]:
        half = self.out_size / 2
        return (x - half) / self.ratio + self.center[0], (y - half) / self.ratio + self.center[1]

    def to_crop(self, box: BoundingBox) -> BoundingBox:
        cx, cy = self.point_to_crop(*box.center)
        return BoundingBox.from_center(cx, cy, box.w * self.ratio, box.h * self.ratio)

    def to_image(self, box: BoundingBox) -> BoundingBox:
        cx, cy = self.point_to_image(*box.center)
        return BoundingBox.from_center(cx, cy, box.w / self.ratio, box.h / self.ratio)


def crop_region(image: np.ndarray, center: Tuple[float, float], side: float,
                out_size: int) -> Tuple[np.ndarray, CropTransform]:
    """Square crop of `side` image pixels around `center`, resampled to out_size
    with replicate padding. Returns an (out, out, C) float32 patch."""
    if side <= 0 or not np.isfinite(side):
        raise GeometryError(f"Invalid crop side {side}")
    transform = CropTransform(center=(float(center[0]), float(center[1])), ratio=out_size / side,
                              out_size=out_size)
    inverse = 1.0 / transform.ratio
    offset = (0.5 - out_size / 2) * inverse - 0.5
    matrix = np.array([[inverse, 0.0, center[0] + offset],
                       [0.0, inverse, center[1] + offset]], dtype=np.float64)
    patch = cv2.warpAffine(np.array(image, dtype=np.float32), matrix, (out_size, out_size),
                           flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP, borderMode=cv2.BORDER_REPLICATE)
    if patch.ndim == 2:
        patch = patch[:, :, None]
    return patch, transform


def crop_search_region(image: np.ndarray, box: BoundingBox, scale: float,
                       out_size: int) -> Tuple[np.ndarray, CropTransform]:
    return crop_region(image, box.center, scale * np.sqrt(box.area), out_size)


def patches_to_tensor(patches: List[np.ndarray], dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.stack(patches).transpose(0, 3, 1, 2).copy()).to(dtype)


def _subcell(left: float, center: float, right: float) -> float:
    denominator = left - 2 * center + right
    if denominator >= 0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / denominator, -0.5, 0.5))


def locate_peak(response: torch.Tensor) -> Tuple[float, float, float]:
    """(h, w) response -> (x, y) peak in cells with quadratic sub-cell offset, and the peak value.
    Ties resolve to the first row-major maximum."""
    height, width = response.shape
    values = response.detach().cpu().numpy().astype(np.float64)
    row, col = divmod(int(np.argmax(values)), width)
    peak = values[row, col]
    dx = _subcell(values[row, col - 1], peak, values[row, col + 1]) if 0 < col < width - 1 else 0.0
    dy = _subcell(values[row - 1, col], peak, values[row + 1, col]) if 0 < row < height - 1 else 0.0
    return col + dx, row + dy, float(peak)


def peak_to_image(peak: Tuple[float, float], stride: int, transform: CropTransform) -> Tuple[float, float]:
    """Cell coordinates of a block4 response -> image pixels."""
    return transform.point_to_image((peak[0] + 0.5) * stride, (peak[1] + 0.5) * stride)


def clamp_box(box: BoundingBox, width: int, height: int, min_size: float = settings.MIN_BOX_SIZE) -> BoundingBox:
    cx, cy = box.center
    return BoundingBox.from_center(
        float(np.clip(cx, 0, width)), float(np.clip(cy, 0, height)),
        float(np.clip(box.w, min_size, width)), float(np.clip(box.h, min_size, height)),
    )


@dataclass
class Memory:
    """Per-stream block4 samples sharing boxes (feature units) and recency weights."""

    features: List[torch.Tensor]
    boxes: torch.Tensor
    weights: torch.Tensor

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def samples(self, stream: int) -> TrainSamples:
        return TrainSamples(self.features[stream], boxes_to_centers(self.boxes), self.weights)

    def append(self, features: List[torch.Tensor], box: torch.Tensor, decay: float, capacity: int):
        self.features = [torch.cat([old, new]) for old, new in zip(self.features, features)]
        self.boxes = torch.cat([self.boxes, box[None]])
        self.weights = torch.cat([self.weights * decay, self.weights.new_ones(1)])
        if len(self) > capacity:
            self.features = [f[-capacity:] for f in self.features]
            self.boxes = self.boxes[-capacity:]
            self.weights = self.weights[-capacity:]


@dataclass
class TrackerState:
    net: MultiModalNet
    config: TrackerConfig
    filters: List[torch.Tensor]
    modulation: torch.Tensor
    memory: Memory
    box: BoundingBox
    rng: np.random.Generator
    frame_index: int = 0
    last_confidence: float = 0.0
    history: List[BoundingBox] = field(default_factory=list)


def _frame_crops(frame: FramePair, center: Tuple[float, float], side: float, out_size: int,
                 flip: bool = False):
    rgb, transform = crop_region(frame.rgb, center, side, out_size)
    tir, _ = crop_region(frame.tir, center, side, out_size)
    if flip:
        rgb, tir = rgb[:, ::-1], tir[:, ::-1]
    return rgb, tir, transform


def init(frame: FramePair, box: BoundingBox, net: MultiModalNet, config: TrackerConfig,
         seed: int = 0) -> TrackerState:
    """Build the target model and modulation vector from the first annotated frame."""
    height, width = frame.size
    cx, cy = box.center
    if not (0 <= cx <= width and 0 <= cy <= height):
        raise GeometryError(f"Initial box {box.to_line()} lies outside the {width}×{height} frame")

    side = config.search_area_scale * np.sqrt(box.area)
    shifts = [(0.0, 0.0, False)]
    if config.augment_shift > 0:
        s = config.augment_shift
        shifts += [(s * box.w, 0.0, False), (-s * box.w, 0.0, False), (0.0, s * box.h, False), (0.0, -s * box.h, False)]
    if config.augment_flip:
        shifts.append((0.0, 0.0, True))

    rgb_patches, tir_patches, crop_boxes = [], [], []
    for dx, dy, flip in shifts:
        rgb, tir, transform = _frame_crops(frame, (cx + dx, cy + dy), side, config.search_size, flip)
        crop_box = transform.to_crop(box)
        if flip:
            crop_box = BoundingBox(x=config.search_size - crop_box.x - crop_box.w, y=crop_box.y,
                                   w=crop_box.w, h=crop_box.h)
        rgb_patches.append(rgb)
        tir_patches.append(tir)
        crop_boxes.append(crop_box)

    dtype = net.dtype
    boxes = boxes_to_tensor(crop_boxes, dtype=dtype)
    with torch.no_grad():
        routed = net.features(patches_to_tensor(rgb_patches, dtype), patches_to_tensor(tir_patches, dtype))
        stride = routed.iou.stride4
        feature_boxes = boxes / stride
        filters, stream_features = [], []
        for predictor, bundle in zip(net.predictors, routed.predictor):
            model = predictor(bundle.block4, feature_boxes, num_iter=config.init_iterations)
            filters.append(model.filter)
            stream_features.append(bundle.block4)
        modulation = net.iou_head.compute_modulation(routed.iou.select(slice(0, 1)), boxes[:1])

    memory = Memory(features=stream_features, boxes=feature_boxes,
                    weights=torch.ones(len(crop_boxes), dtype=dtype))
    logger.debug(f"Initialised tracker at {box.to_line()} with {len(memory)} samples")
    return TrackerState(net=net, config=config, filters=filters, modulation=modulation, memory=memory,
                        box=box, rng=make_rng(seed, "tracker"), history=[box])


def track_frame(state: Optional[TrackerState], frame: FramePair) -> BoundingBox:
    if state is None:
        raise ProtocolError("track_frame called before init")
    net, config = state.net, state.config
    height, width = frame.size
    previous = state.box
    side = config.search_area_scale * np.sqrt(previous.area)
    rgb, tir, transform = _frame_crops(frame, previous.center, side, config.search_size)

    dtype = net.dtype
    with torch.no_grad():
        routed = net.features(patches_to_tensor([rgb], dtype), patches_to_tensor([tir], dtype))
        responses = [compute_response(bundle.block4[0], f) for bundle, f in zip(routed.predictor, state.filters)]
        response = responses[0]
        if net.fusion.level == FusionLevel.RESPONSE:
            response = fuse_response(responses[0], responses[1])
        test_features = net.iou_head.extract_test_features(routed.iou)

    stride = routed.iou.stride4
    peak_x, peak_y, confidence = locate_peak(response)
    cx, cy = peak_to_image((peak_x, peak_y), stride, transform)
    coarse = transform.to_crop(BoundingBox.from_center(cx, cy, previous.w, previous.h))

    base = boxes_to_tensor([coarse], dtype=dtype)
    if config.num_candidates > 1:
        jittered = jitter_boxes(base, config.num_candidates - 1, config.candidate_jitter, state.rng)[0]
        candidates = torch.cat([base, jittered])
    else:
        candidates = base
    score_fn = frame_score_fn(net.iou_head, state.modulation, test_features)
    refined, _ = refine_candidates(score_fn, candidates, config.refine_steps, config.refine_step_size,
                                   config.refine_top_k)
    crop_box = tensor_to_box(refined)
    box = clamp_box(transform.to_image(crop_box), width, height)

    state.frame_index += 1
    state.last_confidence = confidence
    if confidence > config.confidence_threshold:
        sample_box = boxes_to_tensor([transform.to_crop(box)], dtype=dtype)[0] / stride
        state.memory.append([bundle.block4.detach() for bundle in routed.predictor], sample_box,
                            config.memory_decay, config.memory_capacity)
    if state.frame_index % config.update_interval == 0 and config.online_iterations > 0:
        with torch.no_grad():
            state.filters = [
                predictor.optimize(f, state.memory.samples(index), config.online_iterations).filter
                for index, (predictor, f) in enumerate(zip(net.predictors, state.filters))
            ]
    state.box = box
    state.history.append(box)
    return box


class MultiModalTracker:
    """Stateful wrapper around init / track_frame for one sequence at a time."""

    def __init__(self, net: MultiModalNet, config: TrackerConfig, seed: int = 0):
        self.net = net.eval()
        self.config = config
        self.seed = seed
        self.state: Optional[TrackerState] = None
        self.logger = logging.getLogger(__name__)

    def initialize(self, frame: FramePair, box: BoundingBox):
        self.state = init(frame, box, self.net, self.config, seed=self.seed)

    def track(self, frame: FramePair) -> BoundingBox:
        return track_frame(self.state, frame)


@lru_cache(maxsize=4)
def _cached_net(checkpoint: str, modified: int) -> MultiModalNet:
    net, step, _ = load_checkpoint(checkpoint)
    logger.info(f"Loaded tracker network from {checkpoint} (step {step})")
    return net.eval()


class TrackerFactory:
    """Picklable constructor of per-run trackers from a checkpoint."""

    def __init__(self, checkpoint: Union[str, Path], config: TrackerConfig):
        self.checkpoint = str(Path(checkpoint).with_suffix(".npz"))
        self.config = config

    def __call__(self, seed: int) -> MultiModalTracker:
        modified = Path(self.checkpoint).stat().st_mtime_ns if Path(self.checkpoint).exists() else 0
        return MultiModalTracker(_cached_net(self.checkpoint, modified), self.config, seed=seed)


def run_ope_sequence(tracker, sequence: Sequence) -> List[BoundingBox]:
    """One uninterrupted pass; the first entry echoes the ground truth."""
    tracker.initialize(sequence.frames[0], sequence.groundtruth[0])
    boxes = [sequence.groundtruth[0]]
    for frame in sequence.frames[1:]:
        boxes.append(tracker.track(frame))
    return boxes


def run_vot_sequence(tracker, sequence: Sequence, failure_threshold: float = settings.FAILURE_THRESHOLD,
                     reinit_skip: int = settings.REINIT_SKIP) -> List[ResultEntry]:
    """Re-initialisation protocol: a failure at frame f re-initialises at f + reinit_skip."""
    entries: List[ResultEntry] = []
    length = len(sequence)
    index = 0
    failures = 0
    while index < length:
        tracker.initialize(sequence.frames[index], sequence.groundtruth[index])
        entries.append(INIT_CODE)
        index += 1
        while index < length:
            box = tracker.track(sequence.frames[index])
            if iou(box, sequence.groundtruth[index]) <= failure_threshold:
                failures += 1
                skipped = min(reinit_skip - 1, length - index - 1)
                entries.append(FAILURE_CODE)
                entries.extend([SKIP_CODE] * skipped)
                index += 1 + skipped
                break
            entries.append(box)
            index += 1
    logger.debug(f"{sequence.name}: {failures} failures over {length} frames")
    return entries


def track_job(factory, sequence: Sequence, protocol: str, seed: int,
              failure_threshold: float = settings.FAILURE_THRESHOLD,
              reinit_skip: int = settings.REINIT_SKIP) -> List[ResultEntry]:
    tracker = factory(seed)
    if protocol == "vot":
        return run_vot_sequence(tracker, sequence, failure_threshold, reinit_skip)
    if protocol == "ope":
        return run_ope_sequence(tracker, sequence)
    raise ProtocolError(f"Unknown protocol {protocol!r}")


def format_results(entries: List[ResultEntry]) -> str:
    return "".join(f"{entry}\n" if isinstance(entry, int) else f"{entry.to_line()}\n" for entry in entries)


def write_results(path: Union[str, Path], entries: List[ResultEntry]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_results(entries))
    return path


def read_results(path: Union[str, Path]) -> List[ResultEntry]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError("Missing result file", path)
    entries: List[ResultEntry] = []
    for number, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            if "," in line:
                entries.append(BoundingBox.from_line(line))
                continue
            code = int(line)
        except ValueError as e:
            raise DatasetError(f"Malformed result line {line!r}: {e}", path, number) from e
        if code not in (SKIP_CODE, INIT_CODE, FAILURE_CODE):
            raise DatasetError(f"Unknown result code {code}", path, number)
        entries.append(code)
    return entries
