# data/dataset.py
import hashlib
import json
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Union

import cv2
import numpy as np
from pydantic import ValidationError

from config.settings import (
    ATTRIBUTES_FILE,
    COLOR_DIR,
    GROUNDTRUTH_FILE,
    IMAGE_EXTENSIONS,
    IR_DIR,
    MANIFEST_FILE,
)
from data.models import ATTRIBUTES, BoundingBox, FramePair, Sequence
from utils.exceptions import DatasetError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def list_images(directory: Path) -> List[Path]:
    if not directory.is_dir():
        raise DatasetError("Missing image directory", directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def read_image(path: Path, channels: int) -> np.ndarray:
    """Decode an 8-bit image to float32 H×W×channels in [0, 1]."""
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise DatasetError("Unreadable image", path)
    if image.dtype != np.uint8:
        raise DatasetError(f"Expected 8-bit image, got {image.dtype}", path)
    if image.ndim == 2:
        image = image[:, :, None]
    elif image.shape[2] == 4:
        image = cv2.cvtColor(image, cv2.COLOR_BGRA2BGR)
    if channels == 3:
        if image.shape[2] == 1:
            image = np.repeat(image, 3, axis=2)
        else:
            image = cv2.cvtColor(image, cv2.COLOR_BGR2RGB)
    elif image.shape[2] == 3:
        image = cv2.cvtColor(image, cv2.COLOR_BGR2GRAY)[:, :, None]
    return image.astype(np.float32) / 255.0


def write_image(path: Path, image: np.ndarray):
    """Encode a [0, 1] H×W×C float image as 8-bit PNG (C is 1 or 3)."""
    data = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if data.shape[2] == 3:
        data = cv2.cvtColor(data, cv2.COLOR_RGB2BGR)
    else:
        data = data[:, :, 0]
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), data):
        raise DatasetError("Failed to write image", path)


def parse_groundtruth(text: str, path: Optional[Path] = None) -> List[BoundingBox]:
    boxes = []
    for number, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            boxes.append(BoundingBox.from_line(line))
        except (ValueError, ValidationError) as e:
            raise DatasetError(f"Malformed box line {line.strip()!r}: {e}", path, number) from e
    return boxes


def load_groundtruth(path: Path) -> List[BoundingBox]:
    if not path.is_file():
        raise DatasetError("Missing ground-truth file", path)
    return parse_groundtruth(path.read_text(), path)


def format_groundtruth(boxes: Iterable[BoundingBox]) -> str:
    return "".join(f"{box.to_line()}\n" for box in boxes)


def groundtruth_text(sequence: Sequence) -> str:
    """The file as it was read when the boxes are unchanged, freshly formatted otherwise."""
    source = sequence.groundtruth_text
    if source is not None and parse_groundtruth(source) == sequence.groundtruth:
        return source
    return format_groundtruth(sequence.groundtruth)


def load_attributes(path: Path) -> frozenset:
    if not path.is_file():
        return frozenset()
    tags = set()
    for number, line in enumerate(path.read_text().splitlines(), 1):
        tag = line.strip()
        if not tag:
            continue
        if tag not in ATTRIBUTES:
            raise DatasetError(f"Unknown attribute tag {tag!r}", path, number)
        tags.add(tag)
    return frozenset(tags)


def load_sequence(root_path: PathLike) -> Sequence:
    """Load <seq>/color, <seq>/ir, groundtruth.txt and the optional attributes.txt."""
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError("Sequence directory does not exist", root)
    color_paths = list_images(root / COLOR_DIR)
    ir_paths = list_images(root / IR_DIR)
    if len(color_paths) != len(ir_paths):
        raise DatasetError(
            f"Frame-count mismatch: {len(color_paths)} color vs {len(ir_paths)} ir frames", root)
    groundtruth_path = root / GROUNDTRUTH_FILE
    groundtruth = load_groundtruth(groundtruth_path)
    if len(groundtruth) != len(color_paths):
        raise DatasetError(
            f"Frame-count mismatch: {len(color_paths)} frames vs {len(groundtruth)} boxes",
            groundtruth_path)

    frames = []
    for index, (color_path, ir_path) in enumerate(zip(color_paths, ir_paths)):
        try:
            frames.append(FramePair(rgb=read_image(color_path, 3), tir=read_image(ir_path, 1), index=index))
        except ValidationError as e:
            raise DatasetError(f"Invalid frame pair: {e}", color_path) from e

    try:
        sequence = Sequence(
            name=root.name,
            frames=frames,
            groundtruth=groundtruth,
            groundtruth_text=groundtruth_path.read_text(),
            attributes=load_attributes(root / ATTRIBUTES_FILE),
        )
    except ValidationError as e:
        raise DatasetError(f"Invalid sequence: {e}", root) from e
    logger.debug(f"Loaded sequence {sequence.name} with {len(sequence)} frames")
    return sequence


def list_sequence_dirs(root: PathLike, exclude: Optional[Iterable[str]] = None) -> List[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError("Dataset root does not exist", root)
    excluded = set(exclude or ())
    return sorted(p for p in root.iterdir()
                  if p.is_dir() and (p / GROUNDTRUTH_FILE).is_file() and p.name not in excluded)


def load_sequences(root: PathLike, exclude: Optional[Iterable[str]] = None) -> List[Sequence]:
    sequences = [load_sequence(path) for path in list_sequence_dirs(root, exclude)]
    logger.info(f"Loaded {len(sequences)} sequences from {root}")
    return sequences


def load_exclusion_list(path: Optional[PathLike]) -> frozenset:
    if path is None:
        return frozenset()
    path = Path(path)
    if not path.is_file():
        raise DatasetError("Missing exclusion list", path)
    return frozenset(line.strip() for line in path.read_text().splitlines() if line.strip())


def write_sequence(sequence: Sequence, root: PathLike) -> Path:
    root = Path(root) / sequence.name
    for frame in sequence.frames:
        write_image(root / COLOR_DIR / frame.name, frame.rgb)
        write_image(root / IR_DIR / frame.name, frame.tir)
    (root / GROUNDTRUTH_FILE).write_text(groundtruth_text(sequence))
    if sequence.attributes:
        (root / ATTRIBUTES_FILE).write_text("".join(f"{tag}\n" for tag in sorted(sequence.attributes)))
    return root


def file_checksum(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(root: PathLike) -> Path:
    """manifest.json: sequence names, frame counts and a SHA-256 per written file."""
    root = Path(root)
    sequences = {
        path.name: len(list_images(path / COLOR_DIR))
        for path in list_sequence_dirs(root)
    }
    checksums = {
        path.relative_to(root).as_posix(): file_checksum(path)
        for path in sorted(root.rglob("*"))
        if path.is_file() and path.name != MANIFEST_FILE
    }
    manifest_path = root / MANIFEST_FILE
    manifest_path.write_text(json.dumps({"sequences": sequences, "files": checksums}, indent=2, sort_keys=True))
    logger.info(f"Wrote manifest for {len(sequences)} sequences and {len(checksums)} files")
    return manifest_path
