import json

import numpy as np
import pytest
from pydantic import ValidationError

from config import settings
from data.dataset import (
    load_exclusion_list,
    load_groundtruth,
    load_sequence,
    load_sequences,
    read_image,
    write_image,
    write_manifest,
    write_sequence,
)
from data.models import BoundingBox, FramePair, SampleSet, Sequence, center_error, iou
from tests.conftest import blank_sequence, box
from utils.exceptions import DatasetError


class TestBoundingBox:
    def test_center_and_area(self):
        b = box(10, 20, 4, 6)
        assert b.center == (12.0, 23.0)
        assert b.area == 24.0
        assert BoundingBox.from_center(12, 23, 4, 6) == b

    def test_rejects_degenerate(self):
        with pytest.raises(ValidationError):
            box(0, 0, 0, 5)
        with pytest.raises(ValidationError):
            box(0, float("nan"), 3, 5)

    def test_line_format(self):
        b = box(1.5, 2, 30.25, 4)
        assert b.to_line() == "1.5,2,30.25,4"
        assert BoundingBox.from_line(b.to_line()) == b
        with pytest.raises(ValueError):
            BoundingBox.from_line("1,2,3")

    def test_inside(self):
        assert box(0, 0, 10, 10).inside(10, 10)
        assert not box(-0.5, 0, 10, 10).inside(20, 20)


class TestOverlap:
    def test_identical_boxes(self):
        b = box(3.3, 7.1, 11.7, 5.9)
        assert iou(b, b) == 1.0
        assert center_error(b, b) == 0.0

    def test_disjoint_and_touching(self):
        assert iou(box(0, 0, 10, 10), box(20, 20, 5, 5)) == 0.0
        assert iou(box(0, 0, 10, 10), box(10, 0, 10, 10)) == 0.0

    def test_half_overlap(self):
        assert iou(box(0, 0, 10, 10), box(5, 0, 10, 10)) == pytest.approx(50 / 150)

    def test_center_error(self):
        assert center_error(box(0, 0, 10, 10), box(3, 4, 10, 10)) == pytest.approx(5.0)


class TestFramePair:
    def test_validates_shapes_and_range(self):
        rgb = np.zeros((8, 8, 3), dtype=np.float32)
        with pytest.raises(ValidationError):
            FramePair(rgb=rgb, tir=np.zeros((8, 9, 1), dtype=np.float32))
        with pytest.raises(ValidationError):
            FramePair(rgb=rgb, tir=np.zeros((8, 8, 3), dtype=np.float32))
        with pytest.raises(ValidationError):
            FramePair(rgb=rgb + 2, tir=np.zeros((8, 8, 1), dtype=np.float32))

    def test_images_are_read_only(self):
        frame = FramePair(rgb=np.zeros((4, 4, 3), dtype=np.float32), tir=np.zeros((4, 4, 1), dtype=np.float32))
        with pytest.raises(ValueError):
            frame.rgb[0, 0, 0] = 1.0
        assert frame.size == (4, 4)
        assert frame.name == "00000001.png"


class TestSequence:
    def test_length_mismatch(self):
        seq = blank_sequence("a", [box(1, 1, 4, 4)] * 3)
        with pytest.raises(ValidationError):
            Sequence(name="a", frames=seq.frames, groundtruth=seq.groundtruth[:2])

    def test_needs_two_frames(self):
        seq = blank_sequence("a", [box(1, 1, 4, 4)] * 2)
        with pytest.raises(ValidationError):
            Sequence(name="a", frames=seq.frames[:1], groundtruth=seq.groundtruth[:1])

    def test_unknown_attribute(self):
        with pytest.raises(ValidationError):
            blank_sequence("a", [box(1, 1, 4, 4)] * 2, attributes=["rainy"])

    def test_sample_set_rejects_mixed_sizes(self):
        small = blank_sequence("a", [box(1, 1, 4, 4)] * 2, size=(16, 16))
        large = blank_sequence("b", [box(1, 1, 4, 4)] * 2, size=(24, 16))
        with pytest.raises(ValidationError):
            SampleSet(items=[(small.frames[0], box(1, 1, 4, 4)), (large.frames[0], box(1, 1, 4, 4))])
        with pytest.raises(ValidationError):
            SampleSet(items=[])


class TestDatasetIO:
    def test_image_roundtrip_is_quantised(self, tmp_path):
        image = np.linspace(0, 1, 4 * 5 * 3, dtype=np.float32).reshape(4, 5, 3)
        write_image(tmp_path / "a.png", image)
        loaded = read_image(tmp_path / "a.png", 3)
        assert loaded.shape == (4, 5, 3)
        assert np.abs(loaded - image).max() <= 0.5 / 255 + 1e-6

    def test_sequence_roundtrip(self, tmp_path, toy_sequence):
        root = write_sequence(toy_sequence, tmp_path)
        loaded = load_sequence(root)
        assert loaded.name == toy_sequence.name
        assert len(loaded) == len(toy_sequence)
        assert loaded.groundtruth == toy_sequence.groundtruth
        assert loaded.attributes == toy_sequence.attributes
        assert loaded.frames[0].tir.shape == toy_sequence.frames[0].tir.shape

    def test_groundtruth_text_survives_rewrite(self, tmp_path, toy_sequence):
        root = write_sequence(toy_sequence, tmp_path / "a")
        text = "\n".join(["10.0,20.50,30,40", "1.2500,2,3,4"] * (len(toy_sequence) // 2)) + "\n"
        (root / settings.GROUNDTRUTH_FILE).write_text(text)
        loaded = load_sequence(root)
        assert loaded.groundtruth[0] == box(10, 20.5, 30, 40)
        rewritten = write_sequence(loaded, tmp_path / "b") / settings.GROUNDTRUTH_FILE
        assert rewritten.read_text().rstrip() == text.rstrip()

    def test_edited_boxes_are_reformatted(self, tmp_path, toy_sequence):
        root = write_sequence(toy_sequence, tmp_path / "a")
        (root / settings.GROUNDTRUTH_FILE).write_text("1.50,2,3,4\n" * len(toy_sequence))
        loaded = load_sequence(root)
        edited = Sequence(name=loaded.name, frames=loaded.frames, groundtruth=[box(1, 2, 3, 5)] * len(loaded),
                          groundtruth_text=loaded.groundtruth_text)
        rewritten = write_sequence(edited, tmp_path / "b") / settings.GROUNDTRUTH_FILE
        assert rewritten.read_text() == "1,2,3,5\n" * len(loaded)

    def test_frame_count_mismatch(self, tmp_path, toy_sequence):
        root = write_sequence(toy_sequence, tmp_path)
        (root / settings.IR_DIR / toy_sequence.frames[-1].name).unlink()
        with pytest.raises(DatasetError, match="Frame-count mismatch"):
            load_sequence(root)

    def test_malformed_groundtruth_reports_line(self, tmp_path):
        path = tmp_path / "groundtruth.txt"
        path.write_text("1,2,3,4\n1,2,oops,4\n")
        with pytest.raises(DatasetError) as error:
            load_groundtruth(path)
        assert error.value.line == 2
        assert ":2]" in str(error.value)

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetError, match="does not exist"):
            load_sequences(tmp_path / "nowhere")

    def test_exclusion_list(self, tmp_path, toy_sequences):
        for sequence in toy_sequences:
            write_sequence(sequence, tmp_path / "data")
        listing = tmp_path / "exclude.txt"
        listing.write_text("toy_1\n\n")
        excluded = load_exclusion_list(listing)
        assert excluded == frozenset({"toy_1"})
        names = [seq.name for seq in load_sequences(tmp_path / "data", excluded)]
        assert names == ["toy_0", "toy_2"]

    def test_manifest(self, tmp_path, toy_sequence):
        write_sequence(toy_sequence, tmp_path)
        manifest = json.loads(write_manifest(tmp_path).read_text())
        assert manifest["sequences"] == {toy_sequence.name: len(toy_sequence)}
        assert f"{toy_sequence.name}/{settings.GROUNDTRUTH_FILE}" in manifest["files"]
        assert all(len(digest) == 64 for digest in manifest["files"].values())
