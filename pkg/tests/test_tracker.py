import numpy as np
import pytest
import torch

from core.runner import collect_trajectories
from core.tracker import (
    FAILURE_CODE,
    INIT_CODE,
    SKIP_CODE,
    CropTransform,
    Memory,
    MultiModalTracker,
    TrackerFactory,
    crop_region,
    crop_search_region,
    init,
    locate_peak,
    peak_to_image,
    read_results,
    run_ope_sequence,
    run_vot_sequence,
    track_frame,
    track_job,
    write_results,
)
from network.fusion import fuse_response
from network.net import save_checkpoint
from tests.conftest import blank_sequence, box
from utils.exceptions import DatasetError, GeometryError, ProtocolError


class ScriptedTracker:
    """Returns scripted boxes; counts initialisations."""

    def __init__(self, predict):
        self.predict = predict
        self.inits = []
        self.index = 0

    def initialize(self, frame, box):
        self.inits.append(frame.index)
        self.index = frame.index

    def track(self, frame):
        self.index = frame.index
        return self.predict(frame.index)


class TestGeometry:
    def test_transform_roundtrip(self):
        transform = CropTransform(center=(40.0, 30.0), ratio=1.6, out_size=64)
        b = box(31.5, 22.0, 12.0, 7.0)
        crop = transform.to_crop(b)
        assert crop.center == pytest.approx((28.0, 24.8))
        back = transform.to_image(crop)
        assert back.as_tuple() == pytest.approx(b.as_tuple())

    def test_identity_crop(self):
        image = np.random.default_rng(0).random((20, 20, 3)).astype(np.float32)
        patch, transform = crop_region(image, (10.0, 10.0), 20.0, 20)
        assert transform.ratio == 1.0
        np.testing.assert_allclose(patch, image, atol=1e-6)

    def test_border_is_replicated(self):
        image = np.random.default_rng(1).random((20, 20, 1)).astype(np.float32)
        patch, _ = crop_search_region(image, box(0, 0, 4, 4), 5.0, 20)
        assert patch.shape == (20, 20, 1)
        np.testing.assert_allclose(patch[:8, :8], np.broadcast_to(image[0, 0], (8, 8, 1)), atol=1e-6)
        np.testing.assert_allclose(patch[8:, 8:], image[:12, :12], atol=1e-6)

    def test_invalid_side(self):
        with pytest.raises(GeometryError):
            crop_region(np.zeros((4, 4, 3), dtype=np.float32), (2.0, 2.0), 0.0, 8)

    def test_peak_to_image(self):
        transform = CropTransform(center=(50.0, 60.0), ratio=0.5, out_size=64)
        assert peak_to_image((1.0, 1.0), 16, transform) == pytest.approx((34.0, 44.0))
        assert peak_to_image((1.5, 1.5), 16, transform) == pytest.approx((50.0, 60.0))


class TestPeak:
    def test_symmetric_peak(self):
        response = torch.zeros(5, 6)
        response[2, 3] = 1.0
        response[2, 2] = response[2, 4] = 0.5
        assert locate_peak(response) == pytest.approx((3.0, 2.0, 1.0))

    def test_subcell_offset(self):
        response = torch.zeros(5, 5, dtype=torch.float64)
        response[2, 1], response[2, 2], response[2, 3] = 0.5, 1.0, 0.0
        x, y, value = locate_peak(response)
        assert x == pytest.approx(2.0 - 1.0 / 6.0)
        assert y == 2.0

    def test_ties_resolve_row_major_and_edges_skip_offset(self):
        response = torch.zeros(4, 4)
        response[0, 3] = response[3, 0] = 2.0
        assert locate_peak(response) == (3.0, 0.0, 2.0)

    def test_fused_response_peak(self):
        generator = torch.Generator().manual_seed(0)
        s_v = torch.rand(10, 10, generator=generator) * 0.39
        s_t = torch.rand(10, 10, generator=generator) * 0.39
        s_v[3, 3], s_t[3, 3] = 1.0, 0.9
        x, y, _ = locate_peak(fuse_response(s_v, s_t))
        assert (round(x), round(y)) == (3, 3)


def test_memory_is_bounded():
    memory = Memory(features=[torch.zeros(2, 3, 4, 4)], boxes=torch.ones(2, 4), weights=torch.ones(2))
    for _ in range(4):
        memory.append([torch.ones(1, 3, 4, 4)], torch.ones(4), decay=0.5, capacity=3)
    assert len(memory) == 3
    torch.testing.assert_close(memory.weights, torch.tensor([0.25, 0.5, 1.0]))
    assert memory.samples(0).features.shape == (3, 3, 4, 4)


class TestTracking:
    def test_track_requires_init(self, toy_sequence):
        with pytest.raises(ProtocolError):
            track_frame(None, toy_sequence.frames[1])

    def test_init_rejects_box_outside_frame(self, make_net, tracker_config, toy_sequence):
        with pytest.raises(GeometryError):
            init(toy_sequence.frames[0], box(70, 10, 8, 8), make_net(level="single_rgb"), tracker_config)

    @pytest.mark.parametrize("level", ["single_rgb", "single_tir", "pixel", "feature", "response"])
    def test_boxes_stay_in_frame(self, make_net, tracker_config, toy_sequence, level):
        tracker = MultiModalTracker(make_net(level=level), tracker_config, seed=1)
        boxes = run_ope_sequence(tracker, toy_sequence)
        assert len(boxes) == len(toy_sequence)
        assert boxes[0] == toy_sequence.groundtruth[0]
        for b in boxes[1:]:
            cx, cy = b.center
            assert 0 <= cx <= 64 and 0 <= cy <= 64

    def test_single_rgb_never_touches_tir(self, make_net, tracker_config, toy_sequence):
        net = make_net(level="single_rgb")
        assert set(net.backbones) == {"rgb"}
        calls = []
        net.backbones["rgb"].register_forward_hook(lambda module, inputs, output: calls.append(inputs[0].shape))
        tracker = MultiModalTracker(net, tracker_config)
        tracker.initialize(toy_sequence.frames[0], toy_sequence.groundtruth[0])
        tracker.track(toy_sequence.frames[1])
        assert len(calls) == 2
        assert all(shape[1] == 3 for shape in calls)

    def test_deterministic_per_seed(self, make_net, tracker_config, toy_sequence):
        net = make_net(level="feature")
        first = run_ope_sequence(MultiModalTracker(net, tracker_config, seed=3), toy_sequence)
        second = run_ope_sequence(MultiModalTracker(net, tracker_config, seed=3), toy_sequence)
        assert first == second

    def test_factory_loads_checkpoint(self, tmp_path, make_net, tracker_config, toy_sequence):
        path = save_checkpoint(make_net(level="pixel"), tmp_path / "net")
        factory = TrackerFactory(tmp_path / "net", tracker_config)
        entries = track_job(factory, toy_sequence, "ope", seed=0)
        assert len(entries) == len(toy_sequence)
        assert path.suffix == ".npz"
        with pytest.raises(ProtocolError):
            track_job(factory, toy_sequence, "eao", seed=0)

    def test_empty_sequence_list(self, tmp_path, make_net, tracker_config):
        save_checkpoint(make_net(level="single_rgb"), tmp_path / "net")
        with pytest.raises(ProtocolError, match="No sequences"):
            collect_trajectories(TrackerFactory(tmp_path / "net", tracker_config), [], "ope", runs=1, seed=0,
                                 failure_threshold=0.0, reinit_skip=5)


class TestVotProtocol:
    def test_reinitialises_five_frames_after_failure(self):
        sequence = blank_sequence("fail", [box(10, 10, 8, 8)] * 20)
        tracker = ScriptedTracker(lambda index: box(30, 30, 8, 8))
        entries = run_vot_sequence(tracker, sequence, failure_threshold=0.0, reinit_skip=5)
        block = [INIT_CODE, FAILURE_CODE] + [SKIP_CODE] * 4
        assert entries == block * 3 + [INIT_CODE, FAILURE_CODE]
        assert tracker.inits == [0, 6, 12, 18]
        assert entries.count(FAILURE_CODE) == 4

    def test_failure_near_the_end(self):
        sequence = blank_sequence("tail", [box(10, 10, 8, 8)] * 8)
        tracker = ScriptedTracker(lambda index: box(30, 30, 8, 8) if index == 5 else box(10, 10, 8, 8))
        entries = run_vot_sequence(tracker, sequence)
        assert len(entries) == 8
        assert entries[5:] == [FAILURE_CODE, SKIP_CODE, SKIP_CODE]
        assert tracker.inits == [0]

    def test_oracle_never_fails(self):
        boxes = [box(10 + i, 10, 8, 8) for i in range(6)]
        sequence = blank_sequence("oracle", boxes)
        entries = run_vot_sequence(ScriptedTracker(lambda index: boxes[index]), sequence)
        assert entries == [INIT_CODE] + boxes[1:]


class TestResultFiles:
    def test_roundtrip(self, tmp_path):
        entries = [INIT_CODE, box(1.5, 2, 3, 4.25), FAILURE_CODE, SKIP_CODE, INIT_CODE]
        path = write_results(tmp_path / "run_0" / "seq.txt", entries)
        assert path.read_text() == "1\n1.5,2,3,4.25\n2\n0\n1\n"
        assert read_results(path) == entries

    @pytest.mark.parametrize("text, line", [("1\n7\n", 2), ("1\n1,2,x,4\n", 2), ("abc\n", 1)])
    def test_malformed(self, tmp_path, text, line):
        path = tmp_path / "seq.txt"
        path.write_text(text)
        with pytest.raises(DatasetError) as error:
            read_results(path)
        assert error.value.line == line

    def test_missing(self, tmp_path):
        with pytest.raises(DatasetError):
            read_results(tmp_path / "none.txt")
