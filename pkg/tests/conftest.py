import numpy as np
import pytest
import torch

from core.evaluation import EvaluationConfig
from core.tracker import TrackerConfig
from core.trainer import TrainConfig
from data.models import BoundingBox, FramePair, Sequence
from data.synth import ToySequenceSpec, generate_toy_sequence
from network.backbone import BackboneConfig
from network.fusion import FusionConfig
from network.iou_net import IoUHeadConfig
from network.model_predictor import PredictorConfig
from network.net import MultiModalNet


@pytest.fixture
def backbone_config():
    return BackboneConfig(block_channel_widths=(4, 4, 8, 8), block_strides=(2, 2, 2, 2))


@pytest.fixture
def predictor_config():
    return PredictorConfig(filter_size=3, offline_iterations=2)


@pytest.fixture
def iou_config():
    return IoUHeadConfig(reference_pool=3, test_pool=3, branch_channels=4, modulation_dim=8, hidden_dim=8)


@pytest.fixture
def tracker_config():
    return TrackerConfig(search_size=64, num_candidates=3, refine_steps=2, init_iterations=2,
                         online_iterations=1, update_interval=2, memory_capacity=5)


@pytest.fixture
def train_config():
    return TrainConfig(n_frames=2, batch_size=2, total_steps=2, pretrain_steps=2, proposals_per_frame=4,
                       search_size=64, checkpoint_interval=1)


@pytest.fixture
def evaluation_config():
    return EvaluationConfig(vot_runs=1, ope_runs=1)


@pytest.fixture
def make_net(backbone_config, predictor_config, iou_config):
    def factory(fusion=None, dtype=torch.float32, **fusion_fields):
        fusion = fusion or FusionConfig(**fusion_fields)
        return MultiModalNet(fusion, backbone_config, predictor_config, iou_config).to(dtype)
    return factory


def toy_spec(name="toy", seed=0, num_frames=12, **fields):
    fields.setdefault("image_size", (64, 64))
    fields.setdefault("target_size_range", (10, 14))
    fields.setdefault("distractors", 0)
    return ToySequenceSpec(name=name, seed=seed, num_frames=num_frames, **fields)


@pytest.fixture
def toy_sequence():
    return generate_toy_sequence(toy_spec())


@pytest.fixture
def toy_sequences():
    return [generate_toy_sequence(toy_spec(f"toy_{i}", seed=i)) for i in range(3)]


def blank_sequence(name, boxes, size=(48, 48), attributes=()):
    """Constant frames with the given ground truth; enough for protocol and metric tests."""
    height, width = size
    frames = [FramePair(rgb=np.full((height, width, 3), 0.5, dtype=np.float32),
                        tir=np.full((height, width, 1), 0.5, dtype=np.float32), index=i)
              for i in range(len(boxes))]
    return Sequence(name=name, frames=frames, groundtruth=list(boxes), attributes=frozenset(attributes))


def box(x, y, w, h):
    return BoundingBox(x=x, y=y, w=w, h=h)
