import json

import pytest
import torch

from network.backbone import Modality, collapse_first_layer
from network.fusion import FusionConfig, fusion_row
from network.net import load_checkpoint, read_checkpoint, save_checkpoint, transfer_pretrained
from utils.exceptions import CheckpointError, DatasetError


@pytest.mark.parametrize("level, backbones, streams", [
    ("single_rgb", {"rgb"}, 1),
    ("single_tir", {"tir"}, 1),
    ("pixel", {"fused"}, 1),
    ("feature", {"rgb", "tir"}, 1),
    ("response", {"rgb", "tir"}, 2),
])
def test_components_per_level(make_net, level, backbones, streams):
    net = make_net(level=level)
    assert set(net.backbones) == backbones
    assert len(net.predictors) == streams


def test_fused_streams_double_channels(make_net):
    net = make_net(level="feature")
    assert net.stream_channels(Modality.FUSED) == (16, 16)
    assert make_net(level="pixel").stream_channels(Modality.FUSED) == (8, 8)
    routed = net.features(torch.rand(2, 3, 64, 64), torch.rand(2, 1, 64, 64))
    assert routed.iou.block4.shape == (2, 16, 4, 4)


def test_same_seed_same_initialisation(make_net):
    first, second = make_net(level="feature"), make_net(level="feature")
    for (name, a), b in zip(first.state_dict().items(), second.state_dict().values()):
        assert torch.equal(a, b), name


def test_checkpoint_roundtrip(make_net, tmp_path):
    net = make_net(fusion_row("response/iou=tir/tirx10"))
    path = save_checkpoint(net, tmp_path / "ckpt", step=7)
    manifest = json.loads(path.with_suffix(".json").read_text())
    assert manifest["step"] == 7
    assert manifest["fusion"]["level"] == "response"
    assert manifest["layers"]["backbones.rgb.stages.0.conv.weight"] == [4, 3, 7, 7]

    loaded, step, momentum = load_checkpoint(tmp_path / "ckpt")
    assert step == 7
    assert momentum == {}
    assert loaded.fusion == net.fusion
    for name, tensor in net.state_dict().items():
        assert torch.equal(loaded.state_dict()[name], tensor)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(DatasetError):
        read_checkpoint(tmp_path / "nothing")


def test_corrupt_manifest(make_net, tmp_path):
    path = save_checkpoint(make_net(level="single_rgb"), tmp_path / "ckpt")
    path.with_suffix(".json").write_text("{not json")
    with pytest.raises(CheckpointError, match="Unreadable checkpoint"):
        load_checkpoint(path)


def test_truncated_archive(make_net, tmp_path):
    path = save_checkpoint(make_net(level="single_rgb"), tmp_path / "ckpt")
    path.write_bytes(path.read_bytes()[:40])
    with pytest.raises(CheckpointError):
        read_checkpoint(path)


def test_manifest_without_configs(make_net, tmp_path):
    path = save_checkpoint(make_net(level="single_rgb"), tmp_path / "ckpt")
    manifest = json.loads(path.with_suffix(".json").read_text())
    del manifest["fusion"]
    path.with_suffix(".json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="loadable network"):
        load_checkpoint(path)
    path.with_suffix(".json").write_text("[1, 2]")
    with pytest.raises(CheckpointError, match="JSON object"):
        load_checkpoint(path)


class TestTransfer:
    def _pretrained(self, make_net):
        return make_net(level="single_rgb").state_dict()

    def test_single_tir_gets_every_group(self, make_net):
        pretrained = self._pretrained(make_net)
        net = make_net(level="single_tir")
        loaded = transfer_pretrained(net, pretrained)
        assert loaded == {"backbone_tir", "predictor", "iou_head"}
        expected = collapse_first_layer({"w": pretrained["backbones.rgb.stages.0.conv.weight"]})["w"]
        assert torch.equal(net.state_dict()["backbones.tir.stages.0.conv.weight"], expected)

    def test_pixel_extends_first_layer(self, make_net):
        pretrained = self._pretrained(make_net)
        net = make_net(level="pixel")
        assert transfer_pretrained(net, pretrained) == {"backbone_rgb", "predictor", "iou_head"}
        weight = net.state_dict()["backbones.fused.stages.0.conv.weight"]
        source = pretrained["backbones.rgb.stages.0.conv.weight"]
        assert torch.equal(weight[:, :3], source)
        torch.testing.assert_close(weight[:, 3], source.mean(dim=1))

    def test_fused_heads_stay_fresh(self, make_net):
        pretrained = self._pretrained(make_net)
        net = make_net(level="feature")
        fresh = {name: tensor.clone() for name, tensor in net.state_dict().items()}
        assert transfer_pretrained(net, pretrained) == {"backbone_rgb", "backbone_tir"}
        for name, tensor in net.state_dict().items():
            if name.startswith(("predictors.", "iou_head.")):
                assert torch.equal(tensor, fresh[name])

    def test_response_copies_predictor_to_both_streams(self, make_net):
        pretrained = self._pretrained(make_net)
        net = make_net(FusionConfig(level="response", iou_input="rgb"))
        assert transfer_pretrained(net, pretrained) == {"backbone_rgb", "backbone_tir", "predictor", "iou_head"}
        state = net.state_dict()
        for name, tensor in pretrained.items():
            if name.startswith("predictors.0."):
                suffix = name[len("predictors.0."):]
                assert torch.equal(state[f"predictors.1.{suffix}"], tensor)
