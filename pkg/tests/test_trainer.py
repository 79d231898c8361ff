import numpy as np
import pandas as pd
import pytest
import torch

from config import settings
from core.trainer import (
    FINAL_CHECKPOINT,
    LOSS_FILE,
    Trainer,
    compute_losses,
    learning_rates,
    sample_episode,
    train,
)
from network.fusion import fusion_row
from network.net import read_checkpoint
from tests.conftest import blank_sequence, box
from utils.exceptions import DatasetError, TrainingError
from utils.helpers import make_rng

ALL_GROUPS = frozenset({"backbone_rgb", "backbone_tir", "predictor", "iou_head"})


class TestEpisodes:
    def test_halving_rule(self):
        sequence = blank_sequence("ten", [box(4, 4, 8, 8)] * 10)
        for seed in range(20):
            episode = sample_episode(sequence, 3, np.random.default_rng(seed))
            assert set(episode.train_indices) <= set(range(5))
            assert set(episode.test_indices) <= set(range(5, 10))
            assert len(set(episode.train_indices)) == 3 and len(set(episode.test_indices)) == 3
            assert len(episode.train) == 3

    def test_forced_halves(self):
        episode = sample_episode(blank_sequence("six", [box(4, 4, 8, 8)] * 6), 3, np.random.default_rng(0))
        assert episode.train_indices == (0, 1, 2)
        assert episode.test_indices == (3, 4, 5)

    def test_too_short(self):
        with pytest.raises(DatasetError, match="5 frames"):
            sample_episode(blank_sequence("five", [box(4, 4, 8, 8)] * 5), 3, np.random.default_rng(0))


class TestLearningRates:
    def test_pretrain_uses_base_rates(self, make_net, train_config):
        config = train_config.model_copy(update={"stage": "pretrain", "lr_iou_head": 0.02})
        rates = learning_rates(make_net(level="single_rgb"), config, ALL_GROUPS)
        assert rates == {"backbone_rgb": settings.LR_BACKBONE_RGB, "predictor": settings.LR_PREDICTOR, "iou_head": 0.02}

    def test_tir_multiplier(self, make_net, train_config):
        net = make_net(fusion_row("feature/iou=fused/pred=fused/tirx10"))
        trainer = Trainer(net, train_config, ALL_GROUPS)
        rates = trainer.effective_rates()
        assert rates["backbone_rgb"] == pytest.approx(settings.LR_BACKBONE_RGB * settings.FINETUNE_GAIN)
        assert rates["backbone_tir"] == pytest.approx(10 * rates["backbone_rgb"], rel=1e-12)
        assert rates["predictor"] == pytest.approx(settings.LR_PREDICTOR * settings.FINETUNE_GAIN)

    def test_fresh_groups_train_at_base_rate(self, make_net, train_config):
        net = make_net(fusion_row("feature/iou=fused/pred=fused"))
        rates = learning_rates(net, train_config, frozenset({"backbone_rgb", "backbone_tir"}))
        assert rates["predictor"] == settings.LR_PREDICTOR
        assert rates["iou_head"] == settings.LR_IOU_HEAD
        assert rates["backbone_tir"] == pytest.approx(settings.LR_BACKBONE_TIR * settings.FINETUNE_GAIN)

    def test_unlisted_components_are_frozen(self, make_net, train_config):
        net = make_net(fusion_row("single_tir/ft=iou,pred"))
        trainer = Trainer(net, train_config, frozenset({"backbone_tir", "predictor", "iou_head"}))
        assert trainer.rates["backbone_tir"] is None
        assert set(trainer.effective_rates()) == {"predictor", "iou_head"}
        assert not any(p.requires_grad for p in net.backbones["tir"].parameters())

    def test_fully_frozen_net_has_no_optimizer(self, make_net, train_config, toy_sequences, tmp_path):
        net = make_net(fusion_row("single_tir"))
        trainer = Trainer(net, train_config, frozenset({"backbone_tir", "predictor", "iou_head"}))
        assert trainer.optimizer is None
        result = trainer.train(toy_sequences, tmp_path)
        assert result.losses.empty
        assert (tmp_path / "step_000000.npz").is_file()


class TestLosses:
    def test_zero_iou_weight(self, make_net, train_config, toy_sequences):
        config = train_config.model_copy(update={"iou_loss_weight": 0.0})
        rng = make_rng(0, 0)
        episodes = [sample_episode(seq, config.n_frames, rng) for seq in toy_sequences[:2]]
        loss_cls, loss_iou, loss_total = compute_losses(make_net(level="feature"), episodes, config, rng)
        assert float(loss_total) == float(loss_cls)
        assert float(loss_iou) >= 0

    @pytest.mark.parametrize("level", ["feature", "response", "pixel"])
    def test_gradients_reach_every_backbone(self, make_net, train_config, toy_sequences, level):
        net = make_net(level=level)
        rng = make_rng(1, 0)
        episodes = [sample_episode(toy_sequences[0], train_config.n_frames, rng)]
        _, _, loss_total = compute_losses(net, episodes, train_config, rng)
        loss_total.backward()
        for name, params in net.parameter_groups().items():
            assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in params), name

    def test_non_finite_loss_is_reported(self, make_net, train_config, toy_sequences, monkeypatch):
        nan = torch.tensor(float("nan"))
        monkeypatch.setattr("core.trainer.compute_losses", lambda *args: (nan, nan, nan))
        trainer = Trainer(make_net(level="single_rgb"), train_config)
        with pytest.raises(TrainingError, match="Non-finite"):
            trainer.train_step(trainer.sample_batch(toy_sequences, make_rng(0)), make_rng(0))

    def test_gradient_norm_is_clipped(self, make_net, train_config, toy_sequences):
        rates = {f"lr_{group}": 1.0 for group in ALL_GROUPS}
        config = train_config.model_copy(update={"stage": "pretrain", "grad_clip_norm": 1e-3, **rates})
        trainer = Trainer(make_net(level="single_rgb"), config)
        params = [param for group in trainer.optimizer.param_groups for param in group["params"]]
        before = [param.detach().clone() for param in params]
        trainer.train_step(trainer.sample_batch(toy_sequences, make_rng(0)), make_rng(0))
        # First SGD step moves by lr * clipped gradient
        moved = torch.sqrt(sum(((param.detach() - start) ** 2).sum() for param, start in zip(params, before)))
        assert 0 < float(moved) <= 1e-3 * 1.01


class TestTraining:
    def test_zero_steps_keeps_initialisation(self, make_net, train_config, toy_sequences, tmp_path):
        net = make_net(level="feature")
        initial = {name: tensor.clone() for name, tensor in net.state_dict().items()}
        result = Trainer(net, train_config).train(toy_sequences, tmp_path, total_steps=0)
        assert result.checkpoint.name == f"{FINAL_CHECKPOINT}.npz"
        _, final = read_checkpoint(result.checkpoint)
        _, start = read_checkpoint(tmp_path / "step_000000")
        assert set(final) == set(initial)
        for name, tensor in initial.items():
            np.testing.assert_array_equal(final[name], tensor.numpy())
            np.testing.assert_array_equal(start[name], tensor.numpy())

    def test_same_seed_same_losses(self, make_net, train_config, toy_sequences, tmp_path):
        first = Trainer(make_net(level="feature"), train_config).train(toy_sequences, tmp_path / "a")
        second = Trainer(make_net(level="feature"), train_config).train(toy_sequences, tmp_path / "b")
        assert len(first.losses) == train_config.total_steps
        pd.testing.assert_frame_equal(first.losses, second.losses)
        written = pd.read_csv(tmp_path / "a" / LOSS_FILE)
        assert list(written.columns) == ["step", "L_cls", "L_iou", "L_total"]
        assert np.isfinite(written["L_total"]).all()

    def test_parameters_move(self, make_net, train_config, toy_sequences, tmp_path):
        net = make_net(level="single_rgb")
        before = net.backbones["rgb"].stages[0].conv.weight.detach().clone()
        Trainer(net, train_config).train(toy_sequences, tmp_path, total_steps=1)
        assert not torch.equal(before, net.backbones["rgb"].stages[0].conv.weight)

    def test_resume_matches_uninterrupted_run(self, make_net, train_config, toy_sequences, tmp_path):
        config = train_config.model_copy(update={"total_steps": 3})
        full = Trainer(make_net(level="feature"), config).train(toy_sequences, tmp_path / "full")
        resumed = Trainer(make_net(level="feature"), config).train(
            toy_sequences, tmp_path / "resumed", resume=tmp_path / "full" / "step_000001")
        assert resumed.losses["step"].tolist() == [1, 2]
        np.testing.assert_allclose(resumed.losses["L_total"].to_numpy(), full.losses["L_total"].to_numpy()[1:],
                                   rtol=0, atol=1e-6)

    def test_no_eligible_sequences(self, make_net, train_config, tmp_path):
        short = blank_sequence("short", [box(4, 4, 8, 8)] * 3)
        with pytest.raises(DatasetError):
            Trainer(make_net(level="single_rgb"), train_config).train([short], tmp_path)

    def test_train_function(self, make_net, train_config, toy_sequences, tmp_path):
        with pytest.raises(DatasetError):
            train([], make_net(level="single_rgb"), train_config, tmp_path)
        config = train_config.model_copy(update={"total_steps": 1})
        result = train(toy_sequences, make_net(level="feature"), config, tmp_path)
        assert result.checkpoint == tmp_path / f"{FINAL_CHECKPOINT}.npz"
        assert len(result.losses) == 1
