# core/ablation.py
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
import torch

from core.evaluation import EvaluationConfig, evaluate_ope, evaluate_vot
from core.runner import collect_trajectories
from core.tracker import TrackerConfig, TrackerFactory
from core.trainer import Trainer, TrainConfig
from data.models import Sequence as TrackSequence
from network.backbone import BackboneConfig
from network.fusion import ABLATION_ROWS, FusionConfig, FusionLevel
from network.iou_net import IoUHeadConfig
from network.model_predictor import PredictorConfig
from network.net import MultiModalNet, read_checkpoint, transfer_pretrained
from utils.exceptions import ConfigError

ABLATION_COLUMNS = ["row", "eao", "accuracy", "robustness", "pr20", "sr_auc", "error"]
PROTOCOLS = ("vot", "ope", "both")


def parse_rows(value: Optional[str]) -> List[str]:
    if not value:
        return list(ABLATION_ROWS)
    return [row.strip() for row in value.split(",") if row.strip()]


class AblationRunner:
    """Pretrains an RGB model once, then fine-tunes, tracks and evaluates every
    requested fusion row. A failing row is recorded and the next one runs."""

    def __init__(self, backbone: BackboneConfig, predictor: PredictorConfig, iou_head: IoUHeadConfig,
                 train: TrainConfig, tracker: TrackerConfig, evaluation: EvaluationConfig,
                 seed: int = 0, workers: int = 1):
        self.backbone = backbone
        self.predictor = predictor
        self.iou_head = iou_head
        self.train_config = train
        self.tracker_config = tracker
        self.evaluation = evaluation
        self.seed = seed
        self.workers = workers
        self.logger = logging.getLogger(__name__)

    def build_net(self, fusion: FusionConfig) -> MultiModalNet:
        return MultiModalNet(fusion, self.backbone, self.predictor, self.iou_head)

    def pretrain(self, sequences: List[TrackSequence], output_dir: Path) -> Path:
        fusion = FusionConfig(level=FusionLevel.SINGLE_RGB)
        config = self.train_config.model_copy(update={"stage": "pretrain"})
        self.logger.info(f"Pretraining the RGB model for {config.pretrain_steps} steps")
        result = Trainer(self.build_net(fusion), config).train(
            sequences, output_dir / "pretrain", total_steps=config.pretrain_steps)
        return result.checkpoint

    def finetune(self, row: str, pretrained: Path, sequences: List[TrackSequence], output_dir: Path) -> Path:
        fusion = ABLATION_ROWS[row][0]
        net = self.build_net(fusion)
        _, arrays = read_checkpoint(pretrained)
        loaded = transfer_pretrained(net, {name: torch.from_numpy(array) for name, array in arrays.items()})
        config = self.train_config.model_copy(update={"stage": "finetune"})
        return Trainer(net, config, loaded).train(sequences, output_dir / row.replace("/", "__")).checkpoint

    def evaluate(self, checkpoint: Path, sequences: List[TrackSequence], protocol: str) -> Dict[str, float]:
        factory = TrackerFactory(checkpoint, self.tracker_config)
        metrics: Dict[str, float] = {}
        evaluation = self.evaluation
        if protocol in ("vot", "both"):
            per_run = collect_trajectories(factory, sequences, "vot", evaluation.vot_runs, self.seed,
                                           evaluation.failure_threshold, evaluation.reinit_skip, self.workers)
            report = evaluate_vot(per_run, sequences, evaluation)
            metrics.update(eao=report.eao, accuracy=report.accuracy, robustness=report.robustness)
        if protocol in ("ope", "both"):
            per_run = collect_trajectories(factory, sequences, "ope", evaluation.ope_runs, self.seed,
                                           evaluation.failure_threshold, evaluation.reinit_skip, self.workers)
            curves = evaluate_ope(per_run, sequences, evaluation)
            metrics.update(pr20=curves.pr20, sr_auc=curves.sr_auc)
        return metrics

    def run(self, rows: Sequence[str], train_sequences: List[TrackSequence], test_sequences: List[TrackSequence],
            output_dir: Path, protocol: str = "vot") -> pd.DataFrame:
        if protocol not in PROTOCOLS:
            raise ConfigError(f"Unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
        output_dir = Path(output_dir)
        records: Dict[str, dict] = {}
        unknown = [row for row in rows if row not in ABLATION_ROWS]
        for row in unknown:
            self.logger.error(f"Unknown ablation row {row!r}")
            records[row] = {"row": row, "error": "unknown row"}

        known = [row for row in rows if row in ABLATION_ROWS]
        pretrained = self.pretrain(train_sequences, output_dir) if known else None
        for index, row in enumerate(known, 1):
            try:
                self.logger.info(f"Ablation row {index}/{len(known)}: {row}")
                checkpoint = self.finetune(row, pretrained, train_sequences, output_dir)
                records[row] = {"row": row, **self.evaluate(checkpoint, test_sequences, protocol), "error": ""}
                self.logger.info(f"Finished row {row}: {records[row]}")
            except Exception as e:
                self.logger.error(f"Error in ablation row {row}: {str(e)}", exc_info=True)
                records[row] = {"row": row, "error": str(e)}
                continue

        table = pd.DataFrame([records[row] for row in rows], columns=ABLATION_COLUMNS)
        table["error"] = table["error"].fillna("")
        output_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(output_dir / "ablation.csv", index=False)
        return table
