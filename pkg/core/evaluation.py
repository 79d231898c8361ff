# core/evaluation.py
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from config import settings
from core.runner import collect_trajectories
from core.tracker import FAILURE_CODE, INIT_CODE, SKIP_CODE, ResultEntry
from data.models import ATTRIBUTES, BoundingBox, center_error, iou
from data.models import Sequence as TrackSequence
from utils.exceptions import ProtocolError

logger = logging.getLogger(__name__)

Curves = Tuple[np.ndarray, np.ndarray]


class EvaluationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    vot_runs: int = Field(default=settings.VOT_RUNS, ge=1)
    ope_runs: int = Field(default=settings.OPE_RUNS, ge=1)
    failure_threshold: float = Field(default=settings.FAILURE_THRESHOLD, ge=0, lt=1)
    reinit_skip: int = Field(default=settings.REINIT_SKIP, ge=1)
    burn_in: int = Field(default=settings.BURN_IN, ge=0)
    precision_thresholds: int = Field(default=settings.PRECISION_THRESHOLDS, ge=1)
    success_thresholds: int = Field(default=settings.SUCCESS_THRESHOLDS, ge=2)
    precision_report_threshold: int = Field(default=settings.PRECISION_REPORT_THRESHOLD, ge=0)
    eao_percentiles: Tuple[float, float] = settings.EAO_PERCENTILES

    @property
    def precision_axis(self) -> np.ndarray:
        return np.arange(self.precision_thresholds, dtype=np.float64)

    @property
    def success_axis(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.success_thresholds)


# VOT protocol

@dataclass
class VotSequenceResult:
    name: str
    length: int
    overlaps: np.ndarray
    failures: List[int]
    segments: List[Tuple[np.ndarray, bool]]

    @property
    def accuracy(self) -> float:
        valid = self.overlaps[~np.isnan(self.overlaps)]
        return float(valid.mean()) if valid.size else 0.0


@dataclass
class VotReport:
    eao: float
    accuracy: float
    robustness: float
    per_run: List[Dict[str, float]] = field(default_factory=list)


def analyse_vot_entries(name: str, entries: Sequence[ResultEntry], groundtruth: Sequence[BoundingBox],
                        burn_in: int = settings.BURN_IN) -> VotSequenceResult:
    """Per-frame accuracy overlaps (NaN where excluded), failure frames and the
    overlap segments that start at each initialisation."""
    length = len(groundtruth)
    if len(entries) != length:
        raise ProtocolError(f"{name}: {len(entries)} result lines for {length} frames")
    if entries[0] != INIT_CODE:
        raise ProtocolError(f"{name}: the first result line must be an initialisation")

    overlaps = np.full(length, np.nan)
    failures: List[int] = []
    segments: List[Tuple[np.ndarray, bool]] = []
    current: Optional[List[float]] = None
    burn = 0
    for index, entry in enumerate(entries):
        if isinstance(entry, BoundingBox):
            if current is None:
                raise ProtocolError(f"{name}: box at frame {index} outside a tracked segment")
            overlap = iou(entry, groundtruth[index])
            current.append(overlap)
            if burn > 0:
                burn -= 1
            else:
                overlaps[index] = overlap
        elif entry == INIT_CODE:
            if current is not None:
                segments.append((np.asarray(current), False))
            current = []
            burn = burn_in if index > 0 else 0
        elif entry == FAILURE_CODE:
            if current is None:
                raise ProtocolError(f"{name}: failure at frame {index} outside a tracked segment")
            failures.append(index)
            current.append(0.0)
            segments.append((np.asarray(current), True))
            current = None
        elif entry != SKIP_CODE:
            raise ProtocolError(f"{name}: unknown result code {entry!r} at frame {index}")
    if current is not None:
        segments.append((np.asarray(current), False))
    return VotSequenceResult(name=name, length=length, overlaps=overlaps, failures=failures, segments=segments)


def expected_overlap_curve(segments: Iterable[Tuple[np.ndarray, bool]], max_length: int) -> np.ndarray:
    """Expected overlap for n = 1..max_length: mean over segments of the average overlap of
    their first n frames. Failed segments count as zeros after the failure;
    unfailed segments only contribute up to their own length."""
    totals = np.zeros(max_length)
    counts = np.zeros(max_length)
    n = np.arange(1, max_length + 1, dtype=np.float64)
    for values, failed in segments:
        values = np.asarray(values, dtype=np.float64)[:max_length]
        padded = np.zeros(max_length)
        padded[:values.size] = values
        running = np.cumsum(padded) / n
        defined = np.ones(max_length, dtype=bool) if failed else n <= values.size
        totals[defined] += running[defined]
        counts[defined] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, totals / np.maximum(counts, 1), np.nan)


def eao_interval(lengths: Iterable[int], percentiles: Tuple[float, float] = settings.EAO_PERCENTILES
                 ) -> Tuple[int, int]:
    """[N_lo, N_hi] from percentiles of the tracked lengths (L − 1) of the sequences."""
    tracked = np.asarray([length - 1 for length in lengths], dtype=np.float64)
    low, high = np.percentile(tracked, percentiles)
    return max(1, int(round(low))), max(1, int(round(high)))


def expected_average_overlap(segments: List[Tuple[np.ndarray, bool]], lengths: Sequence[int],
                             percentiles: Tuple[float, float] = settings.EAO_PERCENTILES) -> float:
    low, high = eao_interval(lengths, percentiles)
    curve = expected_overlap_curve(segments, max(high, max(lengths) - 1, 1))
    window = curve[low - 1:high]
    if window.size == 0 or np.all(np.isnan(window)):
        return 0.0
    return float(np.nanmean(window))


def vot_metrics(results: Sequence[VotSequenceResult],
                percentiles: Tuple[float, float] = settings.EAO_PERCENTILES) -> Dict[str, float]:
    """EAO, length-weighted accuracy and robustness (failures per 100 frames) of one run."""
    if not results:
        raise ProtocolError("No sequences to evaluate")
    lengths = [r.length for r in results]
    total = float(sum(lengths))
    segments = [segment for r in results for segment in r.segments]
    failures = sum(len(r.failures) for r in results)
    return {
        "eao": expected_average_overlap(segments, lengths, percentiles),
        "accuracy": sum(r.accuracy * r.length for r in results) / total,
        "robustness": 100.0 * failures / total,
        "failures": float(failures),
    }


def evaluate_vot(per_run: Sequence[Mapping[str, Sequence[ResultEntry]]], sequences: Sequence[TrackSequence],
                 config: Optional[EvaluationConfig] = None) -> VotReport:
    config = config or EvaluationConfig()
    if not sequences:
        raise ProtocolError("Empty sequence set")
    if not per_run:
        raise ProtocolError("At least one run is required")
    run_metrics = []
    for run, entries in enumerate(per_run):
        results = [analyse_vot_entries(seq.name, entries[seq.name], seq.groundtruth, config.burn_in)
                   for seq in sequences]
        metrics = vot_metrics(results, config.eao_percentiles)
        logger.info(f"VOT run {run}: EAO={metrics['eao']:.4f} A={metrics['accuracy']:.4f} "
                    f"R={metrics['robustness']:.3f}")
        run_metrics.append(metrics)
    summary = aggregate_runs(run_metrics)
    return VotReport(eao=summary["eao"][0], accuracy=summary["accuracy"][0],
                     robustness=summary["robustness"][0], per_run=run_metrics)


def run_vot_protocol(factory, sequences: List[TrackSequence], runs: int, seed: int,
                     config: Optional[EvaluationConfig] = None, workers: int = 1) -> VotReport:
    config = config or EvaluationConfig()
    if runs < 1:
        raise ProtocolError("runs must be at least 1")
    if not sequences:
        raise ProtocolError("Empty sequence set")
    per_run = collect_trajectories(factory, sequences, "vot", runs, seed, config.failure_threshold,
                                   config.reinit_skip, workers)
    return evaluate_vot(per_run, sequences, config)


# One-pass evaluation

@dataclass
class OpeCurves:
    precision_thresholds: np.ndarray
    success_thresholds: np.ndarray
    precision: np.ndarray
    success: np.ndarray
    pr20: float
    sr_auc: float
    per_sequence: Dict[str, Curves] = field(default_factory=dict)
    per_run: List[Dict[str, float]] = field(default_factory=list)


def precision_curve(errors: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    return (errors[None, :] <= thresholds[:, None]).mean(axis=1)


def success_curve(overlaps: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Fraction of frames with overlap ≥ t; at t = 0 the fraction with overlap > 0."""
    curve = (overlaps[None, :] >= thresholds[:, None]).mean(axis=1)
    curve[thresholds <= 0] = (overlaps > 0).mean()
    return curve


def ope_sequence_curves(boxes: Sequence[ResultEntry], groundtruth: Sequence[BoundingBox],
                        config: Optional[EvaluationConfig] = None, name: str = "") -> Curves:
    """Precision and success curves over frames 1..L-1 of one sequence."""
    config = config or EvaluationConfig()
    if len(boxes) != len(groundtruth):
        raise ProtocolError(f"{name}: {len(boxes)} result lines for {len(groundtruth)} frames")
    if any(not isinstance(box, BoundingBox) for box in boxes):
        raise ProtocolError(f"{name}: one-pass results may only contain boxes")
    pairs = list(zip(boxes[1:], groundtruth[1:]))
    errors = np.array([center_error(box, gt) for box, gt in pairs])
    overlaps = np.array([iou(box, gt) for box, gt in pairs])
    return precision_curve(errors, config.precision_axis), success_curve(overlaps, config.success_axis)


def _summarise(precision: np.ndarray, success: np.ndarray, config: EvaluationConfig) -> Tuple[float, float]:
    return float(precision[config.precision_report_threshold]), float(success.mean())


def evaluate_ope(per_run: Sequence[Mapping[str, Sequence[ResultEntry]]], sequences: Sequence[TrackSequence],
                 config: Optional[EvaluationConfig] = None) -> OpeCurves:
    """Curves averaged over runs per sequence, then over sequences."""
    config = config or EvaluationConfig()
    if not sequences or not per_run:
        raise ProtocolError("One-pass evaluation needs at least one sequence and one run")
    run_curves = [{seq.name: ope_sequence_curves(entries[seq.name], seq.groundtruth, config, seq.name)
                   for seq in sequences} for entries in per_run]
    per_sequence = {
        seq.name: (np.mean([curves[seq.name][0] for curves in run_curves], axis=0),
                   np.mean([curves[seq.name][1] for curves in run_curves], axis=0))
        for seq in sequences
    }
    run_metrics = []
    for curves in run_curves:
        pr, sr = _summarise(np.mean([p for p, _ in curves.values()], axis=0),
                            np.mean([s for _, s in curves.values()], axis=0), config)
        run_metrics.append({"pr20": pr, "sr_auc": sr})
    precision = np.mean([p for p, _ in per_sequence.values()], axis=0)
    success = np.mean([s for _, s in per_sequence.values()], axis=0)
    pr, sr = _summarise(precision, success, config)
    logger.info(f"OPE over {len(sequences)} sequences × {len(per_run)} runs: PR={pr:.4f} SR={sr:.4f}")
    return OpeCurves(precision_thresholds=config.precision_axis, success_thresholds=config.success_axis,
                     precision=precision, success=success, pr20=pr, sr_auc=sr,
                     per_sequence=per_sequence, per_run=run_metrics)


def run_ope(factory, sequences: List[TrackSequence], runs: int, seed: int = 0,
            config: Optional[EvaluationConfig] = None, workers: int = 1) -> OpeCurves:
    config = config or EvaluationConfig()
    if runs < 1:
        raise ProtocolError("runs must be at least 1")
    if not sequences:
        raise ProtocolError("Empty sequence set")
    per_run = collect_trajectories(factory, sequences, "ope", runs, seed, config.failure_threshold,
                                   config.reinit_skip, workers)
    return evaluate_ope(per_run, sequences, config)


def attribute_breakdown(per_sequence: Mapping[str, Curves], sequences: Sequence[TrackSequence],
                        tags: Optional[Iterable[str]] = None,
                        config: Optional[EvaluationConfig] = None) -> Dict[str, Tuple[float, float]]:
    """(PR, SR) per attribute over the sequences carrying it; tags with no sequence are left out."""
    config = config or EvaluationConfig()
    tags = list(ATTRIBUTES if tags is None else tags)
    unknown = sorted(set(tags) - set(ATTRIBUTES))
    if unknown:
        raise ProtocolError(f"Unknown attribute tags: {unknown}")
    breakdown = {}
    for tag in tags:
        names = [seq.name for seq in sequences if tag in seq.attributes and seq.name in per_sequence]
        if not names:
            continue
        precision = np.mean([per_sequence[name][0] for name in names], axis=0)
        success = np.mean([per_sequence[name][1] for name in names], axis=0)
        breakdown[tag] = _summarise(precision, success, config)
    return breakdown


def aggregate_runs(per_run: Sequence[Union[float, Mapping[str, float]]]
                   ) -> Union[Tuple[float, float], Dict[str, Tuple[float, float]]]:
    """Mean and population standard deviation over runs, per metric for dict inputs."""
    if not per_run:
        raise ProtocolError("No runs to aggregate")
    if isinstance(per_run[0], Mapping):
        return {key: aggregate_runs([run[key] for run in per_run]) for key in per_run[0]}
    values = np.asarray(per_run, dtype=np.float64)
    return float(values.mean()), float(values.std())


def _finite_or_none(value: Optional[float]) -> Optional[float]:
    return None if value is None or not math.isfinite(value) else value


def write_report(output_dir: Union[str, Path], vot: Optional[VotReport] = None, ope: Optional[OpeCurves] = None,
                 per_attribute: Optional[Mapping[str, Tuple[float, float]]] = None) -> Path:
    """report.json plus precision.csv / success.csv curve data."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    per_run: Dict[str, object] = {}
    if vot is not None:
        per_run["vot"] = vot.per_run
        per_run["vot_std"] = {k: sd for k, (_, sd) in aggregate_runs(vot.per_run).items()}
    if ope is not None:
        per_run["ope"] = ope.per_run
        per_run["ope_std"] = {k: sd for k, (_, sd) in aggregate_runs(ope.per_run).items()}
        pd.DataFrame({"threshold": ope.precision_thresholds, "precision": ope.precision}).to_csv(
            output_dir / "precision.csv", index=False)
        pd.DataFrame({"threshold": ope.success_thresholds, "success": ope.success}).to_csv(
            output_dir / "success.csv", index=False)
    report = {
        "eao": _finite_or_none(vot.eao) if vot else None,
        "accuracy": _finite_or_none(vot.accuracy) if vot else None,
        "robustness": _finite_or_none(vot.robustness) if vot else None,
        "pr20": _finite_or_none(ope.pr20) if ope else None,
        "sr_auc": _finite_or_none(ope.sr_auc) if ope else None,
        "per_attribute": {tag: {"pr20": pr, "sr_auc": sr} for tag, (pr, sr) in (per_attribute or {}).items()},
        "per_run": per_run,
    }
    path = output_dir / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    logger.info(f"Wrote evaluation report to {path}")
    return path
