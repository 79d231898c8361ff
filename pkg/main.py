# main.py
import logging
import re
import sys
from pathlib import Path
from typing import Dict, List, Optional

import click
import torch
from dotenv import load_dotenv

from config import settings
from config.schema import GlobalConfig, describe_keys, load_config, require_paths, resolve_config_path
from core.ablation import PROTOCOLS, AblationRunner, parse_rows
from core.evaluation import attribute_breakdown, evaluate_ope, evaluate_vot, write_report
from core.runner import collect_trajectories
from core.trainer import Trainer
from core.tracker import ResultEntry, TrackerFactory, read_results, write_results
from data.dataset import (
    load_exclusion_list,
    load_sequences,
    write_manifest,
    write_sequence,
)
from data.models import Sequence
from data.synth import build_paired_dataset, generate_toy_sequence, random_toy_spec
from network.fusion import fusion_row
from network.net import MultiModalNet, read_checkpoint, transfer_pretrained
from utils.exceptions import ConfigError, MFTrackError, ProtocolError
from utils.helpers import make_rng

logger = logging.getLogger(__name__)

RUN_DIR_PATTERN = re.compile(r"run_(\d+)")


def setup_logging(verbose: bool = False):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=settings.LOG_FORMAT,
        handlers=[
            logging.FileHandler(settings.LOG_FILE),
            logging.StreamHandler()
        ]
    )


def config_epilog(*sections: str) -> str:
    # \b keeps click from re-wrapping the key listing
    return "Config keys consumed:\n\n\b\n" + describe_keys(sections)


class MFTrackGroup(click.Group):
    """Exit status 0 on success, 1 on usage or config errors, 2 on runtime failures."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            code = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
            code = code if isinstance(code, int) else 0
        except ConfigError as e:
            for error in e.errors:
                click.echo(f"Config error: {error}", err=True)
            code = 1
        except click.ClickException as e:
            e.show()
            code = 1
        except click.Abort:
            click.echo("Aborted!", err=True)
            code = 1
        except MFTrackError as e:
            logger.error(f"Command failed: {str(e)}", exc_info=True)
            click.echo(f"Error: {e}", err=True)
            code = 2
        except Exception as e:
            logger.error(f"Unexpected error: {str(e)}", exc_info=True)
            click.echo(f"Error: {e}", err=True)
            code = 2
        sys.exit(code)


@click.group(cls=MFTrackGroup)
@click.option("--config", "config_path", type=click.Path(dir_okay=False),
              help=f"INI config file (default: ${settings.CONFIG_ENV_VAR}).")
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
              help="Override a config value; repeatable.")
@click.option("--verbose", is_flag=True, help="Debug logging.")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], overrides: List[str], verbose: bool):
    """Multi-modal RGB-T tracking: data generation, training, tracking and evaluation."""
    load_dotenv()
    setup_logging(verbose)
    ctx.obj = load_config(resolve_config_path(config_path), overrides)


def _test_sequences(config: GlobalConfig) -> List[Sequence]:
    require_paths([("data.test_root", config.data.test_root), ("data.exclusion_list", config.data.exclusion_list)])
    sequences = load_sequences(config.data.test_root, load_exclusion_list(config.data.exclusion_list))
    if not sequences:
        raise ProtocolError(f"No test sequences under {config.data.test_root}")
    return sequences


def _train_sequences(config: GlobalConfig) -> List[Sequence]:
    require_paths([("data.train_root", config.data.train_root), ("data.exclusion_list", config.data.exclusion_list)])
    return load_sequences(config.data.train_root, load_exclusion_list(config.data.exclusion_list))


@cli.command(epilog=config_epilog("general", "data", "synth"))
@click.option("--toy/--paired", "toy", default=True, help="Toy RGB-T sequences, or pseudo-TIR for an RGB dataset.")
@click.option("--sequences", "count", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--seed", type=int, default=None, help="Default: general.seed.")
@click.option("--frames", type=click.IntRange(min=2), default=settings.TOY_NUM_FRAMES, show_default=True)
@click.option("--size", type=click.IntRange(min=32), default=settings.TOY_IMAGE_SIZE[0], show_default=True,
              help="Toy image side in pixels.")
@click.option("--in", "input_dir", type=click.Path(file_okay=False), default=None, help="RGB dataset root (--paired).")
@click.option("--out", "output_dir", type=click.Path(file_okay=False), default=None,
              help="Default: data.train_root.")
@click.pass_obj
def generate(config: GlobalConfig, toy: bool, count: int, seed: Optional[int], frames: int, size: int,
             input_dir: Optional[str], output_dir: Optional[str]):
    """Write a paired RGB-T dataset and its manifest."""
    seed = config.general.seed if seed is None else seed
    output_dir = Path(output_dir or config.data.train_root)
    if toy:
        for index in range(count):
            sequence_seed = int(make_rng(seed, index).integers(2 ** 31))
            spec = random_toy_spec(f"toy_{index:03d}", sequence_seed, frames, (size, size))
            write_sequence(generate_toy_sequence(spec), output_dir)
        logger.info(f"Generated {count} toy sequences in {output_dir}")
    else:
        if input_dir is None:
            raise click.UsageError("--paired needs --in")
        require_paths([("--in", input_dir), ("data.exclusion_list", config.data.exclusion_list)])
        synth = config.synth.model_copy(update={"seed": seed})
        written = build_paired_dataset(input_dir, output_dir, synth,
                                       exclude=load_exclusion_list(config.data.exclusion_list))
        logger.info(f"Built {written} paired sequences in {output_dir}")
    click.echo(write_manifest(output_dir))


@cli.command(epilog=config_epilog("general", "data", "backbone", "fusion", "predictor", "iou_head", "train"))
@click.option("--steps", type=click.IntRange(min=0), default=None, help="Default: train.total_steps.")
@click.option("--row", default=None, help="Named fusion row; default: the [fusion] section.")
@click.option("--stage", type=click.Choice(["pretrain", "finetune"]), default=None, help="Default: train.stage.")
@click.option("--pretrained", type=click.Path(), default=None, help="RGB checkpoint to initialise from.")
@click.option("--resume", type=click.Path(), default=None, help="Checkpoint to resume from.")
@click.option("--out", "output_dir", type=click.Path(file_okay=False), default=None,
              help="Default: data.checkpoint_dir.")
@click.option("--seed", type=int, default=None, help="Default: train.seed.")
@click.pass_obj
def train(config: GlobalConfig, steps: Optional[int], row: Optional[str], stage: Optional[str],
          pretrained: Optional[str], resume: Optional[str], output_dir: Optional[str], seed: Optional[int]):
    """Train a network; writes checkpoints and losses.csv."""
    require_paths([("--pretrained", pretrained and str(Path(pretrained).with_suffix(".npz"))),
                   ("--resume", resume and str(Path(resume).with_suffix(".npz")))])
    fusion = fusion_row(row) if row else config.fusion
    updates: Dict[str, object] = {}
    if stage is not None:
        updates["stage"] = stage
    if seed is not None:
        updates["seed"] = seed
    train_config = config.train.model_copy(update=updates)
    sequences = _train_sequences(config)

    net = MultiModalNet(fusion, config.backbone, config.predictor, config.iou_head)
    loaded = frozenset()
    if pretrained is not None:
        _, arrays = read_checkpoint(pretrained)
        loaded = transfer_pretrained(net, {name: torch.from_numpy(array) for name, array in arrays.items()})
    result = Trainer(net, train_config, loaded).train(
        sequences, output_dir or config.data.checkpoint_dir, total_steps=steps, resume=resume)
    click.echo(result.checkpoint)


@cli.command(epilog=config_epilog("general", "data", "tracker", "evaluation"))
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--protocol", type=click.Choice(["vot", "ope"]), default="vot", show_default=True)
@click.option("--runs", type=click.IntRange(min=1), default=None,
              help="Default: evaluation.vot_runs or evaluation.ope_runs.")
@click.option("--seed", type=int, default=None, help="Default: general.seed.")
@click.option("--jobs", type=click.IntRange(min=1), default=None, help="Default: general.jobs.")
@click.option("--out", "output_dir", type=click.Path(file_okay=False), default=None,
              help="Default: data.results_root.")
@click.pass_obj
def track(config: GlobalConfig, checkpoint: str, protocol: str, runs: Optional[int], seed: Optional[int],
          jobs: Optional[int], output_dir: Optional[str]):
    """Track the test sequences; writes <out>/<protocol>/run_<k>/<sequence>.txt."""
    require_paths([("--checkpoint", str(Path(checkpoint).with_suffix(".npz")))])
    evaluation = config.evaluation
    if runs is None:
        runs = evaluation.vot_runs if protocol == "vot" else evaluation.ope_runs
    seed = config.general.seed if seed is None else seed
    sequences = _test_sequences(config)
    factory = TrackerFactory(checkpoint, config.tracker)
    per_run = collect_trajectories(factory, sequences, protocol, runs, seed, evaluation.failure_threshold,
                                   evaluation.reinit_skip, jobs or config.general.jobs)
    root = Path(output_dir or config.data.results_root) / protocol
    for run, trajectories in enumerate(per_run):
        for name, entries in trajectories.items():
            write_results(root / f"run_{run}" / f"{name}.txt", entries)
    click.echo(root)


def _run_index(path: Path) -> Optional[int]:
    match = RUN_DIR_PATTERN.fullmatch(path.name)
    return int(match.group(1)) if match and path.is_dir() else None


def _read_runs(root: Path, sequences: List[Sequence], runs: Optional[int]) -> List[Dict[str, List[ResultEntry]]]:
    if runs is None:
        indexed = {}
        for path in root.glob("run_*"):
            index = _run_index(path)
            if index is None:
                logger.warning(f"Skipping {path}: not a run_<k> directory")
                continue
            indexed[index] = path
        run_dirs = [indexed[index] for index in sorted(indexed)]
    else:
        run_dirs = [root / f"run_{run}" for run in range(runs)]
    if not run_dirs:
        raise ProtocolError(f"No run directories under {root}")
    return [{seq.name: read_results(run_dir / f"{seq.name}.txt") for seq in sequences} for run_dir in run_dirs]


@cli.command("eval", epilog=config_epilog("general", "data", "evaluation"))
@click.option("--protocol", type=click.Choice(PROTOCOLS), default="both", show_default=True)
@click.option("--runs", type=click.IntRange(min=1), default=None, help="Default: every run_<k> directory.")
@click.option("--results", "results_dir", type=click.Path(file_okay=False), default=None,
              help="Default: data.results_root.")
@click.option("--out", "output_dir", type=click.Path(file_okay=False), default=None,
              help="Default: <results>/report.")
@click.pass_obj
def evaluate(config: GlobalConfig, protocol: str, runs: Optional[int], results_dir: Optional[str],
             output_dir: Optional[str]):
    """Recompute every metric from result files; writes report.json and curve CSVs."""
    results_dir = Path(results_dir or config.data.results_root)
    require_paths([("--results", str(results_dir))])
    sequences = _test_sequences(config)
    vot = ope = per_attribute = None
    if protocol in ("vot", "both"):
        vot = evaluate_vot(_read_runs(results_dir / "vot", sequences, runs), sequences, config.evaluation)
        click.echo(f"VOT  EAO={vot.eao:.4f}  A={vot.accuracy:.4f}  R={vot.robustness:.3f}")
    if protocol in ("ope", "both"):
        ope = evaluate_ope(_read_runs(results_dir / "ope", sequences, runs), sequences, config.evaluation)
        per_attribute = attribute_breakdown(ope.per_sequence, sequences, config=config.evaluation)
        click.echo(f"OPE  PR={ope.pr20:.4f}  SR={ope.sr_auc:.4f}")
    click.echo(write_report(output_dir or results_dir / "report", vot, ope, per_attribute))


@cli.command(epilog=config_epilog("general", "data", "backbone", "predictor", "iou_head", "train", "tracker",
                                  "evaluation"))
@click.option("--rows", default=None, help="Comma-separated row names; default: every row.")
@click.option("--protocol", type=click.Choice(PROTOCOLS), default="vot", show_default=True)
@click.option("--jobs", type=click.IntRange(min=1), default=None, help="Default: general.jobs.")
@click.option("--out", "output_dir", type=click.Path(file_okay=False), default=None,
              help="Default: <data.checkpoint_dir>/ablation.")
@click.pass_obj
def ablate(config: GlobalConfig, rows: Optional[str], protocol: str, jobs: Optional[int],
           output_dir: Optional[str]):
    """Pretrain once, then fine-tune, track and evaluate each fusion row into ablation.csv."""
    runner = AblationRunner(config.backbone, config.predictor, config.iou_head, config.train, config.tracker,
                            config.evaluation, seed=config.general.seed, workers=jobs or config.general.jobs)
    table = runner.run(parse_rows(rows), _train_sequences(config), _test_sequences(config),
                       Path(output_dir or Path(config.data.checkpoint_dir) / "ablation"), protocol)
    click.echo(table.to_string(index=False))
    failed = table.loc[table["error"] != "", "row"].tolist()
    if failed:
        raise ProtocolError(f"{len(failed)} ablation rows failed: {', '.join(failed)}")


if __name__ == "__main__":
    cli()
