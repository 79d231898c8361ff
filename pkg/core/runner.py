# core/runner.py
import asyncio
import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Dict, List, Sequence, Tuple

from tqdm import tqdm

from core.tracker import ResultEntry, track_job
from data.models import Sequence as TrackSequence
from utils.exceptions import ProtocolError
from utils.helpers import make_rng

logger = logging.getLogger(__name__)


async def _gather(fn: Callable, jobs: Sequence[Tuple], workers: int) -> List[Any]:
    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [loop.run_in_executor(pool, fn, *args) for args in jobs]
        return await asyncio.gather(*futures)


def run_jobs(fn: Callable, jobs: Sequence[Tuple], workers: int = 1, desc: str = "jobs") -> List[Any]:
    """Results of fn(*args) for every job, in job order. workers == 1 runs inline."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*args) for args in tqdm(jobs, desc=desc, disable=None)]
    logger.info(f"Running {len(jobs)} {desc} on {workers} worker processes")
    return asyncio.run(_gather(fn, jobs, workers))


def run_seed(seed: int, run: int, name: str) -> int:
    return int(make_rng(seed, run, name).integers(2 ** 31))


def collect_trajectories(factory, sequences: List[TrackSequence], protocol: str, runs: int, seed: int,
                         failure_threshold: float, reinit_skip: int,
                         workers: int = 1) -> List[Dict[str, List[ResultEntry]]]:
    """Track every (run, sequence) pair; returns one {sequence name: entries} map per run."""
    if not sequences:
        raise ProtocolError("No sequences to track")
    jobs = [(factory, sequence, protocol, run_seed(seed, run, sequence.name), failure_threshold, reinit_skip)
            for run in range(runs) for sequence in sequences]
    results = run_jobs(track_job, jobs, workers, desc=f"track[{protocol}]")
    per_run: List[Dict[str, List[ResultEntry]]] = [{} for _ in range(runs)]
    for index, entries in enumerate(results):
        run, sequence = divmod(index, len(sequences))
        per_run[run][sequences[sequence].name] = entries
    return per_run
