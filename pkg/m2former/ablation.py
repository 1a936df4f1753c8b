"""
Ablation matrix: train and evaluate the complete model and variants with components removed.

Axes:

- cnndd: two-layer CNN stack instead of the full CNNDD
- m2a1: every M2A block moved after the CF layer
- m2a2: every M2A block moved before the CF layer (a linear smoothing layer follows the CF layer)
- ifsd: two clusters and no noise discarding
- mct: MCT cross-channel attention with every block before the CF layer

Axes joined with '+' (e.g. 'cnndd+mct') are applied together in one cell.
"""
import multiprocessing as mp
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union
import attr
import pandas as pd
from config import Config
from m2former.config import ExperimentConfig
from m2former.constants import ABLATION_CSV
from m2former.dataset import load_split
from m2former.evaluate import evaluate_model
from m2former.exc import ConfigError, M2FormerError
from m2former.train import train
from m2former.utils import logger

AXES = ('cnndd', 'm2a1', 'm2a2', 'ifsd', 'mct')
COMPLETE = 'complete'
ABLATION_COLUMNS = ['cell', 'token_error_rate', 'ctc_token_error_rate', 'final_loss']


def _remove_axis(cfg: ExperimentConfig, axis: str) -> ExperimentConfig:
    model = cfg.model
    if axis == 'cnndd':
        last = model.cnndd_channels[-1]
        model = attr.evolve(model, cnndd_channels=[last, last])
    elif axis == 'm2a1':
        model = attr.evolve(model, n_m1=0, n_m2=model.n_m1 + model.n_m2)
    elif axis == 'm2a2':
        model = attr.evolve(model, n_m1=model.n_m1 + model.n_m2, n_m2=0)
    elif axis == 'ifsd':
        model = attr.evolve(model, clusters=2, ifsd_enabled=False)
    elif axis == 'mct':
        model = attr.evolve(model, variant='mct', n_m1=model.n_m1 + model.n_m2, n_m2=0)
    else:
        raise ConfigError(f'Unknown ablation axis "{axis}", expected one of {AXES}')
    return attr.evolve(cfg, model=model)


def ablate_config(cfg: ExperimentConfig, cell: str) -> ExperimentConfig:
    """
    Configuration of one ablation cell.

    :param cell: 'complete' or axes joined with '+'
    :raises ConfigError: on unknown axes or an invalid resulting configuration
    """
    if cell == COMPLETE:
        return cfg
    axes = [axis.strip() for axis in cell.split('+')]
    if {'m2a1', 'm2a2'} <= set(axes):
        raise ConfigError(f'Ablation cell "{cell}" removes both M2A stages')
    for axis in axes:
        cfg = _remove_axis(cfg, axis)
    return cfg


def ablation_cells(axes: Sequence[str]) -> List[str]:
    """ The complete model followed by each requested cell, duplicates removed. """
    cells = [COMPLETE]
    for cell in axes:
        cell = cell.strip()
        if cell and cell not in cells:
            cells.append(cell)
    return cells


def run_cell(
    cfg: ExperimentConfig, cell: str, dataset_dir: Union[str, Path], out_dir: Union[str, Path]
) -> Dict[str, float]:
    """ Train one cell into out_dir/<cell> and evaluate it on the test split with the count known. """
    logger.register_stage(f'ablation cell {cell}')
    logger.info(f'Starting ablation cell "{cell}"')
    cell_cfg = ablate_config(cfg, cell)
    result = train(cell_cfg, dataset_dir, Path(out_dir) / cell)
    report = evaluate_model(result.model, load_split(Path(dataset_dir) / 'test'), known_count=True)
    final_loss = float(result.losses['loss'].iloc[-1]) if len(result.losses) else float('nan')
    logger.info(f'Finished ablation cell "{cell}": TER={report.token_error_rate:.4f}')
    logger.register_stage()
    return {
        'cell': cell,
        'token_error_rate': report.token_error_rate,
        'ctc_token_error_rate': report.ctc_token_error_rate,
        'final_loss': final_loss,
    }


def get_all_from_queue(queue) -> Tuple[List, List]:
    """
    :return: Cell names and result rows as a tuple
    """
    cells, rows = [], []
    while not queue.empty():
        cell, row = queue.get()
        cells.append(cell)
        rows.append(row)
    return cells, rows


class AblationProcess:
    """ Process that runs one ablation cell and puts (cell, row) on a queue. """

    def __init__(
        self,
        cfg: ExperimentConfig,
        cell: str,
        dataset_dir: Union[str, Path],
        out_dir: Union[str, Path],
        queue: mp.Queue,
    ):
        self.cfg = cfg
        self.cell = cell
        self.dataset_dir = str(dataset_dir)
        self.out_dir = str(out_dir)
        self.queue = queue
        self._process = mp.Process(name=f'ablation-{cell}', target=self.run)

    def __str__(self):
        return self.name

    @property
    def name(self) -> str:
        return self._process.name

    def is_alive(self) -> bool:
        return self._process.is_alive()

    def run(self) -> None:
        logger.info(f'Running ablation process "{self}"')
        try:
            row = run_cell(self.cfg, self.cell, self.dataset_dir, self.out_dir)
        except Exception as e:
            logger.exception(f'Ablation process "{self}" failed')
            row = {'cell': self.cell, 'error': f'{type(e).__name__}: {e}'}
        self.queue.put((self.cell, row))

    def start(self) -> None:
        self._process.start()

    def join(self, timeout: float = None) -> int:
        """
        Wait for the cell to finish. A process still alive after the timeout is terminated.

        :return: Process exit code
        """
        self._process.join(timeout)
        if self.is_alive():
            logger.error(f'Ablation process "{self}" did not finish, terminating')
            self._process.terminate()
            self._process.join(1)
        return self._process.exitcode


def _run_parallel(
    cfg: ExperimentConfig, cells: List[str], dataset_dir, out_dir, workers: int
) -> Dict[str, dict]:
    queue = mp.Queue()
    results = {}
    for start in range(0, len(cells), workers):
        processes = [
            AblationProcess(cfg, cell, dataset_dir, out_dir, queue)
            for cell in cells[start : start + workers]
        ]
        for process in processes:
            process.start()
        # Drain while waiting so that no child blocks on a full pipe
        while len(results) < start + len(processes):
            cell, row = queue.get()
            results[cell] = row
        for process in processes:
            process.join()
    names, rows = get_all_from_queue(queue)
    results.update(zip(names, rows))
    return results


def run_ablation(
    base_cfg: ExperimentConfig,
    axes: Sequence[str],
    dataset_dir: Union[str, Path],
    out_dir: Union[str, Path],
    workers: int = None,
) -> pd.DataFrame:
    """
    Train and evaluate the complete model and every ablation cell on the same data, and write
    the comparison table to out_dir/ablation.csv.

    :param axes: Cells to run besides the complete model
    :param workers: Concurrent cell processes (default Config.WORKERS)
    :raises M2FormerError: if a cell fails
    """
    cells = ablation_cells(axes)
    for cell in cells:
        ablate_config(base_cfg, cell)
    workers = Config.WORKERS if workers is None else workers
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if workers > 1 and len(cells) > 1:
        results = _run_parallel(base_cfg, cells, dataset_dir, out_dir, workers)
    else:
        results = {cell: run_cell(base_cfg, cell, dataset_dir, out_dir) for cell in cells}
    failed = {cell: row['error'] for cell, row in results.items() if 'error' in row}
    if failed:
        raise M2FormerError(f'Ablation cells failed: {failed}')
    table = pd.DataFrame([results[cell] for cell in cells], columns=ABLATION_COLUMNS)
    table.to_csv(out_dir / ABLATION_CSV, index=False)
    logger.info(f'Wrote ablation table with {len(table)} cells to {out_dir / ABLATION_CSV}')
    return table
