"""
Ablation Sweeps
Module-removal and hyperparameter grids over one run config. Each cell is an
independent train + score run, so cells can fan out to worker processes.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from itertools import product
from pathlib import Path
from typing import List, Dict, Any, Optional

import pandas as pd

from core import ConfigError, ArtifactError
from evaluation import auroc, score_split
from run_config import RunConfig, materialise_split
from trainer import fit


logger = logging.getLogger('HSCLAblation')

# Setting key -> HSCLConfig switches
ABLATIONS = {
    'full': {},
    'wo_ss': {'use_ss': False},
    'wo_sp': {'use_sp': False},
    'wo_na': {'use_na': False},
    'wo_sp_pos': {'sp_positive_term': False},
    'wo_sp_neg': {'sp_negative_term': False},
}

ALIASES = {
    'w/o S-S': 'wo_ss',
    'w/o S-P': 'wo_sp',
    'w/o N-A': 'wo_na',
    'w/o S-P pos': 'wo_sp_pos',
    'w/o S-P neg': 'wo_sp_neg',
}

GRID_KEYS = ('settings', 'w_delta', 'K', 'seeds')
RESULT_COLUMNS = ['setting', 'w_delta', 'K', 'seed', 'auroc']


@dataclass(frozen=True)
class AblationCell:
    setting: str
    w_delta: float
    K: int
    seed: int


@dataclass(frozen=True)
class AblationGrid:
    settings: List[str]
    w_delta: List[float]
    K: List[int]
    seeds: List[int]

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base: RunConfig) -> 'AblationGrid':
        """Missing axes fall back to the single value of the base config"""
        if not isinstance(data, dict):
            raise ConfigError("ablation grid must be a JSON object")
        unknown = sorted(set(data) - set(GRID_KEYS))
        if unknown:
            raise ConfigError(f"unknown grid key '{unknown[0]}'")

        settings = [ALIASES.get(s, s) for s in data.get('settings', ['full'])]
        for s in settings:
            if s not in ABLATIONS:
                raise ConfigError(f"unknown ablation setting '{s}' (known: {', '.join(ABLATIONS)})")
        grid = cls(
            settings=settings,
            w_delta=[float(v) for v in data.get('w_delta', [base.hscl.w_delta])],
            K=[int(v) for v in data.get('K', [base.hscl.K])],
            seeds=[int(v) for v in data.get('seeds', [base.hscl.seed])],
        )
        if not all((grid.settings, grid.w_delta, grid.K, grid.seeds)):
            raise ConfigError("every grid axis needs at least one value")
        return grid

    def cells(self) -> List[AblationCell]:
        return [AblationCell(*values) for values in product(self.settings, self.w_delta, self.K, self.seeds)]


def load_grid(path: Path, base: RunConfig) -> AblationGrid:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"grid file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return AblationGrid.from_dict(json.load(f), base)
    except json.JSONDecodeError as e:
        raise ConfigError(f"grid {path} is not valid JSON: {e}") from e


def run_cell(config_data: Dict[str, Any], split_manifest: Optional[Dict[str, Any]],
             cell: AblationCell) -> Dict[str, Any]:
    """
    Train and score one grid cell in memory.

    Takes plain dicts so it can run in a worker process.
    """
    cfg = RunConfig.from_dict(config_data).with_overrides(w_delta=cell.w_delta, k=cell.K, seed=cell.seed)
    hscl = replace(cfg.hscl, **ABLATIONS[cell.setting])
    split, source, _ = materialise_split(cfg, split_manifest)
    state = fit(split, hscl, cfg.augmentation, cfg.encoder_for(source))
    score = auroc(score_split(state, split))
    logger.info(f"Cell {cell.setting} w_delta={cell.w_delta} K={cell.K} seed={cell.seed}: auroc={score:.4f}")
    return {'setting': cell.setting, 'w_delta': cell.w_delta, 'K': cell.K, 'seed': cell.seed, 'auroc': score}


def run_grid(cfg: RunConfig, grid: AblationGrid, split_manifest: Optional[Dict[str, Any]] = None,
             workers: int = 1) -> pd.DataFrame:
    """One row per cell, in grid order"""
    cells = grid.cells()
    config_data = cfg.to_dict()
    logger.info(f"Running {len(cells)} ablation cells with {workers} worker(s)")
    if workers <= 1:
        rows = [run_cell(config_data, split_manifest, cell) for cell in cells]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, [config_data] * len(cells), [split_manifest] * len(cells), cells))
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)
