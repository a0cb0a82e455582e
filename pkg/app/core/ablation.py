"""
Ablation sweep over the four method rows (baseline, +AM, +DC, +LS)
"""
import csv
import logging
import os
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.core.data import PairedSample, select_fraction
from app.core.metrics import ProbeClassifier
from app.core.models import ABLATION_METHODS, AblationRow, TrainConfig
from app.core.networks import CrossViewModel
from app.core.trainer import evaluate, train


logger = logging.getLogger(__name__)

ABLATION_COLUMNS = ["seed", "baseline", "method", "psnr", "ssim"]
DEFAULT_FRACTION = 1.0 / 3.0


def parameter_deltas(config: TrainConfig) -> Dict[str, int]:
    """Parameter count added by each row over the previous one"""
    counts = {
        ablation: CrossViewModel(TrainConfig(**{**config.model_dump(), "ablation": ablation})).parameter_counts()["total"]
        for ablation in ABLATION_METHODS
    }
    keys = list(counts)
    return {later: counts[later] - counts[earlier] for earlier, later in zip(keys, keys[1:])}


def mean_rows(rows: Sequence[AblationRow]) -> List[AblationRow]:
    means = []
    for baseline, method in ABLATION_METHODS.items():
        chosen = [r for r in rows if r.baseline == baseline]
        if chosen:
            means.append(AblationRow(
                seed="mean",
                baseline=baseline,
                method=method,
                psnr=float(np.mean([r.psnr for r in chosen])),
                ssim=float(np.mean([r.ssim for r in chosen])),
            ))
    return means


def run_ablation(
    config: TrainConfig,
    dataset: Sequence[PairedSample],
    eval_dataset: Sequence[PairedSample],
    seeds: int = 1,
    fraction: float = DEFAULT_FRACTION,
    output_dir: Optional[str] = None,
    probe: Optional[ProbeClassifier] = None,
) -> List[AblationRow]:
    """
    Train rows A-D under the same seed and iteration cap on a fixed subset of
    `dataset`, score each on `eval_dataset`; returns per-seed rows followed by
    the mean rows.
    """
    out = output_dir or config.output_dir
    subset = select_fraction(list(dataset), fraction, seed=config.seed)
    logger.info(f"Ablation on {len(subset)} of {len(dataset)} samples, {seeds} seed(s)")

    rows: List[AblationRow] = []
    for offset in range(seeds):
        seed = config.seed + offset
        for ablation, method in ABLATION_METHODS.items():
            run_config = TrainConfig(**{**config.model_dump(), "ablation": ablation, "seed": seed})
            result = train(run_config, subset, os.path.join(out, f"seed_{seed}", ablation))
            final = evaluate(result.model, eval_dataset, probe or result.probe)[0]
            rows.append(AblationRow(seed=str(seed), baseline=ablation, method=method, psnr=final.psnr, ssim=final.ssim))
            logger.info(f"seed {seed} {method}: psnr={final.psnr:.4f} ssim={final.ssim:.4f}")
    return rows + mean_rows(rows)


def write_ablation_rows(path: str, rows: Sequence[AblationRow]) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(ABLATION_COLUMNS)
        for row in rows:
            data = row.model_dump()
            writer.writerow([format(data[c], ".12g") if isinstance(data[c], float) else data[c] for c in ABLATION_COLUMNS])
