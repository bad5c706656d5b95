"""8-configuration ablation grid over the three component toggles.

Row order follows the fixed grid below (iv_learning, semantic_fusion,
valid_iv_constraints); each cell averages the out-of-distribution mean
AUC over the seed set.  A failed run marks its cell without aborting
the rest of the grid.
"""

from __future__ import annotations

import copy
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig, config_from_text, config_to_text
from .data import LoadedSplit, load_split
from .metrics import evaluate
from .training import train

log = logging.getLogger(__name__)

# (iv_learning, semantic_fusion, valid_iv_constraints) for models 1..8
TOGGLE_GRID: tuple[tuple[bool, bool, bool], ...] = (
    (False, False, False),
    (False, True, False),
    (True, False, False),
    (True, True, False),
    (False, False, True),
    (False, True, True),
    (True, False, True),
    (True, True, True),
)


@dataclass
class RunResult:
    model_index: int  # 1-based, matching TOGGLE_GRID order
    seed: int
    ood_per_class: list[float | None]
    ood_mean: float
    id_mean: float
    checkpoint: str | None


@dataclass
class AblateRow:
    model_index: int
    toggles: tuple[bool, bool, bool]
    runs: list[RunResult]

    @property
    def mean_ood_auc(self) -> float:
        vals = [r.ood_mean for r in self.runs if np.isfinite(r.ood_mean)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def std_ood_auc(self) -> float:
        vals = [r.ood_mean for r in self.runs if np.isfinite(r.ood_mean)]
        return float(np.std(vals)) if vals else float("nan")


def _cell_config(base: TrainConfig, toggles: tuple[bool, bool, bool], seed: int) -> TrainConfig:
    cfg = copy.deepcopy(base)
    cfg.toggles.iv_learning = toggles[0]
    cfg.toggles.semantic_fusion = toggles[1]
    cfg.toggles.valid_iv_constraints = toggles[2]
    cfg.train.seed = seed
    return cfg


def run_cell(
    cfg: TrainConfig,
    train_split: LoadedSplit,
    test_split: LoadedSplit,
    model_index: int,
    seed: int,
    ckpt_dir: str | Path | None = None,
) -> RunResult:
    out_dir = None
    if ckpt_dir is not None:
        out_dir = Path(ckpt_dir) / f"model{model_index}_seed{seed}"
    model, _ = train(cfg, train_split, test_split=None, out_dir=out_dir)
    ood = evaluate(model, test_split, "test")
    ind = evaluate(model, train_split, "train")
    return RunResult(
        model_index=model_index,
        seed=seed,
        ood_per_class=ood.per_class,
        ood_mean=ood.mean_auc,
        id_mean=ind.mean_auc,
        checkpoint=str(out_dir / "checkpoint.bin") if out_dir else None,
    )


def _run_cell_job(args: tuple) -> tuple[int, int, RunResult | None, str]:
    cfg_text, train_dir, test_dir, policy, model_index, seed, ckpt_dir = args
    try:
        cfg = config_from_text(cfg_text)
        train_split = load_split(Path(train_dir) / "manifest.txt", policy)
        test_split = load_split(Path(test_dir) / "manifest.txt", policy)
        result = run_cell(cfg, train_split, test_split, model_index, seed, ckpt_dir)
        return model_index, seed, result, ""
    except Exception as exc:  # cell failure must not abort the grid
        return model_index, seed, None, f"{type(exc).__name__}: {exc}"


def ablate(
    base: TrainConfig,
    train_dir: str | Path,
    test_dir: str | Path,
    seeds: list[int] | None = None,
    workers: int | None = None,
    out_dir: str | Path | None = None,
) -> list[AblateRow]:
    """Train all 8 toggle combinations on the same seed set.

    Data is passed as generated-dataset directories so worker processes
    can load it independently.
    """
    if seeds is None:
        seeds = list(range(base.ablate.seeds))
    if workers is None:
        workers = base.ablate.workers
    ckpt_dir = Path(out_dir) if out_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    for model_index, toggles in enumerate(TOGGLE_GRID, start=1):
        for seed in seeds:
            cfg = _cell_config(base, toggles, seed)
            jobs.append(
                (
                    config_to_text(cfg),
                    str(train_dir),
                    str(test_dir),
                    base.data.policy,
                    model_index,
                    seed,
                    str(ckpt_dir) if ckpt_dir else None,
                )
            )

    results: dict[tuple[int, int], RunResult | None] = {}
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for model_index, seed, result, err in pool.map(_run_cell_job, jobs):
                if err:
                    log.error("ablation cell model=%d seed=%d failed: %s", model_index, seed, err)
                results[(model_index, seed)] = result
    else:
        for job in jobs:
            model_index, seed, result, err = _run_cell_job(job)
            if err:
                log.error("ablation cell model=%d seed=%d failed: %s", model_index, seed, err)
            results[(model_index, seed)] = result

    rows = []
    for model_index, toggles in enumerate(TOGGLE_GRID, start=1):
        runs = [
            results[(model_index, seed)]
            for seed in seeds
            if results.get((model_index, seed)) is not None
        ]
        rows.append(AblateRow(model_index, toggles, runs))
    if ckpt_dir is not None:
        (ckpt_dir / "ablation.csv").write_text(ablation_csv(rows), encoding="utf-8")
    return rows


def ablation_csv(rows: list[AblateRow]) -> str:
    def flag(b: bool) -> str:
        return "+" if b else "-"

    lines = ["model,iv_learning,semantic_fusion,constraints,mean_ood_auc,std"]
    for row in rows:
        iv, fuse, cons = row.toggles
        lines.append(
            f"{row.model_index},{flag(iv)},{flag(fuse)},{flag(cons)},"
            f"{row.mean_ood_auc:.6f},{row.std_ood_auc:.6f}"
        )
    return "\n".join(lines) + "\n"
