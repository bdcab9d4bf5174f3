"""Ablation grids over projection branch, loss terms, window size and head count.

Every cell trains on the same corpus and is scored on the same held-out
trials. Cells whose configuration coincides (the default cell appears in all
four grids) are trained once.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Sequence

from .core import GazeError, Trial
from .evaluation import evaluate_corpus
from .training import train

if TYPE_CHECKING:
    from .config import PipelineConfig

log = logging.getLogger(__name__)

GRIDS = ("projection", "loss", "window", "heads")


@dataclass(frozen=True)
class SweepConfig:
    grids: tuple[str, ...] = GRIDS
    windows: tuple[int, ...] = (4, 8, 16)
    heads: tuple[int, ...] = (2, 4, 8, 16)
    eval_trials: int = 50
    eval_seed_offset: int = 1000

    def __post_init__(self):
        for name in ("grids", "windows", "heads"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        unknown = set(self.grids) - set(GRIDS)
        if unknown:
            raise GazeError(f"unknown sweep grid(s) {sorted(unknown)}; choose from {GRIDS}")
        if self.eval_trials < 1:
            raise GazeError("eval_trials must be >= 1")


@dataclass
class SweepRow:
    grid: str
    cell: str
    projection: str
    lambda_c: float
    lambda_v: float
    window: int
    n_heads: int
    ai: float
    ci: float
    ad_pred: float
    ad_raw: float
    best_epoch: int
    val_loss: float
    train_seconds: float


def _with(cfg: "PipelineConfig", **sections) -> "PipelineConfig":
    changes = {name: dataclasses.replace(getattr(cfg, name), **kw) for name, kw in sections.items()}
    return dataclasses.replace(cfg, **changes)


def grid_cells(grid: str, cfg: "PipelineConfig") -> list[tuple[str, "PipelineConfig"]]:
    """(label, config) pairs for one grid, all other settings taken from ``cfg``."""
    if grid == "projection":
        return [(p, _with(cfg, model={"projection": p})) for p in ("attention", "linear", "fused")]
    if grid == "loss":
        lc, lv = cfg.loss.lambda_c, cfg.loss.lambda_v
        cells = [("mse_only", 0.0, 0.0), ("+center", lc, 0.0), ("+dispersion", 0.0, lv),
                 ("full", lc, lv)]
        return [(name, _with(cfg, loss={"lambda_c": c, "lambda_v": v})) for name, c, v in cells]
    if grid == "window":
        return [(f"lw={w}", _with(cfg, train={"window": w}, eval={"window": w}))
                for w in cfg.sweep.windows]
    if grid == "heads":
        return [(f"heads={h}", _with(cfg, model={"n_heads": h})) for h in cfg.sweep.heads]
    raise GazeError(f"unknown sweep grid {grid!r}")


def _key(cfg: "PipelineConfig") -> tuple:
    return (cfg.model, cfg.train, cfg.loss, cfg.eval)


def run_sweep(train_corpus: Sequence[Trial], test_corpus: Sequence[Trial], cfg: "PipelineConfig",
              on_row: Callable[[SweepRow], None] | None = None) -> list[SweepRow]:
    if not test_corpus:
        raise GazeError("sweep needs at least one held-out trial")
    done: dict[tuple, tuple] = {}
    rows = []
    for grid in cfg.sweep.grids:
        for label, cell in grid_cells(grid, cfg):
            key = _key(cell)
            if key not in done:
                start = time.perf_counter()
                result = train(train_corpus, cell.model, cell.train, cell.loss)
                seconds = time.perf_counter() - start
                report = evaluate_corpus(result.model, test_corpus, cell.eval)
                done[key] = (result, report.aggregate(), seconds)
            result, agg, seconds = done[key]
            row = SweepRow(grid, label, cell.model.projection, cell.loss.lambda_c,
                           cell.loss.lambda_v, cell.train.window, cell.model.n_heads,
                           agg["ai"][0], agg["ci"][0], agg["ad_pred"][0], agg["ad_raw"][0],
                           result.best_epoch, result.best_val, seconds)
            log.info("%s/%s ai=%.4f", grid, label, row.ai)
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def default_within(rows: Sequence[SweepRow], default_cells: dict[str, str],
                   tolerance: float = 0.10) -> dict[str, bool]:
    """Per grid: is the default cell's AI within ``tolerance`` of the grid's best AI?"""
    out = {}
    for grid, cell in default_cells.items():
        grid_rows = [r for r in rows if r.grid == grid]
        if not grid_rows:
            continue
        best = max(r.ai for r in grid_rows)
        mine = next(r.ai for r in grid_rows if r.cell == cell)
        out[grid] = mine >= (1 - tolerance) * best
    return out


def write_csv(path: str | Path, rows: Sequence[SweepRow], include_timing: bool = False) -> None:
    names = [f.name for f in dataclasses.fields(SweepRow)]
    if not include_timing:
        names.remove("train_seconds")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in rows:
            d = dataclasses.asdict(row)
            writer.writerow([repr(d[n]) if isinstance(d[n], float) else d[n] for n in names])
