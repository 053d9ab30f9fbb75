"""r x alpha grid over one fixed pretrained base."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .checkpoint import MAGIC_FULL, load_pretrained_into, read_container
from .data import Dataset
from .errors import ConfigError, DivergenceError
from .model import ModelConfig, build_network, count_trainable
from .train import TrainConfig, finetune

DEFAULT_R = (1, 2, 4, 8, 16, 32, 64)
DEFAULT_ALPHA = (1, 2, 4, 8, 16, 32, 64, 128)
FAMILY_COLUMNS = ("noise", "blur", "weather", "digital")


@dataclass
class SweepCell:
    r: int
    alpha: int
    alpha_over_r: float
    diagonal: bool          # alpha / r == 2
    status: str             # ok | diverged
    updated_params: int
    train_loss: float
    loss_head: float        # median train loss over the first 3 epochs
    loss_tail: float        # ... and over the last 3
    clean_acc: float
    noise: float
    blur: float
    weather: float
    digital: float
    corrupted_mean: float


SWEEP_COLUMNS = [f.name for f in fields(SweepCell)]


def is_diagonal(r: int, alpha: int) -> bool:
    return alpha == 2 * r


def _nan() -> float:
    return float("nan")


def run_cell(base_path: str, r: int, alpha: int, mode, train: Dataset, evals: Mapping[str, Dataset],
             tcfg: TrainConfig) -> SweepCell:
    header, _ = read_container(base_path, MAGIC_FULL)
    cfg = ModelConfig.from_dict(header["config"])
    net = build_network(cfg, mode, alpha, r)
    load_pretrained_into(net, base_path)
    updated = count_trainable(net)
    try:
        rep = finetune(net, train, evals, tcfg)
    except DivergenceError:
        return SweepCell(r, alpha, alpha / r, is_diagonal(r, alpha), "diverged", updated,
                         *([_nan()] * 9))
    fin = rep.final
    fam = fin.family_acc
    get = lambda v: _nan() if v is None else float(v)
    losses = rep.train_losses
    return SweepCell(r, alpha, alpha / r, is_diagonal(r, alpha), "ok", updated, fin.train_loss,
                     float(np.median(losses[:3])), float(np.median(losses[-3:])),
                     get(fin.clean_acc), *(get(fam.get(f)) for f in FAMILY_COLUMNS), get(fin.corrupted_mean))


def worker_count(requested: Optional[int] = None) -> int:
    cap = os.environ.get("LORAC_THREADS")
    n = requested if requested is not None else (int(cap) if cap else 1)
    if cap:
        n = min(n, int(cap))
    return max(1, n)


def run_sweep(base_path, r_set: Sequence[int], alpha_set: Sequence[int], train: Dataset,
              evals: Mapping[str, Dataset], tcfg: TrainConfig, mode=None,
              workers: Optional[int] = None) -> List[SweepCell]:
    """Fine-tune every (r, alpha) cell from the same base; results come back in grid order."""
    if not r_set or not alpha_set:
        raise ConfigError("sweep needs non-empty r and alpha sets")
    grid = [(int(r), int(a)) for r in r_set for a in alpha_set]
    n = worker_count(workers)
    if n == 1:
        return [run_cell(str(base_path), r, a, mode, train, evals, tcfg) for r, a in grid]
    with ProcessPoolExecutor(max_workers=n) as pool:
        futs = [pool.submit(run_cell, str(base_path), r, a, mode, train, evals, tcfg) for r, a in grid]
        return [f.result() for f in futs]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def cells_to_csv(cells: Sequence[SweepCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for c in cells:
        w.writerow([_fmt(getattr(c, k)) for k in SWEEP_COLUMNS])
    return buf.getvalue()


def cells_from_csv(text: str) -> List[SweepCell]:
    """Parse and validate a grid CSV; raises ConfigError on any schema violation."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != SWEEP_COLUMNS:
        raise ConfigError(f"sweep CSV header must be {SWEEP_COLUMNS}")
    out = []
    for i, row in enumerate(rows[1:], 2):
        if len(row) != len(SWEEP_COLUMNS):
            raise ConfigError(f"line {i}: expected {len(SWEEP_COLUMNS)} fields, got {len(row)}")
        d = dict(zip(SWEEP_COLUMNS, row))
        try:
            fl = lambda k: float(d[k]) if d[k] != "" else _nan()
            cell = SweepCell(int(d["r"]), int(d["alpha"]), float(d["alpha_over_r"]), bool(int(d["diagonal"])),
                             d["status"], int(d["updated_params"]), fl("train_loss"), fl("loss_head"), fl("loss_tail"),
                             fl("clean_acc"),
                             fl("noise"), fl("blur"), fl("weather"), fl("digital"), fl("corrupted_mean"))
        except ValueError as e:
            raise ConfigError(f"line {i}: {e}") from None
        if cell.status not in ("ok", "diverged"):
            raise ConfigError(f"line {i}: unknown status {cell.status!r}")
        if cell.diagonal != is_diagonal(cell.r, cell.alpha):
            raise ConfigError(f"line {i}: diagonal flag disagrees with alpha/r")
        for k in ("clean_acc",) + FAMILY_COLUMNS + ("corrupted_mean",):
            v = getattr(cell, k)
            if not math.isnan(v) and not 0 <= v <= 1:
                raise ConfigError(f"line {i}: {k}={v} outside [0, 1]")
        out.append(cell)
    return out


def summarize_sweep(cells: Sequence[SweepCell]) -> dict:
    """Best cell overall and best alpha for each r, ranked by corrupted-family mean."""
    ok = [c for c in cells if c.status == "ok" and not math.isnan(c.corrupted_mean)]
    key = lambda c: c.corrupted_mean
    best = max(ok, key=key) if ok else None  # max keeps the first of equal scores
    per_r: Dict[str, dict] = {}
    for r in sorted({c.r for c in cells}):
        row = [c for c in ok if c.r == r]
        if row:
            b = max(row, key=key)
            per_r[str(r)] = {"alpha": b.alpha, "corrupted_mean": b.corrupted_mean, "diagonal": b.diagonal}
    diag = [c for c in ok if c.diagonal]
    return {
        "cells": len(cells),
        "diverged": sum(c.status != "ok" for c in cells),
        "best": None if best is None else {"r": best.r, "alpha": best.alpha, "corrupted_mean": best.corrupted_mean,
                                           "diagonal": best.diagonal},
        "best_alpha_per_r": per_r,
        "diagonal_cells": [[c.r, c.alpha] for c in cells if c.diagonal],
        "diagonal_mean": sum(c.corrupted_mean for c in diag) / len(diag) if diag else None,
    }


def plot_rows(cells: Sequence[SweepCell]) -> str:
    """Long-format series: accuracy vs alpha at fixed r, and vs r at fixed alpha."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "fixed", "x", "corrupted_mean", "clean_acc"])
    for c in cells:
        w.writerow(["alpha_at_fixed_r", c.r, c.alpha, _fmt(c.corrupted_mean), _fmt(c.clean_acc)])
    for c in sorted(cells, key=lambda c: (c.alpha, c.r)):
        w.writerow(["r_at_fixed_alpha", c.alpha, c.r, _fmt(c.corrupted_mean), _fmt(c.clean_acc)])
    return buf.getvalue()


def write_sweep(cells: Sequence[SweepCell], out_dir) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"grid": out / "grid.csv", "plot": out / "plot.csv", "summary": out / "summary.json"}
    paths["grid"].write_text(cells_to_csv(cells))
    paths["plot"].write_text(plot_rows(cells))
    paths["summary"].write_text(json.dumps(summarize_sweep(cells), indent=2, sort_keys=True) + "\n")
    return paths
