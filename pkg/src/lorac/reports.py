"""Closed-form updated-parameter tables over a model config."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import List, Sequence

from .errors import ConfigError
from .lora import (Granularity, RankMode, count_adapter, count_full, ratio_kernel_wise,
                   ratio_layer_wise)
from .model import ModelConfig, conv_specs, resolve_rank_variant

COLUMNS = ["r", "mode", "layer", "c_out", "c_in", "k", "full", "kernel_wise", "layer_wise",
           "ratio_kernel_wise", "ratio_layer_wise", "reduction_pct", "kernel_wise_inflates"]


@dataclass
class ParamRow:
    r: int
    mode: str
    layer: str
    c_out: int
    c_in: int
    k: int
    full: int
    kernel_wise: int
    layer_wise: int
    ratio_kernel_wise: float
    ratio_layer_wise: float
    reduction_pct: float
    kernel_wise_inflates: bool


def param_report(cfg: ModelConfig, r_list: Sequence[int], mode=None) -> List[ParamRow]:
    """Per-layer and total counts for each ``r``.

    The stem conv is fully trained under the LoRA-C policy, so it contributes
    its full count to both adapter columns and to the totals.
    """
    variant = resolve_rank_variant(cfg, mode)
    rows: List[ParamRow] = []
    for r in r_list:
        rm = RankMode(variant, r)
        tot = dict(full=0, kw=0, lw=0)
        for name, spec in conv_specs(cfg):
            full = count_full(spec)
            if name == "stem.conv":
                kw = lw = full
                rk = rl = 1.0
            else:
                kw = count_adapter(spec, rm, Granularity.KERNEL_WISE)
                lw = count_adapter(spec, rm, Granularity.LAYER_WISE)
                rk = float(ratio_kernel_wise(spec, rm.inner_dim(spec.k)))
                rl = float(ratio_layer_wise(spec, rm))
            tot["full"] += full
            tot["kw"] += kw
            tot["lw"] += lw
            rows.append(ParamRow(r, variant.value, name, spec.c_out, spec.c_in, spec.k, full, kw, lw, rk, rl,
                                 100.0 * (1 - lw / full), rk > 1))
        rows.append(ParamRow(r, variant.value, "TOTAL", 0, 0, 0, tot["full"], tot["kw"], tot["lw"],
                             tot["kw"] / tot["full"], tot["lw"] / tot["full"], 100.0 * (1 - tot["lw"] / tot["full"]),
                             tot["kw"] > tot["full"]))
    return rows


def totals(rows: Sequence[ParamRow]) -> List[ParamRow]:
    return [r for r in rows if r.layer == "TOTAL"]


def rows_to_csv(rows: Sequence[ParamRow]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        d = asdict(row)
        d["ratio_kernel_wise"] = repr(row.ratio_kernel_wise)
        d["ratio_layer_wise"] = repr(row.ratio_layer_wise)
        d["reduction_pct"] = repr(row.reduction_pct)
        d["kernel_wise_inflates"] = int(row.kernel_wise_inflates)
        w.writerow(d)
    return buf.getvalue()


def rows_from_csv(text: str) -> List[ParamRow]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != COLUMNS:
        raise ConfigError(f"param-report CSV header must be {COLUMNS}")
    out = []
    for i, d in enumerate(reader, 2):
        try:
            out.append(ParamRow(int(d["r"]), d["mode"], d["layer"], int(d["c_out"]), int(d["c_in"]), int(d["k"]),
                                int(d["full"]), int(d["kernel_wise"]), int(d["layer_wise"]),
                                float(d["ratio_kernel_wise"]), float(d["ratio_layer_wise"]),
                                float(d["reduction_pct"]), bool(int(d["kernel_wise_inflates"]))))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"line {i}: {e}") from None
    return out


def format_table(rows: Sequence[ParamRow], per_layer: bool = True) -> str:
    head = f"{'r':>3} {'mode':>5} {'layer':<24} {'full':>10} {'kernel':>10} {'layer':>10} {'R_kw':>7} {'R_lw':>7} {'red%':>7}"
    lines = [head, "-" * len(head)]
    for row in rows:
        if not per_layer and row.layer != "TOTAL":
            continue
        flag = " !" if row.kernel_wise_inflates else ""
        lines.append(f"{row.r:>3} {row.mode:>5} {row.layer:<24} {row.full:>10} {row.kernel_wise:>10} "
                     f"{row.layer_wise:>10} {row.ratio_kernel_wise:>7.3f} {row.ratio_layer_wise:>7.3f} "
                     f"{row.reduction_pct:>7.2f}{flag}")
    return "\n".join(lines)
