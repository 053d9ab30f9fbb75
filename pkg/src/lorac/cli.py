"""``lorac`` command line: pretrain, finetune, merge, eval, sweep, param-report, gradcheck.

Exit codes: 0 success, 1 computation failure (divergence, NaN, failed check),
2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .checkpoint import (MAGIC_FULL, file_size, load_adapter_checkpoint, load_full_checkpoint, load_pretrained_into,
                         read_container, save_adapter_checkpoint, save_full_checkpoint)
from .data import Dataset, parse_data_spec, read_dataset, source_task, target_task, write_dataset
from .errors import (ConfigError, DivergenceError, FormatError, InvalidArgumentError, LoraCError, MergeError,
                     NonFiniteError, PreconditionError, ShapeMismatchError)
from .gradcheck import (TOL, CheckResult, check_conv, check_lora_layer, check_loss, check_matmul,
                        check_network_layers, random_lora_layer)
from .merge import export_inference_model
from .model import (ModelConfig, backbone_param_count, build_backbone, build_network, count_trainable,
                    load_model_config)
from .reports import format_table, param_report, rows_to_csv
from .sweep import DEFAULT_ALPHA, DEFAULT_R, run_sweep, summarize_sweep, write_sweep
from .train import LRSchedule, TrainConfig, evaluate, finetune, pretrain, summarize

log = logging.getLogger("lorac")

FAMILY_ORDER = ("noise", "blur", "weather", "digital")


class UsageError(LoraCError):
    pass


def _int_list(text: str) -> List[int]:
    try:
        out = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _float_list(text: str) -> List[float]:
    try:
        out = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


# --------------------------------------------------------------------------
# data resolution

def _load_dir(path: Path, stage: str) -> Tuple[Dataset, Dict[str, Dataset]]:
    if stage == "source":
        return read_dataset(path / "source_train.lrcd"), {"clean": read_dataset(path / "source_eval.lrcd")}
    evals = {}
    for f in sorted(path.glob("eval_*.lrcd")):
        ds = read_dataset(f)
        evals[ds.tag or "clean"] = ds
    return read_dataset(path / "target_train.lrcd"), evals


def resolve_data(arg: str, stage: str, style_shift: bool = False) -> Tuple[Dataset, Dict[str, Dataset]]:
    """Training set plus named evaluation sets for ``stage`` ('source' or 'target').

    ``arg`` is ``synthetic:SPEC``, a directory written by ``gen-data``, or a
    single dataset file (then there are no evaluation sets).
    """
    if arg.startswith("synthetic"):
        spec = parse_data_spec(arg)
        if style_shift:
            spec = dataclasses.replace(spec, style_shift=True)
        if stage == "source":
            tr, ev = source_task(spec)
            return tr, {"clean": ev}
        return target_task(spec)
    p = Path(arg)
    if p.is_dir():
        return _load_dir(p, stage)
    return read_dataset(p), {}


def _train_config(args, **defaults) -> TrainConfig:
    kw = dict(defaults)
    for k in ("epochs", "batch_size", "lr", "weight_decay"):
        v = getattr(args, k, None)
        if v is not None:
            kw[k] = v
    kw["seed"] = args.seed
    if getattr(args, "lr_schedule", None):
        kw["lr_schedule"] = LRSchedule.parse(args.lr_schedule)
    kw["freeze_bn_stats"] = bool(getattr(args, "freeze_bn_stats", False))
    return TrainConfig(**kw)


def _base_config(base: str, override: Optional[str]) -> ModelConfig:
    header, _ = read_container(base, MAGIC_FULL)
    cfg = ModelConfig.from_dict(header["config"])
    if override:
        want = load_model_config(override)
        if dataclasses.replace(want, seed=cfg.seed).digest() != cfg.digest():
            raise ConfigError(f"architecture in {override} does not match base checkpoint {base}")
    return cfg


def metrics_row(acc: Dict[str, float]) -> dict:
    fam, clean, mean = summarize(acc)
    row = {"clean": clean}
    row.update({f: fam.get(f) for f in FAMILY_ORDER})
    row["corrupted_mean"] = mean
    return row


def format_metrics(rows: Dict[str, dict]) -> str:
    cols = ["clean", *FAMILY_ORDER, "corrupted_mean"]
    lines = [f"{'model':<12}" + "".join(f"{c:>16}" for c in cols)]
    for name, row in rows.items():
        cells = "".join(f"{'-' if row[c] is None else f'{100 * row[c]:.2f}':>16}" for c in cols)
        lines.append(f"{name:<12}{cells}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# subcommands

def cmd_param_report(args) -> int:
    cfg = load_model_config(args.model_config)
    r_list = args.r or [1]
    rows = param_report(cfg, r_list, None if args.rank_mode == "auto" else args.rank_mode)
    print(format_table(rows, per_layer=not args.totals_only))
    flagged = sorted({(row.r, row.layer) for row in rows if row.kernel_wise_inflates and row.layer != "TOTAL"})
    if flagged:
        rs = sorted({r for r, _ in flagged})
        print(f"warning: kernel-wise adapter exceeds full fine-tuning on {len(flagged)} layer(s) for r in {rs}",
              file=sys.stderr)
    if args.out:
        if args.format == "json":
            Path(args.out).write_text(json.dumps([dataclasses.asdict(r) for r in rows], indent=2) + "\n")
        else:
            Path(args.out).write_text(rows_to_csv(rows))
    return 0


def cmd_gen_data(args) -> int:
    spec = parse_data_spec(args.data, style_shift=args.style_shift or None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    src_tr, src_ev = source_task(spec)
    tgt_tr, evals = target_task(spec)
    write_dataset(src_tr, out / "source_train.lrcd")
    write_dataset(src_ev, out / "source_eval.lrcd")
    write_dataset(tgt_tr, out / "target_train.lrcd")
    for i, (tag, ds) in enumerate(evals.items()):
        write_dataset(dataclasses.replace(ds, tag=tag), out / f"eval_{i:02d}.lrcd")
    print(f"wrote {3 + len(evals)} dataset files to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_model_config(args.model_config)
    cfg = dataclasses.replace(cfg, seed=args.seed)
    train_ds, evals = resolve_data(args.data, "source")
    if train_ds.num_classes != cfg.num_classes:
        cfg = dataclasses.replace(cfg, num_classes=train_ds.num_classes)
    net = build_backbone(cfg)
    rep = pretrain(net, train_ds, evals, _train_config(args))
    n = save_full_checkpoint(net, args.out)
    fin = rep.final
    print(f"pretrained {backbone_param_count(cfg)} parameters for {len(rep.epochs)} epochs; "
          f"final loss {fin.train_loss:.4f}, train acc {fin.train_acc:.4f}")
    if fin.clean_acc is not None:
        print(f"held-out clean accuracy {fin.clean_acc:.4f}")
    print(f"wrote {n} bytes to {args.out}")
    if args.report:
        Path(args.report).write_text(rep.to_json() + "\n")
    return 0


def cmd_finetune(args) -> int:
    cfg = _base_config(args.base, args.model_config)
    r = (args.r or [1])[0]
    alpha = (args.alpha or [1.0])[0]
    train_ds, evals = resolve_data(args.data, "target", args.style_shift)
    base = load_full_checkpoint(args.base)
    baseline = metrics_row(evaluate(base, evals)) if evals else None
    mode = None if args.rank_mode == "auto" else args.rank_mode
    net = build_network(cfg, mode, alpha, r)
    load_pretrained_into(net, args.base)
    rep = finetune(net, train_ds, evals, _train_config(args))
    n = save_adapter_checkpoint(net, args.out)
    total = backbone_param_count(cfg)
    upd = count_trainable(net)
    print(f"updated parameters: {upd} of {total} ({100 * upd / total:.2f}%)")
    print(f"adapter: {n} bytes -> {args.out} ({100 * n / file_size(args.base):.2f}% of base checkpoint)")
    if evals:
        print(format_metrics({"baseline": baseline, "lora-c": metrics_row(rep.final.eval_acc)}))
    if args.report:
        d = rep.to_dict()
        d["baseline"] = baseline
        Path(args.report).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_sweep(args) -> int:
    cfg = _base_config(args.base, args.model_config)
    train_ds, evals = resolve_data(args.data, "target", args.style_shift)
    mode = None if args.rank_mode == "auto" else args.rank_mode
    tcfg = _train_config(args, epochs=6)
    cells = run_sweep(args.base, args.r or DEFAULT_R, args.alpha or DEFAULT_ALPHA, train_ds, evals, tcfg, mode)
    paths = write_sweep(cells, args.out)
    s = summarize_sweep(cells)
    print(f"{s['cells']} cells ({s['diverged']} diverged) for {cfg.digest()[:12]}")
    if s["best"]:
        b = s["best"]
        print(f"best: r={b['r']} alpha={b['alpha']} corrupted mean {100 * b['corrupted_mean']:.2f}%"
              + (" (alpha/r = 2)" if b["diagonal"] else ""))
    for r, v in s["best_alpha_per_r"].items():
        print(f"  r={r:>3}: best alpha {v['alpha']:>4} ({100 * v['corrupted_mean']:.2f}%)")
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return 0


def _load_model(path: str, adapter: Optional[str]):
    if adapter:
        net = load_full_checkpoint(path)
        if net.fused_bn:
            raise ConfigError(f"{path}: cannot apply an adapter to a BN-fused model")
        load_adapter_checkpoint(net, adapter)
        return net
    return load_full_checkpoint(path)


def cmd_merge(args) -> int:
    net = _load_model(args.base, args.adapter)
    if net.lora is None:
        raise UsageError("nothing to merge: no adapter given")
    export_inference_model(net, fuse_bn=args.fuse_bn, path=args.out)
    print(f"merged model written to {args.out} ({file_size(args.out)} bytes)")
    return 0


def cmd_eval(args) -> int:
    net = _load_model(args.model, args.adapter)
    ds, evals = resolve_data(args.data, "target", args.style_shift)
    if not evals and not args.data.startswith("synthetic") and not Path(args.data).is_dir():
        evals = {ds.tag or "clean": ds}  # a single file is the evaluation set
    if not evals:
        raise UsageError(f"{args.data}: no evaluation sets found")
    acc = evaluate(net, evals)
    row = metrics_row(acc)
    print(format_metrics({Path(args.model).stem: row}))
    if args.out:
        if args.format == "json":
            Path(args.out).write_text(json.dumps({"summary": row, "per_set": acc}, indent=2, sort_keys=True) + "\n")
        else:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["set", "accuracy"])
            for k, v in acc.items():
                w.writerow([k, repr(v)])
            Path(args.out).write_text(buf.getvalue())
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    results: List[CheckResult] = []
    for _ in range(args.instances):
        results += check_conv(rng) + check_matmul(rng) + check_loss(rng)
        layer = random_lora_layer(rng)
        x = rng.standard_normal((2, layer.spec.c_in, 5, 5))
        results += check_lora_layer(layer, x, rng)
    cfg = load_model_config(args.model_config)
    net = build_network(cfg, None if args.rank_mode == "auto" else args.rank_mode, (args.alpha or [1.0])[0],
                        (args.r or [1])[0])
    results += check_network_layers(net, args.layers, seed=args.seed)
    worst = max(results, key=lambda c: c.max_rel_error)
    bad = [c for c in results if not c.ok]
    for c in bad:
        print(f"FAIL {c.name}: max rel error {c.max_rel_error:.3e}")
    print(f"{len(results)} checks, {len(bad)} failed; max rel error {worst.max_rel_error:.3e} "
          f"({worst.name}), tolerance {TOL:g}")
    return 1 if bad else 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lorac", description="Layer-wise low-rank adaptation for conv nets.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True, rank=False, train=False, data=True):
        if model:
            sp.add_argument("--model-config", default=None, help="preset name or config file")
        if data:
            sp.add_argument("--data", default="synthetic:", help="PATH or synthetic:SPEC")
            sp.add_argument("--style-shift", action="store_true")
        if rank:
            sp.add_argument("--r", type=_int_list, default=None)
            sp.add_argument("--alpha", type=_float_list, default=None)
            sp.add_argument("--rank-mode", choices=("plain", "rk", "auto"), default="auto")
        if train:
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--batch-size", type=int)
            sp.add_argument("--lr", type=float)
            sp.add_argument("--weight-decay", type=float)
            sp.add_argument("--lr-schedule", help="constant | multistep | step:GAMMA:EVERY")
            sp.add_argument("--freeze-bn-stats", action="store_true")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("param-report", help="updated-parameter counts per layer")
    common(sp, rank=True, data=False)
    sp.add_argument("--totals-only", action="store_true")
    sp.add_argument("--out")
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.set_defaults(func=cmd_param_report, model_config="resnet18")

    sp = sub.add_parser("gen-data", help="write the synthetic scenario as dataset files")
    common(sp, model=False)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="train a full backbone on the clean source task")
    common(sp, train=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_pretrain, model_config="resnet8")

    sp = sub.add_parser("finetune", help="LoRA-C fine-tune a pretrained base")
    common(sp, rank=True, train=True)
    sp.add_argument("--base", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("sweep", help="r x alpha grid from one base")
    common(sp, rank=True, train=True)
    sp.add_argument("--base", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("merge", help="fold an adapter into its base")
    common(sp, model=False, data=False)
    sp.add_argument("--base", required=True)
    sp.add_argument("--adapter", required=True)
    sp.add_argument("--fuse-bn", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_merge)

    sp = sub.add_parser("eval", help="clean and per-family corrupted accuracy")
    common(sp, model=False)
    sp.add_argument("--model", required=True, help="full checkpoint")
    sp.add_argument("--adapter")
    sp.add_argument("--out")
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference checks of every backward pass")
    common(sp, rank=True, data=False)
    sp.add_argument("--layers", type=int, default=6, help="network layers to sample")
    sp.add_argument("--instances", type=int, default=5, help="random op instances")
    sp.set_defaults(func=cmd_gradcheck, model_config="resnet8")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (DivergenceError, NonFiniteError, PreconditionError, MergeError) as e:
        print(f"lorac {args.command}: error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, FormatError, ShapeMismatchError, InvalidArgumentError, UsageError) as e:
        print(f"lorac {args.command}: error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        msg = f"{e.filename}: {e.strerror}" if e.filename is not None else str(e)
        print(f"lorac {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
