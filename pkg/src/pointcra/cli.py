"""``pointcra`` command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.  Errors go
to stderr as one line starting with ``error:``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import platform
import sys

import numpy as np

from . import __version__, _kernels
from . import gradcheck as G
from .config import ConfigError, build, load_config
from .diffnet.checkpoint import load_module, save_module, write_tensors
from .synthlab import analysis as A
from .synthlab.train import (
    METRIC_HEADER,
    STEP_HEADER,
    DivergenceError,
    build_model,
    evaluate,
    make_datasets,
    train,
    write_csv,
)

COMMANDS = ("train", "eval", "gradcheck", "stats", "ablate", "sweep-g")
GRADCHECK_HEADER = ["suite", "instances", "max_rel_error", "redraws", "passed"]
EVAL_HEADER = ["split", "oa", "macc", "miou"]


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser():
    p = _Parser(prog="pointcra", description="Channel-calibrated point aggregation toolkit.")
    p.add_argument("--version", action="version", version=f"pointcra {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", help="JSON config file (a previous run.json replays that run)")
        c.add_argument("--seed", type=int)
        c.add_argument("--out", help="output directory (default: out/<command>)")
        c.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override")
        if name == "gradcheck":
            c.add_argument("--all", action="store_true", help="run every registered suite")
            c.add_argument("--suite", action="append", default=[], help="suite name (repeatable)")
        if name == "eval":
            c.add_argument("--checkpoint", required=True, help="model file written by train")
        if name == "ablate":
            c.add_argument("--variants", help="comma list, e.g. baseline,A,B,C,D or pc-only,pc-pd,pc-pd-cal")
            c.add_argument("--seeds", help="comma list or inclusive range a..b")
        if name == "sweep-g":
            c.add_argument("--groups", help="comma list of group sizes")
    return p


def parse_seeds(text):
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        try:
            lo, hi = int(lo), int(hi)
        except ValueError:
            raise ConfigError(f"bad seed range {text!r}") from None
        if hi < lo:
            raise ConfigError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad seed list {text!r}") from None


def _command_overrides(args):
    """Command-specific flags become config overrides so run.json replays them."""
    out = []
    if args.command == "gradcheck" and args.suite and not args.all:
        out.append("gradcheck.suites=" + json.dumps(args.suite))
    if args.command == "ablate":
        if args.variants:
            out.append("ablate.variants=" + json.dumps([v.strip() for v in args.variants.split(",") if v.strip()]))
        if args.seeds:
            out.append("ablate.seeds=" + json.dumps(parse_seeds(args.seeds)))
    if args.command == "sweep-g" and args.groups:
        try:
            groups = [int(g) for g in args.groups.split(",") if g.strip()]
        except ValueError:
            raise ConfigError(f"bad group list {args.groups!r}") from None
        out.append("sweep.group_sizes=" + json.dumps(groups))
    return out


def apply_threads():
    """``CRA_THREADS`` caps BLAS and scene-generation threads; 0 or unset
    means all cores.  The numba kernels are serial."""
    raw = os.environ.get("CRA_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CRA_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("CRA_THREADS must be >= 0")
    n = n or (os.cpu_count() or 1)
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    except ImportError:  # BLAS keeps its own default
        pass
    return n


_THREADS = {"n": 1}


def _build(cfg):
    """Typed configs with the data workers capped by CRA_THREADS; worker
    count never changes outputs, so it stays out of run.json."""
    data, model_cfg, cra, tc = build(cfg)
    n = _THREADS["n"]
    workers = n if data.workers == 0 else min(data.workers, n)
    return dataclasses.replace(data, workers=workers), model_cfg, cra, tc


def versions():
    out = {"pointcra": __version__, "python": platform.python_version(), "numpy": np.__version__}
    try:
        import numba

        out["numba"] = numba.__version__
    except ImportError:
        out["numba"] = None
    out["kernels"] = "numba" if _kernels.USE_NUMBA else "numpy"
    return out


def _write_run_json(out, command, cfg, extra=None):
    doc = {"command": command, "seed": cfg["seed"], "config": cfg, "versions": versions()}
    if extra:
        doc.update(extra)
    with open(os.path.join(out, "run.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _say(msg):
    print(msg, flush=True)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_train(cfg, out, args):
    data, model_cfg, cra, tc = _build(cfg)
    tr, va = make_datasets(data, model_cfg.task, tc.seed)
    log = lambda epoch, rows: _say(
        " ".join(f"{r[1]} oa={r[2]:.4f} miou={r[4]:.4f} loss={r[8]:.4f}" for r in rows) + f" [epoch {epoch}]"
    )
    res = train(model_cfg, cra, tc, tr, va, log=log)
    write_csv(os.path.join(out, "metrics.csv"), METRIC_HEADER, res.metric_rows)
    write_csv(os.path.join(out, "steps.csv"), STEP_HEADER, res.step_rows)
    save_module(os.path.join(out, "model.bin"), res.model, {"epochs_run": res.epochs_run})
    _say(f"trained {res.epochs_run} epochs; outputs in {out}")


def cmd_eval(cfg, out, args):
    data, model_cfg, cra, tc = _build(cfg)
    model = build_model(model_cfg, cra, tc)
    try:
        load_module(args.checkpoint, model)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {args.checkpoint}") from None
    tr, va = make_datasets(data, model_cfg.task, tc.seed)
    rows = []
    for split, ds in (("train", tr), ("val", va)):
        if ds is not None:
            sc = evaluate(model, ds, tc=tc)
            rows.append([split, sc.oa, sc.macc, sc.miou])
            _say(f"{split}: oa={sc.oa:.4f} macc={sc.macc:.4f} miou={sc.miou:.4f}")
    write_csv(os.path.join(out, "eval.csv"), EVAL_HEADER, rows)


def cmd_gradcheck(cfg, out, args):
    names = cfg["gradcheck"]["suites"] or list(G.SUITES)
    unknown = [n for n in names if n not in G.SUITES]
    if unknown:
        raise ConfigError(f"unknown gradient suite(s): {', '.join(unknown)}")
    rows, failed = [], []
    for name in names:
        r = G.run_suite(name, cfg["gradcheck"]["instances"], cfg["seed"])
        rows.append([name, r.instances, r.max_rel_error, r.redraws, int(r.passed)])
        _say(f"{'PASS' if r.passed else 'FAIL'} {name}: max rel err {r.max_rel_error:.2e} "
             f"over {r.instances} instances ({r.seconds:.2f}s)")
        if not r.passed:
            failed.append(name)
    write_csv(os.path.join(out, "gradcheck.csv"), GRADCHECK_HEADER, rows)
    if failed:
        raise RuntimeError(f"gradient check failed: {', '.join(failed)}")


def _stats_run(cfg, out, lambda2, suffix):
    data, model_cfg, cra, tc = _build(cfg)
    tc = dataclasses.replace(tc, lambda2=lambda2)
    tr, va = make_datasets(data, model_cfg.task, tc.seed)
    res = train(model_cfg, cra, tc, tr, va)
    stats, arrays = A.collect_stats(res.model, tr, keep=True)
    write_csv(os.path.join(out, f"calib_stats{suffix}.csv"), A.STATS_HEADER, stats.rows())
    write_csv(os.path.join(out, f"metrics{suffix}.csv"), METRIC_HEADER, res.metric_rows)
    flat = {f"stage{s}/{k}": v for s, d in enumerate(arrays) for k, v in d.items()}
    write_tensors(os.path.join(out, f"intermediates{suffix}.bin"), flat, {"lambda2": lambda2})
    return stats


def cmd_stats(cfg, out, args):
    if cfg["train"]["stage"] == "baseline":
        raise ConfigError("stats needs a model with CRA blocks; stage 'baseline' has none")
    lam2 = cfg["train"]["lambda2"]
    stats = _stats_run(cfg, out, lam2, "")
    for s, st in enumerate(stats.stages):
        _say(f"stage {s}: pd std {st.pd_pre.std:.4f} -> {st.pd_post.std:.4f}; "
             f"pc std {st.pc_pre.std:.4f} -> {st.pc_post.std:.4f}; mean |cos| {st.w_cos.mean:.4f}")
    if cfg["stats"]["compare_lambda2"] and lam2 > 0:
        ref = _stats_run(cfg, out, 0.0, "_lambda2_0")
        for s, (a, b) in enumerate(zip(stats.stages, ref.stages)):
            _say(f"stage {s}: mean |cos| with lambda2={lam2}: {a.w_cos.mean:.4f}, with 0: {b.w_cos.mean:.4f}")


def cmd_ablate(cfg, out, args):
    data, model_cfg, cra, tc = _build(cfg)
    variants, seeds = cfg["ablate"]["variants"], cfg["ablate"]["seeds"]
    if not variants or not seeds:
        raise ConfigError("ablation needs at least one variant and one seed")
    log = lambda row: _say(f"{row[0]} seed {row[1]}: oa={row[2]:.4f} macc={row[3]:.4f} miou={row[4]:.4f}")
    rows = A.ablate(data, model_cfg, cra, tc, variants, seeds, log=log)
    write_csv(os.path.join(out, "ablation.csv"), A.ABLATION_HEADER, rows)
    summary = A.summarize(rows)
    write_csv(os.path.join(out, "ablation_summary.csv"), A.SUMMARY_HEADER, summary)
    for r in summary:
        _say(f"{r[0]}: miou {r[6]:.4f} +- {r[7]:.4f} over {r[1]} seeds")


def cmd_sweep(cfg, out, args):
    data, model_cfg, cra, tc = _build(cfg)
    groups = cfg["sweep"]["group_sizes"]
    log = lambda row: _say(f"G={row[0]}: cra params {row[1]}, total {row[2]}, miou {row[5]:.4f}")
    rows = A.group_size_sweep(groups, data, model_cfg, cra, tc, cfg["sweep"]["train"], log=log)
    write_csv(os.path.join(out, "sweep_g.csv"), A.SWEEP_HEADER, rows)


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "stats": cmd_stats,
    "ablate": cmd_ablate,
    "sweep-g": cmd_sweep,
}


def main(argv=None):
    try:
        args = _parser().parse_args(argv)
        _THREADS["n"] = apply_threads()
        overrides = list(args.set) + _command_overrides(args)
        cfg = load_config(args.config, overrides, args.seed)
        out = args.out or os.path.join("out", args.command)
        os.makedirs(out, exist_ok=True)
        extra = {"checkpoint": os.path.abspath(args.checkpoint)} if args.command == "eval" else None
        _write_run_json(out, args.command, cfg, extra)
        HANDLERS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"error: divergence: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
