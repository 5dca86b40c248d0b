"""Command-line entry point: ``prune-forge <command> [options]``.

Commands
    schedule   print the sparsity grid of a pruning schedule
    train      train one model from a config file
    compress   encode a checkpoint's masked weights into a sparse model file
    infer      run a sparse model file on an input file, dense vs sparse path
    compare    multi-seed sweep of dense and pruned variants
    footprint  storage accounting for given parameter counts or a checkpoint

Exit codes: 0 ok, 2 configuration error, 3 training diverged, 4 I/O error.
``PRUNE_FORGE_THREADS`` overrides ``--threads``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import plotting
from .config import config_to_text, load_config, parse_config, run_id
from .errors import ConfigError, DivergenceError, ParameterError
from .models import LM_PRESETS, CharCorpus, MlpConfig, ModelSpec
from .pruning import PruningSchedule, Scheme, sparsity_at, target_zero_count
from .sparse_format import MB, footprint
from .sparse_model import (
    FORMATS,
    SparseModel,
    compress_tensors,
    lstm_logits,
    mlp_logits,
    probabilities,
    representation_sizes,
    summarize,
)
from .tensor import SeededRng
from .train import TRACE_COLUMNS, Checkpoint, run_training

log = logging.getLogger("prune_forge")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


# --- small helpers -------------------------------------------------------


def resolve_threads(flag):
    env = os.environ.get("PRUNE_FORGE_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError(f"PRUNE_FORGE_THREADS must be an integer, got {env!r}") from exc
    else:
        n = flag if flag is not None else 1
    if n < 1:
        raise ConfigError(f"thread count must be positive, got {n}")
    return n


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "N/A"
    return str(v)


def csv_text(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r[c]) for c in columns])
    return buf.getvalue()


def write_csv(path, rows, columns):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(rows, columns))
    return path


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args, default):
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _experiment(args):
    if not args.config:
        raise ConfigError("--config is required for this command")
    exp = load_config(args.config)
    if args.seed is not None:
        exp = replace(exp, train=replace(exp.train, seed=args.seed))
        if exp.sweep is not None:
            exp = replace(exp, sweep=replace(exp.sweep, seeds=(args.seed,)))
    return exp


def _resolved(train_cfg):
    """Pin the LM vocabulary so a saved config rebuilds without the corpus."""
    spec = train_cfg.model
    if spec.kind == "lstm" and not spec.lm.vocab_size:
        spec = replace(spec, lm=spec.resolved_lm())
        train_cfg = replace(train_cfg, model=spec)
    return train_cfg


# --- schedule ------------------------------------------------------------


def cmd_schedule(args):
    if args.config:
        sched = load_config(args.config).train.pruning
        if sched is None:
            raise ConfigError(f"{args.config} has no [pruning] section")
    else:
        sched = PruningSchedule(args.s_i, args.s_f, args.t0, args.n, args.delta_t)
    rows = [{"step": t, "sparsity": sparsity_at(sched, t)} for t in sched.grid()]
    text = csv_text(rows, ["step", "sparsity"])
    sys.stdout.write(text)
    if args.out:
        out = _out_dir(args, ".")
        (out / "schedule.csv").write_text(text)
        plotting.plot_schedule(rows, out / "schedule.png")
    return EXIT_OK


# --- train ---------------------------------------------------------------


def train_and_save(train_cfg, out, resume=None):
    train_cfg = _resolved(train_cfg)
    extra = {"config": config_to_text(train_cfg), "run_id": run_id(train_cfg)}
    result = run_training(train_cfg, resume=resume, manifest_extra=extra)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "metrics.csv", result.trace, TRACE_COLUMNS)
    (out / "config.ini").write_text(config_to_text(train_cfg))
    result.checkpoint.save(out / "checkpoint.spz")
    plotting.plot_trace(result.trace, out / "trace.png", result.final["metric"])
    return result


def cmd_train(args):
    exp = _experiment(args)
    out = _out_dir(args, exp.out)
    resume = Checkpoint.load(args.resume) if args.resume else None
    result = train_and_save(exp.train, out, resume)
    f = result.final
    print(f"{f['metric']}={f['value']:.6g} nnz={f['nnz_params']}/{f['total_params']} -> {out}")
    return EXIT_OK


# --- compress / footprint ------------------------------------------------


def _compress_checkpoint(path, fmt, count_bits):
    ckpt = Checkpoint.load(path)
    model, reports = compress_tensors(ckpt.tensors, ckpt.masks, fmt, count_bits)
    summary = summarize(reports, count_bits)
    model.meta = {
        "config": ckpt.manifest.get("config"),
        "run_id": ckpt.manifest.get("run_id"),
        "checkpoint_step": ckpt.step,
        "format": fmt,
        "count_bits": count_bits,
        "footprint": summary,
    }
    return model, reports, summary


TENSOR_COLUMNS = [
    "name",
    "format",
    "total_params",
    "nnz",
    "padding_entries",
    "dense_bytes",
    "payload_bytes",
    "bitmask_overhead_bytes",
    "csrc_overhead_bytes",
    "best_total_bytes",
    "stored_bytes",
]


def cmd_compress(args):
    src = Path(args.checkpoint)
    model, reports, summary = _compress_checkpoint(src, args.format, args.count_bits)
    out = _out_dir(args, src.parent)
    model.save(out / "model.spm")
    write_json(out / "footprint.json", {"tensors": [r.as_dict() for r in reports], "model": summary})
    write_csv(out / "footprint.csv", [r.as_dict() for r in reports], TENSOR_COLUMNS)
    print(
        f"nnz={summary['nnz']}/{summary['total_params']} "
        f"stored={summary['stored_total_bytes'] / MB:.4f} MB "
        f"dense={summary['dense_bytes'] / MB:.4f} MB -> {out / 'model.spm'}"
    )
    return EXIT_OK


FOOTPRINT_COLUMNS = [
    "total_params",
    "nnz",
    "dense_mb",
    "payload_mb",
    "bitmask_overhead_mb",
    "csrc_overhead_mb",
    "best_total_mb",
    "best_format",
]


def footprint_row(report):
    d = report.as_dict()
    mb = lambda k: None if d[k] is None else d[k] / MB  # noqa: E731
    return {
        "total_params": report.total_params,
        "nnz": report.nnz,
        "dense_mb": mb("dense_bytes"),
        "payload_mb": mb("payload_bytes"),
        "bitmask_overhead_mb": mb("bitmask_overhead_bytes"),
        "csrc_overhead_mb": mb("csrc_overhead_bytes"),
        "best_total_mb": mb("best_total_bytes"),
        "best_format": report.best_format,
    }


def cmd_footprint(args):
    if args.checkpoint:
        _, reports, summary = _compress_checkpoint(args.checkpoint, "best", args.count_bits)
        sys.stdout.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        if args.out:
            write_json(_out_dir(args, ".") / "footprint.json", summary)
        return EXIT_OK
    if args.total is None or not args.nnz:
        raise ConfigError("footprint needs --total and --nnz, or --checkpoint")
    rows = [
        footprint_row(footprint(args.total, nnz, args.count_bits, args.bytes_per_elem))
        for nnz in args.nnz
    ]
    text = csv_text(rows, FOOTPRINT_COLUMNS)
    sys.stdout.write(text)
    if args.out:
        (_out_dir(args, ".") / "footprint.csv").write_text(text)
    return EXIT_OK


# --- infer ---------------------------------------------------------------


def _load_inputs(path, spec):
    path = Path(path)
    if spec.kind == "lstm":
        corpus = CharCorpus.bundled(spec.lm.max_chars or None)
        text = path.read_text(encoding="utf-8")
        return corpus.encode(text), corpus
    if path.suffix == ".npy":
        x = np.load(path)
    else:
        x = np.loadtxt(path, delimiter=",", ndmin=2)
    x = np.asarray(x, dtype=np.dtype(spec.dtype))
    if x.ndim != 2 or x.shape[1] != spec.mlp.input_dim:
        raise ConfigError(f"input must be [N, {spec.mlp.input_dim}], got {x.shape}")
    return x, None


def cmd_infer(args):
    sparse = SparseModel.load(args.model)
    if not sparse.meta.get("config"):
        raise ConfigError(f"{args.model}: sidecar has no model config")
    spec = parse_config(sparse.meta["config"], source=f"{args.model} sidecar").train.model
    inputs, corpus = _load_inputs(args.input, spec)

    dense = spec.build_model(SeededRng(0))
    for name, arr in sparse.dense_tensors().items():
        dense.tensors()[name][...] = arr

    t = time.perf_counter()
    if spec.kind == "mlp":
        ref = dense.logits(inputs)
    else:
        ref, _ = dense.next_logits(inputs[None, :])
    dense_s = time.perf_counter() - t

    t = time.perf_counter()
    if spec.kind == "mlp":
        got = mlp_logits(sparse, inputs, len(spec.mlp.hidden_widths))
    else:
        got = lstm_logits(sparse, inputs, spec.lm.num_layers, spec.lm.forget_bias_offset)
    sparse_s = time.perf_counter() - t

    probs = probabilities(got.astype(np.float64))
    scale = np.maximum(np.abs(ref), 1.0)
    max_rel = float(np.max(np.abs(got - ref) / scale)) if ref.size else 0.0
    out = _out_dir(args, Path(args.model).parent)
    rows = []
    for i, p in enumerate(probs):
        k = int(np.argmax(p))
        row = {"index": i, "predicted": k, "probability": float(p[k])}
        if corpus is not None:
            row["predicted"] = corpus.chars[k] if k < len(corpus.chars) else "<unk>"
        rows.append(row)
    write_csv(out / "outputs.csv", rows, ["index", "predicted", "probability"])
    np.save(out / "probabilities.npy", probs)
    timing = {
        "n_inputs": int(len(inputs)),
        "dense_seconds": dense_s,
        "sparse_seconds": sparse_s,
        "max_rel_diff": max_rel,
        "agree": bool(max_rel <= 1e-5),
    }
    write_json(out / "timing.json", timing)
    print(
        f"dense {dense_s * 1e3:.2f} ms, sparse {sparse_s * 1e3:.2f} ms, "
        f"max rel diff {max_rel:.2e} -> {out / 'outputs.csv'}"
    )
    return EXIT_OK


# --- compare -------------------------------------------------------------


RUN_COLUMNS = [
    "variant",
    "kind",
    "seed",
    "sparsity",
    "nnz_params",
    "total_params",
    "metric",
    "value",
    "dense_bytes",
    "bitmask_bytes",
    "csrc_bytes",
    "best_bytes",
]
SUMMARY_COLUMNS = [
    "variant",
    "kind",
    "n_seeds",
    "sparsity",
    "nnz_params",
    "metric",
    "metric_mean",
    "metric_std",
    "best_bytes",
]


def expected_sparse_nnz(spec, sched, s_f):
    """NNZ a model reaches at final sparsity ``s_f`` under ``sched``'s scheme."""
    model = spec.build_model(SeededRng(0))
    masked = model.masked_params()
    weights = sum(p.size for p in masked)
    if sched.scheme == Scheme.GLOBAL:
        zeros = target_zero_count(s_f, weights)
    else:
        zeros = sum(target_zero_count(s_f, p.size) for p in masked)
    return model.total_params - zeros


def match_width_multiplier(mlp, target_nnz, tolerance=0.10):
    """Smallest width multiplier whose dense parameter count is >= ``target_nnz``."""
    widest = max(mlp.hidden_widths)
    for w in range(1, widest + 1):
        cand = replace(mlp, width_multiplier=w / widest)
        if cand.param_count() >= target_nnz:
            if cand.param_count() > (1 + tolerance) * target_nnz:
                raise ConfigError(
                    f"no width multiplier matches {target_nnz} params within {tolerance:.0%}"
                )
            return cand.width_multiplier
    raise ConfigError(f"target NNZ {target_nnz} exceeds the full model")


def sweep_variants(exp):
    """``[(label, kind, TrainConfig)]`` for every dense and sparse variant."""
    base = exp.train
    spec = base.model
    sweep = exp.sweep
    if sweep is None:
        return [("dense-base" if base.pruning is None else "sparse-base", "dense", base)]
    variants = []
    if spec.kind == "mlp":
        full = replace(spec, mlp=replace(spec.mlp, width_multiplier=1.0))
    else:
        full = spec
    if sweep.sparse and base.pruning is None:
        raise ConfigError("sparse sweep variants need a [pruning] section")
    for s in sweep.sparse:
        sched = replace(base.pruning, s_f=s)
        variants.append((f"sparse-s{s:g}", "sparse", replace(base, model=full, pruning=sched)))

    for d in sweep.dense:
        if spec.kind == "lstm":
            if d not in LM_PRESETS:
                raise ConfigError(f"unknown LM preset {d!r} in [sweep] dense")
            m = replace(spec, lm=replace(spec.lm, hidden=LM_PRESETS[d]))
            variants.append((f"dense-{d}", "dense", replace(base, model=m, pruning=None)))
            continue
        if d == "matched":
            alphas = [
                match_width_multiplier(spec.mlp, expected_sparse_nnz(full, base.pruning, s))
                for s in sweep.sparse
            ]
        else:
            try:
                alphas = [float(d)]
            except ValueError as exc:
                raise ConfigError(f"bad dense variant {d!r}") from exc
        for a in alphas:
            m = replace(spec, mlp=replace(spec.mlp, width_multiplier=a))
            variants.append((f"dense-a{a:.4f}", "dense", replace(base, model=m, pruning=None)))

    seen, unique = set(), []
    for v in variants:
        if v[0] not in seen:
            seen.add(v[0])
            unique.append(v)
    return unique


def run_variant(job):
    label, kind, train_cfg = job
    result = run_training(train_cfg)
    sizes = representation_sizes(result.checkpoint.tensors, result.checkpoint.masks)
    f = result.final
    prunable = result.model.masked_params()
    total_w = sum(p.size for p in prunable)
    return {
        "variant": label,
        "kind": kind,
        "seed": train_cfg.seed,
        "sparsity": sum(p.zero_count for p in prunable) / total_w,
        "nnz_params": f["nnz_params"],
        "total_params": f["total_params"],
        "metric": f["metric"],
        "value": f["value"],
        "dense_bytes": sizes["dense"],
        "bitmask_bytes": sizes["bitmask"],
        "csrc_bytes": sizes["csrc"],
        "best_bytes": sizes["best"],
    }


def summarize_runs(rows):
    groups = {}
    for r in rows:
        groups.setdefault(r["variant"], []).append(r)
    out = []
    for label in sorted(groups):
        g = groups[label]
        vals = [r["value"] for r in g]
        out.append(
            {
                "variant": label,
                "kind": g[0]["kind"],
                "n_seeds": len(g),
                "sparsity": statistics.fmean(r["sparsity"] for r in g),
                "nnz_params": g[0]["nnz_params"],
                "metric": g[0]["metric"],
                "metric_mean": statistics.fmean(vals),
                "metric_std": statistics.stdev(vals) if len(vals) > 1 else 0.0,
                "best_bytes": g[0]["best_bytes"],
            }
        )
    return out


def run_sweep(exp, out, workers=1):
    seeds = exp.sweep.seeds if exp.sweep is not None else (exp.train.seed,)
    jobs = [
        (label, kind, _resolved(replace(cfg, seed=seed)))
        for label, kind, cfg in sweep_variants(exp)
        for seed in seeds
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_variant, jobs))
    else:
        rows = []
        for job in jobs:
            rows.append(run_variant(job))
            log.info("%s seed %d: %s", job[0], job[2].seed, rows[-1]["value"])
    rows.sort(key=lambda r: (r["variant"], r["seed"]))
    summary = summarize_runs(rows)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "runs.csv", rows, RUN_COLUMNS)
    write_csv(out / "summary.csv", summary, SUMMARY_COLUMNS)
    (out / "config.ini").write_text(config_to_text(exp))
    plotting.plot_sweep(summary, out / "sweep.png", rows[0]["metric"] if rows else "metric")
    return rows, summary


def cmd_compare(args):
    exp = _experiment(args)
    out = _out_dir(args, exp.out)
    _, summary = run_sweep(exp, out, resolve_threads(args.threads))
    for s in summary:
        print(
            f"{s['variant']:>18}  nnz={s['nnz_params']:<9} "
            f"{s['metric']}={s['metric_mean']:.4f} +/- {s['metric_std']:.4f} (n={s['n_seeds']})"
        )
    return EXIT_OK


# --- argument parsing ----------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (INI)")
    common.add_argument("--seed", type=int, help="override the config seed(s)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker processes (PRUNE_FORGE_THREADS wins)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="prune-forge", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("schedule", parents=[common], help="print a pruning schedule grid")
    s.add_argument("--s-i", type=float, default=0.0)
    s.add_argument("--s-f", type=float, default=0.875)
    s.add_argument("--t0", type=int, default=0, help="first pruning step")
    s.add_argument("-n", type=int, default=10, help="number of pruning intervals")
    s.add_argument("--delta-t", type=int, default=100, help="steps between mask updates")
    s.set_defaults(func=cmd_schedule)

    s = sub.add_parser("train", parents=[common], help="train one model")
    s.add_argument("--resume", help="continue from this checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("compress", parents=[common], help="write a sparse model file")
    s.add_argument("checkpoint", help="checkpoint.spz written by train")
    s.add_argument("--format", choices=FORMATS, default="best")
    s.add_argument("--count-bits", type=int, choices=(4, 5), default=4)
    s.set_defaults(func=cmd_compress)

    s = sub.add_parser("infer", parents=[common], help="run a sparse model file")
    s.add_argument("model", help="model.spm written by compress")
    s.add_argument("input", help=".npy/.csv features (mlp) or a text file (lstm)")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("compare", parents=[common], help="dense vs pruned sweep")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("footprint", parents=[common], help="storage accounting")
    s.add_argument("--total", type=int, help="total parameter count")
    s.add_argument("--nnz", type=int, nargs="*", help="nonzero counts, one row each")
    s.add_argument("--count-bits", type=int, choices=(4, 5), default=4)
    s.add_argument("--bytes-per-elem", type=int, default=4)
    s.add_argument("--checkpoint", help="report a trained checkpoint instead")
    s.set_defaults(func=cmd_footprint)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        resolve_threads(args.threads)
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError, KeyError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
