"""Command-line entry point.

Subcommands:
  check     run the built-in verification suite, print a pass/fail table
  copy      curriculum copy-task training, per-sequence CSV + checkpoint
  lm        character-level language modeling on a corpus file
  variance  alignment and variance-scaling experiments, CSVs

Common flags: --config PATH (INI, see kfrtrl.config), --out DIR,
--seed N (overrides the configured seed), --threads N.

Exit codes: 0 success, 1 verification-check failure, 2 usage or config
error.

CSV schemas:
  check:    name,passed,detail
  copy:     step,T,bits_per_char,estimator,seed
  lm:       step,estimator,metric,value,seed
  variance: alignment_time.csv    step,estimator,cosine,seed,units
            alignment_units.csv   units,estimator,cosine,seed
            variance_scaling.csv  units,estimator,per_entry_variance,
                                  standard_error,samples
"""

import argparse
import os
import sys

import numpy as np

from kfrtrl import __version__
from kfrtrl.analysis import (
    run_alignment_over_time,
    run_alignment_over_units,
    variance_scaling_report,
)
from kfrtrl.cells import init_params
from kfrtrl.checks import run_all
from kfrtrl.config import load_config, snapshot
from kfrtrl.linalg import make_rng
from kfrtrl.recordio import (
    CsvWriter,
    finalize_manifest,
    save_checkpoint,
    write_manifest,
)
from kfrtrl.tasks import (
    COPY_VOCAB,
    CopyCurriculum,
    bundled_corpus,
    corpus_stream,
    load_corpus,
)
from kfrtrl.training import TrainConfig, train_copy, train_stream


class UsageError(Exception):
    pass


def _load(args):
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}")
    except ValueError as exc:
        raise UsageError(f"bad config {args.config}: {exc}")
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    return cfg


def _train_config(cfg):
    t = cfg["train"]
    return TrainConfig(estimator=t["estimator"],
                       learning_rate=t["learning_rate"], beta1=t["beta1"],
                       beta2=t["beta2"], eps=t["eps"],
                       batch_size=t["batch_size"],
                       reset_prob=t["reset_prob"], seed=t["seed"],
                       max_steps=t["max_steps"], horizon=t["horizon"],
                       avg_count=t["avg_count"])


def _cell(cfg, vocab, input_size):
    c = cfg["cell"]
    return init_params(c["arch"], c["n"], input_size, vocab,
                       scale=c["scale"], rng=make_rng(cfg["train"]["seed"]),
                       gate_bias=c["gate_bias"])


def _start_run(args, command, cfg, outputs):
    out_dir = args.out or f"runs/{command}"
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, name) for name in outputs]
    manifest = write_manifest(out_dir, command, snapshot(cfg),
                              cfg["train"]["seed"], paths, __version__)
    return out_dir, paths, manifest


def cmd_check(args):
    cfg = _load(args)
    out_dir, (csv_path,), manifest = _start_run(args, "check", cfg,
                                                ["checks.csv"])
    results = run_all(cfg["check"], cfg["train"]["seed"])
    with CsvWriter(csv_path, ["name", "passed", "detail"]) as csv:
        for r in results:
            csv.write_row(r.name, r.passed, r.detail)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status}  {r.detail}")
    finalize_manifest(manifest)
    return 0 if all(r.passed for r in results) else 1


def cmd_copy(args):
    cfg = _load(args)
    out_dir, (csv_path, ckpt_path), manifest = _start_run(
        args, "copy", cfg, ["copy.csv", "checkpoint.txt"])
    tc = _train_config(cfg)
    cell = _cell(cfg, vocab=COPY_VOCAB, input_size=COPY_VOCAB)
    curriculum = CopyCurriculum(T=1, threshold=cfg["copy"]["threshold"],
                                window=cfg["copy"]["window"])
    records, curriculum = train_copy(tc, cell, curriculum,
                                     cfg["copy"]["max_sequences"])
    with CsvWriter(csv_path,
                   ["step", "T", "bits_per_char", "estimator", "seed"]) as csv:
        for r in records:
            csv.write_row(r.step, r.T, r.bits_per_char, r.estimator, r.seed)
    save_checkpoint(ckpt_path, cell)
    finalize_manifest(manifest)
    print(f"copy: {len(records)} sequences, reached T={curriculum.T} "
          f"({tc.estimator}, seed {tc.seed})")
    return 0


def cmd_lm(args):
    cfg = _load(args)
    try:
        corpus = load_corpus(args.corpus) if args.corpus else bundled_corpus()
        valid = load_corpus(args.valid) if args.valid else None
    except FileNotFoundError as exc:
        raise UsageError(f"corpus file not found: {exc.filename}")
    out_dir, (csv_path, ckpt_path), manifest = _start_run(
        args, "lm", cfg, ["lm.csv", "checkpoint.txt"])
    tc = _train_config(cfg)
    cell = _cell(cfg, vocab=corpus.vocab, input_size=corpus.vocab)
    streams = corpus_stream(corpus, tc.batch_size, make_rng(tc.seed))
    records = train_stream(tc, cell, streams, valid_corpus=valid,
                           valid_every=cfg["lm"]["valid_every"],
                           valid_limit=cfg["lm"]["valid_limit"])
    with CsvWriter(csv_path,
                   ["step", "estimator", "metric", "value", "seed"]) as csv:
        for r in records:
            csv.write_row(r.step, r.estimator, r.metric, r.value, r.seed)
    save_checkpoint(ckpt_path, cell)
    finalize_manifest(manifest)
    train_bpc = [r.value for r in records if r.metric == "train_bpc"]
    tail = np.mean(train_bpc[-200:]) if train_bpc else float("nan")
    print(f"lm: {len(train_bpc)} steps, final train bpc {tail:.3f} "
          f"({tc.estimator}, seed {tc.seed})")
    return 0


def cmd_variance(args):
    cfg = _load(args)
    a = cfg["analysis"]
    seed = cfg["train"]["seed"]
    outputs = ["alignment_time.csv", "alignment_units.csv",
               "variance_scaling.csv"]
    out_dir, paths, manifest = _start_run(args, "variance", cfg, outputs)
    time_path, units_path, scaling_path = paths

    over_time = run_alignment_over_time(
        n=a["time_units"], steps=a["time_steps"], repeats=a["repeats"],
        estimators=("rtrl", "kf-rtrl", "uoro"), seed=seed,
        record_every=a["record_every"], gate_bias=a["gate_bias"],
        threads=args.threads)
    with CsvWriter(time_path,
                   ["step", "estimator", "cosine", "seed", "units"]) as csv:
        for s in over_time:
            csv.write_row(s.step, s.estimator, s.cosine, s.seed, s.units)

    over_units = run_alignment_over_units(
        ns=a["units"], steps=a["unit_steps"], repeats=a["repeats"],
        estimators=("kf-rtrl", "uoro", "uoro-avg"), seed=seed,
        gate_bias=a["gate_bias"], threads=args.threads)
    with CsvWriter(units_path,
                   ["units", "estimator", "cosine", "seed"]) as csv:
        for s in over_units:
            csv.write_row(s.units, s.estimator, s.cosine, s.seed)

    scaling = variance_scaling_report(
        ns=a["units"], t=a["variance_t"], samples=a["variance_samples"],
        seed=seed, gate_bias=a["gate_bias"])
    with CsvWriter(scaling_path,
                   ["units", "estimator", "per_entry_variance",
                    "standard_error", "samples"]) as csv:
        for row in scaling.rows:
            csv.write_row(row.units, row.estimator, row.per_entry_variance,
                          row.standard_error, row.samples)

    finalize_manifest(manifest)
    largest = max(a["units"])
    kf = [s.cosine for s in over_units
          if s.units == largest and s.estimator == "kf-rtrl"]
    uoro = [s.cosine for s in over_units
            if s.units == largest and s.estimator == "uoro"]
    print(f"variance: at n={largest} mean cosine kf-rtrl={np.mean(kf):.3f} "
          f"uoro={np.mean(uoro):.3f}")
    for name, (slope, se) in scaling.slopes.items():
        print(f"variance: log-log slope {name} = {slope:.3f} (se {se:.3f})")
    print(f"variance: uoro/kf variance-ratio slope = {scaling.ratio_slope:.4f}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="kfrtrl",
        description="Forward-mode online learning for recurrent networks: "
                    "exact RTRL, KF-RTRL, UORO and TBPTT, plus a "
                    "variance-analysis harness.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--out", default=None,
                       help="output directory (default runs/<command>)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the configured seed")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for repeated experiments")

    common(sub.add_parser("check", help="run the verification suite"))
    common(sub.add_parser("copy", help="train on the curriculum copy task"))
    p_lm = sub.add_parser("lm", help="character-level language modeling")
    common(p_lm)
    p_lm.add_argument("corpus", nargs="?", default=None,
                      help="training text file (default: bundled sample)")
    p_lm.add_argument("--valid", default=None, help="held-out text file")
    common(sub.add_parser("variance", help="alignment/variance analysis"))

    args = parser.parse_args(argv)
    handler = {"check": cmd_check, "copy": cmd_copy, "lm": cmd_lm,
               "variance": cmd_variance}[args.command]
    try:
        return handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
