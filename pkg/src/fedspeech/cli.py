"""Command-line entry point: generate corpora, run experiments, compare setups.

    fedspeech gen --out data/                       # synthetic corpora + manifest
    fedspeech run --config cfg.json --out results/  # metrics, ROC, histograms
    fedspeech compare results/records.csv --site site_a \\
        --setup-a local --setup-b federated

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training or
protocol error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import math
import multiprocessing
import sys
from pathlib import Path

from .config import (ExperimentConfig, load_config, resolve_config, snapshot_dict,
                     write_snapshot)
from .data import generate_synthetic, pool_labeled, read_corpus, write_corpus
from .errors import ConfigurationError, DataError, FedspeechError
from .evaluation import MetricsTable, prepare_sites, run_fold_job, _validate_fold_feasibility
from .federation import AggregationScheme
from .metrics import histogram_scores, paired_t_test, roc_curve

_FMT = "{:.6f}"


def _fmt(value: float) -> str:
    return "" if math.isnan(value) else _FMT.format(value)


def load_corpora(cfg: ExperimentConfig) -> dict:
    """Materialize every site's feature vectors (generate or read + pool)."""
    corpora = {}
    for entry in cfg.sites:
        if entry.corpus_path is not None:
            records = read_corpus(entry.corpus_path)
        else:
            records = generate_synthetic(entry.spec)
        corpora[entry.site_id] = pool_labeled(records, entry.site_id)
    return corpora


def cmd_gen(args) -> int:
    cfg = _load(args)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": 1, "sites": []}
    for entry in cfg.sites:
        if entry.spec is None:
            raise ConfigurationError(f"site {entry.site_id!r} points at an existing "
                                     f"corpus; gen needs generator site specs")
        records = generate_synthetic(entry.spec)
        path = out_dir / f"{entry.site_id}.fpsc"
        write_corpus(path, records)
        manifest["sites"].append({
            "site_id": entry.site_id,
            "path": path.name,
            "records": len(records),
            "embedding_dim": entry.spec.embedding_dim,
            "seed": entry.spec.seed,
        })
        print(f"wrote {path} ({len(records)} recordings)")
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out_dir / 'manifest.json'}")
    return 0


# Shared state for fork-started worker processes; populated before the pool
# starts so children inherit it without pickling the corpora.
_JOB_CONTEXT: dict = {}


def _worker_init():
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=1)
    except ImportError:
        pass


def _run_cell(cell: tuple[int, int]) -> MetricsTable:
    repetition, fold = cell
    ctx = _JOB_CONTEXT
    return run_fold_job(ctx["sites"], ctx["setups"], ctx["train"], ctx["k"],
                        ctx["master_seed"], repetition, fold, ctx["scheme"],
                        ctx["aggregate_bn_stats"], ctx["persist_optimizer_state"])


def run_experiment_grid(cfg: ExperimentConfig, sites) -> MetricsTable:
    """All (repetition, fold) cells, optionally across worker processes."""
    _JOB_CONTEXT.clear()
    _JOB_CONTEXT.update({
        "sites": sites,
        "setups": cfg.setups,
        "train": cfg.train,
        "k": cfg.k,
        "master_seed": cfg.master_seed,
        "scheme": AggregationScheme(cfg.aggregation),
        "aggregate_bn_stats": cfg.aggregate_bn_stats,
        "persist_optimizer_state": cfg.persist_optimizer_state,
    })
    cells = [(rep, fold) for rep in range(cfg.repetitions) for fold in range(cfg.k)]
    table = MetricsTable([], [], [])
    if cfg.jobs > 1:
        ctx = multiprocessing.get_context("fork")
        with concurrent.futures.ProcessPoolExecutor(
                max_workers=cfg.jobs, mp_context=ctx,
                initializer=_worker_init) as pool:
            for part in pool.map(_run_cell, cells):
                table.extend(part)
    else:
        for cell in cells:
            table.extend(_run_cell(cell))
    table.sort()
    return table


def write_outputs(cfg: ExperimentConfig, table: MetricsTable, out_dir: Path) -> None:
    summary_rows = table.summarize()
    with open(out_dir / "summary.csv", "w", encoding="utf-8") as fh:
        fh.write("site,setup,n_records,accuracy_mean,accuracy_std,auc_mean,auc_std,"
                 "sensitivity_mean,sensitivity_std,specificity_mean,specificity_std\n")
        for row in summary_rows:
            cells = [row["site"], row["setup"], str(row["n_records"])]
            for metric in ("accuracy", "auc", "sensitivity", "specificity"):
                cells.append(_fmt(row[f"{metric}_mean"]))
                cells.append(_fmt(row[f"{metric}_std"]))
            fh.write(",".join(cells) + "\n")

    with open(out_dir / "records.csv", "w", encoding="utf-8") as fh:
        fh.write("site,setup,repetition,fold,accuracy,auc,sensitivity,specificity\n")
        for rec in table.fold_records:
            fh.write(f"{rec.site_id},{rec.setup},{rec.repetition},{rec.fold},"
                     f"{_fmt(rec.accuracy)},{_fmt(rec.auc)},"
                     f"{_fmt(rec.sensitivity)},{_fmt(rec.specificity)}\n")

    site_ids = sorted({r.site_id for r in table.fold_records})
    for setup in ("central", "federated"):
        if setup not in cfg.setups:
            continue
        for site_id in site_ids:
            pairs = [(r.score, r.label) for r in table.sample_records
                     if r.site_id == site_id and r.setup == setup]
            if not pairs:
                continue
            scores = [p[0] for p in pairs]
            labels = [p[1] for p in pairs]
            try:
                points = roc_curve(scores, labels)
            except DataError:
                print(f"skipping ROC for {site_id}/{setup}: single-class scores",
                      file=sys.stderr)
                continue
            with open(out_dir / f"roc_{site_id}_{setup}.csv", "w", encoding="utf-8") as fh:
                fh.write("fpr,tpr\n")
                for fpr, tpr in points:
                    fh.write(f"{_FMT.format(fpr)},{_FMT.format(tpr)}\n")

    if "federated" in cfg.setups:
        for site_id in site_ids:
            pairs = [(r.score, r.label) for r in table.sample_records
                     if r.site_id == site_id and r.setup == "federated"]
            if not pairs:
                continue
            edges, hc, pd = histogram_scores([p[0] for p in pairs],
                                             [p[1] for p in pairs], bins=10)
            with open(out_dir / f"hist_{site_id}.csv", "w", encoding="utf-8") as fh:
                fh.write("bin_lo,bin_hi,hc_count,pd_count\n")
                for i in range(len(hc)):
                    fh.write(f"{_FMT.format(edges[i])},{_FMT.format(edges[i + 1])},"
                             f"{hc[i]},{pd[i]}\n")

        with open(out_dir / "telemetry.jsonl", "w", encoding="utf-8") as fh:
            for t in table.telemetry:
                fh.write(json.dumps({
                    "repetition": t.repetition, "fold": t.fold,
                    "round": t.round_index, "site": t.site_id,
                    "loss": t.loss, "weight": t.weight,
                }, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    cfg = _load(args)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out_dir / "config.snapshot")
    corpora = load_corpora(cfg)
    sites = prepare_sites(corpora)
    _validate_fold_feasibility(sites, cfg.k)
    table = run_experiment_grid(cfg, sites)
    write_outputs(cfg, table, out_dir)
    print(f"\nwrote results to {out_dir}/\n")
    _print_summary(table)
    return 0


def _print_summary(table: MetricsTable) -> None:
    print(f"{'site':<12}{'setup':<11}{'accuracy':<16}{'auc':<16}"
          f"{'sensitivity':<16}{'specificity':<16}")
    for row in table.summarize():
        cells = [f"{row['site']:<12}", f"{row['setup']:<11}"]
        for metric in ("accuracy", "auc", "sensitivity", "specificity"):
            mean, std = row[f"{metric}_mean"], row[f"{metric}_std"]
            if math.isnan(mean):
                cells.append(f"{'-':<16}")
            else:
                cells.append(f"{100 * mean:5.1f} +- {100 * std:4.1f}   ")
        print("".join(cells))


def _read_records(path) -> dict:
    """records.csv -> {(site, setup, repetition, fold): row dict}."""
    path = Path(path)
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        import csv
        reader = csv.DictReader(fh)
        needed = {"site", "setup", "repetition", "fold", "accuracy"}
        if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
            raise DataError(f"{path}: not a records file (missing columns)")
        for row in reader:
            key = (row["site"], row["setup"], int(row["repetition"]), int(row["fold"]))
            rows[key] = row
    return rows


def cmd_compare(args) -> int:
    rows_a = _read_records(args.records)
    rows_b = _read_records(args.records_b) if args.records_b else rows_a
    keys_a = {(rep, fold) for (site, setup, rep, fold) in rows_a
              if site == args.site and setup == args.setup_a}
    keys_b = {(rep, fold) for (site, setup, rep, fold) in rows_b
              if site == args.site and setup == args.setup_b}
    if not keys_a:
        raise DataError(f"no records for site {args.site!r}, setup {args.setup_a!r}")
    if keys_a != keys_b:
        missing_b = sorted(keys_a - keys_b)
        missing_a = sorted(keys_b - keys_a)
        raise DataError(f"records are misaligned; missing from {args.setup_b!r}: "
                        f"{missing_b}; missing from {args.setup_a!r}: {missing_a}")
    keys = sorted(keys_a)

    def column(rows, setup, key):
        text = rows[(args.site, setup, key[0], key[1])][args.metric]
        if text == "":
            raise DataError(f"{args.metric} undefined for {key}; cannot pair")
        return float(text)

    a = [column(rows_a, args.setup_a, key) for key in keys]
    b = [column(rows_b, args.setup_b, key) for key in keys]
    result = paired_t_test(a, b)
    verdict = ("significant" if result.p_value <= args.alpha else "not significant")
    print(f"site={args.site} metric={args.metric} n={len(keys)}")
    print(f"{args.setup_a} mean={sum(a) / len(a):.4f}  "
          f"{args.setup_b} mean={sum(b) / len(b):.4f}")
    print(f"t={result.t_statistic:.4f} df={result.degrees_of_freedom} "
          f"p={result.p_value:.4f} mean_diff={result.mean_difference:.4f}")
    if result.degenerate:
        print("warning: zero variance in the paired differences (degenerate case)")
    print(f"{verdict} at alpha={args.alpha}")
    return 0


def _load(args) -> ExperimentConfig:
    overrides = {
        "master_seed": getattr(args, "seed", None),
        "out_dir": getattr(args, "out", None),
        "jobs": getattr(args, "jobs", None),
        "embedding_dim": getattr(args, "embedding_dim", None),
    }
    if getattr(args, "setups", None):
        overrides["setups"] = [s.strip() for s in args.setups.split(",") if s.strip()]
    if args.config:
        return load_config(args.config, overrides)
    return resolve_config({}, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedspeech",
        description="Federated-learning simulation on pooled speech-embedding features")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--embedding-dim", type=int, default=None, dest="embedding_dim",
                       help="override embedding width of generated sites")

    p_gen = sub.add_parser("gen", help="write synthetic corpora and a manifest")
    common(p_gen)
    p_gen.set_defaults(func=cmd_gen)

    p_run = sub.add_parser("run", help="run the configured experiments")
    common(p_run)
    p_run.add_argument("--setups", type=str, default=None,
                       help="comma-separated subset of local,central,federated")
    p_run.add_argument("--jobs", type=int, default=None,
                       help="worker processes over (repetition, fold) cells")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="paired t-test between two setups")
    p_cmp.add_argument("records", type=str, help="records.csv from a run")
    p_cmp.add_argument("records_b", type=str, nargs="?", default=None,
                       help="second records.csv (defaults to the first)")
    p_cmp.add_argument("--site", type=str, required=True)
    p_cmp.add_argument("--setup-a", type=str, required=True, dest="setup_a")
    p_cmp.add_argument("--setup-b", type=str, required=True, dest="setup_b")
    p_cmp.add_argument("--metric", type=str, default="accuracy",
                       choices=("accuracy", "auc", "sensitivity", "specificity"))
    p_cmp.add_argument("--alpha", type=float, default=0.05)
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except FedspeechError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
