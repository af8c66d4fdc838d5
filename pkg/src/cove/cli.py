"""Command-line interface: ingest, train, evaluate, compare, analyze-preferences, plot.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_run_config
from .data import PRESETS, ColumnMapping, build_dataset, dataset_stats, load_dataset, load_interactions, save_dataset, split
from .errors import ConfigError, CoveError, DataError
from .evaluation import MetricsReport, evaluate, metric_names, paired_t_test, preference_bits
from .trainer import train

logger = logging.getLogger("cove")

SIGNIFICANCE = 0.05


def _parse_columns(mapping: str | None, preset: str) -> ColumnMapping:
    base = PRESETS[preset]
    if not mapping:
        return base
    fields = asdict(base)
    for part in mapping.split(","):
        key, sep, value = part.partition("=")
        key = key.strip()
        if not sep or key not in fields:
            raise ConfigError(f"bad column mapping {part!r}; expected field=column with field in {sorted(fields)}")
        fields[key] = value.strip() or None
    return ColumnMapping(**fields)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_ingest(args) -> int:
    columns = _parse_columns(args.columns, args.preset)
    raw = load_interactions(args.input, columns, args.delimiter, lenient=args.lenient)
    ds = build_dataset(raw, args.min_sessions, args.min_item_interactions)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    stats = asdict(dataset_stats(ds))
    if args.stats_out:
        _write_json(Path(args.stats_out), stats)
    print(json.dumps(stats, indent=2))
    return 0


def _split_for(dataset_path: str, split_seed: int):
    return split(load_dataset(dataset_path), split_seed)


def cmd_train(args) -> int:
    overrides = {
        "dataset": args.dataset, "output_dir": args.out, "split_seed": args.split_seed,
        "seed": args.seed, "epochs": args.epochs, "learning_rate": args.lr, "batch_size": args.batch_size,
        "dim": args.dim, "loss": args.loss, "variant": args.variant, "experts": args.experts,
        "gate_mode": args.gate_mode, "patience": args.patience,
        "init_from": ",".join(args.init_from) if args.init_from else None,
    }
    cfg = load_run_config(args.config, overrides)
    if not cfg.dataset:
        raise ConfigError("no dataset given (use --dataset or [data] dataset)")
    sp = _split_for(cfg.dataset, cfg.split_seed)
    result = train(cfg.train, sp)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_text = result.log_text()
    (out / "train_log.jsonl").write_text(log_text)
    save_checkpoint(result.model, out / "model.cvmd", seed=cfg.train.seed, k_gate=cfg.k_gate, log_text=log_text,
                    extras={"split_seed": cfg.split_seed, "dataset": str(cfg.dataset)})
    summary = {"best_epoch": result.best_epoch, "best_validation_mrr": result.best_validation_mrr,
               "epochs_run": len(result.log), "roster": [k.value for k in cfg.train.experts],
               "variant": cfg.train.variant, "gate_mode": cfg.train.gate_mode}
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary, indent=2))
    return 0


def _report_row(name: str, report: MetricsReport, marks: dict[str, str] | None = None) -> dict:
    row = {"model": name, "count": report.count}
    for m in metric_names(report.ks):
        row[m] = f"{report.aggregates[m]:.4f}" + (marks or {}).get(m, "")
    return row


def comparison_table(reports: dict[str, MetricsReport]) -> list[dict]:
    """One row per model; a metric is marked with a section sign when it beats the best
    other model on that metric (one-tailed paired t-test, p < 0.05)."""
    names = list(reports)
    first = reports[names[0]]
    for name in names[1:]:
        if len(reports[name].ranks) != len(first.ranks):
            raise DataError(f"report {name!r} covers {len(reports[name].ranks)} interactions, "
                            f"{names[0]!r} covers {len(first.ranks)}; cannot pair them")
    rows = []
    for name in names:
        marks = {}
        for m in metric_names(first.ks):
            others = [o for o in names if o != name]
            if not others:
                continue
            best = max(others, key=lambda o: reports[o].aggregates[m])
            res = paired_t_test(reports[name].per_interaction(m), reports[best].per_interaction(m))
            if res.p < SIGNIFICANCE:
                marks[m] = "§"
        rows.append(_report_row(name, reports[name], marks))
    return rows


def _write_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    ks = tuple(int(k) for k in args.ks.split(","))
    reports: dict[str, MetricsReport] = {}
    for path in args.checkpoint:
        model, header = load_checkpoint(path)
        dataset = args.dataset or header.extras.get("dataset")
        if not dataset:
            raise ConfigError("no dataset given and none recorded in the checkpoint")
        split_seed = args.split_seed if args.split_seed is not None else header.extras.get("split_seed", 0)
        if args.k_gate is not None and not 1 <= args.k_gate <= model.num_experts:
            raise ConfigError(f"--k-gate must lie in [1, {model.num_experts}]")
        report = evaluate(model, _split_for(dataset, split_seed), args.mode, k_gate=args.k_gate, ks=ks,
                          last_item_only=args.last_item_only)
        report.meta.update(checkpoint=str(path), split_seed=split_seed)
        name = Path(path).stem
        if name in reports:
            name = f"{name}_{len(reports)}"
        reports[name] = report
        _write_json(out / f"report_{name}.json", report.to_dict())
    rows = comparison_table(reports) if len(reports) > 1 else [_report_row(n, r) for n, r in reports.items()]
    _write_csv(out / "metrics.csv", rows)
    for row in rows:
        print(json.dumps(row))
    return 0


def cmd_compare(args) -> int:
    reports = {}
    for path in args.reports:
        p = Path(path)
        if not p.exists():
            raise DataError(f"report not found: {p}")
        reports[p.stem] = MetricsReport.from_dict(json.loads(p.read_text()))
    rows = comparison_table(reports)
    _write_csv(Path(args.out), rows)
    for row in rows:
        print(json.dumps(row))
    return 0


def cmd_analyze_preferences(args) -> int:
    split_seed = args.split_seed
    ranks = {}
    users = None
    for role, path in (("long", args.bpr), ("short", args.gru)):
        model, header = load_checkpoint(path)
        dataset = args.dataset or header.extras.get("dataset")
        if not dataset:
            raise ConfigError("no dataset given and none recorded in the checkpoint")
        seed = split_seed if split_seed is not None else header.extras.get("split_seed", 0)
        report = evaluate(model, _split_for(dataset, seed), args.mode)
        ranks[role] = report.ranks
        users = report.users
    result = preference_bits(ranks["long"], ranks["short"], users)
    out = Path(args.out)
    _write_csv(out / "bits.csv", [{"user": int(u), "bit": b} for u, b in zip(result.users, result.bits)])
    _write_csv(out / "histogram.csv", [{"bin": b, "count": c} for b, c in result.histogram])
    summary = {"interactions": len(result.bits), "users": len(result.user_means),
               "interaction_mean": result.mean, "user_mean": result.user_mean}
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary, indent=2))
    return 0


def _plot_series(path: Path) -> tuple[list[str], list[list]]:
    if not path.exists():
        raise DataError(f"plot input not found: {path}")
    text = path.read_text()
    if path.suffix == ".jsonl":
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
        return ["epoch", "loss", "validation_mrr"], [[r["epoch"], r["loss"], r["validation_mrr"]] for r in records]
    if path.suffix == ".json":
        metrics = json.loads(text).get("metrics")
        if metrics is None:
            raise DataError(f"{path}: not a metrics report")
        return ["metric", "value"], [[k, v] for k, v in metrics.items()]
    rows = list(csv.reader(text.splitlines()))
    if not rows or rows[0] != ["bin", "count"]:
        raise DataError(f"{path}: expected a (bin, count) histogram, training log (.jsonl) or report (.json)")
    return rows[0], rows[1:]


def cmd_plot(args) -> int:
    header, series = _plot_series(Path(args.input))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(header)
        w.writerows(series)
    if args.image:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        if header == ["bin", "count"]:
            ax.bar([float(b) + 0.05 for b, _ in series], [int(c) for _, c in series], width=0.09)
            ax.set_xlabel("long-term preference value")
            ax.set_ylabel("users")
        elif header[0] == "epoch":
            ax.plot([r[0] for r in series], [r[1] for r in series], label="loss")
            ax2 = ax.twinx()
            ax2.plot([r[0] for r in series], [r[2] for r in series], color="tab:orange", label="val MRR")
            ax.set_xlabel("epoch")
        else:
            ax.bar([r[0] for r in series], [r[1] for r in series])
            ax.tick_params(axis="x", rotation=45)
        fig.tight_layout()
        fig.savefig(args.image)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cove", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="filter raw interactions into a dataset snapshot")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-sessions", type=int, default=3)
    p.add_argument("--min-item-interactions", type=int, default=5)
    p.add_argument("--preset", choices=sorted(PRESETS), default="default")
    p.add_argument("--columns", help="field=column pairs, e.g. user=uid,session=sid,item=iid,timestamp=ts")
    p.add_argument("--delimiter")
    p.add_argument("--lenient", action="store_true", help="skip malformed rows instead of failing")
    p.add_argument("--stats-out")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a CoVE model or a standalone expert")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--loss", choices=["bpr", "bpr-max"])
    p.add_argument("--variant", choices=["hidden", "score"])
    p.add_argument("--experts", help="comma-separated roster, e.g. GRU,FPMC")
    p.add_argument("--gate-mode", choices=["learned", "uniform"])
    p.add_argument("--patience", type=int)
    p.add_argument("--init-from", action="append", help="pretrained expert checkpoint (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="full-catalog evaluation of one or more checkpoints")
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--dataset")
    p.add_argument("--split-seed", type=int)
    p.add_argument("--mode", choices=["validation", "test"], default="test")
    p.add_argument("--k-gate", type=int)
    p.add_argument("--ks", default="10,20")
    p.add_argument("--last-item-only", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="significance-annotated table from saved reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("analyze-preferences", help="long-term preference bits of a BPR/GRU checkpoint pair")
    p.add_argument("--bpr", required=True, help="long-term model checkpoint")
    p.add_argument("--gru", required=True, help="short-term model checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--split-seed", type=int)
    p.add_argument("--mode", choices=["validation", "test"], default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_preferences)

    p = sub.add_parser("plot", help="plot-ready series from a histogram, training log or report")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image", help="also render a PNG (needs matplotlib)")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CoveError as exc:
        print(f"cove {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
