"""Command-line entry point.

Subcommands: ``run`` (execute an experiment), ``validate`` (check a config
without touching the output directory), ``probe`` (linear-probe a saved
checkpoint), ``aggregate`` (offline aggregation of checkpoints), and
``compare`` (merge the telemetry of several runs into one long CSV).

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .aggregation import METADATA_STRATEGIES, AggregationSpec, ClientUpdate, aggregate
from .config import ConfigError, apply_overrides, load_config_file, parse_config
from .engine import ROUNDS_CSV_PREFIX, build_datasets, run_experiment
from .evaluation import linear_probe
from .params import IncompatibleModelError, load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim")
    parser.add_argument("-v", "--verbose", action="store_true", help="enable info logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute an experiment from a config file")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    run_p.add_argument("--output", help="override the config's output directory")

    val_p = sub.add_parser("validate", help="validate a config and exit")
    val_p.add_argument("--config", required=True)
    val_p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    probe_p = sub.add_parser("probe", help="linear-probe a saved checkpoint")
    probe_p.add_argument("--config", required=True)
    probe_p.add_argument("--checkpoint", required=True)
    probe_p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    probe_p.add_argument(
        "--fraction", type=float, action="append", default=None,
        help="label fraction(s) to probe; defaults to the config's list",
    )

    agg_p = sub.add_parser("aggregate", help="aggregate client checkpoints offline")
    agg_p.add_argument("--global", dest="global_ckpt", required=True, metavar="CKPT")
    agg_p.add_argument("--client", dest="clients", action="append", required=True, metavar="CKPT")
    agg_p.add_argument("--strategy", required=True)
    agg_p.add_argument("--metadata", help="JSON file with per-client num_samples / train_loss")
    agg_p.add_argument("--round", type=int, default=0, dest="round_index")
    agg_p.add_argument("--warmup-rounds", type=int, default=0)
    agg_p.add_argument("--output", required=True)
    agg_p.add_argument(
        "--report",
        help="divergence-report JSON path (default: <output>.divergence.json)",
    )

    cmp_p = sub.add_parser("compare", help="merge several runs' rounds.csv files")
    cmp_p.add_argument("run_dirs", nargs="+")
    cmp_p.add_argument("--output", required=True)
    cmp_p.add_argument("--delta-mode", choices=("model", "layer"), default="model")
    return parser


def _load_cfg(args):
    raw = load_config_file(args.config)
    raw = apply_overrides(raw, args.overrides)
    return parse_config(raw)


def _cmd_run(args) -> int:
    cfg = _load_cfg(args)
    if args.output:
        raw = apply_overrides(load_config_file(args.config), args.overrides)
        raw["output_dir"] = args.output
        cfg = parse_config(raw)
    result = run_experiment(cfg)
    print(f"run complete: {cfg.rounds} rounds -> {result.output_dir}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    _load_cfg(args)
    print("config OK")
    return EXIT_OK


def _cmd_probe(args) -> int:
    cfg = _load_cfg(args)
    params = load_checkpoint(args.checkpoint)
    train_ds, test_ds = build_datasets(cfg)
    fractions = args.fraction if args.fraction else list(cfg.evaluation.label_fractions)
    print("fraction,accuracy")
    for fraction in fractions:
        acc = linear_probe(params, cfg.model, train_ds, test_ds, cfg.evaluation, fraction)
        print(f"{fraction},{acc}")
    return EXIT_OK


def _load_metadata(path, n_clients: int) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        meta = json.load(fh)
    entries = meta["clients"] if isinstance(meta, dict) and "clients" in meta else meta
    if not isinstance(entries, list) or len(entries) != n_clients:
        raise ConfigError(
            f"{path}: expected a list of {n_clients} client entries "
            '(e.g. [{"num_samples": 10, "train_loss": 0.5}, ...])'
        )
    return entries


def _cmd_aggregate(args) -> int:
    strategy = args.strategy
    spec = AggregationSpec(strategy=strategy, warmup_rounds=args.warmup_rounds)
    needs_meta = spec.strategy in METADATA_STRATEGIES
    if args.round_index < spec.warmup_rounds:
        needs_meta = True  # warm-up applies the sample-count rule
    if needs_meta and not args.metadata:
        raise ConfigError(f"strategy {strategy!r} needs --metadata with num_samples/train_loss")

    global_params = load_checkpoint(args.global_ckpt)
    client_params = [load_checkpoint(p) for p in args.clients]
    if args.metadata:
        entries = _load_metadata(args.metadata, len(client_params))
    else:
        entries = [{"num_samples": 1, "train_loss": 0.0}] * len(client_params)
    updates = [
        ClientUpdate(
            client_id=i,
            params=p,
            num_samples=int(e.get("num_samples", 1)),
            train_loss=float(e.get("train_loss", 0.0)),
        )
        for i, (p, e) in enumerate(zip(client_params, entries))
    ]
    new_global, reports = aggregate(spec, args.round_index, global_params, updates)
    save_checkpoint(new_global, args.output)
    report_path = args.report or f"{args.output}.divergence.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump([r.to_json_dict() for r in reports], fh, indent=2)
        fh.write("\n")
    print(f"aggregated {len(updates)} clients with {strategy} -> {args.output}")
    return EXIT_OK


def _read_rounds_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        missing = [c for c in ROUNDS_CSV_PREFIX if c not in fields]
        if missing:
            raise ConfigError(
                f"{path}: missing column {missing[0]!r}; expected schema starts with "
                + ",".join(ROUNDS_CSV_PREFIX)
            )
        return list(reader)


def _cmd_compare(args) -> int:
    delta_col = "mu_delta_model" if args.delta_mode == "model" else "mu_delta_layer"
    rows = []
    for run_dir in args.run_dirs:
        path = Path(run_dir) / "rounds.csv"
        if not path.exists():
            raise ConfigError(f"{path}: no rounds.csv in {run_dir}")
        for rec in _read_rounds_csv(path):
            rows.append(
                [
                    Path(run_dir).name,
                    rec["round"],
                    rec["probe_acc"],
                    rec[delta_col],
                    rec["mean_local_loss"],
                    rec["agg_time_ms"],
                ]
            )
    with open(args.output, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_name", "round", "accuracy", "mu_delta", "mean_local_loss", "agg_time_ms"])
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows -> {args.output}")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "validate": _cmd_validate,
    "probe": _cmd_probe,
    "aggregate": _cmd_aggregate,
    "compare": _cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except IncompatibleModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
