"""
Command-line entry point: simulate, preprocess, train, benchmark, evaluate
and report.

Exit status is 0 on success, 1 on a domain failure and 2 on a usage error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import pandas as pd
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .benchmark import run_benchmark
from .config import PRESETS, resolve_config, thread_count
from .dataset import Dataset, export_csv, import_csv
from .errors import FlotationError, UsageError
from .preprocess import iqr_filter
from .simulator import SPLITS, SimConfig, sim_truth, simulate
from .train import (
    MODEL_KINDS,
    TrainConfig,
    evaluate,
    load_checkpoint,
    load_training_state,
    train_model,
    write_run,
)

logger = logging.getLogger(__name__)

PRESET_NAMES = list(PRESETS)


def setup_logging(verbose: bool = False) -> None:
    handler = RichHandler(console=Console(stderr=True), show_path=False)
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(message)s", datefmt="[%X]", handlers=[handler], force=True)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file")
    common.add_argument("--preset", choices=PRESET_NAMES, help="preset to start from (default desk)")
    common.add_argument("--seed", type=int, help="seed for simulation and training")
    common.add_argument("-o", "--out", default="out", help="output directory")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="flotapinn",
        description="Physics-informed soft sensors for rougher flotation cells")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="generate train/val/test CSVs")

    p = sub.add_parser("preprocess", parents=[common], help="IQR-filter a dataset CSV")
    p.add_argument("--in", dest="input", required=True, help="dataset CSV")

    p = sub.add_parser("train", parents=[common], help="train one model kind")
    p.add_argument("--in", dest="input", help="directory with train/val/test CSVs")
    p.add_argument("--kind", choices=MODEL_KINDS, default="pinn-bidirectional")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue the neural run saved in this checkpoint")
    p.add_argument("--timing", action="store_true", help="keep wall-clock time in the report")

    p = sub.add_parser("benchmark", parents=[common], help="train and compare all model kinds")
    p.add_argument("--in", dest="input", help="directory with train/val/test CSVs (simulated if absent)")
    p.add_argument("--timing", action="store_true", help="keep wall-clock time in the reports")

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on a dataset")
    p.add_argument("--in", dest="input", required=True, help="dataset CSV")
    p.add_argument("--checkpoint", required=True, help="checkpoint JSON")

    p = sub.add_parser("report", parents=[common], help="summarize a run or benchmark directory")
    p.add_argument("--in", dest="input", required=True, help="run or benchmark directory")
    return parser


def _resolve(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides = {"sim": {"seed": args.seed}, "train": {"seed": args.seed}}
    return resolve_config(args.preset, args.config, overrides)


def _sim_config(config: dict) -> SimConfig:
    return SimConfig.from_dict(config.get("sim", {}))


def _split_path(directory: Path, split: str) -> Path:
    filtered = directory / f"{split}_filtered.csv"
    return filtered if filtered.exists() else directory / f"{split}.csv"


def _load_splits(directory: str | Path) -> dict[str, Dataset]:
    directory = Path(directory)
    if not directory.is_dir():
        raise UsageError(f"{directory} is not a directory")
    return {split: import_csv(_split_path(directory, split)) for split in SPLITS}


def _write_simulation(config: dict, out: Path) -> dict[str, Dataset]:
    sim = _sim_config(config)
    datasets = simulate(sim)
    for split, dataset in datasets.items():
        export_csv(dataset, out / f"{split}.csv")
    (out / "sim_truth.json").write_text(json.dumps(sim_truth(sim), indent=1))
    return datasets


def cmd_simulate(args, config: dict, out: Path) -> str:
    datasets = _write_simulation(config, out)
    rows = ", ".join(f"{s} {len(d)}" for s, d in datasets.items())
    return f"simulated {rows} rows into {out}"


def cmd_preprocess(args, config: dict, out: Path) -> str:
    source = Path(args.input)
    dataset = import_csv(source)
    result = iqr_filter(dataset)
    export_csv(result.dataset, out / f"{source.stem}_filtered.csv")
    result.stats_frame().to_csv(out / f"{source.stem}_stats.csv", index=False, float_format="%.17g")
    return f"removed {len(result.removed)} of {len(dataset)} rows ({out / f'{source.stem}_filtered.csv'})"


def _train_section(config: dict) -> dict:
    return dict(config.get("train", {}))


def cmd_train(args, config: dict, out: Path) -> str:
    section = {**_train_section(config), "kind": args.kind, "workers": thread_count()}
    train_config = TrainConfig.from_dict(section)
    datasets = _load_splits(args.input) if args.input else None
    resume = load_training_state(args.resume) if args.resume else None
    report, predictor = train_model(train_config, datasets, resume=resume)
    paths = write_run(report, predictor, out, timing=args.timing)
    return (f"{args.kind}: best val MSE_u {report.best_val_mse:.6g} at step {report.best_step}, "
            f"test C_f MSE {report.test_metrics['C_f_conc']['mse']:.6g} ({paths['report']})")


def _benchmark_data(args, config: dict, out: Path) -> dict[str, Dataset]:
    if args.input:
        return _load_splits(args.input)
    data_dir = out / "data"
    logger.info("No datasets given, simulating into %s", data_dir)
    raw = _write_simulation(config, data_dir)
    filtered = {}
    for split, dataset in raw.items():
        result = iqr_filter(dataset)
        export_csv(result.dataset, data_dir / f"{split}_filtered.csv")
        filtered[split] = result.dataset
    return filtered


def _print_table(frame: pd.DataFrame, title: str) -> None:
    table = Table(title=title, show_header=True, header_style="bold magenta")
    columns = [c for c in ("model", "status", "val_mse", "val_mre", "test_mse", "test_mre")
               if c in frame.columns]
    for column in columns:
        table.add_column(column)
    for _, row in frame.iterrows():
        table.add_row(*[f"{row[c]:.6g}" if isinstance(row[c], float) else str(row[c])
                        for c in columns])
    Console().print(table)


def cmd_benchmark(args, config: dict, out: Path) -> str:
    datasets = _benchmark_data(args, config, out)
    table = run_benchmark(_train_section(config), datasets, out, workers=thread_count(),
                          timing=args.timing)
    _print_table(table, "C_f prediction (MSE in (g/t)^2)")
    failed = int((table["status"] == "failed").sum())
    return f"benchmark of {len(table)} models ({failed} failed) written to {out / 'benchmark.csv'}"


def cmd_evaluate(args, config: dict, out: Path) -> str:
    predictor = load_checkpoint(args.checkpoint)
    result = evaluate(predictor, import_csv(args.input))
    metrics = result.metrics.to_dict()
    (out / "evaluation.json").write_text(json.dumps(metrics, indent=1))
    cf = metrics["C_f_conc"]
    return f"{predictor.kind}: C_f MSE {cf['mse']:.6g}, MRE {cf['mre']:.6g} on {metrics['n']} rows"


def _report_frame(directory: Path) -> pd.DataFrame:
    if (directory / "benchmark.csv").exists():
        return pd.read_csv(directory / "benchmark.csv")
    if (directory / "report.json").exists():
        report = json.loads((directory / "report.json").read_text())
        val, test = report["val_metrics"], report["test_metrics"]
        return pd.DataFrame([{
            "model": report["kind"], "status": "ok",
            "val_mse": val["C_f_conc"]["mse"], "val_mre": val["C_f_conc"]["mre"],
            "test_mse": test["C_f_conc"]["mse"], "test_mre": test["C_f_conc"]["mre"],
        }])
    raise UsageError(f"{directory} holds neither benchmark.csv nor report.json")


def cmd_report(args, config: dict, out: Path) -> str:
    frame = _report_frame(Path(args.input))
    _print_table(frame, "C_f prediction (MSE in (g/t)^2)")
    frame.to_csv(out / "report_summary.csv", index=False, float_format="%.17g")
    return f"{len(frame)} rows summarized in {out / 'report_summary.csv'}"


COMMANDS = {
    "simulate": cmd_simulate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "benchmark": cmd_benchmark,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(args.verbose)
    try:
        config = _resolve(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[args.command](args, config, out)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except FlotationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
