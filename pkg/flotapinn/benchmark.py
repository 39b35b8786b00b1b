"""
Comparison of all seven model kinds on identical splits.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from .dataset import Dataset
from .errors import FlotationError
from .train import MODEL_KINDS, TrainConfig, train_model, write_run

logger = logging.getLogger(__name__)

TABLE_COLUMNS = [
    "model", "status", "val_mse", "val_mre", "test_mse", "test_mre",
    "val_mse_u", "test_mse_u", "test_mse_C_p", "test_mre_C_p", "best_step", "error",
]


def _row(kind: str, report=None, error: str = "") -> dict:
    if report is None:
        row = {c: np.nan for c in TABLE_COLUMNS}
        row.update(model=kind, status="failed", best_step=-1, error=error)
        return row
    val, test = report.val_metrics, report.test_metrics
    return {
        "model": kind, "status": "ok",
        "val_mse": val["C_f_conc"]["mse"], "val_mre": val["C_f_conc"]["mre"],
        "test_mse": test["C_f_conc"]["mse"], "test_mre": test["C_f_conc"]["mre"],
        "val_mse_u": val["mse_u"], "test_mse_u": test["mse_u"],
        "test_mse_C_p": test["C_p_tail"]["mse"], "test_mre_C_p": test["C_p_tail"]["mre"],
        "best_step": report.best_step, "error": "",
    }


def run_member(kind: str, train_section: dict, datasets: dict[str, Dataset],
               out_dir: Path | None, timing: bool = False, workers: int = 1) -> dict:
    """Train one model kind; any failure becomes a ``failed`` row."""
    try:
        config = TrainConfig.from_dict({**train_section, "kind": kind, "workers": workers})
        report, predictor = train_model(config, datasets)
        if out_dir is not None:
            write_run(report, predictor, out_dir / kind, timing)
        return _row(kind, report)
    except FlotationError as e:
        logger.error("%s run failed: %s", kind, e)
        return _row(kind, error=str(e))
    except Exception as e:
        logger.exception("%s run crashed", kind)
        return _row(kind, error=f"{type(e).__name__}: {e}")


def run_benchmark(train_section: dict, datasets: dict[str, Dataset], out_dir: str | Path | None = None,
                  kinds: list[str] | None = None, workers: int = 1, timing: bool = False) -> pd.DataFrame:
    """Train every kind and return the comparison table, one row per kind.

    Member runs execute on up to ``workers`` threads; rows are assembled in
    the order of ``kinds`` so the table does not depend on scheduling.
    Headline metrics are for C_f.
    """
    kinds = list(MODEL_KINDS if kinds is None else kinds)
    runs_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        runs_dir = out_dir / "runs"
        runs_dir.mkdir(parents=True, exist_ok=True)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_member, k, train_section, datasets, runs_dir, timing)
                       for k in kinds]
            rows = [f.result() for f in futures]
    else:
        rows = [run_member(k, train_section, datasets, runs_dir, timing) for k in kinds]

    table = pd.DataFrame(rows, columns=TABLE_COLUMNS)
    if out_dir is not None:
        table.to_csv(out_dir / "benchmark.csv", index=False, float_format="%.17g")
        table.to_json(out_dir / "benchmark.json", orient="records", indent=1, double_precision=15)
    failed = int((table["status"] == "failed").sum())
    logger.info("Benchmark finished: %d of %d runs succeeded", len(table) - failed, len(table))
    return table
