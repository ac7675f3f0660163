import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

log = logging.getLogger("KernBal.Reporting")

FLOAT_FORMAT = "%.17g"
CONFIG_PREFIX = "# kernbal-config: "
BALANCE_COLUMNS = [
    "kind", "name", "mean_treated", "mean_control_unweighted", "mean_control_weighted",
    "tasmd_before", "tasmd_after", "imbalance", "delta",
]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if hasattr(obj, "value") and not isinstance(obj, (int, float, str)):
        return obj.value        # Enum
    return obj


def read_config_line(path) -> Dict[str, Any]:
    """Resolved configuration embedded in the first line of a CSV written here."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if not first.startswith(CONFIG_PREFIX):
        return {}
    return json.loads(first[len(CONFIG_PREFIX):])


class ReportingService:
    """
    Запись артефактов прогона: CSV (17 значащих цифр, в первой строке
    конфигурация) и JSON-отчёты, плюс сводки в лог через pandas.
    """

    def __init__(self, out_dir, config: Optional[Dict[str, Any]] = None):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.config = _jsonable(config or {})

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write_csv(self, df: pd.DataFrame, name: str) -> Path:
        path = self.path(name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(CONFIG_PREFIX + json.dumps(self.config, sort_keys=True) + "\n")
            df.to_csv(fh, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        log.info(f"[Reporting] 📄 {path} ({len(df)} rows)")
        return path

    def write_json(self, payload: Dict[str, Any], name: str) -> Path:
        path = self.path(name)
        body = {"config": self.config, **_jsonable(payload)}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(body, fh, indent=2, sort_keys=True)
            fh.write("\n")
        log.info(f"[Reporting] 📄 {path}")
        return path

    def write_weights(self, control_rows, w, name: str = "weights.csv") -> Path:
        df = pd.DataFrame({"row_index": np.asarray(control_rows, dtype=np.int64),
                           "weight": np.asarray(w, dtype=np.float64)})
        return self.write_csv(df, name)

    def write_balance(self, covariates: pd.DataFrame, basis: pd.DataFrame, name: str = "balance.csv") -> Path:
        """Одна таблица: строки kind=covariate (TASMD), затем kind=basis (|Σw·D_c − D̄_t| и δ)."""
        frames = [covariates.rename(columns={"covariate": "name"}).assign(kind="covariate")]
        if len(basis):
            frames.append(basis.assign(kind="basis"))
        df = pd.concat(frames, ignore_index=True).reindex(columns=BALANCE_COLUMNS)
        return self.write_csv(df, name)

    @staticmethod
    def summary_table(df: pd.DataFrame, title: str) -> str:
        report = f"\n📊 --- {title} --- 📊\n"
        report += df.to_string(index=False)
        return report

    def log_summary(self, df: pd.DataFrame, title: str):
        log.info(self.summary_table(df, title))


def read_csv(path) -> pd.DataFrame:
    """User or kernbal CSV; only a leading config line is skipped, `#` in data is kept."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    return pd.read_csv(path, skiprows=1 if first.startswith(CONFIG_PREFIX) else None)
