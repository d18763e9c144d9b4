"""Run directories: config, genotype history, metrics and side artifacts."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from .errors import DataError
from .genotypes import Genotype

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
METRICS_COLUMNS = ["epoch", "search_loss", "eval_val_acc", "eval_test_acc", "wall_time"]
CONFIG_FILE = "config.json"
FINAL_GENOTYPE_FILE = "genotype_final.json"
CHECKPOINT_DIR = "checkpoint"


class RunRecord:
    """One search or retrain run persisted under ``path``."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._rows: List[Dict[str, Any]] = []

    @classmethod
    def create(cls, path: Path) -> "RunRecord":
        record = cls(path)
        record.path.mkdir(parents=True, exist_ok=True)
        return record

    def file(self, name: str) -> Path:
        return self.path / name

    def write_json(self, name: str, data: Any) -> Path:
        target = self.file(name)
        target.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return target

    def read_json(self, name: str) -> Any:
        target = self.file(name)
        if not target.exists():
            raise DataError(f"{target} not found")
        try:
            return json.loads(target.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{target} is not valid JSON: {exc}") from exc

    def write_config(self, config: Dict[str, Any]) -> Path:
        return self.write_json(CONFIG_FILE, config)

    def write_genotype(self, genotype: Genotype, epoch: Optional[int] = None) -> Path:
        name = FINAL_GENOTYPE_FILE if epoch is None else f"genotype_epoch_{epoch}.json"
        return genotype.save(self.file(name))

    def final_genotype(self) -> Genotype:
        return Genotype.load(self.file(FINAL_GENOTYPE_FILE))

    def append_metrics(self, row: Dict[str, Any]) -> None:
        self._rows.append({column: row.get(column) for column in METRICS_COLUMNS})
        pd.DataFrame(self._rows, columns=METRICS_COLUMNS).to_csv(self.file(METRICS_FILE), index=False)

    def metrics(self) -> pd.DataFrame:
        target = self.file(METRICS_FILE)
        if not target.exists():
            raise DataError(f"{target} not found")
        frame = pd.read_csv(target)
        missing = set(METRICS_COLUMNS) - set(frame.columns)
        if missing:
            raise DataError(f"{target} lacks columns {sorted(missing)}")
        return frame

    @property
    def checkpoint_dir(self) -> Path:
        return self.file(CHECKPOINT_DIR)

    def __repr__(self) -> str:
        return f"RunRecord({self.path})"
