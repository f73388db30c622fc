"""
Utility functions for the zero-shot intent pipeline
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from src.exceptions import FormatError

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(log_file: str = "zintent.log", level=logging.INFO):
    """Log to `log_file` and the console; repeated calls replace the handlers"""
    Path(log_file).parent.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=[logging.FileHandler(log_file), logging.StreamHandler()],
        force=True,
    )
    return logging.getLogger("zintent")


def save_json(data: Dict, filepath: str):
    """Write `data` with sorted keys so equal inputs give equal bytes"""
    Path(filepath).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_json(filepath: str) -> Dict:
    try:
        return json.loads(Path(filepath).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{filepath} is not valid JSON: {e}") from e


def create_dirs(dirs: List[str]):
    for dir_path in dirs:
        Path(dir_path).mkdir(parents=True, exist_ok=True)


def format_time(seconds: float) -> str:
    """Format seconds as e.g. `1h 2m 3s`, `4m 5s` or `6s`"""
    minutes, secs = divmod(int(seconds), 60)
    hours, minutes = divmod(minutes, 60)
    if hours:
        return f"{hours}h {minutes}m {secs}s"
    if minutes:
        return f"{minutes}m {secs}s"
    return f"{secs}s"


class MetricsTracker:
    """
    Per-epoch training metrics, one dict per epoch, saved as CSV

    With `csv_path` every row is appended to the file as it is added, so an
    interrupted run keeps the epochs it finished.
    """

    def __init__(self, csv_path: Optional[str] = None):
        self.rows: List[Dict] = []
        self.csv_path = csv_path

    def add_row(self, **values) -> Dict:
        self.rows.append(dict(values))
        if self.csv_path is not None:
            first = len(self.rows) == 1
            if first:
                Path(self.csv_path).parent.mkdir(parents=True, exist_ok=True)
            pd.DataFrame([self.rows[-1]]).to_csv(self.csv_path, index=False, header=first,
                                                 mode="w" if first else "a")
        return self.rows[-1]

    def column(self, name: str) -> List:
        return [row[name] for row in self.rows]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def save_csv(self, filepath: str):
        Path(filepath).parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(filepath, index=False)

    @staticmethod
    def format_row(row: Dict) -> str:
        return " ".join(f"{key}={value:.4f}" if isinstance(value, float) else f"{key}={value}"
                        for key, value in row.items())
