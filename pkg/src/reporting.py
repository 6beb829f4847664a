"""
Result writers shared by the engines
JSON results, JSON-lines history and hash-stamped CSV tables
"""

import json
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import pandas as pd

FLOAT_FORMAT = "%.6f"


def _jsonable(value: Any) -> Any:
    if is_dataclass(value) and not isinstance(value, type):
        return _jsonable(asdict(value))
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    return value


def save_results(result: Any, output_path: Union[str, Path]):
    path = Path(output_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_jsonable(result), f, indent=2, ensure_ascii=False)
    print(f"\n✓ Results saved to {path}")


def load_results(path: Union[str, Path]) -> Dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def append_jsonl(record: Any, path: Union[str, Path]):
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")


def read_jsonl(path: Union[str, Path]) -> list:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_csv(frame: pd.DataFrame, path: Union[str, Path], config_hash: str) -> Path:
    """UTF-8 CSV whose first line is `# config_hash=<hash>`; floats fixed at 6 decimals"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# config_hash={config_hash}\n")
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def read_csv(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def csv_config_hash(path: Union[str, Path]) -> str:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().strip()
    if not first.startswith("# config_hash="):
        raise ValueError(f"{path} has no config hash header")
    return first.split("=", 1)[1]
