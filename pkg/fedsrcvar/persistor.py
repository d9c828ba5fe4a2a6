import json
import os
import tempfile
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd  # type: ignore

from .errors import DataError
from .federation import ModelState
from .model import BoundedLossSpec
from .objective import RcvarParams
from .utils import git_describe, remove_dir

MODEL_FILE = "model.bin"
METADATA_FILE = "model.json"
CONFIG_FILE = "config.toml"
METRICS_FILE = "metrics.csv"
FRONTIER_FILE = "frontier.csv"
METRICS_COLUMNS = [
    "run_id",
    "seed",
    "epsilon",
    "rho",
    "split",
    "utility_risk",
    "worst_group_risk",
    "best_group_risk",
    "disparity",
    "quantile_c",
    "final_c",
    "rounds_T",
    "tau",
    "wall_time_s",
]
WEIGHT_DTYPE = "<f8"


def default_output_dir() -> Path:
    env = os.environ.get("FEDSRCVAR_OUT")
    if env:
        return Path(env)
    return Path.home() / ".config/fedsrcvar/runs"


def _write_atomic(path: Path, payload: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _plain(value: Any) -> Any:
    # enums are str subclasses; json wants the bare value
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, str):
        return str(value.value) if hasattr(value, "value") else value
    return value


def model_metadata(
    dimension: int,
    spec: BoundedLossSpec,
    params: Optional[RcvarParams],
    algorithm: str,
    run_id: str,
    seed: int,
) -> Dict[str, Any]:
    return {
        "dimension": dimension,
        "loss_spec": _plain(asdict(spec)),
        "rcvar_params": None if params is None else _plain(asdict(params)),
        "algorithm": algorithm,
        "run_id": run_id,
        "seed": seed,
        "build": git_describe(),
    }


class Persistor:
    """On-disk state of runs: model artifacts and the append-only metrics table"""

    def __init__(self, out_dir: Optional[Union[str, Path]] = None):
        self.out_dir = Path(out_dir) if out_dir else default_output_dir()
        os.makedirs(self.out_dir, exist_ok=True)
        self.metrics_path = self.out_dir / METRICS_FILE
        self._stages: List[Path] = []

    def close(self):
        """Remove staging directories that were never moved into place"""
        for stage in self._stages:
            remove_dir(stage)
        self._stages.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    def run_dir(self, run_id: str) -> Path:
        return self.out_dir / run_id

    def staging_dir(self, run_id: str) -> Path:
        """Private directory a run writes into before it is moved into place"""
        stage = Path(tempfile.mkdtemp(dir=self.out_dir, prefix=f".stage-{run_id}-"))
        self._stages.append(stage)
        return stage

    @staticmethod
    def save_model(directory: Union[str, Path], state: ModelState, metadata: Dict[str, Any]):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        flat = np.append(np.asarray(state.theta, dtype=WEIGHT_DTYPE), state.c).astype(WEIGHT_DTYPE)
        _write_atomic(directory / MODEL_FILE, flat.tobytes())
        text = json.dumps(metadata, sort_keys=True, indent=2) + "\n"
        _write_atomic(directory / METADATA_FILE, text.encode("utf-8"))

    @staticmethod
    def load_model(directory: Union[str, Path]) -> Tuple[ModelState, Dict[str, Any]]:
        directory = Path(directory)
        try:
            metadata = json.loads((directory / METADATA_FILE).read_text(encoding="utf-8"))
            flat = np.frombuffer((directory / MODEL_FILE).read_bytes(), dtype=WEIGHT_DTYPE)
        except FileNotFoundError as e:
            raise DataError(f"incomplete model artifact: {e.filename}")
        except json.JSONDecodeError as e:
            raise DataError(f"{directory / METADATA_FILE}: {e}")
        if flat.size != metadata.get("dimension", -1) + 1:
            raise DataError(
                f"{directory / MODEL_FILE} holds {flat.size} values, "
                f"expected dimension {metadata.get('dimension')} + 1"
            )
        return ModelState(flat[:-1].astype(float), float(flat[-1])), metadata

    @staticmethod
    def save_config(directory: Union[str, Path], toml_text: str):
        _write_atomic(Path(directory) / CONFIG_FILE, toml_text.encode("utf-8"))

    @staticmethod
    def append_rows(path: Union[str, Path], rows: List[Dict[str, Any]], columns: List[str]):
        """Append rows with a fixed column order; the header is written once"""
        path = Path(path)
        frame = pd.DataFrame(rows, columns=columns)
        frame.to_csv(path, mode="a", header=not path.exists(), index=False)

    def append_metrics(self, rows: List[Dict[str, Any]]):
        self.append_rows(self.metrics_path, rows, METRICS_COLUMNS)


def read_table(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, keep_default_na=False, na_values=[""])
