import json

import numpy as np
import pytest

from fedsrcvar.errors import DataError
from fedsrcvar.federation import ModelState
from fedsrcvar.model import BoundedLossSpec
from fedsrcvar.objective import RcvarParams
from fedsrcvar.persistor import (
    METADATA_FILE,
    METRICS_COLUMNS,
    MODEL_FILE,
    Persistor,
    default_output_dir,
    model_metadata,
    read_table,
)
from fedsrcvar.utils import atomic_move


def _metadata(dimension=3):
    return model_metadata(dimension, BoundedLossSpec(), RcvarParams(), "fedsrcvar", "run", 0)


def test_model_round_trip(tmp_path):
    state = ModelState(np.array([0.1, -2.5, 1e-300]), 0.375)
    Persistor.save_model(tmp_path, state, _metadata())
    loaded, metadata = Persistor.load_model(tmp_path)
    np.testing.assert_array_equal(loaded.theta, state.theta)
    assert loaded.c == state.c
    assert metadata["dimension"] == 3
    assert metadata["loss_spec"]["kind"] == "scaled_logistic"
    assert metadata["rcvar_params"]["smooth_kind"] == "soft_relu"
    assert (tmp_path / MODEL_FILE).stat().st_size == 4 * 8


def test_artifacts_are_byte_identical(tmp_path):
    state = ModelState(np.array([0.25, 0.5]), 0.125)
    for name in ("a", "b"):
        Persistor.save_model(tmp_path / name, state, _metadata(2))
    for name in (MODEL_FILE, METADATA_FILE):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    text = (tmp_path / "a" / METADATA_FILE).read_text()
    assert list(json.loads(text)) == sorted(json.loads(text))


def test_load_model_errors(tmp_path):
    with pytest.raises(DataError):
        Persistor.load_model(tmp_path)
    Persistor.save_model(tmp_path, ModelState(np.zeros(3)), _metadata(5))
    with pytest.raises(DataError):
        Persistor.load_model(tmp_path)


def test_metrics_append_once_with_header(tmp_path):
    db = Persistor(tmp_path)
    row = {column: None for column in METRICS_COLUMNS}
    row.update(run_id="r", seed=1, epsilon=0.1, rho=0.2, split="test", utility_risk=0.5)
    db.append_metrics([row])
    db.append_metrics([dict(row, seed=2)])
    lines = db.metrics_path.read_text().splitlines()
    assert lines[0] == ",".join(METRICS_COLUMNS)
    assert len(lines) == 3
    table = read_table(db.metrics_path)
    assert list(table.columns) == METRICS_COLUMNS
    assert table["seed"].tolist() == [1, 2]
    assert table["utility_risk"].tolist() == [0.5, 0.5]


def test_output_directory(tmp_path, monkeypatch):
    monkeypatch.setenv("FEDSRCVAR_OUT", str(tmp_path / "env"))
    assert default_output_dir() == tmp_path / "env"
    with Persistor() as db:
        assert db.out_dir == tmp_path / "env"
        assert db.out_dir.is_dir()
    monkeypatch.delenv("FEDSRCVAR_OUT")
    assert default_output_dir().parts[-3:] == (".config", "fedsrcvar", "runs")


def test_staging_dirs_are_private(tmp_path):
    db = Persistor(tmp_path)
    first, second = db.staging_dir("run"), db.staging_dir("run")
    assert first != second
    assert first.parent == tmp_path
    assert db.run_dir("run") == tmp_path / "run"


def test_close_removes_unfinished_stages(tmp_path):
    with Persistor(tmp_path) as db:
        abandoned = db.staging_dir("lost")
        (abandoned / "model.bin").write_bytes(b"partial")
        finished = db.staging_dir("kept")
        atomic_move(finished, db.run_dir("kept"))
    assert not abandoned.exists()
    assert db.run_dir("kept").is_dir()
    assert [p.name for p in tmp_path.iterdir()] == ["kept"]
