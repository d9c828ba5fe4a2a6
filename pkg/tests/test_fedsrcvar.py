import math

import pytest

from fedsrcvar.fedsrcvar import FedSRCVaR, _exit_status, _rho_list, frontier_correlations
from fedsrcvar.model import BoundedLossSpec
from fedsrcvar.persistor import CONFIG_FILE, METADATA_FILE, METRICS_FILE, MODEL_FILE, read_table

CONFIG = """
dataset.n = 300
dataset.d = 3
partition.num_clients = 2
federation.num_rounds_T = 20
federation.learning_rate_eta = 0.2
federation.per_client_batch_b = 50
output.record_wall_time = false
"""
RUN_ID = "fedsrcvar-eps0.1-rho0.2-seed0"


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(CONFIG)
    return path


def _train(config_path, out, **kwargs):
    assert FedSRCVaR().train(config=str(config_path), out=str(out), **kwargs) == 0
    return out / RUN_ID


def test_train_writes_artifacts(config_path, tmp_path):
    run_dir = _train(config_path, tmp_path / "out")
    for name in (MODEL_FILE, METADATA_FILE, CONFIG_FILE):
        assert (run_dir / name).is_file()
    metrics = read_table(tmp_path / "out" / METRICS_FILE)
    assert metrics["split"].tolist() == ["train", "test"]
    assert metrics["run_id"].tolist() == [RUN_ID, RUN_ID]
    assert (metrics["final_c"] >= 0.0).all() and (metrics["final_c"] <= 1.0).all()
    assert (metrics["best_group_risk"] <= metrics["worst_group_risk"]).all()


def test_train_is_reproducible(config_path, tmp_path):
    first = _train(config_path, tmp_path / "a")
    second = _train(config_path, tmp_path / "b", threads=3)
    for name in (MODEL_FILE, METADATA_FILE, CONFIG_FILE):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    assert (tmp_path / "a" / METRICS_FILE).read_bytes() == (
        tmp_path / "b" / METRICS_FILE
    ).read_bytes()


def test_train_seed_override(config_path, tmp_path):
    assert FedSRCVaR().train(config=str(config_path), out=str(tmp_path), seed=5) == 0
    assert (tmp_path / "fedsrcvar-eps0.1-rho0.2-seed5" / MODEL_FILE).is_file()


def test_train_rejects_bad_config(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text("objective.rho = 1.5\n")
    assert FedSRCVaR().train(config=str(path), out=str(tmp_path)) == 1
    assert "objective.rho" in capsys.readouterr().out
    assert not (tmp_path / METRICS_FILE).exists()


def test_fedavg_run(tmp_path):
    path = tmp_path / "fedavg.toml"
    path.write_text(CONFIG + 'federation.algorithm = "fedavg"\n')
    assert FedSRCVaR().train(config=str(path), out=str(tmp_path)) == 0
    metrics = read_table(tmp_path / METRICS_FILE)
    assert metrics["epsilon"].tolist() == [1.0, 1.0]
    assert (metrics["final_c"] == 1.0).all()


def test_eval_reproduces_training_metrics(config_path, tmp_path):
    run_dir = _train(config_path, tmp_path / "train")
    assert FedSRCVaR().eval(model=str(run_dir), out=str(tmp_path / "eval")) == 0
    trained = read_table(tmp_path / "train" / METRICS_FILE)
    evaluated = read_table(tmp_path / "eval" / METRICS_FILE)
    columns = ["utility_risk", "worst_group_risk", "best_group_risk", "disparity", "quantile_c"]
    assert evaluated[columns].values.tolist() == trained[columns].values.tolist()


def test_eval_several_levels(config_path, tmp_path):
    run_dir = _train(config_path, tmp_path)
    assert FedSRCVaR().eval(model=str(run_dir), rho="0.1,0.5", out=str(tmp_path / "e")) == 0
    evaluated = read_table(tmp_path / "e" / METRICS_FILE)
    assert evaluated["rho"].tolist() == [0.1, 0.1, 0.5, 0.5]


def test_eval_uniform(config_path, tmp_path):
    assert FedSRCVaR().eval(config=str(config_path), uniform=True, out=str(tmp_path)) == 0
    evaluated = read_table(tmp_path / METRICS_FILE)
    expected = math.log(2.0) / BoundedLossSpec().loss_sup
    for column in ("utility_risk", "worst_group_risk", "best_group_risk"):
        assert evaluated[column].tolist() == pytest.approx([expected, expected])


def test_eval_dimension_mismatch(config_path, tmp_path):
    run_dir = _train(config_path, tmp_path)
    other = tmp_path / "other.toml"
    other.write_text(CONFIG.replace("dataset.d = 3", "dataset.d = 4"))
    assert FedSRCVaR().eval(model=str(run_dir), config=str(other), out=str(tmp_path)) == 1
    assert FedSRCVaR().eval(out=str(tmp_path)) == 1
    assert FedSRCVaR().eval(model=str(tmp_path / "absent"), out=str(tmp_path)) == 1


def test_sweep_writes_frontier(config_path, tmp_path):
    grid = tmp_path / "grid.toml"
    grid.write_text("grid.epsilon = [0.1, 1.0]\ngrid.rho = [0.2]\ngrid.seeds = [0, 1]\n")
    out = tmp_path / "sweep"
    assert FedSRCVaR().sweep(config=str(config_path), grid=str(grid), out=str(out)) == 0
    frontier = read_table(out / "frontier.csv")
    assert len(frontier) == 4
    assert frontier["error"].isna().all()
    assert sorted(frontier["seed"].tolist()) == [0, 0, 1, 1]
    assert len(read_table(out / METRICS_FILE)) == 8
    assert (out / "fedsrcvar-eps1-rho0.2-seed1" / MODEL_FILE).is_file()
    assert not [p for p in out.iterdir() if p.name.startswith(".stage-")]
    ((rho, utility, worst, spread),) = frontier_correlations(frontier)
    assert rho == 0.2
    assert -1.0 <= utility <= 1.0 and -1.0 <= worst <= 1.0
    assert spread >= 0.0


def test_sweep_rejects_bad_grid(config_path, tmp_path):
    grid = tmp_path / "grid.toml"
    grid.write_text("grid.rho = [1.5]\n")
    assert FedSRCVaR().sweep(config=str(config_path), grid=str(grid), out=str(tmp_path)) == 1


def test_rho_list():
    assert _rho_list(None, 0.2) == [0.2]
    assert _rho_list("0.1,0.5", 0.2) == [0.1, 0.5]
    assert _rho_list((0.1, 0.5), 0.2) == [0.1, 0.5]
    assert _rho_list(0.3, 0.2) == [0.3]


def test_exit_status():
    with pytest.raises(SystemExit) as e:
        _exit_status(lambda: 1)()
    assert e.value.code == 1
    assert _exit_status(lambda: 0)() is None


def test_verify_unknown_hook(capsys):
    assert FedSRCVaR().verify(hook="sigma_scale") == 1
    assert "unknown hook" in capsys.readouterr().out


@pytest.mark.slow
def test_verify_negative_control(capsys):
    assert FedSRCVaR().verify(hook="gamma_scale=4") == 1
    out = capsys.readouterr().out
    assert "smooth_sandwich" in out and "FAILED" in out
