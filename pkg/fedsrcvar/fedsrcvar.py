import functools
import math
import sys
import time
from dataclasses import replace
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import fire  # type: ignore
import numpy as np
import pandas as pd  # type: ignore
from scipy.stats import spearmanr  # type: ignore
from tqdm import tqdm  # type: ignore

from .__init__ import __version__  # type: ignore
from .config import RunConfig, SweepGrid, load_run_config
from .datagen import (
    RANDOM_TEST_FOLD,
    Dataset,
    gen_planted_subgroup,
    load_csv,
    partition,
    split_by_fold,
    train_test_split,
)
from .errors import ConfigError, FedSRCVaRError
from .evaluation import MetricsRecord, evaluate
from .federation import ModelState, run_fedavg, run_fedsrcvar
from .persistor import (
    CONFIG_FILE,
    FRONTIER_FILE,
    METRICS_COLUMNS,
    Persistor,
    model_metadata,
)
from .utils import atomic_move, format_float, setup_logging
from .verify import PROPERTIES, VerifyHooks, run_properties

FRONTIER_COLUMNS = METRICS_COLUMNS + ["error"]
NEGATIVE_CONTROL_SCALE = 4.0


def load_datasets(config: RunConfig) -> Tuple[Dataset, Dataset]:
    """(train, test) as described by the dataset block"""
    block = config.dataset
    radius = config.model.feature_radius_R
    if block.source == "csv":
        data = load_csv(block.path, block.csv_schema(radius))
        test_fold = block.test_fold if block.fold_column else RANDOM_TEST_FOLD
        return split_by_fold(data, test_fold)
    data = gen_planted_subgroup(
        block.n,
        block.d,
        block.minority_frac,
        block.label_noise_minority,
        block.seed,
        minority_separation=block.minority_separation,
        feature_radius=radius,
    )
    return train_test_split(data, block.test_frac, block.seed)


def run_id_for(config: RunConfig) -> str:
    if config.output.run_id:
        return config.output.run_id
    objective = config.objective
    return (
        f"{config.federation.algorithm}-eps{format_float(objective.epsilon)}"
        f"-rho{format_float(objective.rho)}-seed{config.federation.seed}"
    )


def metrics_row(
    record: MetricsRecord,
    run_id: str,
    seed: Optional[int],
    final_c: Optional[float],
    rounds_T: Optional[int],
    tau: Optional[int],
    wall_time_s: float,
) -> Dict[str, Any]:
    row = record.as_dict()
    row.update(
        run_id=run_id,
        seed=seed,
        final_c=final_c,
        rounds_T=rounds_T,
        tau=tau,
        wall_time_s=wall_time_s,
    )
    return {column: row[column] for column in METRICS_COLUMNS}


def train_run(
    config: RunConfig, out_dir: Path, threads: int = 1, progress: bool = False
) -> Tuple[str, List[Dict[str, Any]]]:
    """Train one model, write its artifact directory and return the metrics rows"""
    spec = config.loss_spec()
    params = config.rcvar_params()
    federation = config.federation_config(threads)
    train, test = load_datasets(config)
    shards = partition(train, config.partition_plan())
    algorithm = config.federation.algorithm
    start = time.perf_counter()
    if algorithm == "fedavg":
        trace, state = run_fedavg(shards, federation, spec, progress=progress)
        epsilon = 1.0
    else:
        trace, state = run_fedsrcvar(shards, federation, params, spec, progress=progress)
        epsilon = params.epsilon
    wall = time.perf_counter() - start if config.output.record_wall_time else 0.0

    run_id = run_id_for(config)
    rows = []
    for split, data in (("train", train), ("test", test)):
        record = evaluate(state, data, params.rho, spec, epsilon=epsilon, split=split)
        rows.append(
            metrics_row(
                record,
                run_id,
                federation.seed,
                state.c,
                federation.num_rounds_T,
                federation.local_steps_tau,
                wall,
            )
        )

    with Persistor(out_dir) as persistor:
        stage = persistor.staging_dir(run_id)
        metadata = model_metadata(
            state.theta.size,
            spec,
            None if algorithm == "fedavg" else replace(params, gamma=trace.gamma),
            algorithm,
            run_id,
            federation.seed,
        )
        persistor.save_model(stage, state, metadata)
        persistor.save_config(stage, config.to_toml())
        atomic_move(stage, persistor.run_dir(run_id))
    return run_id, rows


def _sweep_cell(args) -> Tuple[List[Dict[str, Any]], Dict[str, Any]]:
    """One (epsilon, rho, seed) cell; failures become an error row"""
    config_text, out_dir, epsilon, rho, seed = args
    config = RunConfig.from_toml(config_text).with_objective(epsilon, rho).with_seed(seed)
    base = config.output.run_id or config.federation.algorithm
    config = replace(
        config,
        output=replace(
            config.output,
            run_id=f"{base}-eps{format_float(epsilon)}-rho{format_float(rho)}-seed{seed}",
        ),
    )
    try:
        _, rows = train_run(config, Path(out_dir))
    except FedSRCVaRError as e:
        row = {column: None for column in FRONTIER_COLUMNS}
        row.update(
            run_id=config.output.run_id, seed=seed, epsilon=epsilon, rho=rho, split="test"
        )
        row["error"] = str(e)
        return [], row
    frontier = dict(rows[-1], error="")
    return rows, frontier


def frontier_correlations(frontier: pd.DataFrame) -> List[Tuple[float, float, float, float]]:
    """Per rho: (rho, spearman(eps, utility), spearman(eps, worst), worst-risk spread),
    computed on seed-averaged values"""
    ok = frontier[frontier["error"].fillna("") == ""]
    ok = ok.astype({c: float for c in ("epsilon", "rho", "utility_risk", "worst_group_risk")})
    summary = []
    for rho, group in ok.groupby("rho"):
        means = group.groupby("epsilon")[["utility_risk", "worst_group_risk"]].mean()
        if len(means) < 2:
            summary.append((rho, math.nan, math.nan, 0.0))
            continue
        eps = means.index.to_numpy(dtype=float)
        utility = spearmanr(eps, means["utility_risk"])[0]
        worst = spearmanr(eps, means["worst_group_risk"])[0]
        spread = float(means["worst_group_risk"].max() - means["worst_group_risk"].min())
        summary.append((float(rho), float(utility), float(worst), spread))
    return summary


def _rho_list(rho: Any, default: float) -> List[float]:
    if rho is None:
        return [default]
    if isinstance(rho, str):
        return [float(v) for v in rho.split(",") if v.strip()]
    if isinstance(rho, (list, tuple)):
        return [float(v) for v in rho]
    return [float(rho)]


def _parse_hook(hook: Optional[str]) -> VerifyHooks:
    if not hook:
        return VerifyHooks()
    name, _, value = str(hook).partition("=")
    if name != "gamma_scale":
        raise ConfigError(f"unknown hook {name!r}, available: gamma_scale", "hook")
    return VerifyHooks(gamma_scale=float(value) if value else NEGATIVE_CONTROL_SCALE)


class FedSRCVaR:
    """FedSRCVaR CLI"""

    def train(self, config=None, out=None, threads=1, seed=None, verbose=False) -> int:
        """Train one model (FedSRCVaR or FedAvg, per config) and append its metrics"""
        setup_logging(verbose)
        try:
            run_config = load_run_config(config)
            if seed is not None:
                run_config = run_config.with_seed(int(seed))
            with Persistor(out or run_config.output.directory or None) as db:
                run_id, rows = train_run(run_config, db.out_dir, int(threads), progress=True)
                db.append_metrics(rows)
        except FedSRCVaRError as e:
            print(f"Error: {e}")
            return 1
        print(f"Saved model to {db.run_dir(run_id)}")
        for row in rows:
            print(
                f"{row['split']:>5}: utility {row['utility_risk']:.6f}"
                f"  worst {row['worst_group_risk']:.6f}  best {row['best_group_risk']:.6f}"
                f"  c {row['final_c']:.6f}"
            )
        return 0

    def eval(self, model=None, config=None, rho=None, out=None, uniform=False, verbose=False):
        """Evaluate a saved model (or the uniform classifier) on both splits for each rho"""
        setup_logging(verbose)
        try:
            if model is None and not uniform:
                raise ConfigError("a model directory is required unless --uniform is set", "model")
            if config is None and model is not None:
                config = Path(model) / CONFIG_FILE
            run_config = load_run_config(config)
            spec = run_config.loss_spec()
            if uniform:
                state, metadata = None, {"run_id": "uniform", "seed": None, "rcvar_params": None}
            else:
                state, metadata = Persistor.load_model(model)
            params = metadata.get("rcvar_params") or {}
            epsilon = params.get("epsilon", 1.0 if not uniform else None)
            train, test = load_datasets(run_config)
            rows = []
            for level in _rho_list(rho, run_config.objective.rho):
                for split, data in (("train", train), ("test", test)):
                    record = evaluate(
                        state or ModelState(np.zeros(0)),
                        data,
                        level,
                        spec,
                        epsilon=epsilon,
                        split=split,
                        uniform=bool(uniform),
                    )
                    rows.append(
                        metrics_row(
                            record,
                            metadata["run_id"],
                            metadata.get("seed"),
                            None if state is None else state.c,
                            None if uniform else run_config.federation.num_rounds_T,
                            None if uniform else run_config.federation.local_steps_tau,
                            0.0,
                        )
                    )
            with Persistor(out or run_config.output.directory or None) as db:
                db.append_metrics(rows)
        except FedSRCVaRError as e:
            print(f"Error: {e}")
            return 1
        for row in rows:
            print(
                f"rho {row['rho']:g} {row['split']:>5}: utility {row['utility_risk']:.6f}"
                f"  worst {row['worst_group_risk']:.6f}  disparity {row['disparity']:.6f}"
            )
        return 0

    def sweep(self, config=None, grid=None, out=None, threads=1, verbose=False) -> int:
        """Train one model per (epsilon, rho, seed) cell and write the frontier table"""
        setup_logging(verbose)
        try:
            run_config = load_run_config(config)
            sweep_grid = SweepGrid.from_file(grid) if grid else SweepGrid()
            db = Persistor(out or run_config.output.directory or None)
        except FedSRCVaRError as e:
            print(f"Error: {e}")
            return 1
        text = run_config.to_toml()
        args = [(text, str(db.out_dir), e, r, s) for e, r, s in sweep_grid.cells()]
        n_cores = int(threads)
        print(f"Sweeping {len(args)} cells using {n_cores} process/es...")
        results = []
        with tqdm(total=len(args)) as t:
            if n_cores > 1:
                with Pool(processes=n_cores) as pool:
                    for result in pool.imap(_sweep_cell, args):
                        results.append(result)
                        t.update(1)
            else:
                for cell in args:
                    results.append(_sweep_cell(cell))
                    t.update(1)
        metrics = [row for rows, _ in results for row in rows]
        if metrics:
            db.append_metrics(metrics)
        frontier_path = db.out_dir / FRONTIER_FILE
        if frontier_path.exists():
            frontier_path.unlink()
        db.append_rows(frontier_path, [row for _, row in results], FRONTIER_COLUMNS)
        frontier = pd.DataFrame([row for _, row in results], columns=FRONTIER_COLUMNS)
        failed = int((frontier["error"].fillna("") != "").sum())
        print(f"Wrote {len(frontier)} rows to {frontier_path} ({failed} failed)")
        for rho, utility, worst, spread in frontier_correlations(frontier):
            print(
                f"rho {rho:g}: spearman(eps, utility) {utility:+.3f}"
                f"  spearman(eps, worst) {worst:+.3f}  worst spread {spread:.4f}"
            )
        return 1 if failed else 0

    def verify(self, hook=None, seed=0, verbose=False) -> int:
        """Run the property suite; nonzero exit if any property fails"""
        setup_logging(verbose)
        try:
            hooks = _parse_hook(hook)
        except FedSRCVaRError as e:
            print(f"Error: {e}")
            return 1
        print(f"{'property':<30} {'samples':>8} {'worst margin':>14} {'seconds':>8}  status")

        def report(result):
            status = "ok" if result.passed else "FAILED"
            print(
                f"{result.name:<30} {result.samples:>8} {result.worst_margin:>14.3e}"
                f" {result.seconds:>8.2f}  {status}"
            )

        results = run_properties(hooks, seed=int(seed), on_result=report)
        failed = [r.name for r in results if not r.passed]
        print(f"{len(results) - len(failed)}/{len(PROPERTIES)} properties hold")
        if failed:
            print("Failed:", ", ".join(failed))
            return 1
        return 0


def help():
    """Get some help on how to use fedsrcvar"""
    print(
        """
    Train:     fedsrcvar train --config run.toml [--out DIR] [--threads N] [--seed S]
    Sweep:     fedsrcvar sweep --config run.toml --grid grid.toml [--threads N]
    Evaluate:  fedsrcvar eval --model DIR [--rho 0.1,0.5] [--uniform]
    Verify:    fedsrcvar verify [--hook gamma_scale=4]
    Output goes to --out, else output.directory, else $FEDSRCVAR_OUT,
    else ~/.config/fedsrcvar/runs
    Print available CLI flags for all commands: fedsrcvar command --help
    """
    )


def _exit_status(command):
    @functools.wraps(command)
    def run(*args, **kwargs):
        status = command(*args, **kwargs)
        if status:
            sys.exit(status)

    return run


def main():
    cli = FedSRCVaR()
    fire_cli = {
        "help": help,
        "version": __version__,
        "train": _exit_status(cli.train),
        "sweep": _exit_status(cli.sweep),
        "eval": _exit_status(cli.eval),
        "verify": _exit_status(cli.verify),
    }
    fire.Fire(fire_cli)


if __name__ == "__main__":
    main()
