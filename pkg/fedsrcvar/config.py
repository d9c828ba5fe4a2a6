"""Run configuration: flat TOML documents of `block.key = value` lines.

Every block is a typed dataclass. Parsing rejects unknown keys and re-checks each value by
building the objects the owning module validates, so errors name the offending key path.
"""
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import tomli
import tomli_w

from .datagen import CsvSchema, PartitionPlan
from .errors import ConfigError, ParameterError
from .federation import FederationConfig
from .model import BoundedLossSpec
from .objective import RcvarParams

ALGORITHMS = ("fedsrcvar", "fedavg")
SOURCES = ("planted", "csv")


@dataclass
class DatasetBlock:
    source: str = "planted"
    n: int = 2000
    d: int = 5
    minority_frac: float = 0.2
    label_noise_minority: float = 0.3
    minority_separation: float = 1.0
    seed: int = 0
    test_frac: float = 0.3
    # csv source only; "" and -1 mean unset
    path: str = ""
    label_column: str = ""
    feature_columns: List[str] = field(default_factory=list)
    fold_column: str = ""
    test_fold: int = -1
    positive_label: str = ""

    def validate(self):
        if self.source not in SOURCES:
            raise ConfigError(f"must be one of {SOURCES}, got {self.source!r}", "dataset.source")
        if self.source == "csv":
            for key in ("path", "label_column"):
                if not getattr(self, key):
                    raise ConfigError("required for csv datasets", f"dataset.{key}")
            if not self.feature_columns:
                raise ConfigError("required for csv datasets", "dataset.feature_columns")
            if self.fold_column and self.test_fold < 0:
                raise ConfigError("required with dataset.fold_column", "dataset.test_fold")
        else:
            if self.n < 2:
                raise ConfigError("must be at least 2", "dataset.n")
            if self.d < 2:
                raise ConfigError("must be at least 2", "dataset.d")
            if not 0.0 < self.minority_frac < 1.0:
                raise ConfigError("must lie in (0, 1)", "dataset.minority_frac")
            if not 0.0 <= self.label_noise_minority <= 0.5:
                raise ConfigError("must lie in [0, 0.5]", "dataset.label_noise_minority")
        if not self.fold_column and not 0.0 < self.test_frac < 1.0:
            raise ConfigError("must lie in (0, 1)", "dataset.test_frac")

    def csv_schema(self, feature_radius: float) -> CsvSchema:
        return CsvSchema(
            label_column=self.label_column,
            feature_columns=list(self.feature_columns),
            fold_column=self.fold_column or None,
            test_fold=self.test_fold if self.test_fold >= 0 else None,
            positive_label=self.positive_label or None,
            feature_radius=feature_radius,
            test_frac=None if self.fold_column else self.test_frac,
            split_seed=self.seed,
        )


@dataclass
class PartitionBlock:
    strategy: str = "even"
    num_clients: int = 4
    alpha: float = 0.5
    seed: int = 0


@dataclass
class ModelBlock:
    kind: str = "scaled_logistic"
    feature_radius_R: float = 1.0
    domain_radius_M: float = 10.0
    fit_bias: bool = True
    label_bound: float = 1.0


@dataclass
class ObjectiveBlock:
    epsilon: float = 0.1
    rho: float = 0.2
    gamma: float = 0.05
    smooth_kind: str = "soft_relu"


@dataclass
class FederationBlock:
    algorithm: str = "fedsrcvar"
    num_rounds_T: int = 1000
    local_steps_tau: int = 1
    learning_rate_eta: float = 0.1
    eta_mode: str = "fixed"
    # 0 means full local batches; a table maps client id to its batch size
    per_client_batch_b: Union[int, Dict[int, int]] = 0
    seed: int = 0
    resample_per_local_step: bool = False
    project_theta_locally: bool = True
    project_c_locally: bool = False
    log_every: int = 0


@dataclass
class OutputBlock:
    directory: str = ""
    run_id: str = ""
    record_wall_time: bool = True


BLOCKS = {
    "dataset": DatasetBlock,
    "partition": PartitionBlock,
    "model": ModelBlock,
    "objective": ObjectiveBlock,
    "federation": FederationBlock,
    "output": OutputBlock,
}
CLIENT_TABLE_KEYS = {"federation.per_client_batch_b"}


def _client_table(value: Dict[str, Any], key_path: str) -> Dict[int, int]:
    table = {}
    for key, size in value.items():
        if not key.isdigit() or not isinstance(size, int) or isinstance(size, bool):
            raise ConfigError(f"expected client id = batch size, got {key} = {size!r}", key_path)
        table[int(key)] = size
    return table


def _check_type(value: Any, default: Any, key_path: str) -> Any:
    if isinstance(value, dict) and key_path in CLIENT_TABLE_KEYS:
        return _client_table(value, key_path)
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(v, str) for v in value)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(
            f"expected {type(default).__name__}, got {type(value).__name__} {value!r}", key_path
        )
    return value


def _parse_block(name: str, cls, values: Any):
    if not isinstance(values, dict):
        raise ConfigError("expected a block of keys", name)
    block = cls()
    known = {f.name for f in fields(cls)}
    for key, value in values.items():
        key_path = f"{name}.{key}"
        if key not in known:
            raise ConfigError("unknown key", key_path)
        setattr(block, key, _check_type(value, getattr(block, key), key_path))
    return block


def _render(value: Any) -> str:
    if isinstance(value, dict):
        return "{ " + ", ".join(f"{k} = {v}" for k, v in sorted(value.items())) + " }"
    return tomli_w.dumps({"v": value})[len("v = ") :].rstrip("\n")


def _read_toml(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        with open(path, "rb") as f:
            return tomli.load(f)
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}")
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}")


@dataclass
class RunConfig:
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    partition: PartitionBlock = field(default_factory=PartitionBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    objective: ObjectiveBlock = field(default_factory=ObjectiveBlock)
    federation: FederationBlock = field(default_factory=FederationBlock)
    output: OutputBlock = field(default_factory=OutputBlock)

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "RunConfig":
        blocks = {}
        for name, values in document.items():
            if name not in BLOCKS:
                raise ConfigError("unknown block", name)
            blocks[name] = _parse_block(name, BLOCKS[name], values)
        config = cls(**blocks)
        config.validate()
        return config

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(tomli.loads(text))
        except tomli.TOMLDecodeError as e:
            raise ConfigError(str(e))

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        return cls.from_dict(_read_toml(path))

    def to_toml(self) -> str:
        lines = []
        for name in BLOCKS:
            block = getattr(self, name)
            for f in fields(block):
                lines.append(f"{name}.{f.name} = {_render(getattr(block, f.name))}")
        return "\n".join(lines) + "\n"

    def with_seed(self, seed: int) -> "RunConfig":
        """Override the training and partition seeds; the dataset instance stays fixed"""
        return replace(
            self,
            partition=replace(self.partition, seed=seed),
            federation=replace(self.federation, seed=seed),
        )

    def with_objective(self, epsilon: float, rho: float) -> "RunConfig":
        return replace(self, objective=replace(self.objective, epsilon=epsilon, rho=rho))

    def _build(self, block: str, factory, **kwargs):
        try:
            return factory(**kwargs)
        except ParameterError as e:
            raise ConfigError(str(e), f"{block}.{e.field}" if e.field else block)

    def loss_spec(self) -> BoundedLossSpec:
        m = self.model
        return self._build(
            "model",
            BoundedLossSpec,
            kind=m.kind,
            feature_radius_R=m.feature_radius_R,
            domain_radius_M=m.domain_radius_M,
            fit_bias=m.fit_bias,
            label_bound=m.label_bound,
        )

    def rcvar_params(self) -> RcvarParams:
        o = self.objective
        return self._build(
            "objective",
            RcvarParams,
            epsilon=o.epsilon,
            rho=o.rho,
            gamma=o.gamma,
            smooth_kind=o.smooth_kind,
        )

    def partition_plan(self) -> PartitionPlan:
        p = self.partition
        return self._build(
            "partition",
            PartitionPlan,
            strategy=p.strategy,
            num_clients=p.num_clients,
            seed=p.seed,
            alpha=p.alpha,
        )

    def federation_config(self, threads: int = 1) -> FederationConfig:
        f = self.federation
        return self._build(
            "federation",
            FederationConfig,
            num_rounds_T=f.num_rounds_T,
            local_steps_tau=f.local_steps_tau,
            learning_rate_eta=f.learning_rate_eta,
            eta_mode=f.eta_mode,
            per_client_batch_b=f.per_client_batch_b or None,
            seed=f.seed,
            resample_per_local_step=f.resample_per_local_step,
            project_theta_locally=f.project_theta_locally,
            project_c_locally=f.project_c_locally,
            threads=threads,
            log_every=f.log_every,
        )

    def validate(self):
        self.dataset.validate()
        if self.federation.algorithm not in ALGORITHMS:
            raise ConfigError(
                f"must be one of {ALGORITHMS}, got {self.federation.algorithm!r}",
                "federation.algorithm",
            )
        batch = self.federation.per_client_batch_b
        sizes = list(batch.values()) if isinstance(batch, dict) else [batch]
        if any(size < 0 for size in sizes):
            raise ConfigError("must be non-negative", "federation.per_client_batch_b")
        if self.federation.log_every < 0:
            raise ConfigError("must be non-negative", "federation.log_every")
        self.loss_spec()
        self.rcvar_params()
        self.partition_plan()
        self.federation_config()


@dataclass
class SweepGrid:
    epsilon: List[float] = field(default_factory=lambda: [0.01, 0.1, 0.5, 1.0])
    rho: List[float] = field(default_factory=lambda: [0.2])
    seeds: List[int] = field(default_factory=lambda: [0])

    def validate(self):
        for key in ("epsilon", "rho", "seeds"):
            values = getattr(self, key)
            if not isinstance(values, list) or not values:
                raise ConfigError("must be a non-empty list", f"grid.{key}")
            kind = int if key == "seeds" else (int, float)
            if not all(isinstance(v, kind) and not isinstance(v, bool) for v in values):
                raise ConfigError("must hold numbers", f"grid.{key}")
        for epsilon in self.epsilon:
            for rho in self.rho:
                try:
                    RcvarParams(epsilon=epsilon, rho=rho)
                except ParameterError as e:
                    raise ConfigError(str(e), f"grid.{e.field}")

    def cells(self) -> List[tuple]:
        return [(e, r, s) for e in self.epsilon for r in self.rho for s in self.seeds]

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "SweepGrid":
        unknown = set(document) - {"grid"}
        if unknown:
            raise ConfigError("unknown block", sorted(unknown)[0])
        values = document.get("grid", {})
        known = {f.name for f in fields(cls)}
        for key in values:
            if key not in known:
                raise ConfigError("unknown key", f"grid.{key}")
        grid = cls(**values)
        grid.validate()
        grid.epsilon = [float(v) for v in grid.epsilon]
        grid.rho = [float(v) for v in grid.rho]
        return grid

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "SweepGrid":
        return cls.from_dict(_read_toml(path))

    def to_toml(self) -> str:
        keys = ("epsilon", "rho", "seeds")
        return "".join(f"grid.{k} = {_render(getattr(self, k))}\n" for k in keys)


def load_run_config(path: Optional[Union[str, Path]]) -> RunConfig:
    if path is None:
        config = RunConfig()
        config.validate()
        return config
    return RunConfig.from_file(path)
