"""In-process simulation of federated training on the smoothed relaxed CVaR objective.

Each round the server broadcasts (theta, c); every client samples one batch, runs tau
gradient steps on the batch mean of f~ and sends its pair back; the server takes the
batch-size weighted average and projects c onto [0, B]. FedAvg is the same loop on the
plain scaled loss.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from multiprocessing.pool import ThreadPool
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm  # type: ignore

from .datagen import Dataset, Shard, pool_shards
from .errors import (
    DataError,
    NumericalError,
    ParameterError,
    PartitionError,
    ProtocolError,
    UnsupportedError,
)
from .model import BoundedLossSpec, batch_loss_and_grad, check_feature_norms, project_weights
from .objective import (
    LOSS_BOUND,
    RcvarParams,
    RegularityConstants,
    f_aux,
    f_smooth,
    f_smooth_grad,
    lipschitz_constant,
    smoothness_constant,
)

logger = logging.getLogger(__name__)

INIT_SCALE = 0.01
# stands in for the objective when training plain ERM: f~ collapses to the loss at eps = 1
ERM_PARAMS = RcvarParams(epsilon=1.0)


class EtaMode(str, Enum):
    FIXED = "fixed"
    LEMMA2 = "lemma2"
    LEMMA3 = "lemma3"


@dataclass
class ModelState:
    theta: np.ndarray
    c: float = LOSS_BOUND

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.c = float(self.c)

    def copy(self) -> "ModelState":
        return ModelState(self.theta.copy(), self.c)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.theta).all() and math.isfinite(self.c))


@dataclass(frozen=True)
class FederationConfig:
    num_rounds_T: int = 100
    local_steps_tau: int = 1
    learning_rate_eta: float = 0.1
    eta_mode: EtaMode = EtaMode.FIXED
    # None means full local batches; an int applies to every client
    per_client_batch_b: Union[None, int, Dict[int, int]] = None
    seed: int = 0
    resample_per_local_step: bool = False
    project_theta_locally: bool = True
    project_c_locally: bool = False
    threads: int = 1
    log_every: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "eta_mode", EtaMode(self.eta_mode))
        except ValueError:
            raise ParameterError(f"unknown eta_mode {self.eta_mode!r}", "eta_mode")
        if self.num_rounds_T < 1:
            raise ParameterError("num_rounds_T must be at least 1", "num_rounds_T")
        if self.local_steps_tau < 1:
            raise ParameterError("local_steps_tau must be at least 1", "local_steps_tau")
        if self.eta_mode is EtaMode.FIXED and not (
            math.isfinite(self.learning_rate_eta) and self.learning_rate_eta >= 0
        ):
            raise ParameterError("learning_rate_eta must be non-negative", "learning_rate_eta")
        if self.threads < 1:
            raise ParameterError("threads must be at least 1", "threads")

    def batch_sizes(self, shards: Sequence[Shard]) -> List[int]:
        sizes = []
        for shard in shards:
            if self.per_client_batch_b is None:
                size = shard.n
            elif isinstance(self.per_client_batch_b, int):
                size = self.per_client_batch_b
            else:
                size = self.per_client_batch_b.get(shard.client_id, shard.n)
            if not 1 <= size <= shard.n:
                raise PartitionError(
                    f"batch size {size} not in [1, {shard.n}]", shard.client_id
                )
            sizes.append(size)
        return sizes


@dataclass
class TrainingTrace:
    """Per-round broadcast pairs, the smoothed objective at each broadcast and the
    pair left after the last round"""

    thetas: np.ndarray
    cs: np.ndarray
    objective: np.ndarray
    final: ModelState
    eta: float = 0.0
    gamma: Optional[float] = None
    batch_sizes: List[int] = field(default_factory=list)

    @property
    def rounds(self) -> int:
        return self.cs.shape[0]

    def average(self) -> ModelState:
        return ModelState(self.thetas.mean(axis=0), float(self.cs.mean()))


def empirical_objective(
    theta: np.ndarray,
    c: float,
    features: np.ndarray,
    labels: np.ndarray,
    params: Optional[RcvarParams],
    spec: BoundedLossSpec,
    smooth: bool = True,
) -> float:
    """Mean of f~ (or f with smooth=False) over a batch; plain mean loss when params is None"""
    losses, _ = batch_loss_and_grad(theta, features, labels, spec)
    if params is None:
        return float(losses.mean())
    per_sample = (f_smooth if smooth else f_aux)(losses, c, params, strict=False)
    return float(np.mean(per_sample))


def _batch_gradient(
    theta: np.ndarray,
    c: float,
    features: np.ndarray,
    labels: np.ndarray,
    params: Optional[RcvarParams],
    spec: BoundedLossSpec,
) -> Tuple[np.ndarray, float]:
    losses, grads = batch_loss_and_grad(theta, features, labels, spec)
    if params is None:
        return grads.mean(axis=0), 0.0
    grad_theta, grad_c = f_smooth_grad(losses, grads, c, params, strict=False)
    return grad_theta.mean(axis=0), float(np.mean(grad_c))


def _sample_batch(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    if size == n:
        return np.arange(n)
    return rng.choice(n, size=size, replace=False)


def client_rng(seed: int, client_id: int, round_index: int) -> np.random.Generator:
    """Private stream per (seed, client, round) so scheduling cannot perturb sampling"""
    return np.random.default_rng([seed, client_id, round_index])


def client_local_update(
    shard: Shard,
    state: ModelState,
    config: FederationConfig,
    params: Optional[RcvarParams],
    spec: BoundedLossSpec,
    rng: np.random.Generator,
    eta: Optional[float] = None,
    batch_size: Optional[int] = None,
) -> ModelState:
    """tau gradient steps of size eta on one batch; params=None trains the plain loss"""
    if shard.n == 0:
        raise PartitionError("empty shard", shard.client_id)
    eta = config.learning_rate_eta if eta is None else eta
    size = config.batch_sizes([shard])[0] if batch_size is None else batch_size
    batch = _sample_batch(rng, shard.n, size)
    theta, c = state.theta.copy(), state.c
    for step in range(config.local_steps_tau):
        if step and config.resample_per_local_step:
            batch = _sample_batch(rng, shard.n, size)
        grad_theta, grad_c = _batch_gradient(
            theta, c, shard.features[batch], shard.labels[batch], params, spec
        )
        theta = theta - eta * grad_theta
        c = c - eta * grad_c
        if config.project_theta_locally:
            theta = project_weights(theta, spec.domain_radius_M)
        if config.project_c_locally:
            c = min(max(c, 0.0), LOSS_BOUND)
    return ModelState(theta, c)


def server_aggregate(client_states: Sequence[Tuple[ModelState, int]]) -> ModelState:
    """Batch-size weighted average in the given (ascending client id) order, c clipped to [0, B]"""
    if not client_states:
        raise ProtocolError("nothing to aggregate")
    total = float(sum(size for _, size in client_states))
    theta = np.zeros_like(client_states[0][0].theta)
    c = 0.0
    for state, size in client_states:
        weight = size / total
        theta = theta + weight * state.theta
        c = c + weight * state.c
    return ModelState(theta, min(max(c, 0.0), LOSS_BOUND))


def estimate_regularity_constants(
    shards: Sequence[Shard],
    state: ModelState,
    params: Optional[RcvarParams],
    spec: BoundedLossSpec,
    batch_sizes: Sequence[int],
    rng: np.random.Generator,
    draws: int = 20,
) -> Tuple[float, float]:
    """Empirical (sigma, mu) at one point: the largest per-client root mean squared
    minibatch-gradient deviation and the largest local-to-global gradient gap"""

    def joint(features, labels):
        grad_theta, grad_c = _batch_gradient(state.theta, state.c, features, labels, params, spec)
        return np.append(grad_theta, grad_c)

    local = [joint(s.features, s.labels) for s in shards]
    sizes = np.array([s.n for s in shards], dtype=float)
    global_grad = np.sum([w * g for w, g in zip(sizes / sizes.sum(), local)], axis=0)
    sigma = mu = 0.0
    for shard, grad, size in zip(shards, local, batch_sizes):
        mu = max(mu, float(np.linalg.norm(grad - global_grad)))
        if size == shard.n:
            continue
        deviations = []
        for _ in range(draws):
            batch = rng.choice(shard.n, size=size, replace=False)
            deviations.append(
                np.sum((joint(shard.features[batch], shard.labels[batch]) - grad) ** 2)
            )
        sigma = max(sigma, math.sqrt(float(np.mean(deviations))))
    return sigma, mu


def learning_rate_lemma2(
    constants: RegularityConstants,
    params: RcvarParams,
    K: int,
    tau: int,
    T: int,
    threshold_direction: bool = False,
) -> float:
    """Smallest of the four step-size caps of the local-SGD convergence bound.

    Terms that need sigma or mu are dropped (treated as +inf) when those are zero.
    """
    if min(K, tau, T) < 1:
        raise ParameterError("K, tau and T must be positive integers")
    beta = smoothness_constant(
        params, constants.lipschitz_G, constants.smoothness_beta, threshold_direction
    )
    radius2 = constants.domain_diameter_M**2 + LOSS_BOUND**2
    sigma, mu = constants.variance_sigma, constants.heterogeneity_mu
    caps = [1.0 / (4.0 * beta)]
    if sigma > 0:
        caps.append(math.sqrt(K) * math.sqrt(radius2) / (sigma * math.sqrt(tau * T)))
        caps.append((radius2 / (sigma**2 * tau**2 * beta * T)) ** (1.0 / 3.0))
    if mu > 0:
        caps.append(radius2 ** (1.0 / 3.0) / (tau * (mu**2 * beta * T) ** (1.0 / 3.0)))
    return min(caps)


def optimization_error_bound_lemma2(
    constants: RegularityConstants,
    params: RcvarParams,
    K: int,
    tau: int,
    T: int,
    threshold_direction: bool = False,
) -> float:
    beta = smoothness_constant(
        params, constants.lipschitz_G, constants.smoothness_beta, threshold_direction
    )
    radius2 = constants.domain_diameter_M**2 + LOSS_BOUND**2
    sigma, mu = constants.variance_sigma, constants.heterogeneity_mu
    eps, rho, gamma = params.epsilon, params.rho, params.gamma
    return (
        2.0 * beta * radius2 / (tau * T)
        + 2.0 * sigma * math.sqrt(radius2) / math.sqrt(K * tau * T)
        + (1.0 - eps) * gamma / rho
        + (beta * radius2**2 / T**2) ** (1.0 / 3.0)
        * (5.0 * (sigma**2 / tau) ** (1.0 / 3.0) + 19.0 * mu ** (2.0 / 3.0))
    )


@dataclass(frozen=True)
class ExcessRiskSchedule:
    eta: float
    gamma: float
    t_condition_ok: bool
    risk_bound: float
    stability: float


def excess_risk_schedule_lemma3(
    constants: RegularityConstants,
    params: RcvarParams,
    n: int,
    sum_b: int,
    T: int,
    tau: int = 1,
) -> ExcessRiskSchedule:
    """Step size, smoothing level and round condition of the single-step excess risk bound"""
    if tau != 1:
        raise UnsupportedError(f"the excess risk schedule requires tau = 1, got {tau}")
    if min(n, sum_b, T) < 1:
        raise ParameterError("n, sum_b and T must be positive integers")
    eps, rho = params.epsilon, params.rho
    G = constants.lipschitz_G
    G_obj = lipschitz_constant(params, G)
    radius2 = constants.domain_diameter_M**2 + LOSS_BOUND**2
    eta = math.sqrt(n * sum_b) * math.sqrt(radius2) / (G_obj * math.sqrt(T * (n + 2 * T)))
    gamma = 2.0 * G_obj**2 / (1.0 - eps + eps * rho) ** 2 * eta
    lhs = n * sum_b * radius2 * (constants.smoothness_beta * (1.0 + eps * rho) / (rho * G_obj)) ** 2
    risk = G_obj * math.sqrt(radius2 * (2.0 / n + 1.0 / T)) / math.sqrt(sum_b)
    risk += (1.0 - eps) * gamma / rho
    return ExcessRiskSchedule(
        eta=eta,
        gamma=gamma,
        t_condition_ok=lhs <= T * (n + 2 * T),
        risk_bound=risk,
        stability=T * G_obj**2 * eta / (n * sum_b),
    )


def _check_federation(shards: Sequence[Shard], spec: BoundedLossSpec) -> int:
    if not shards:
        raise ProtocolError("empty federation")
    dims = {s.features.shape[1] for s in shards}
    if len(dims) != 1:
        raise DataError(f"clients disagree on the feature dimension: {sorted(dims)}")
    for shard in shards:
        if shard.n == 0:
            raise PartitionError("empty shard", shard.client_id)
        check_feature_norms(shard.features, spec)
    return spec.model_dimension(dims.pop())


def initial_state(dimension: int, seed: int) -> ModelState:
    theta = np.random.default_rng(seed).uniform(-INIT_SCALE, INIT_SCALE, dimension)
    return ModelState(theta, LOSS_BOUND)


def _resolve_schedule(
    shards: Sequence[Shard],
    state: ModelState,
    config: FederationConfig,
    params: Optional[RcvarParams],
    spec: BoundedLossSpec,
    sizes: List[int],
) -> Tuple[float, Optional[RcvarParams]]:
    if config.eta_mode is EtaMode.FIXED:
        return config.learning_rate_eta, params
    bound_params = ERM_PARAMS if params is None else params
    if config.eta_mode is EtaMode.LEMMA2:
        sigma, mu = estimate_regularity_constants(
            shards, state, params, spec, sizes, np.random.default_rng([config.seed, len(shards)])
        )
        constants = RegularityConstants.from_loss_spec(spec, sigma, mu)
        eta = learning_rate_lemma2(
            constants,
            bound_params,
            len(shards),
            config.local_steps_tau,
            config.num_rounds_T,
            threshold_direction=True,
        )
        logger.info("lemma2 schedule: sigma=%.4g mu=%.4g eta=%.4g", sigma, mu, eta)
        return eta, params
    schedule = excess_risk_schedule_lemma3(
        RegularityConstants.from_loss_spec(spec),
        bound_params,
        sum(s.n for s in shards),
        sum(sizes),
        config.num_rounds_T,
        config.local_steps_tau,
    )
    logger.info(
        "lemma3 schedule: eta=%.4g gamma=%.4g condition=%s",
        schedule.eta,
        schedule.gamma,
        schedule.t_condition_ok,
    )
    if params is None:
        return schedule.eta, None
    return schedule.eta, replace(params, gamma=schedule.gamma)


def _run(
    shards: Sequence[Shard],
    config: FederationConfig,
    params: Optional[RcvarParams],
    spec: BoundedLossSpec,
    threads: Optional[int] = None,
    progress: bool = False,
) -> Tuple[TrainingTrace, ModelState]:
    dimension = _check_federation(shards, spec)
    shards = sorted(shards, key=lambda s: s.client_id)
    sizes = config.batch_sizes(shards)
    state = initial_state(dimension, config.seed)
    eta, params = _resolve_schedule(shards, state, config, params, spec, sizes)
    pooled = pool_shards(shards)
    T = config.num_rounds_T
    thetas = np.empty((T, dimension))
    cs = np.empty(T)
    objective = np.empty(T)
    threads = config.threads if threads is None else threads

    def update(args):
        shard, size, round_index, broadcast = args
        rng = client_rng(config.seed, shard.client_id, round_index)
        return client_local_update(
            shard, broadcast.copy(), config, params, spec, rng, eta=eta, batch_size=size
        )

    with ThreadPool(processes=threads) as pool:
        for t in tqdm(range(T), disable=not progress):
            thetas[t], cs[t] = state.theta, state.c
            objective[t] = empirical_objective(
                state.theta, state.c, pooled.features, pooled.labels, params, spec
            )
            jobs = [(shard, size, t, state) for shard, size in zip(shards, sizes)]
            if threads == 1:
                local = [update(job) for job in jobs]
            else:
                local = pool.map(update, jobs)
            state = server_aggregate(list(zip(local, sizes)))
            if not state.is_finite():
                raise NumericalError("non-finite model after aggregation", round=t + 1)
            if config.log_every and (t + 1) % config.log_every == 0:
                logger.info("round %d: c=%.6f objective=%.6f", t + 1, state.c, objective[t])

    trace = TrainingTrace(
        thetas=thetas,
        cs=cs,
        objective=objective,
        final=state,
        eta=eta,
        gamma=None if params is None else params.gamma,
        batch_sizes=sizes,
    )
    return trace, trace.average()


def run_fedsrcvar(
    dataset_shards: Sequence[Shard],
    config: FederationConfig,
    params: RcvarParams,
    spec: BoundedLossSpec,
    threads: Optional[int] = None,
    progress: bool = False,
) -> Tuple[TrainingTrace, ModelState]:
    """Returns the trace and the averaged pair over the T broadcasts"""
    return _run(dataset_shards, config, params, spec, threads, progress)


def run_fedavg(
    dataset_shards: Sequence[Shard],
    config: FederationConfig,
    spec: BoundedLossSpec,
    threads: Optional[int] = None,
    progress: bool = False,
) -> Tuple[TrainingTrace, ModelState]:
    """Same engine on the plain scaled loss; c is carried at 1 and never updated"""
    return _run(dataset_shards, config, None, spec, threads, progress)


def run_centralized(
    dataset: Dataset,
    steps: int,
    eta: float,
    params: Optional[RcvarParams],
    spec: BoundedLossSpec,
    seed: int = 0,
    project_theta: bool = True,
    return_trace: bool = False,
):
    """Full-batch projected gradient descent on the pooled objective; returns the last iterate"""
    shard = Shard(0, dataset.features, dataset.labels, np.arange(dataset.n))
    config = FederationConfig(
        num_rounds_T=steps,
        local_steps_tau=1,
        learning_rate_eta=eta,
        seed=seed,
        project_theta_locally=project_theta,
    )
    trace, _ = _run([shard], config, params, spec)
    if return_trace:
        return trace, trace.final
    return trace.final
