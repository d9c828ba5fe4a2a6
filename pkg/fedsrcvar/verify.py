"""Property suite behind `fedsrcvar verify`.

Each property draws its own seeded samples and returns (samples, worst_margin) where the
margin is allowed-minus-observed: it passes when the worst margin is non-negative.
"""
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datagen import PartitionPlan, gen_planted_subgroup, partition
from .evaluation import (
    bpf_greedy_adversary,
    bpf_rcvar_identity,
    cvar_tail_mean,
    cvar_variational,
    empirical_quantile,
    finite_difference_check,
)
from .federation import FederationConfig, run_centralized, run_fedavg, run_fedsrcvar
from .model import BoundedLossSpec, batch_loss_and_grad
from .objective import (
    RcvarParams,
    SmoothKind,
    f_aux,
    f_aux_subgradient,
    f_smooth,
    f_smooth_grad,
    lipschitz_constant,
    smoothness_constant,
)

logger = logging.getLogger(__name__)

ROUNDING = 1e-12
GAMMAS = (0.01, 0.05, 0.5)
GRID_EPS = (0.0, 0.3, 0.9)
GRID_RHO = (0.1, 0.5, 0.9)


@dataclass(frozen=True)
class VerifyHooks:
    """Deliberate corruptions used as negative controls"""

    gamma_scale: float = 1.0


@dataclass(frozen=True)
class PropertyResult:
    name: str
    samples: int
    worst_margin: float
    passed: bool
    seconds: float


PropertyFn = Callable[[np.random.Generator, VerifyHooks], Tuple[int, float]]
PROPERTIES: Dict[str, PropertyFn] = {}


def register(name: str):
    def wrap(fn: PropertyFn) -> PropertyFn:
        PROPERTIES[name] = fn
        return fn

    return wrap


def _ball(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    directions = rng.normal(size=(n, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * radius * rng.random((n, 1)) ** (1.0 / dim)


def _random_params(rng: np.random.Generator, n: int):
    epsilon = rng.random(n)
    rho = rng.uniform(0.01, 0.99, n)
    gamma = rng.choice(GAMMAS, n)
    return epsilon, rho, gamma


class _VectorParams:
    """Duck-typed RcvarParams carrying per-sample arrays for the vectorised formulas"""

    loss_bound_B = 1.0

    def __init__(self, epsilon, rho, gamma, smooth_kind):
        self.epsilon, self.rho, self.gamma, self.smooth_kind = epsilon, rho, gamma, smooth_kind


def _sample_problem(rng: np.random.Generator, n: int, spec: BoundedLossSpec, d: int = 4):
    thetas = _ball(rng, n, spec.model_dimension(d), spec.domain_radius_M)
    features = _ball(rng, n, d, spec.feature_radius_R)
    labels = rng.integers(0, 2, n).astype(float)
    return thetas, features, labels


def _objective_and_grad(thetas, cs, features, labels, params, spec, smooth=True):
    losses, grads = batch_loss_and_grad(thetas, features, labels, spec)
    if smooth:
        values = f_smooth(losses, cs, params, strict=False)
        grad_theta, grad_c = f_smooth_grad(losses, grads, cs, params, strict=False)
    else:
        values = f_aux(losses, cs, params, strict=False)
        grad_theta, grad_c = f_aux_subgradient(losses, grads, cs, params, strict=False)
    return np.asarray(values), grad_theta, np.asarray(grad_c)


@register("smooth_sandwich")
def smooth_sandwich(rng, hooks):
    samples, worst = 0, math.inf
    n = 100_000
    for kind in SmoothKind:
        loss, c = rng.random(n), rng.random(n)
        epsilon, rho, gamma = _random_params(rng, n)
        gap = np.empty(n)
        # smooth_plus takes a scalar gamma, so evaluate one level at a time
        for level in GAMMAS:
            rows = gamma == level
            params = _VectorParams(epsilon[rows], rho[rows], level * hooks.gamma_scale, kind)
            smooth = f_smooth(loss[rows], c[rows], params)
            gap[rows] = smooth - f_aux(loss[rows], c[rows], params)
        bound = (1.0 - epsilon) * gamma / rho
        worst = min(worst, float((np.minimum(gap, bound - gap) + ROUNDING).min()))
        samples += n
    return samples, worst


@register("lipschitz_bound")
def lipschitz_bound(rng, hooks):
    spec = BoundedLossSpec(domain_radius_M=2.0)
    samples, worst = 0, math.inf
    n = 10_000
    for epsilon in GRID_EPS:
        for rho in GRID_RHO:
            params = RcvarParams(epsilon=epsilon, rho=rho, gamma=0.05)
            G = lipschitz_constant(params, spec.lipschitz_G)
            theta1, features, labels = _sample_problem(rng, n, spec)
            theta2 = theta1 + rng.normal(scale=0.05, size=theta1.shape)
            c1, c2 = rng.random(n), rng.random(n)
            v1, g1, gc1 = _objective_and_grad(theta1, c1, features, labels, params, spec)
            v2, _, _ = _objective_and_grad(theta2, c2, features, labels, params, spec)
            distance = np.sqrt(np.sum((theta1 - theta2) ** 2, axis=1) + (c1 - c2) ** 2)
            quotients = np.abs(v1 - v2) / distance
            norms = np.sqrt(np.sum(g1**2, axis=1) + gc1**2)
            worst = min(worst, float(G + 1e-9 - quotients.max()), float(G - norms.max()))
            samples += n
    return samples, worst


@register("gradient_finite_difference")
def gradient_finite_difference(rng, hooks):
    spec = BoundedLossSpec()
    tolerance = 1e-4
    worst = math.inf
    points = 1000
    thetas, features, labels = _sample_problem(rng, points, spec)
    for i in range(points):
        params = RcvarParams(
            epsilon=float(rng.random()),
            rho=float(rng.uniform(0.05, 0.95)),
            gamma=float(rng.choice(GAMMAS)),
        )
        x, y = features[i : i + 1], labels[i : i + 1]

        def fn(point, x=x, y=y, params=params):
            theta, c = point[:-1], point[-1]
            loss, grad = batch_loss_and_grad(theta, x, y, spec)
            value = f_smooth(loss, c, params, strict=False)
            grad_theta, grad_c = f_smooth_grad(loss, grad, c, params, strict=False)
            return float(np.sum(value)), np.append(grad_theta[0], grad_c)

        point = np.append(thetas[i], rng.random())
        worst = min(worst, tolerance - finite_difference_check(fn, point, step=1e-5))
    return points, worst


@register("dual_cvar")
def dual_cvar(rng, hooks):
    worst = math.inf
    vectors = 10_000
    for _ in range(vectors):
        n = int(rng.integers(1, 201))
        losses = rng.random(n)
        rho = float(rng.uniform(0.01, 0.99))
        tail = cvar_tail_mean(losses, rho)
        value, argmin_c = cvar_variational(losses, rho)
        worst = min(worst, ROUNDING - abs(tail - value))
        atoms = rho * n
        if abs(atoms - round(atoms)) > 1e-6:
            worst = min(worst, -abs(argmin_c - empirical_quantile(losses, 1.0 - rho)))
    return vectors, worst


@register("bpf_identity")
def bpf_identity(rng, hooks):
    worst = math.inf
    instances = 1000
    for i in range(instances):
        n = int(rng.integers(1, 201))
        losses = rng.random(n)
        rho = float(rng.uniform(0.02, 0.98))
        weights = rng.dirichlet(np.ones(n)) if i % 2 else None
        if weights is not None:
            weights = weights / weights.sum()
        epsilon = 0.0 if i % 5 == 0 else float(rng.uniform(0.0, rho))
        value, lam = bpf_greedy_adversary(losses, weights, rho, epsilon)
        worst = min(worst, 1e-9 - abs(value - bpf_rcvar_identity(losses, rho, epsilon, weights)))
        worst = min(worst, 1e-9 - abs(lam.sum() - 1.0))
        if epsilon == 0.0:
            exact = cvar_tail_mean(losses, rho, weights)
            worst = min(worst, 0.0 if value == exact else -abs(value - exact))
    return instances, worst


def _small_federation(seed: int, n: int = 400, clients: int = 2):
    data = gen_planted_subgroup(n, 3, 0.2, 0.3, seed)
    return partition(data, PartitionPlan("even", clients, seed))


@register("epsilon_one_reduction")
def epsilon_one_reduction(rng, hooks):
    spec = BoundedLossSpec()
    shards = _small_federation(int(rng.integers(2**31)))
    config = FederationConfig(
        num_rounds_T=100, local_steps_tau=2, learning_rate_eta=0.5, per_client_batch_b=25
    )
    params = RcvarParams(epsilon=1.0, rho=0.2, gamma=0.05)
    robust, _ = run_fedsrcvar(shards, config, params, spec)
    plain, _ = run_fedavg(shards, config, spec)
    deviation = float(np.abs(robust.thetas - plain.thetas).max())
    return config.num_rounds_T, -deviation


def max_relative_deviation(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.maximum(np.linalg.norm(b, axis=-1), 1e-12)
    return float((np.linalg.norm(a - b, axis=-1) / scale).max())


@register("federated_matches_centralized")
def federated_matches_centralized(rng, hooks):
    spec = BoundedLossSpec()
    seed = int(rng.integers(2**31))
    data = gen_planted_subgroup(2000, 5, 0.2, 0.3, seed)
    shards = partition(data, PartitionPlan("even", 2, seed))
    params = RcvarParams(epsilon=0.1, rho=0.2, gamma=0.05)
    rounds, eta = 200, 0.02
    config = FederationConfig(
        num_rounds_T=rounds, learning_rate_eta=eta, seed=seed, project_theta_locally=False
    )
    federated, _ = run_fedsrcvar(shards, config, params, spec)
    central, _ = run_centralized(
        data, rounds, eta, params, spec, seed=seed, project_theta=False, return_trace=True
    )
    fed = np.column_stack([federated.thetas, federated.cs])
    cen = np.column_stack([central.thetas, central.cs])
    return rounds, 1e-6 - max_relative_deviation(fed, cen)


@register("convexity")
def convexity(rng, hooks):
    spec = BoundedLossSpec()
    n = 20_000
    params = RcvarParams(epsilon=0.2, rho=0.3, gamma=0.05)
    theta1, features, labels = _sample_problem(rng, n, spec)
    theta2, _, _ = _sample_problem(rng, n, spec)
    c1, c2, lam = rng.random(n), rng.random(n), rng.random(n)
    mix_theta = lam[:, None] * theta1 + (1 - lam[:, None]) * theta2
    mix_c = lam * c1 + (1 - lam) * c2
    worst = math.inf
    for smooth in (False, True):
        v1, _, _ = _objective_and_grad(theta1, c1, features, labels, params, spec, smooth)
        v2, _, _ = _objective_and_grad(theta2, c2, features, labels, params, spec, smooth)
        vm, _, _ = _objective_and_grad(mix_theta, mix_c, features, labels, params, spec, smooth)
        worst = min(worst, float((lam * v1 + (1 - lam) * v2 + ROUNDING - vm).min()))
    return 2 * n, worst


@register("subgradient_inequality")
def subgradient_inequality(rng, hooks):
    spec = BoundedLossSpec()
    n = 20_000
    params = RcvarParams(epsilon=0.2, rho=0.3)
    G = lipschitz_constant(params, spec.lipschitz_G)
    theta_v, features, labels = _sample_problem(rng, n, spec)
    theta_w, _, _ = _sample_problem(rng, n, spec)
    c_v, c_w = rng.random(n), rng.random(n)
    losses_v, grads_v = batch_loss_and_grad(theta_v, features, labels, spec)
    # half of the points sit exactly on the kink l = c
    on_kink = np.arange(n) % 2 == 0
    c_v[on_kink] = losses_v[on_kink]
    f_v = f_aux(losses_v, c_v, params)
    losses_w, _ = batch_loss_and_grad(theta_w, features, labels, spec)
    f_w = f_aux(losses_w, c_w, params)
    worst = math.inf
    for t in (0.0, 0.5, 1.0):
        g_theta, g_c = f_aux_subgradient(losses_v, grads_v, c_v, params, t=t)
        inner = np.sum(g_theta * (theta_w - theta_v), axis=1) + g_c * (c_w - c_v)
        worst = min(worst, float((f_w - f_v - inner + 1e-10).min()))
        norms = np.sqrt(np.sum(g_theta**2, axis=1) + np.asarray(g_c) ** 2)
        worst = min(worst, float(G + ROUNDING - norms.max()))
    return 3 * n, worst


@register("smoothness_bound")
def smoothness_bound(rng, hooks):
    spec = BoundedLossSpec(domain_radius_M=2.0)
    n = 20_000
    params = RcvarParams(epsilon=0.1, rho=0.3, gamma=0.05)
    beta = smoothness_constant(params, spec.lipschitz_G, spec.smoothness_beta)
    beta_joint = smoothness_constant(
        params, spec.lipschitz_G, spec.smoothness_beta, threshold_direction=True
    )
    theta1, features, labels = _sample_problem(rng, n, spec)
    theta2 = theta1 + rng.normal(scale=0.01, size=theta1.shape)
    c1 = rng.random(n)
    c2 = np.clip(c1 + rng.normal(scale=0.01, size=n), 0.0, 1.0)
    _, g1, gc1 = _objective_and_grad(theta1, c1, features, labels, params, spec)
    _, g2, _ = _objective_and_grad(theta2, c1, features, labels, params, spec)
    _, g3, gc3 = _objective_and_grad(theta2, c2, features, labels, params, spec)
    along_theta = np.linalg.norm(g2 - g1, axis=1) / np.linalg.norm(theta2 - theta1, axis=1)
    joint_step = np.sqrt(np.sum((theta2 - theta1) ** 2, axis=1) + (c2 - c1) ** 2)
    joint = np.sqrt(np.sum((g3 - g1) ** 2, axis=1) + (gc3 - gc1) ** 2) / joint_step
    worst = min(float(beta - along_theta.max()), float(beta_joint - joint.max()))
    return 2 * n, worst


def run_properties(
    hooks: Optional[VerifyHooks] = None,
    seed: int = 0,
    names: Optional[Sequence[str]] = None,
    on_result: Optional[Callable[[PropertyResult], None]] = None,
) -> List[PropertyResult]:
    hooks = hooks or VerifyHooks()
    selected = list(PROPERTIES) if names is None else list(names)
    results = []
    for index, name in enumerate(selected):
        rng = np.random.default_rng([seed, index])
        start = time.perf_counter()
        samples, worst = PROPERTIES[name](rng, hooks)
        result = PropertyResult(
            name=name,
            samples=samples,
            worst_margin=worst,
            passed=bool(worst >= 0.0),
            seconds=time.perf_counter() - start,
        )
        logger.info("%s: %s", name, result)
        results.append(result)
        if on_result is not None:
            on_result(result)
    return results
