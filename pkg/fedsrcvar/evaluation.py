"""Empirical quantile and CVaR (tail-mean and variational routes), fairness metrics,
finite differences and the box-constrained reweighting adversary."""
import logging
import math
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Callable, Optional, Tuple

import numpy as np

from .errors import DataError, InfeasibleError, ParameterError
from .model import BoundedLossSpec, batch_loss_and_grad, check_feature_norms, uniform_losses
from .objective import LOSS_BOUND

if TYPE_CHECKING:
    from .datagen import Dataset
    from .federation import ModelState

logger = logging.getLogger(__name__)

WEIGHT_SUM_TOL = 1e-12
LEVEL_SLACK = 1e-9


@dataclass(frozen=True)
class MetricsRecord:
    utility_risk: float
    worst_group_risk: float
    best_group_risk: float
    disparity: float
    quantile_c: float
    rho: float
    epsilon: Optional[float] = None
    split: str = "test"

    def as_dict(self) -> dict:
        return asdict(self)


def _losses(losses) -> np.ndarray:
    losses = np.asarray(losses, dtype=float).ravel()
    if losses.size == 0:
        raise DataError("empty loss vector")
    return losses


def _check_rho(rho: float):
    if not 0.0 < rho < 1.0:
        raise ParameterError(f"rho must lie in (0, 1), got {rho}", "rho")


def _probabilities(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    weights = np.asarray(weights, dtype=float).ravel()
    if weights.shape != (n,) or np.any(weights < 0.0):
        raise ParameterError("weights must be a non-negative vector matching the losses", "p")
    if abs(weights.sum() - 1.0) > WEIGHT_SUM_TOL:
        raise ParameterError(f"weights sum to {weights.sum()!r}, not 1", "p")
    return weights


def _descending(losses: np.ndarray) -> np.ndarray:
    # stable sort: equal losses keep index order
    return np.argsort(-losses, kind="stable")


def _greedy_fill(capacity: np.ndarray, mass: float) -> np.ndarray:
    """Pour mass into slots in order, each up to its capacity"""
    before = np.cumsum(capacity) - capacity
    return np.clip(mass - before, 0.0, capacity)


def empirical_quantile(losses, level: float) -> float:
    """inf{b : #{l_i <= b} / n >= level}"""
    losses = _losses(losses)
    if not 0.0 < level <= 1.0:
        raise ParameterError(f"level must lie in (0, 1], got {level}", "level")
    ordered = np.sort(losses)
    k = max(1, math.ceil(level * ordered.size - LEVEL_SLACK))
    return float(ordered[min(k, ordered.size) - 1])


def cvar_tail_mean(losses, rho: float, weights=None) -> float:
    """Mean of the worst rho-fraction of the losses, splitting the boundary atom"""
    losses = _losses(losses)
    _check_rho(rho)
    p = _probabilities(weights, losses.size)
    order = _descending(losses)
    share = _greedy_fill(p[order] / rho, 1.0)
    return float(np.dot(share, losses[order]))


def cvar_variational(losses, rho: float) -> Tuple[float, float]:
    """min over c of c + mean((l - c)_+) / rho, and its smallest minimizer.

    The objective is piecewise linear with breakpoints at the losses, so it is evaluated
    at every distinct loss together with 0 and B.
    """
    losses = _losses(losses)
    _check_rho(rho)
    n = losses.size
    ordered = np.sort(losses)
    candidates = np.unique(np.concatenate([ordered, [0.0, LOSS_BOUND]]))
    suffix = np.concatenate([np.cumsum(ordered[::-1])[::-1], [0.0]])
    first_above = np.searchsorted(ordered, candidates, side="right")
    excess = suffix[first_above] - candidates * (n - first_above)
    values = candidates + excess / (rho * n)
    # smallest c whose right derivative 1 - #{l > c} / (rho n) is non-negative
    flat_or_rising = (n - first_above) <= rho * n + LEVEL_SLACK
    argmin_c = float(candidates[np.argmax(flat_or_rising)])
    return float(values.min()), argmin_c


def bpf_greedy_adversary(
    losses, weights, rho: float, epsilon: float
) -> Tuple[float, np.ndarray]:
    """Maximize sum(lambda * l) over lambda_i in [eps p_i / rho, p_i / rho], sum(lambda) = 1.

    Every lambda starts at its lower bound; the remaining mass 1 - eps/rho goes to the
    largest losses first, up to each upper bound.
    """
    losses = _losses(losses)
    _check_rho(rho)
    if not 0.0 <= epsilon <= 1.0:
        raise ParameterError(f"epsilon must lie in [0, 1], got {epsilon}", "epsilon")
    if epsilon > rho:
        raise InfeasibleError(f"box is empty for epsilon ({epsilon}) > rho ({rho})")
    p = _probabilities(weights, losses.size)
    order = _descending(losses)
    lower = epsilon * p[order] / rho
    extra = _greedy_fill((1.0 - epsilon) * p[order] / rho, 1.0 - epsilon / rho)
    share = lower + extra
    lam = np.empty_like(share)
    lam[order] = share
    return float(np.dot(share, losses[order])), lam


def bpf_rcvar_identity(losses, rho: float, epsilon: float, weights=None) -> float:
    """Closed form of the adversary value: (eps/rho) mean + ((rho-eps)/rho) CVaR at rho',
    rho' = (rho - eps) / (1 - eps)"""
    losses = _losses(losses)
    _check_rho(rho)
    if epsilon > rho:
        raise InfeasibleError(f"box is empty for epsilon ({epsilon}) > rho ({rho})")
    p = _probabilities(weights, losses.size)
    mean = float(np.dot(p, losses))
    if epsilon == rho:
        return mean
    tail_rho = (rho - epsilon) / (1.0 - epsilon)
    tail = cvar_tail_mean(losses, tail_rho, None if weights is None else p)
    return (epsilon / rho) * mean + ((rho - epsilon) / rho) * tail


def group_risks(losses, rho: float) -> Tuple[float, float, float]:
    """(utility, worst, best): mean loss, CVaR tail mean and the mean of the complement"""
    losses = _losses(losses)
    n = losses.size
    utility = float(losses.mean())
    worst = max(cvar_tail_mean(losses, rho), utility)
    tail_size = rho * n
    best = (float(losses.sum()) - tail_size * worst) / (n - tail_size)
    return utility, worst, min(max(best, 0.0), utility)


def evaluate(
    model_state: "ModelState",
    dataset: "Dataset",
    rho: float,
    spec: BoundedLossSpec,
    epsilon: Optional[float] = None,
    split: str = "test",
    uniform: bool = False,
) -> MetricsRecord:
    """Metrics of one model on one dataset; the worst group is the rho-tail of the losses"""
    _check_rho(rho)
    if dataset.n == 0:
        raise DataError("empty dataset")
    if uniform:
        losses = uniform_losses(spec, dataset.n)
    else:
        theta = np.asarray(model_state.theta, dtype=float)
        if theta.shape != (spec.model_dimension(dataset.dim),):
            raise DataError(
                f"model dimension {theta.size} does not match "
                f"{spec.model_dimension(dataset.dim)} for {dataset.dim} features"
            )
        check_feature_norms(dataset.features, spec)
        losses, _ = batch_loss_and_grad(theta, dataset.features, dataset.labels, spec)
    utility, worst, best = group_risks(losses, rho)
    record = MetricsRecord(
        utility_risk=utility,
        worst_group_risk=worst,
        best_group_risk=best,
        disparity=worst - best,
        quantile_c=empirical_quantile(losses, 1.0 - rho),
        rho=rho,
        epsilon=epsilon,
        split=split,
    )
    logger.debug("evaluate %s rho=%s: %s", split, rho, record)
    return record


def finite_difference_check(
    function: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    point: np.ndarray,
    step: float = 1e-5,
) -> float:
    """Worst central-difference deviation from the analytic gradient, relative to the
    larger of the two gradients' max norms"""
    if not step > 0:
        raise ParameterError(f"step must be positive, got {step}", "step")
    point = np.asarray(point, dtype=float)
    _, analytic = function(point)
    analytic = np.asarray(analytic, dtype=float).ravel()
    numeric = np.empty(point.size)
    for i in range(point.size):
        shift = np.zeros(point.size)
        shift[i] = step
        upper, _ = function(point + shift.reshape(point.shape))
        lower, _ = function(point - shift.reshape(point.shape))
        numeric[i] = (upper - lower) / (2.0 * step)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)
