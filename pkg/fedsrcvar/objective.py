"""Relaxed CVaR objective: per-sample function f, its smoothed proxy f~, their
(sub)gradients and the regularity constants used by the step-size helpers.

With loss l = l(theta; z) in [0, B] and threshold c in [0, B]:

    f(theta, c; z)  = (1 - eps) [c + (l - c)_+ / rho] + eps l
    f~(theta, c; z) = (1 - eps) [c + s(l - c) / rho]  + eps l

where s is a smooth plus function with 0 <= s(x) - (x)_+ <= gamma and s' (2/gamma)-Lipschitz.
All functions accept scalars or numpy arrays (elementwise).
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Tuple, Union

import numpy as np
from scipy.special import expit  # type: ignore

from .errors import DomainError, ParameterError

if TYPE_CHECKING:
    from .model import BoundedLossSpec

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

LOSS_BOUND = 1.0
EQUALITY_TOL = 1e-12


class SmoothKind(str, Enum):
    SOFT_RELU = "soft_relu"
    ZANG = "zang"
    PIECEWISE_QUADRATIC = "piecewise_quadratic"


@dataclass(frozen=True)
class RcvarParams:
    """Hyperparameters of the (smoothed) relaxed CVaR objective"""

    epsilon: float = 0.1
    rho: float = 0.2
    gamma: float = 0.05
    loss_bound_B: float = LOSS_BOUND
    smooth_kind: SmoothKind = SmoothKind.SOFT_RELU

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ParameterError(f"epsilon must lie in [0, 1], got {self.epsilon}", "epsilon")
        if not 0.0 < self.rho < 1.0:
            raise ParameterError(f"rho must lie in (0, 1), got {self.rho}", "rho")
        if not self.gamma > 0.0:
            raise ParameterError(f"gamma must be positive, got {self.gamma}", "gamma")
        if self.loss_bound_B != LOSS_BOUND:
            raise ParameterError(
                f"only bounded losses with B = 1 are supported, got {self.loss_bound_B}",
                "loss_bound_B",
            )
        try:
            object.__setattr__(self, "smooth_kind", SmoothKind(self.smooth_kind))
        except ValueError:
            raise ParameterError(f"unknown smooth_kind {self.smooth_kind!r}", "smooth_kind")


@dataclass(frozen=True)
class RegularityConstants:
    lipschitz_G: float
    smoothness_beta: float
    variance_sigma: float = 0.0
    heterogeneity_mu: float = 0.0
    domain_diameter_M: float = 20.0

    def __post_init__(self):
        for name in ("lipschitz_G", "smoothness_beta", "domain_diameter_M"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ParameterError(f"{name} must be positive and finite, got {value}", name)
        for name in ("variance_sigma", "heterogeneity_mu"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ParameterError(f"{name} must be non-negative and finite, got {value}", name)

    @classmethod
    def from_loss_spec(cls, spec: "BoundedLossSpec", sigma: float = 0.0, mu: float = 0.0):
        # Theta is the M-ball, so its diameter is 2M
        return cls(
            lipschitz_G=spec.lipschitz_G,
            smoothness_beta=spec.smoothness_beta,
            variance_sigma=sigma,
            heterogeneity_mu=mu,
            domain_diameter_M=2.0 * spec.domain_radius_M,
        )


def _scalar_or_array(x):
    if np.ndim(x) == 0:
        return float(x)
    return x


def _check_gamma(gamma: float):
    if not gamma > 0:
        raise ParameterError(f"gamma must be positive, got {gamma}", "gamma")


def _check_domain(loss, c, bound: float):
    loss = np.asarray(loss, dtype=float)
    c = np.asarray(c, dtype=float)
    if loss.size and (np.any(loss < 0.0) or np.any(loss > bound) or np.any(np.isnan(loss))):
        raise DomainError(f"loss must lie in [0, {bound}]")
    if c.size and (np.any(c < 0.0) or np.any(c > bound) or np.any(np.isnan(c))):
        raise DomainError(f"threshold c must lie in [0, {bound}]")


def plus(x: ArrayLike) -> ArrayLike:
    return _scalar_or_array(np.maximum(x, 0.0))


def smooth_plus(
    x: ArrayLike, gamma: float, kind: SmoothKind = SmoothKind.SOFT_RELU
) -> Tuple[ArrayLike, ArrayLike]:
    """Smooth plus function s and its derivative s'.

    soft_relu:            s(x) = gamma ln(1 + e^(x/gamma)), gap <= gamma ln 2
    zang:                 quadratic on |x| < gamma/2, gap <= gamma/8
    piecewise_quadratic:  quadratic on |x| < gamma, gap <= gamma/4
    """
    _check_gamma(gamma)
    kind = SmoothKind(kind)
    x = np.asarray(x, dtype=float)
    if kind is SmoothKind.SOFT_RELU:
        z = x / gamma
        # max(x, 0) + gamma log1p(e^-|z|) never overflows
        value = np.maximum(x, 0.0) + gamma * np.log1p(np.exp(-np.abs(z)))
        derivative = expit(z)
    else:
        half_width = gamma / 2.0 if kind is SmoothKind.ZANG else gamma
        shifted = x + half_width
        inside = np.abs(x) < half_width
        value = np.where(
            x >= half_width, x, np.where(inside, shifted**2 / (4.0 * half_width), 0.0)
        )
        derivative = np.where(
            x >= half_width, 1.0, np.where(inside, shifted / (2.0 * half_width), 0.0)
        )
    return _scalar_or_array(value), _scalar_or_array(derivative)


def smooth_plus_second_derivative(
    x: ArrayLike, gamma: float, kind: SmoothKind = SmoothKind.SOFT_RELU
) -> ArrayLike:
    _check_gamma(gamma)
    kind = SmoothKind(kind)
    x = np.asarray(x, dtype=float)
    if kind is SmoothKind.SOFT_RELU:
        sig = expit(x / gamma)
        curvature = sig * (1.0 - sig) / gamma
    else:
        half_width = gamma / 2.0 if kind is SmoothKind.ZANG else gamma
        curvature = np.where(np.abs(x) < half_width, 1.0 / (2.0 * half_width), 0.0)
    return _scalar_or_array(curvature)


def f_aux(loss: ArrayLike, c: ArrayLike, params: RcvarParams, strict: bool = True) -> ArrayLike:
    if strict:
        _check_domain(loss, c, params.loss_bound_B)
    loss = np.asarray(loss, dtype=float)
    eps = params.epsilon
    value = (1.0 - eps) * (c + np.maximum(loss - c, 0.0) / params.rho) + eps * loss
    return _scalar_or_array(value)


def f_smooth(
    loss: ArrayLike, c: ArrayLike, params: RcvarParams, strict: bool = True
) -> ArrayLike:
    if strict:
        _check_domain(loss, c, params.loss_bound_B)
    loss = np.asarray(loss, dtype=float)
    s, _ = smooth_plus(loss - c, params.gamma, params.smooth_kind)
    eps = params.epsilon
    value = (1.0 - eps) * (c + np.asarray(s) / params.rho) + eps * loss
    return _scalar_or_array(value)


def _scale_rows(coef, loss_grad_theta, loss):
    coef = np.asarray(coef)
    g = np.asarray(loss_grad_theta, dtype=float)
    if g.ndim > np.ndim(loss):
        coef = coef[..., np.newaxis]
    return coef * g


def f_smooth_grad(
    loss: ArrayLike,
    loss_grad_theta: np.ndarray,
    c: ArrayLike,
    params: RcvarParams,
    strict: bool = True,
) -> Tuple[np.ndarray, ArrayLike]:
    """Chain-rule gradient of f~ with respect to (theta, c).

    For a batch, loss has shape (n,) and loss_grad_theta shape (n, p).
    """
    if strict:
        _check_domain(loss, c, params.loss_bound_B)
    loss = np.asarray(loss, dtype=float)
    _, ds = smooth_plus(loss - c, params.gamma, params.smooth_kind)
    eps = params.epsilon
    coef = (1.0 - eps) * np.asarray(ds) / params.rho + eps
    grad_theta = _scale_rows(coef, loss_grad_theta, loss)
    grad_c = (1.0 - eps) * (1.0 - np.asarray(ds) / params.rho)
    return grad_theta, _scalar_or_array(grad_c)


def f_aux_subgradient(
    loss: ArrayLike,
    loss_grad_theta: np.ndarray,
    c: ArrayLike,
    params: RcvarParams,
    t: float = 0.5,
    tol: float = EQUALITY_TOL,
    strict: bool = True,
) -> Tuple[np.ndarray, ArrayLike]:
    """Element of the subdifferential of f; t in [0, 1] selects it on the kink l = c"""
    if not 0.0 <= t <= 1.0:
        raise ParameterError(f"t must lie in [0, 1], got {t}", "t")
    if strict:
        _check_domain(loss, c, params.loss_bound_B)
    diff = np.asarray(loss, dtype=float) - c
    active = np.where(diff > tol, 1.0, np.where(diff < -tol, 0.0, t))
    eps = params.epsilon
    coef = (1.0 - eps) * active / params.rho + eps
    grad_theta = _scale_rows(coef, loss_grad_theta, diff)
    grad_c = (1.0 - eps) * (1.0 - active / params.rho)
    return grad_theta, _scalar_or_array(grad_c)


def lipschitz_constant(params: RcvarParams, loss_G: float) -> float:
    """G_{rho,eps}: Lipschitz constant of f and f~ in (theta, c)"""
    if not loss_G > 0:
        raise ParameterError(f"loss_G must be positive, got {loss_G}", "loss_G")
    eps, rho = params.epsilon, params.rho
    active = math.sqrt(
        loss_G**2 * (1.0 - eps + eps * rho) ** 2 + (1.0 - eps) ** 2 * (rho - 1.0) ** 2
    ) / rho
    inactive = math.sqrt(loss_G**2 * eps**2 + (1.0 - eps) ** 2)
    return max(active, inactive)


def smoothness_constant(
    params: RcvarParams, loss_G: float, loss_beta: float, threshold_direction: bool = False
) -> float:
    """beta~ = (1-eps)/rho (beta + 2 G^2 / gamma) + eps beta.

    That bound covers perturbations of theta. Moving c as well adds (1-eps)/rho s''
    along the threshold axis; threshold_direction=True returns the joint bound with
    G^2 replaced by G^2 + 1.
    """
    if not (loss_G > 0 and loss_beta > 0):
        raise ParameterError("loss_G and loss_beta must be positive")
    eps, rho, gamma = params.epsilon, params.rho, params.gamma
    curvature = loss_G**2 + (1.0 if threshold_direction else 0.0)
    return (1.0 - eps) / rho * (loss_beta + 2.0 / gamma * curvature) + eps * loss_beta
