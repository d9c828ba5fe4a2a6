"""Linear models with losses scaled into [0, 1] on the bounded domain
||theta|| <= M, ||x|| <= R, so the loss is convex, G-Lipschitz and beta-smooth with
exactly computable constants."""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Tuple

import numpy as np
from scipy.special import expit  # type: ignore

from .errors import DataError, ParameterError, UnsupportedError

if TYPE_CHECKING:
    from .datagen import Dataset

logger = logging.getLogger(__name__)

NORM_TOL = 1e-12


class LossKind(str, Enum):
    SCALED_LOGISTIC = "scaled_logistic"
    SCALED_SQUARED = "scaled_squared"


@dataclass(frozen=True)
class BoundedLossSpec:
    kind: LossKind = LossKind.SCALED_LOGISTIC
    feature_radius_R: float = 1.0
    domain_radius_M: float = 10.0
    fit_bias: bool = True
    label_bound: float = 1.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", LossKind(self.kind))
        except ValueError:
            raise ParameterError(f"unknown loss kind {self.kind!r}", "kind")
        for name in ("feature_radius_R", "domain_radius_M", "label_bound"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive", name)

    @property
    def input_radius(self) -> float:
        """Norm bound of the augmented input [x, 1]"""
        if self.fit_bias:
            return math.sqrt(self.feature_radius_R**2 + 1.0)
        return self.feature_radius_R

    @property
    def loss_sup(self) -> float:
        """B_max: supremum of the raw loss over the domain"""
        margin = self.domain_radius_M * self.input_radius
        if self.kind is LossKind.SCALED_LOGISTIC:
            return float(np.logaddexp(0.0, margin))
        return (margin + self.label_bound) ** 2

    @property
    def lipschitz_G(self) -> float:
        r = self.input_radius
        if self.kind is LossKind.SCALED_LOGISTIC:
            return r / self.loss_sup
        return 2.0 * (self.domain_radius_M * r + self.label_bound) * r / self.loss_sup

    @property
    def smoothness_beta(self) -> float:
        r = self.input_radius
        if self.kind is LossKind.SCALED_LOGISTIC:
            return r**2 / (4.0 * self.loss_sup)
        return 2.0 * r**2 / self.loss_sup

    def model_dimension(self, num_features: int) -> int:
        return num_features + (1 if self.fit_bias else 0)


@dataclass
class LinearModel:
    weights: np.ndarray
    domain_radius_M: float = 10.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)

    def copy(self) -> "LinearModel":
        return LinearModel(self.weights.copy(), self.domain_radius_M)

    @classmethod
    def zeros(cls, num_features: int, spec: BoundedLossSpec) -> "LinearModel":
        return cls(np.zeros(spec.model_dimension(num_features)), spec.domain_radius_M)


def augment(features: np.ndarray, spec: BoundedLossSpec) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    if not spec.fit_bias:
        return features
    ones = np.ones(features.shape[:-1] + (1,))
    return np.concatenate([features, ones], axis=-1)


def check_feature_norms(features: np.ndarray, spec: BoundedLossSpec):
    norms = np.linalg.norm(np.atleast_2d(features), axis=1)
    if not np.isfinite(norms).all():
        raise DataError("non-finite feature values")
    worst = float(norms.max()) if norms.size else 0.0
    if worst > spec.feature_radius_R * (1.0 + NORM_TOL):
        raise DataError(
            f"feature norm {worst:.6g} exceeds the feature radius R = {spec.feature_radius_R}"
        )


def batch_loss_and_grad(
    weights: np.ndarray, features: np.ndarray, labels: np.ndarray, spec: BoundedLossSpec
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample scaled losses (n,) and their gradients (n, p).

    weights is either one parameter vector (p,) or one vector per sample (n, p).
    """
    inputs = augment(features, spec)
    labels = np.asarray(labels, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if weights.ndim == 2:
        scores = np.einsum("ij,ij->i", inputs, weights)
    else:
        scores = inputs @ weights
    scale = 1.0 / spec.loss_sup
    if spec.kind is LossKind.SCALED_LOGISTIC:
        signs = 2.0 * labels - 1.0
        margins = signs * scores
        raw = np.logaddexp(0.0, -margins)
        slope = -signs * expit(-margins)
    else:
        residuals = scores - labels
        raw = residuals**2
        slope = 2.0 * residuals
    return scale * raw, (scale * slope)[:, np.newaxis] * inputs


def loss_and_grad(
    model: LinearModel, spec: BoundedLossSpec, sample: Tuple[np.ndarray, float]
) -> Tuple[float, np.ndarray]:
    features, label = sample
    features = np.asarray(features, dtype=float).reshape(1, -1)
    check_feature_norms(features, spec)
    if spec.kind is LossKind.SCALED_LOGISTIC and label not in (0, 1):
        raise DataError(f"logistic labels must be 0 or 1, got {label}")
    if spec.kind is LossKind.SCALED_SQUARED and abs(label) > spec.label_bound:
        raise DataError(f"label {label} exceeds the label bound {spec.label_bound}")
    losses, grads = batch_loss_and_grad(model.weights, features, np.array([label]), spec)
    return float(losses[0]), grads[0]


def project_weights(weights: np.ndarray, radius: float) -> np.ndarray:
    norm = float(np.linalg.norm(weights))
    if norm <= radius * (1.0 + NORM_TOL):
        return weights
    return weights * (radius / norm)


def project_model(model: LinearModel) -> LinearModel:
    """Radial projection onto the ball ||w|| <= M"""
    projected = project_weights(model.weights, model.domain_radius_M)
    if projected is model.weights:
        return model
    return LinearModel(projected, model.domain_radius_M)


def predict_proba(weights: np.ndarray, features: np.ndarray, spec: BoundedLossSpec) -> np.ndarray:
    if spec.kind is not LossKind.SCALED_LOGISTIC:
        raise UnsupportedError("probabilities are only defined for the logistic loss")
    return expit(augment(features, spec) @ np.asarray(weights, dtype=float))


def uniform_losses(spec: BoundedLossSpec, n: int) -> np.ndarray:
    if spec.kind is not LossKind.SCALED_LOGISTIC:
        raise UnsupportedError("the uniform classifier is undefined for regression losses")
    return np.full(n, math.log(2.0) / spec.loss_sup)


def uniform_classifier_risk(spec: BoundedLossSpec, dataset: "Dataset") -> float:
    """Risk of the constant predictor p(y) = 1/2: ln 2 / B_max for any binary dataset"""
    if spec.kind is not LossKind.SCALED_LOGISTIC:
        raise UnsupportedError("the uniform classifier is undefined for regression losses")
    if dataset.n == 0:
        raise DataError("empty dataset")
    return math.log(2.0) / spec.loss_sup
