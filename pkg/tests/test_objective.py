import math

import numpy as np
import pytest

from fedsrcvar.errors import DomainError, ParameterError
from fedsrcvar.objective import (
    RcvarParams,
    SmoothKind,
    f_aux,
    f_aux_subgradient,
    f_smooth,
    f_smooth_grad,
    lipschitz_constant,
    plus,
    smooth_plus,
    smooth_plus_second_derivative,
    smoothness_constant,
)

KINDS = list(SmoothKind)


def test_plus():
    assert plus(0.3) == 0.3
    assert plus(-0.3) == 0.0
    assert plus(0.0) == 0.0


def test_smooth_plus_soft_relu_values():
    value, derivative = smooth_plus(0.0, 0.05)
    assert value == pytest.approx(0.05 * math.log(2.0), abs=1e-15)
    assert derivative == 0.5
    value, derivative = smooth_plus(10.0, 0.05)
    assert value == pytest.approx(10.0, abs=1e-12)
    assert derivative == pytest.approx(1.0, abs=1e-12)
    value, derivative = smooth_plus(-10.0, 0.05)
    assert value == pytest.approx(0.0, abs=1e-12)
    assert derivative == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("gamma", [0.01, 0.05, 0.5])
def test_smooth_plus_sandwich(kind, gamma):
    x = np.random.default_rng(0).uniform(-2.0, 2.0, 100_000)
    value, derivative = smooth_plus(x, gamma, kind)
    gap = value - np.maximum(x, 0.0)
    assert gap.min() >= -1e-12
    assert gap.max() <= gamma + 1e-12
    assert derivative.min() >= 0.0
    assert derivative.max() <= 1.0


@pytest.mark.parametrize("kind", KINDS)
def test_smooth_plus_derivative_is_lipschitz(kind):
    gamma = 0.05
    x = np.random.default_rng(1).uniform(-0.5, 0.5, 10_000)
    assert np.max(smooth_plus_second_derivative(x, gamma, kind)) <= 2.0 / gamma
    y = x + np.random.default_rng(2).uniform(-0.05, 0.05, x.size)
    _, dx = smooth_plus(x, gamma, kind)
    _, dy = smooth_plus(y, gamma, kind)
    assert np.all(np.abs(dx - dy) <= 2.0 / gamma * np.abs(x - y) + 1e-12)


def test_smooth_plus_rejects_bad_gamma():
    with pytest.raises(ParameterError):
        smooth_plus(0.1, 0.0)
    with pytest.raises(ParameterError):
        smooth_plus(0.1, -1.0)


def test_params_validation():
    with pytest.raises(ParameterError) as e:
        RcvarParams(rho=1.5)
    assert e.value.field == "rho"
    with pytest.raises(ParameterError):
        RcvarParams(epsilon=-0.1)
    with pytest.raises(ParameterError):
        RcvarParams(gamma=0.0)
    with pytest.raises(ParameterError):
        RcvarParams(loss_bound_B=2.0)
    with pytest.raises(ParameterError):
        RcvarParams(smooth_kind="cubic")
    assert RcvarParams(smooth_kind="zang").smooth_kind is SmoothKind.ZANG


def test_f_aux_values():
    assert f_aux(0.8, 0.5, RcvarParams(epsilon=0.0, rho=0.5)) == pytest.approx(1.1)
    assert f_aux(0.8, 0.5, RcvarParams(epsilon=1.0, rho=0.5)) == pytest.approx(0.8)
    assert f_aux(0.3, 0.5, RcvarParams(epsilon=0.5, rho=0.5)) == pytest.approx(0.4)


def test_f_aux_domain():
    params = RcvarParams()
    with pytest.raises(DomainError):
        f_aux(1.2, 0.5, params)
    with pytest.raises(DomainError):
        f_aux(0.5, -0.1, params)
    with pytest.raises(DomainError):
        f_smooth(np.array([0.1, -0.01]), 0.5, params)
    # training callers may opt out of the check
    assert f_aux(1.2, 0.5, RcvarParams(epsilon=1.0), strict=False) == pytest.approx(1.2)


def test_f_smooth_value():
    params = RcvarParams(epsilon=0.0, rho=0.5, gamma=0.05)
    assert f_smooth(0.5, 0.5, params) == pytest.approx(0.569315, abs=1e-6)
    assert f_smooth(0.8, 0.5, RcvarParams(epsilon=1.0, rho=0.5)) == 0.8


def test_epsilon_one_ignores_threshold():
    params = RcvarParams(epsilon=1.0)
    losses = np.random.default_rng(3).uniform(0.0, 1.0, 50)
    for c in np.linspace(0.0, 1.0, 11):
        assert np.array_equal(f_aux(losses, c, params), losses)
        assert np.array_equal(f_smooth(losses, c, params), losses)


@pytest.mark.parametrize("kind", KINDS)
def test_f_smooth_sandwich(kind):
    rng = np.random.default_rng(4)
    losses = rng.uniform(0.0, 1.0, 100_000)
    cs = rng.uniform(0.0, 1.0, 100_000)
    for epsilon in (0.0, 0.3, 0.9):
        params = RcvarParams(epsilon=epsilon, rho=0.2, gamma=0.05, smooth_kind=kind)
        gap = f_smooth(losses, cs, params) - f_aux(losses, cs, params)
        assert gap.min() >= -1e-12
        assert gap.max() <= (1.0 - epsilon) * 0.05 / 0.2 + 1e-12


def test_f_smooth_grad_epsilon_one_is_loss_gradient():
    g = np.array([0.2, -0.4, 0.1])
    grad_theta, grad_c = f_smooth_grad(0.7, g, 0.3, RcvarParams(epsilon=1.0))
    assert np.array_equal(grad_theta, g)
    assert grad_c == 0.0


def test_f_smooth_grad_inactive_tail():
    params = RcvarParams(epsilon=0.2, rho=0.5, gamma=0.05)
    g = np.array([1.0, -2.0])
    grad_theta, grad_c = f_smooth_grad(0.1, g, 0.9, params)
    np.testing.assert_allclose(grad_theta, 0.2 * g, rtol=1e-5)
    assert grad_c == pytest.approx(0.8, rel=1e-5)


def test_f_smooth_grad_batch_shapes():
    rng = np.random.default_rng(5)
    losses = rng.uniform(0.0, 1.0, 7)
    grads = rng.normal(size=(7, 3))
    grad_theta, grad_c = f_smooth_grad(losses, grads, 0.4, RcvarParams())
    assert grad_theta.shape == (7, 3)
    assert np.shape(grad_c) == (7,)


def test_subgradient_branches():
    params = RcvarParams(epsilon=0.0, rho=0.5)
    g = np.array([1.0])
    above_theta, above_c = f_aux_subgradient(0.8, g, 0.5, params)
    assert above_c == -1.0
    np.testing.assert_array_equal(above_theta, 2.0 * g)
    below_theta, below_c = f_aux_subgradient(0.2, g, 0.5, params)
    assert below_c == 1.0
    np.testing.assert_array_equal(below_theta, 0.0 * g)
    kink_theta, kink_c = f_aux_subgradient(0.5, g, 0.5, params, t=1.0)
    assert kink_c == above_c
    np.testing.assert_array_equal(kink_theta, above_theta)
    kink_theta, kink_c = f_aux_subgradient(0.5, g, 0.5, params, t=0.0)
    assert kink_c == below_c
    with pytest.raises(ParameterError):
        f_aux_subgradient(0.5, g, 0.5, params, t=1.5)


def test_lipschitz_constant_values():
    assert lipschitz_constant(RcvarParams(epsilon=0.0, rho=0.5), 1.0) == pytest.approx(
        2.23607, abs=1e-5
    )
    assert lipschitz_constant(RcvarParams(epsilon=1.0, rho=0.5), 1.0) == pytest.approx(1.0)
    with pytest.raises(ParameterError):
        lipschitz_constant(RcvarParams(), 0.0)


@pytest.mark.parametrize("epsilon", [0.0, 0.3, 0.9, 1.0])
@pytest.mark.parametrize("rho", [0.1, 0.5, 0.9])
def test_lipschitz_constant_dominates_single_terms(epsilon, rho):
    G = 0.7
    value = lipschitz_constant(RcvarParams(epsilon=epsilon, rho=rho), G)
    assert value >= G * epsilon
    assert value >= G * (1.0 - epsilon + epsilon * rho) / rho - 1e-12


def test_smoothness_constant_values():
    assert smoothness_constant(RcvarParams(epsilon=1.0, rho=0.5), 1.0, 2.0) == pytest.approx(2.0)
    params = RcvarParams(epsilon=0.0, rho=0.5, gamma=0.05)
    assert smoothness_constant(params, 1.0, 2.0) == pytest.approx(84.0)
    assert smoothness_constant(params, 1.0, 2.0, threshold_direction=True) == pytest.approx(164.0)
