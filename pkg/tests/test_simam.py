import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bss.errors import DegenerateInputError
from bss.gradcheck import numeric_grad
from bss.simam import (
    SimAMConfig,
    loo_energy,
    loo_min_energies,
    simam_analytic_solution,
    simam_backward,
    simam_energy,
    simam_forward,
    simam_oracle_min,
    simam_weights,
)


def logistic(z):
    return 1.0 / (1.0 + math.exp(-z))


def plane(values):
    return np.asarray(values, dtype=np.float64).reshape(1, 1, 1, -1)


def test_constant_channel_energy_is_two():
    for lam in (1e-4, 0.3, 5.0):
        e = simam_energy(np.full((2, 3, 4, 4), -1.7), SimAMConfig(lam))
        np.testing.assert_allclose(e.e_star, 2.0, rtol=1e-15)


def test_energy_hand_value():
    # mean 2.5, biased var 1.25: 4 * 1.35 / (2.25 + 2.5 + 0.2)
    e = simam_energy(plane([1, 2, 3, 4]), 0.1)
    assert abs(e.e_star.ravel()[0] - 1.090909) <= 1e-6
    assert e.mu_hat.item() == 2.5 and abs(e.sigma2_hat.item() - 1.25) <= 1e-12


def test_energy_affine_invariance(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    a, c, lam = 3.0, -2.0, 0.01
    np.testing.assert_allclose(
        simam_energy(a * x + c, a * a * lam).e_star, simam_energy(x, lam).e_star, atol=1e-6)


def test_forward_examples():
    assert np.all(simam_forward(np.zeros((1, 2, 3, 3))) == 0)
    v = 3.25
    y = simam_forward(np.full((1, 1, 2, 2), v))
    np.testing.assert_allclose(y, logistic(0.5) * v, rtol=1e-12)
    assert abs(logistic(0.5) - 0.622459) <= 1e-6
    y = simam_forward(plane([1, 2, 3, 4]), 0.1)
    assert abs(y.ravel()[0] - logistic(1 / 1.090909090909)) <= 1e-12
    assert abs(y.ravel()[0] - 0.714371) <= 1e-5


def test_lambda_zero_constant_channel_rejected():
    with pytest.raises(DegenerateInputError):
        simam_energy(np.ones((1, 1, 2, 2)), 0.0)
    simam_energy(plane([1.0, 2.0]), 0.0)  # nonzero variance is fine


def test_statistics_are_per_sample():
    x = np.stack([np.arange(4.0).reshape(1, 2, 2), 100 + 10 * np.arange(4.0).reshape(1, 2, 2)])
    e = simam_energy(x, 0.0)
    np.testing.assert_allclose(e.e_star[0], e.e_star[1], rtol=1e-6)


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1e-4, 1e-2, 0.1]))
def test_weight_bounds_and_order(seed, lam):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 3, 4)) * rng.uniform(0.1, 10)
    e = simam_energy(x, lam)
    d2 = (x - e.mu_hat) ** 2
    lower = 4 * (e.sigma2_hat + lam) / (d2.max(axis=(2, 3), keepdims=True) + 2 * e.sigma2_hat + 2 * lam)
    assert np.all(e.e_star >= lower * (1 - 1e-12)) and np.all(e.e_star > 0)
    w = simam_weights(x, lam)
    assert np.all((w > 0.5) & (w < 1))
    for c in range(2):
        o = np.argsort(d2[0, c].ravel())
        assert np.all(np.diff(w[0, c].ravel()[o]) >= 0)
    y = simam_forward(x, lam)
    assert np.array_equal(np.sign(y), np.sign(x))


# --- exact leave-one-out oracle


def test_oracle_at_loo_mean():
    ch = np.array([1.0, 3.0, 2.0, 5.0, 4.0])  # others of index 2 average to 3.25
    ch[2] = np.delete(ch, 2).mean()
    sol = simam_oracle_min(ch, 2, 0.01)
    assert abs(sol.omega_t) <= 1e-12 and abs(sol.b_t) <= 1e-12
    assert abs(sol.e_min - 2.0) <= 1e-12


def test_oracle_random_channel(rng):
    ch = rng.standard_normal(8)
    for t in range(8):
        sol = simam_oracle_min(ch, t, 0.01)
        om, b = simam_analytic_solution(ch, t, 0.01)
        assert abs(om - sol.omega_t) <= 1e-8 and abs(b - sol.b_t) <= 1e-8
        assert abs(sol.e_min - float(loo_energy(ch, t, 0.01, om, b))) <= 1e-9
        assert sol.e_min <= 2.0 and not sol.beaten
        # closed-form minimum with leave-one-out statistics
        others = np.delete(ch, t)
        d2 = (ch[t] - others.mean()) ** 2
        assert abs(sol.e_min - 4 * (others.var() + 0.01) / (d2 + 2 * others.var() + 0.02)) <= 1e-12


def test_printed_sign_is_not_the_minimiser(rng):
    # the mirrored solution (-omega, -b) labels the target -1 and the rest +1
    ch = rng.standard_normal(16)
    om, b = simam_analytic_solution(ch, 0, 1e-4)
    assert loo_energy(ch, 0, 1e-4, -om, -b) > loo_energy(ch, 0, 1e-4, om, b) + 1e-3


def test_oracle_degenerate():
    with pytest.raises(DegenerateInputError):
        simam_oracle_min(np.ones(5), 0, 0.0)
    sol = simam_oracle_min(np.ones(5), 0, 1e-3)
    assert abs(sol.e_min - 2.0) <= 1e-12


def test_vectorised_loo_matches_scalar_oracle(rng):
    ch = rng.standard_normal(12)
    e = loo_min_energies(ch, 0.05)
    for t in range(12):
        assert abs(e[t] - simam_oracle_min(ch, t, 0.05, samples=0).e_min) <= 1e-12


# --- backward


def test_backward_zero_input():
    x = np.zeros((1, 2, 2, 2))
    u = np.random.default_rng(0).standard_normal(x.shape)
    np.testing.assert_allclose(simam_backward(x, SimAMConfig(), u), logistic(0.5) * u, rtol=1e-15)


def test_backward_zero_upstream(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    assert np.all(simam_backward(x, SimAMConfig(), np.zeros_like(x)) == 0)


def test_backward_finite_differences(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    u = rng.standard_normal(x.shape)
    cfg = SimAMConfig(1e-4)
    num = numeric_grad(lambda v: float((u * simam_forward(v, cfg)).sum()), x)
    ana = simam_backward(x, cfg, u)
    rel = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
    assert rel.max() <= 1e-4
