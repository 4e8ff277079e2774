import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dnlab.errors import DimensionError, DomainError
from dnlab.sobolev import (BoundaryCalculus, frac_power_apply, hs_norm, lipschitz_approximation, operator_norm)


def circle(n, r=1.0):
    return BoundaryCalculus(np.full(n, 2 * r * math.sin(math.pi / n)))


def random_loop(n, seed):
    rng = np.random.default_rng(seed)
    return BoundaryCalculus(rng.uniform(0.5, 1.5, n) * 2 * math.pi / n)


def test_spectrum_sorted_and_mass_orthonormal():
    c = random_loop(40, 1)
    lam = c.eigenvalues
    assert lam[0] == 0 and np.all(np.diff(lam) >= 0)
    E = c.eigenvectors
    np.testing.assert_allclose(E.T @ (c.mass[:, None] * E), np.eye(40), atol=1e-10)
    assert np.ptp(E[:, 0]) < 1e-12


def test_s0_is_l2():
    c = random_loop(30, 2)
    f = np.random.default_rng(0).standard_normal(30)
    assert hs_norm(f, 0, c) == pytest.approx(math.sqrt(f @ (c.mass * f)), rel=1e-13)


@pytest.mark.parametrize("s", [-1.0, -0.5, 0.0, 0.5, 1.0])
def test_constant_norm(s):
    c = circle(64)
    assert hs_norm(np.ones(64), s, c) == pytest.approx(math.sqrt(c.volume), rel=1e-12)
    assert c.volume == pytest.approx(2 * math.pi, rel=2e-3)


@given(st.integers(0, 10_000))
def test_interpolation_inequality(seed):
    c = random_loop(24, seed)
    f = np.random.default_rng(seed).standard_normal(24)
    a = c.coefficients(f)
    w = 1 + c.eigenvalues
    brute = (np.sum(w ** 0.5 * a * a), np.sum(a * a), np.sum(w * a * a))
    assert hs_norm(f, 0.5, c) ** 2 == pytest.approx(brute[0], rel=1e-12)
    assert brute[0] <= math.sqrt(brute[1] * brute[2]) * (1 + 1e-12)


def test_frac_power_identity_and_eigen():
    c = random_loop(20, 3)
    f = np.random.default_rng(1).standard_normal(20)
    np.testing.assert_allclose(frac_power_apply(f, 0, c), f, atol=1e-12)
    e = c.eigenvectors[:, 5]
    np.testing.assert_allclose(frac_power_apply(e, 1.0, c), (1 + c.eigenvalues[5]) * e, atol=1e-10)


@given(st.floats(-1.0, 1.0), st.integers(0, 1000))
def test_frac_power_group(s, seed):
    c = random_loop(20, seed)
    f = np.random.default_rng(seed).standard_normal(20)
    g = frac_power_apply(frac_power_apply(f, s, c), -s, c)
    np.testing.assert_allclose(g, f, atol=1e-10 * np.abs(f).max())


def test_exponent_out_of_range():
    c = circle(16)
    with pytest.raises(DomainError):
        hs_norm(np.ones(16), 2.5, c)


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        hs_norm(np.ones(10), 0.5, circle(16))


def test_operator_norm_examples():
    c = random_loop(32, 4)
    assert operator_norm(np.eye(32), 0.5, 0.5, c) == pytest.approx(1.0, rel=1e-10)
    assert operator_norm(np.zeros((32, 32)), 0.5, -0.5, c) == 0.0
    lam = c.eigenvalues
    assert operator_norm(c.laplacian, 1, -1, c) == pytest.approx(np.max(lam / (1 + lam)), rel=1e-9)
    assert operator_norm(c.laplacian, 1, -1, c) < 1


def test_operator_norm_band_and_constants():
    c = random_loop(32, 5)
    P = np.ones((32, 32)) * c.mass[None, :] / c.volume  # projection onto constants
    assert operator_norm(P, 0, 0, c) == pytest.approx(1.0, rel=1e-10)
    assert operator_norm(P, 0, 0, c, project_constants=True) < 1e-12
    assert operator_norm(c.laplacian, 0, 0, c, band=4) <= operator_norm(c.laplacian, 0, 0, c)


def test_lipschitz_zero_when_eps_large():
    c = circle(32)
    f = np.cos(np.arange(32) * 2 * math.pi / 32 * 3)
    out = lipschitz_approximation(f, hs_norm(f, 0.5, c) * 1.01, c)
    assert np.all(out.values == 0) and out.w1inf == 0


def test_lipschitz_keeps_single_mode():
    c = random_loop(32, 6)
    e = c.eigenvectors[:, 7]
    out = lipschitz_approximation(e, 0.5 * hs_norm(e, 0.5, c), c)
    np.testing.assert_allclose(out.values, e, atol=1e-12)


def test_lipschitz_error_and_envelope():
    c = circle(128)
    rng = np.random.default_rng(7)
    ratios = []
    for _ in range(100):
        f = rng.standard_normal(128)
        f /= hs_norm(f, 0.5, c)
        eps = rng.uniform(0.05, 0.9)
        out = lipschitz_approximation(f, eps, c)
        assert hs_norm(f - out.values, 0.5, c) <= eps * (1 + 1e-9)
        ratios.append(out.w1inf * eps)
    # W^{1,inf} norm grows at most like c / eps; c is finite and fitted
    cfit = max(ratios)
    assert np.isfinite(cfit)
    assert all(r <= cfit for r in ratios)
