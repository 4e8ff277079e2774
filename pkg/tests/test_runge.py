import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import expi

from dnlab.errors import ConfigurationError, DomainError, FitError
from dnlab.geometry import attach_cylinder, build_disk
from dnlab.runge import (FitConstants, RungeOperators, adjoint_lower_bound_experiment, fit_alpha,
                         fit_envelope_sigma0, li, li_bounds, li_envelope, li_inv, precondition_threshold,
                         recurrence_sandwich_check, recurrence_simulate, reference_operators, runge_iterate,
                         runge_step, tent)


@pytest.fixture(scope="module")
def ops():
    return reference_operators(32)


@pytest.fixture(scope="module")
def K(ops):
    return adjoint_lower_bound_experiment(ops).K


def sigma1_theta(ops):
    return np.linspace(0, 2 * np.pi, ops.cs.n, endpoint=False)


# --------------------------------------------------------------------- li
def test_li_reference_values():
    assert li(2.0) == 0.0
    for t in (2.5, 10.0, 1e3, 1e6):
        assert li(t) == pytest.approx(expi(math.log(t)) - expi(math.log(2)), rel=1e-12)


@given(st.floats(2.001, 1e6))
def test_li_roundtrip(t):
    assert abs(li_inv(li(t)) - t) <= 1e-8 * t


def test_li_derivative():
    for t in (3.0, 50.0, 1e4):
        h = 1e-4 * t
        assert (li(t + h) - li(t - h)) / (2 * h) == pytest.approx(1 / math.log(t), rel=1e-7)


def test_li_domain():
    assert li(1.5) < 0
    with pytest.raises(DomainError):
        li(1.0)


# -------------------------------------------------------------- recurrence
def test_recurrence_constant_when_C_zero():
    s = recurrence_simulate(4.0, 0.0, 100).sigma
    assert np.all(s == 4.0)
    np.testing.assert_array_equal(li_bounds(4.0, 0.0, 100), s)


def test_recurrence_increasing():
    s = recurrence_simulate(4.0, 0.1, 1000).sigma
    assert np.all(np.diff(s) > 0)
    assert s[1] == pytest.approx(4.0 * (1 + 0.1 * math.exp(-4.0)), rel=1e-15)


def test_precondition_threshold():
    x = precondition_threshold(1.0)
    assert x * math.exp(-x) == pytest.approx(1 / 12, rel=1e-10)
    with pytest.raises(ConfigurationError):
        recurrence_sandwich_check(3.0, 1.0, 10)
    with pytest.raises(ConfigurationError):
        recurrence_simulate(-1.0, 1.0, 10)


@pytest.mark.parametrize("sigma0,C", [(4.0, 0.1), (5.0, 1.0), (6.0, 2.0)])
def test_sandwich(sigma0, C):
    rep = recurrence_sandwich_check(sigma0, C, 20_000)
    assert rep.passed and rep.first_violation is None
    assert rep.lower_slack >= -1e-12 and rep.upper_slack >= -1e-12
    assert rep.roundtrip <= 1e-8


# ------------------------------------------------------ adjoint lower bound
def test_adjoint_bound_anchor_and_scaling(ops):
    fit = adjoint_lower_bound_experiment(ops)
    lam = np.array(fit.provenance["lambda"])
    ratio = np.array(fit.provenance["ratio"])
    assert np.argmin(lam) == np.argmax(ratio) == 0
    fs = ops.cs.eigenvectors.T[:6]
    a = adjoint_lower_bound_experiment(ops, fs).provenance["ratio"]
    b = adjoint_lower_bound_experiment(ops, 2 * fs).provenance["ratio"]
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_adjoint_envelope_validity():
    ops = reference_operators(128)
    fit = adjoint_lower_bound_experiment(ops)
    lam = np.array(fit.provenance["lambda"])
    ratio = np.array(fit.provenance["ratio"])
    used = np.array(fit.provenance["used"])
    assert len(lam) >= 50
    assert np.all(ratio[used] >= np.exp(-fit.K * lam[used]) * (1 - 1e-12))
    # log-ratio decreasing in lambda until the round-off plateau near 1e-11;
    # cos/sin pairs share lambda and are grouped
    above = ratio > 1e-10
    lam_u, lr = np.round(lam[above], 8), np.log(ratio[above])
    levels = np.unique(lam_u)
    top = np.array([lr[lam_u == v].max() for v in levels])
    assert len(levels) >= 15
    assert np.all(np.diff(top) < 0)


def test_adjoint_no_reliable_pairs(ops):
    with pytest.raises(FitError):
        adjoint_lower_bound_experiment(ops, reliable=1e10)


def test_cylinder_length_scaling():
    base = build_disk(1.0, 128, sigma1_radius=0.5)
    Ks = []
    for L in (1.5, 3.0):
        mesh, g = attach_cylinder(base, L, int(20 * L))
        Ks.append(adjoint_lower_bound_experiment(RungeOperators(mesh, g)).K)
    assert 2 * 0.7 <= Ks[1] / Ks[0] <= 2 * 1.3


# -------------------------------------------------------------- runge step
def test_step_random_v_rate(ops, K):
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = rng.standard_normal(ops.cs.n)
        v /= ops.norm(v)
        lam = ops.norm(v, 1.0) ** 2
        st_ = runge_step(v, K, lam, ops)
        assert 0 < st_.mu < 1
        assert -math.log(st_.mu) / lam <= 1.5 * K
        assert ops.norm(st_.v_next) == pytest.approx(1.0, abs=1e-12)


def test_step_exact_representable(ops, K):
    w0 = np.cos(2 * np.linspace(0, 2 * np.pi, ops.cb.n, endpoint=False))
    v = ops.T @ w0
    st_ = runge_step(v, K, ops.norm(v, 1.0) ** 2 / ops.norm(v) ** 2, ops, exact=True)
    assert 1 - st_.mu <= 1e-12


def test_step_zero_v(ops, K):
    with pytest.raises(DomainError):
        runge_step(np.zeros(ops.cs.n), K, 1.0, ops)


# ----------------------------------------------------------- runge iterate
def test_iterate_harmonic_restriction(ops, K):
    f = ops.T @ np.sin(np.linspace(0, 2 * np.pi, ops.cb.n, endpoint=False))
    tr = runge_iterate(f, 1e-6, FitConstants(K=K, C=1.0), ops, exact=True)
    assert tr.converged and len(tr.mu) <= 3
    assert tr.relative_residual[-1] <= 1e-6


def test_iterate_needs_K(ops):
    with pytest.raises(ConfigurationError):
        runge_iterate(np.ones(ops.cs.n), 0.5, FitConstants(), ops)
    with pytest.raises(DomainError):
        runge_iterate(np.ones(ops.cs.n), 0.0, FitConstants(K=1.0), ops)


def test_iterate_tent_monotone(ops, K, tmp_path):
    f = tent(sigma1_theta(ops))
    tr = runge_iterate(f, 0.3, FitConstants(K=K, C=1.0), ops)
    assert tr.converged and tr.monotone()
    assert tr.product_defect() <= 1e-10
    assert np.all(np.diff(tr.lam) >= 0)
    p = tmp_path / "runge.csv"
    tr.write_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "i,lambda,mu,residual,cost" and len(lines) == len(tr.residual) + 1


def test_iterate_homogeneous(ops, K):
    f = tent(sigma1_theta(ops))
    c = FitConstants(K=K, C=1.0)
    a, b = runge_iterate(f, 0.5, c, ops), runge_iterate(2 * f, 0.5, c, ops)
    np.testing.assert_allclose(a.relative_residual, b.relative_residual, rtol=1e-10)
    np.testing.assert_allclose(2 * a.u, b.u, rtol=1e-10, atol=1e-12)


def test_iterate_cap_flag(ops, K):
    tr = runge_iterate(tent(sigma1_theta(ops)), 1e-3, FitConstants(K=K, C=1.0), ops, max_iter=5)
    assert not tr.converged and len(tr.mu) == 5


def test_high_frequency_envelope(ops, K):
    e = ops.cs.eigenvectors[:, -3]
    tr = runge_iterate(e, 0.5, FitConstants(K=K, C=1.0), ops, max_iter=300)
    assert tr.monotone()
    s0 = fit_envelope_sigma0(tr)
    prod = np.exp(tr.log_product)
    assert np.all(prod <= li_envelope(s0, 1.0, len(prod)) * (1 + 1e-12))


def test_cost_exponent(ops, K):
    f = tent(sigma1_theta(ops))
    c = FitConstants(K=K, C=1.0)
    eps = [0.5, 0.3, 0.2]
    traces = [runge_iterate(f, e, c, ops, max_iter=3000) for e in eps]
    costs = [tr.cost[-1] for tr in traces]
    assert all(a < b for a, b in zip(costs, costs[1:]))
    s0 = fit_envelope_sigma0(traces[-1])
    alpha = fit_alpha(eps, costs, s0)
    assert 0 < alpha < 5


def test_fit_alpha_synthetic():
    eps = np.array([0.5, 0.3, 0.2, 0.1])
    costs = np.exp((3.0 / eps) ** 0.7)
    assert fit_alpha(eps, costs, 3.0) == pytest.approx(0.7, rel=1e-10)
    with pytest.raises(FitError):
        fit_alpha(eps, np.ones(4), 3.0)
