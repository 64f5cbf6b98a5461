import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _util import central_diff, rel_l2
from spectralbp.autodiff import constant, grad, ops, parameter
from spectralbp.estimators import (DegenerateOperatorError, EstimatorConfig, LinearOperator, SpectralBoundWarning,
                                   chebyshev_coefficients, chebyshev_nodes, draw_probes, draw_start,
                                   hutchinson_trace, power_method, rescale_maps, stochastic_chebyshev_trace,
                                   stochastic_logdet_chebyshev, stochastic_logdet_taylor, taylor_coefficients)
from spectralbp.linalg import Rng, cholesky_logdet, random_spd, sym_eig

DEFAULT_CFG = EstimatorConfig(m=10, p=20, t=20, g=1.2)


def dense(a):
    return LinearOperator.dense(np.asarray(a, dtype=np.float64))


# --- config and operator ---------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(m=0), dict(p=0), dict(t=0), dict(g=0.9), dict(eps=0.0), dict(power_grad="x")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        EstimatorConfig(**kw)


def test_operator_shape_contract_and_spot_check():
    op = dense(np.diag([1.0, 2.0]))
    with pytest.raises(ValueError):
        op(constant(np.ones((3, 1))))
    op.spot_check(Rng(0))
    with pytest.raises(Exception):
        dense(np.array([[1.0, 2.0], [0.0, 1.0]])).spot_check(Rng(0))
    with pytest.raises(ValueError):
        dense(-np.eye(2)).spot_check(Rng(0))


# --- power method -----------------------------------------------------------------------

def test_power_method_diagonal():
    assert power_method(dense(np.diag([1.0, 2.0, 5.0])), 50, Rng(0)) == pytest.approx(5.0, abs=1e-6)


@pytest.mark.parametrize("t", [1, 3, 20])
def test_power_method_identity_exact(t):
    assert power_method(dense(np.eye(7)), t, Rng(t)) == 1.0


def test_power_method_zero_operator_returns_zero():
    assert power_method(dense(np.zeros((3, 3))), 5, Rng(0)) == 0.0


def test_power_method_within_five_percent_kappa_100():
    for s in range(20):
        a, lam = random_spd(Rng(s), 32, 100.0)
        est = power_method(dense(a), 20, Rng(1000 + s))
        assert abs(est - lam[0]) <= 0.05 * lam[0]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 16), t=st.integers(1, 30))
def test_power_method_never_exceeds_lambda_max(seed, n, t):
    a, lam = random_spd(Rng(seed), n, 1e3)
    assert power_method(dense(a), t, Rng(seed + 1)) <= lam[0] + 1e-10


# --- rescaling and coefficients ------------------------------------------------------------

def test_rescale_maps():
    phi, phi_inv = rescale_maps(0.2, 0.8)
    assert phi(0.0) == pytest.approx(0.5)
    assert phi_inv(0.2) == pytest.approx(-1.0) and phi_inv(0.8) == pytest.approx(1.0)
    x = np.linspace(-1, 1, 101)
    assert np.max(np.abs(phi_inv(phi(x)) - x)) < 1e-12
    with pytest.raises(ValueError):
        rescale_maps(0.5, 0.5)
    with pytest.raises(ValueError):
        rescale_maps(0.0, 1.0)


def test_chebyshev_nodes_first_kind():
    np.testing.assert_allclose(chebyshev_nodes(2), [math.cos(math.pi / 6), 0.0, -math.cos(math.pi / 6)], atol=1e-15)


def test_chebyshev_coefficients_constant_and_linear():
    c = chebyshev_coefficients(lambda y: np.ones_like(y), (-1.0, 1.0), 6).coeffs
    np.testing.assert_allclose(c, [1, 0, 0, 0, 0, 0, 0], atol=1e-14)
    c = chebyshev_coefficients(lambda y: y, (-1.0, 1.0), 6).coeffs
    np.testing.assert_allclose(c, [0, 1, 0, 0, 0, 0, 0], atol=1e-14)


def test_chebyshev_exact_for_polynomials():
    f = lambda y: 3 * y ** 3 - y + 0.5
    c = chebyshev_coefficients(f, (0.5, 2.0), 3)
    x = np.linspace(0.5, 2.0, 50)
    np.testing.assert_allclose(c(x), f(x), atol=1e-12)


def test_chebyshev_log_interpolant_sup_error():
    c = chebyshev_coefficients(np.log, (0.1, 1.0), 10)
    x = np.linspace(0.1, 1.0, 1000)
    assert np.max(np.abs(c(x) - np.log(x))) < 1e-3


def test_chebyshev_rejects_nonfinite():
    with pytest.raises(ValueError):
        chebyshev_coefficients(np.log, (-1.0, 1.0), 4)


def test_taylor_coefficients():
    np.testing.assert_allclose(taylor_coefficients(3), [0, -1, -0.5, -1 / 3])
    assert np.polynomial.polynomial.polyval(0.0, taylor_coefficients(5)) == 0.0
    assert abs(np.polynomial.polynomial.polyval(0.5, taylor_coefficients(30)) - math.log(0.5)) < 1e-9
    with pytest.raises(ValueError):
        taylor_coefficients(0)


# --- trace estimators ---------------------------------------------------------------------

def test_chebyshev_trace_constant_coefficient_gives_dimension():
    a, _ = random_spd(Rng(0), 10, 5.0)
    assert stochastic_chebyshev_trace(dense(a / 10), [1.0] + [0.0] * 5, 7, Rng(1)) == 10.0


def test_chebyshev_trace_linear_on_diagonal_exact_per_probe():
    d = np.array([0.1, -0.3, 0.7, 0.2])
    for s in range(5):
        assert stochastic_chebyshev_trace(dense(np.diag(d)), [0.0, 1.0, 0.0], 1, Rng(s)) == pytest.approx(d.sum())


def test_chebyshev_trace_counts_operator_applications():
    calls = []
    inner = dense(0.3 * np.eye(4))
    op = LinearOperator(4, lambda v: calls.append(1) or inner(v))
    stochastic_chebyshev_trace(op, np.ones(8), 5, Rng(0))
    assert len(calls) == 7        # m applications, probes batched into one block


def test_chebyshev_trace_matches_spectral_oracle():
    # DERIVED: sum_i p_m(lambda_i) from the dense eigensolver; mean over 50 seeds
    a, lam = random_spd(Rng(3), 16, 20.0)
    a, lam = a / (1.1 * lam[0]), lam / (1.1 * lam[0])
    lo = lam[-1] / 2
    _, phi_inv = rescale_maps(lo, 1.0)
    coeffs = chebyshev_coefficients(np.log, (lo, 1.0), 10)
    scaled = 2 / (1 - lo) * a - (1 + lo) / (1 - lo) * np.eye(16)
    exact = float(np.sum(np.polynomial.chebyshev.chebval(phi_inv(lam), coeffs.coeffs)))
    est = np.mean([stochastic_chebyshev_trace(dense(scaled), coeffs, 20, Rng(s)) for s in range(50)])
    assert abs(est - exact) < 0.02 * abs(exact)


def test_chebyshev_trace_unbiased_within_three_standard_errors():
    b = Rng(4).normal((12, 12))
    a = (b + b.T) / 10
    w, _ = sym_eig(a)
    a = a / (1.01 * np.max(np.abs(w)))
    w = w / (1.01 * np.max(np.abs(w)))
    c = [0.3, -0.5, 0.8, 0.2]
    exact = float(np.sum(np.polynomial.chebyshev.chebval(w, c)))
    xs = np.array([stochastic_chebyshev_trace(dense(a), c, 1, Rng(s)) for s in range(400)])
    assert abs(xs.mean() - exact) < 3 * xs.std(ddof=1) / math.sqrt(len(xs))


def test_hutchinson_examples():
    assert hutchinson_trace(dense(np.eye(9)), 4, Rng(0)) == 9.0
    d = np.diag([1.0, 4.0, -2.0])
    for s in range(5):
        assert hutchinson_trace(dense(d), 1, Rng(s)) == pytest.approx(3.0, abs=1e-14)


def test_hutchinson_random_symmetric():
    b = Rng(7).normal((32, 32))
    a = b + b.T
    probes = draw_probes(Rng(8), 32, (), 1000)
    samples = np.einsum("ik,ij,jk->k", probes, a, probes)
    est = hutchinson_trace(dense(a), 1000, probes=probes)
    assert est == pytest.approx(samples.mean())
    assert abs(est - np.trace(a)) < 3 * samples.std(ddof=1) / math.sqrt(1000)


def test_probe_streams_are_per_index():
    full = draw_probes(Rng(5), 6, (2,), 4)
    part = draw_probes(Rng(5), 6, (2,), 2)
    np.testing.assert_array_equal(full[..., :2], part)
    v = draw_start(Rng(5), 6, (3,))
    np.testing.assert_allclose(np.linalg.norm(v, axis=0), 1.0)


# --- log-determinant ---------------------------------------------------------------------

@pytest.mark.parametrize("c", [0.5, 2.0, 7.0])
def test_logdet_scaled_identity_exact_bounds(c):
    cfg = EstimatorConfig(m=10, p=20, t=20, g=1.0, eps=c)
    for s in range(5):
        est = stochastic_logdet_chebyshev(dense(c * np.eye(10)), cfg, Rng(s))
        assert est == pytest.approx(10 * math.log(c), rel=1e-2, abs=1e-10)


def test_logdet_identity_unit_bounds_mean_near_zero():
    cfg = EstimatorConfig(10, 20, 20, 1.0, 1.0)
    vals = [stochastic_logdet_chebyshev(dense(np.eye(10)), cfg, Rng(s)) for s in range(100)]
    assert abs(np.mean(vals)) < 1e-2


def _ensemble(count, dim, kappa, eps_scale, cfg_kw, seed0=0):
    errs = []
    for s in range(count):
        a, lam = random_spd(Rng(seed0 + s), dim, kappa)
        cfg = EstimatorConfig(**cfg_kw, eps=eps_scale * lam[-1])
        exact = cholesky_logdet(a)
        errs.append(abs(stochastic_logdet_chebyshev(dense(a), cfg, Rng(10_000 + s)) - exact) / abs(exact))
    return np.array(errs)


def test_logdet_random_spd_typical_error_below_30_percent():
    errs = _ensemble(20, 64, 1e3, 0.1, dict(m=10, p=20, t=20, g=1.2))
    assert np.mean(errs < 0.30) >= 0.9


def test_logdet_mean_error_non_increasing_in_m():
    mats = [random_spd(Rng(s), 16, 50.0) for s in range(4)]
    means = []
    for m in (2, 5, 10, 20):
        errs = []
        for a, lam in mats:
            cfg = EstimatorConfig(m=m, p=20, t=20, g=1.2, eps=0.5 * lam[-1])
            exact = cholesky_logdet(a)
            errs += [abs(stochastic_logdet_chebyshev(dense(a), cfg, Rng(s)) - exact) for s in range(100)]
        means.append(np.mean(errs))
    assert all(x >= y for x, y in zip(means, means[1:])), means


@pytest.mark.parametrize("c", [2.0, 10.0])
def test_logdet_scaling_identity(c):
    a, lam = random_spd(Rng(11), 12, 10.0)
    diffs = []
    for s in range(100):
        e1 = stochastic_logdet_chebyshev(dense(a), EstimatorConfig(eps=0.5 * lam[-1]), Rng(s))
        e2 = stochastic_logdet_chebyshev(dense(c * a), EstimatorConfig(eps=0.5 * c * lam[-1]), Rng(s))
        diffs.append(e2 - e1)
    assert np.mean(diffs) == pytest.approx(12 * math.log(c), rel=1e-6)


def test_logdet_degenerate_operator():
    with pytest.raises(DegenerateOperatorError):
        stochastic_logdet_chebyshev(dense(np.zeros((3, 3))), DEFAULT_CFG, Rng(0))


def test_logdet_warns_when_spectrum_below_eps():
    a = np.diag([1e-4, 1.0, 1.0, 1.0])
    with pytest.warns(SpectralBoundWarning):
        stochastic_logdet_chebyshev(dense(a), EstimatorConfig(eps=0.5), Rng(0),
                                    probes=np.array([[1.0], [0.0], [0.0], [0.0]]))


def test_logdet_batched_matches_individual():
    mats = [random_spd(Rng(s), 5, 10.0)[0] for s in range(3)]
    stack = constant(np.stack(mats, axis=-1))            # (n, n, batch)
    op = LinearOperator(5, lambda v: ops.batch_matvec(stack, v), (3,))
    start = draw_start(Rng(1), 5, (3,))
    probes = draw_probes(Rng(2), 5, (3,), 20)
    batched = stochastic_logdet_chebyshev(op, DEFAULT_CFG, start=start, probes=probes)
    for j, a in enumerate(mats):
        single = stochastic_logdet_chebyshev(dense(a), DEFAULT_CFG, start=start[:, j], probes=probes[:, j])
        assert batched[j] == pytest.approx(single, rel=1e-12)


# --- Taylor variant ----------------------------------------------------------------------

def test_taylor_scaled_identity_exact():
    cfg = EstimatorConfig(m=5, p=3, t=5, g=1.0)
    assert stochastic_logdet_taylor(dense(4.0 * np.eye(6)), cfg, Rng(0)) == pytest.approx(6 * math.log(4.0), abs=1e-12)


def test_taylor_diagonal_series():
    nu = 3.0
    cfg = EstimatorConfig(m=30, p=4, t=50, g=1.0)
    est = stochastic_logdet_taylor(dense(np.diag([0.5, 1.0]) * nu), cfg, Rng(0))
    exact = math.log(0.5) + 2 * math.log(nu)
    assert est == pytest.approx(exact, rel=1e-2)


@pytest.mark.parametrize("kappa, m", [(3.0, 10), (10.0, 30)])
def test_taylor_and_chebyshev_consistent(kappa, m):
    a, lam = random_spd(Rng(21), 64, kappa)
    cfg = EstimatorConfig(m=m, p=20, t=20, g=1.2, eps=0.1 * lam[-1])
    cheb = np.array([stochastic_logdet_chebyshev(dense(a), cfg, Rng(s)) for s in range(30)])
    tay = np.array([stochastic_logdet_taylor(dense(a), cfg, Rng(s)) for s in range(30)])
    assert abs(cheb.mean() - tay.mean()) < 2 * min(cheb.std(), tay.std())


def test_taylor_truncation_bias_at_high_condition_number():
    # ln(1 - x) converges slowly near x = 1, so low-order Taylor overestimates
    # ln det on ill-conditioned matrices where Chebyshev stays accurate.
    a, lam = random_spd(Rng(21), 64, 1e3)
    cfg = EstimatorConfig(m=10, p=20, t=20, g=1.2, eps=0.1 * lam[-1])
    exact = cholesky_logdet(a)
    cheb = np.mean([stochastic_logdet_chebyshev(dense(a), cfg, Rng(s)) for s in range(30)])
    tay = np.mean([stochastic_logdet_taylor(dense(a), cfg, Rng(s)) for s in range(30)])
    assert abs(cheb - exact) < 0.1 * exact < tay - exact


# --- differentiability --------------------------------------------------------------------

def _num(f):
    return lambda x: float(np.asarray(getattr(f(x), "value", f(x))))


def _param_operator(theta, base):
    # A(theta) = B^T diag(exp(theta)) B + I, PSD and differentiable
    B = constant(base)
    d = ops.expand_axis(ops.exp(theta), 1, base.shape[1])
    m = ops.add(ops.matmul(ops.transpose(B), ops.mul(d, B)), constant(np.eye(base.shape[1])))
    return LinearOperator.dense(m)


@pytest.mark.parametrize("power_grad", ["full", "rayleigh"])
def test_gradient_matches_finite_differences_of_seeded_estimator(power_grad):
    base = Rng(30).normal((6, 6)) / 2
    theta0 = Rng(31).normal(6) / 3
    cfg = EstimatorConfig(m=10, p=20, t=20, g=1.2, eps=0.5, power_grad=power_grad)
    start, probes = draw_start(Rng(32), 6), draw_probes(Rng(33), 6, (), 20)
    theta = parameter(theta0)
    g = grad(stochastic_logdet_chebyshev(_param_operator(theta, base), cfg, start=start, probes=probes), [theta])

    def f(x):
        return stochastic_logdet_chebyshev(_param_operator(constant(x), base), cfg, start=start, probes=probes)

    if power_grad == "rayleigh":
        # drops the iterate's sensitivity, which is small once converged
        assert rel_l2(g, central_diff(_num(f), theta0)) < 1e-2
    else:
        assert rel_l2(g, central_diff(_num(f), theta0)) < 1e-4


def _block_operator(theta):
    # diag(5, exp(theta)) with exp(theta) < 5: lambda_max and its estimate from
    # the start vector e_1 do not depend on theta.
    d = ops.add(ops.place(ops.exp(theta), 1, 0, 3), constant(np.array([5.0, 0.0, 0.0])))
    n = 3
    return LinearOperator(n, lambda v: ops.mul(v, ops.expand_axis(d, 1, v.value.shape[-1])),
                          differentiable=True)


def test_detached_bounds_gradient():
    theta0 = np.array(0.3)
    start, probes = np.array([[1.0], [0.0], [0.0]]), draw_probes(Rng(34), 3, (), 20)
    for detach in (False, True):
        cfg = EstimatorConfig(eps=0.5, detach_bounds=detach)
        theta = parameter(theta0)
        g = grad(stochastic_logdet_chebyshev(_block_operator(theta), cfg, start=start, probes=probes), [theta])
        f = lambda x: stochastic_logdet_chebyshev(_block_operator(constant(x)), cfg, start=start, probes=probes)
        assert rel_l2(g, central_diff(_num(f), theta0)) < 1e-6


def test_taylor_gradient_matches_finite_differences():
    base = Rng(40).normal((5, 5)) / 2
    theta0 = Rng(41).normal(5) / 3
    cfg = EstimatorConfig(m=15, p=10, t=20, g=1.2)
    start, probes = draw_start(Rng(42), 5), draw_probes(Rng(43), 5, (), 10)
    theta = parameter(theta0)
    g = grad(stochastic_logdet_taylor(_param_operator(theta, base), cfg, start=start, probes=probes), [theta])
    f = lambda x: stochastic_logdet_taylor(_param_operator(constant(x), base), cfg, start=start, probes=probes)
    assert rel_l2(g, central_diff(_num(f), theta0)) < 1e-4


def test_same_rng_gives_identical_estimates():
    a, _ = random_spd(Rng(50), 20, 100.0)
    x = stochastic_logdet_chebyshev(dense(a), DEFAULT_CFG, Rng(9))
    assert x == stochastic_logdet_chebyshev(dense(a), DEFAULT_CFG, Rng(9))
    assert x != stochastic_logdet_chebyshev(dense(a), DEFAULT_CFG, Rng(10))


def test_rayleigh_mode_does_not_change_values():
    a, _ = random_spd(Rng(51), 8, 10.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        x = stochastic_logdet_chebyshev(dense(a), DEFAULT_CFG, Rng(1))
        y = stochastic_logdet_chebyshev(dense(a), EstimatorConfig(power_grad="rayleigh"), Rng(1))
    assert x == y
