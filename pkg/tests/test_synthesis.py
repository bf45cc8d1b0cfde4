import math

import numpy as np
import pytest

from mjlq import (CoupledMatrixSet, FeedbackStrategy, PreconditionError, SingularN, SingularSystem,
                  UnsupportedInhomogeneous, mcsim)
from mjlq.riccati import CareSolution, RiccatiCoefficients, shift_problem, solve_care
from mjlq.stability import is_stable, closed_loop_system
from mjlq.synthesis import (StationaryAdjoint, build_closed_loop, discount_transform,
                            offset_forcing, solve_stationary_adjoint, undiscount_strategy,
                            value_function)

from conftest import P_SCALAR, SIGMA_SCALAR, THETA_SCALAR, scalar_problem


def _care(problem, P):
    coef = RiccatiCoefficients(problem)
    P = np.asarray(P, float)
    return CareSolution(CoupledMatrixSet(P), coef.residual_norms(P), coef.n_margins(P),
                        FeedbackStrategy(coef.gains(P)), True)


def test_closed_loop_example(ex_scalar, care_scalar):
    s = build_closed_loop(ex_scalar, care_scalar)
    np.testing.assert_allclose(s.theta[:, :, 0], THETA_SCALAR, atol=5e-4)
    np.testing.assert_array_equal(s.nu, 0)


def test_homogeneous_zero_offsets(ex_disc, care_disc):
    s = build_closed_loop(discount_transform(ex_disc), care_disc)
    np.testing.assert_array_equal(s.nu, 0)


def test_scalar_offset_oracle():
    p = scalar_problem(-1, 1, 0, 1, 1, 0, 1, b=0, sigma=0, q=0, rho=0.5)
    care = solve_care(p)
    P = care.P.entries[0, 0, 0]
    adj = solve_stationary_adjoint(p, care)
    K = P / (1 + P)
    v = -(-K * 0.5) / (-1 - K)
    assert adj.v[0, 0] == pytest.approx(v, abs=1e-12)
    s = build_closed_loop(p, care)
    assert s.nu[0, 0] == pytest.approx(-(v + 0.5) / (1 + P), abs=1e-12)


def test_adjoint_zero_terms(ex_scalar, care_scalar):
    p = ex_scalar.replace(b=np.zeros((3, 1)), sigma=np.zeros((3, 1)), q=np.zeros((3, 1)),
                     rho=np.zeros((3, 2)))
    adj = solve_stationary_adjoint(p, care_scalar)
    np.testing.assert_array_equal(adj.v, 0)
    np.testing.assert_array_equal(adj.zeta, 0)


def test_adjoint_scalar_equation():
    # F = A = -2 (no control coupling), h = q = 1  ->  v = 0.5
    p = scalar_problem(-2, 0, 0, 0, 1, 0, 1, b=0, sigma=0, q=1, rho=0)
    adj = solve_stationary_adjoint(p, _care(p, np.full((1, 1, 1), 0.25)))
    assert adj.v[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_adjoint_jump_offsets():
    adj = StationaryAdjoint(np.array([[1.0], [3.0], [-2.0]]))
    z = adj.z
    for i in range(3):
        for j in range(3):
            assert z[i, j, 0] == adj.v[j, 0] - adj.v[i, 0]


def test_adjoint_example_with_drift(ex_scalar, care_scalar):
    p = ex_scalar.replace(b=np.ones((3, 1)), sigma=np.zeros((3, 1)), q=np.zeros((3, 1)),
                     rho=np.zeros((3, 2)))
    adj = solve_stationary_adjoint(p, care_scalar)
    # oracle: scalar per-regime coefficients written out directly
    P = care_scalar.P.entries[:, 0, 0]
    Fm = np.zeros((3, 3))
    h = np.zeros(3)
    for i in range(3):
        A, B, C, D = ex_scalar.A[i, 0, 0], ex_scalar.B[i, 0], ex_scalar.C[i, 0, 0], ex_scalar.D[i, 0]
        Lv = P[i] * B + C * P[i] * D + ex_scalar.S[i, :, 0]
        N = P[i] * np.outer(D, D) + ex_scalar.R[i]
        K = np.linalg.solve(N, Lv)
        Fm[i, i] = A - K @ B
        h[i] = P[i] * 1.0
    Fm += ex_scalar.pi
    np.testing.assert_allclose(adj.v[:, 0], np.linalg.solve(Fm, -h), rtol=1e-12)
    s = build_closed_loop(p, care_scalar, adj)
    rt = offset_forcing(p, care_scalar, adj)
    Nm = RiccatiCoefficients(p).N(care_scalar.P.entries)
    assert np.abs(np.einsum("imk,ik->im", Nm, s.nu) + rt).max() <= 1e-9


def test_offset_beats_zero_offset_mc(ex_scalar, care_scalar):
    p = ex_scalar.replace(b=np.ones((3, 1)), sigma=np.zeros((3, 1)), q=np.zeros((3, 1)),
                     rho=np.zeros((3, 2)))
    opt = build_closed_loop(p, care_scalar)
    cfg = mcsim.SimulationConfig(4000, 10.0, 2e-3, 5, [1.0], 0)
    a = mcsim.simulate_paths(p, opt, cfg)
    b = mcsim.simulate_paths(p, FeedbackStrategy(opt.theta), cfg)
    assert a.cost_mean <= b.cost_mean + 3 * math.hypot(a.cost_stderr, b.cost_stderr)


def test_singular_adjoint_system():
    # closed-loop F = A - P B'B/R = 0 at P = 0 with no switching
    p = scalar_problem(0, 1, 0, 0, 1, 0, 1, b=0, sigma=0, q=1, rho=0)
    with pytest.raises(SingularSystem):
        solve_stationary_adjoint(p, _care(p, np.zeros((1, 1, 1))))


def test_singular_N_offset_outside_range():
    p = scalar_problem(-1, 0, 0, 0, 2, 0, 0, b=0, sigma=0, q=0, rho=1)
    care = CareSolution(CoupledMatrixSet(np.ones((1, 1, 1))), np.zeros(1), np.zeros(1),
                        FeedbackStrategy(np.zeros((1, 1, 1))), True)
    with pytest.raises(PreconditionError):
        solve_stationary_adjoint(p, care)
    with pytest.raises(SingularN):
        build_closed_loop(p, care, StationaryAdjoint(np.zeros((1, 1))))


def test_discount_transform(ex_disc):
    t = discount_transform(ex_disc)
    np.testing.assert_allclose(t.A, ex_disc.A - 0.1 * np.eye(2), atol=1e-15)
    assert t.discount_r == 0
    for k in ("B", "C", "D", "Q", "S", "R"):
        np.testing.assert_array_equal(getattr(t, k), getattr(ex_disc, k))


def test_discount_transform_identity(ex_scalar):
    assert discount_transform(ex_scalar) is ex_scalar


def test_discount_transform_rejects_inhomogeneous(ex_disc):
    p = ex_disc.replace(b=np.ones((3, 2)), sigma=np.zeros((3, 2)), q=np.zeros((3, 2)),
                     rho=np.zeros((3, 2)))
    with pytest.raises(UnsupportedInhomogeneous):
        discount_transform(p)
    z = ex_disc.replace(b=np.zeros((3, 2)), sigma=np.zeros((3, 2)), q=np.zeros((3, 2)),
                     rho=np.zeros((3, 2)))
    assert discount_transform(z).homogeneous


def test_undiscount_strategy(care_disc):
    s = undiscount_strategy(care_disc.strategy, 0.2)
    np.testing.assert_array_equal(s.theta, care_disc.theta)
    np.testing.assert_array_equal(s.nu, 0)
    z = FeedbackStrategy.zeros(3, 2, 2)
    np.testing.assert_array_equal(undiscount_strategy(z, 0.2).theta, 0)
    with pytest.raises(UnsupportedInhomogeneous):
        undiscount_strategy(FeedbackStrategy(care_disc.theta, np.ones((3, 2))), 0.2)


def test_value_function(ex_scalar, care_scalar, ex_disc, care_disc):
    rep = value_function(ex_scalar, care_scalar)
    assert rep.evaluate(1.0, 2) == pytest.approx(19.16846222, abs=1e-6)
    assert rep.evaluate(0.0, 0) == 0
    for i in range(3):
        assert rep.evaluate(1.0, i) == care_scalar.P.entries[i, 0, 0]
    rep2 = value_function(discount_transform(ex_disc), care_disc)
    assert rep2.evaluate([1.0, 0.0], 0) == pytest.approx(0.2824, abs=5e-4)


def test_value_inhomogeneous_constant_unavailable(ex_scalar, care_scalar):
    p = ex_scalar.replace(b=np.ones((3, 1)), sigma=np.ones((3, 1)), q=np.zeros((3, 1)),
                     rho=np.zeros((3, 2)))
    rep = value_function(p, care_scalar)
    assert rep.constant_term is None
    x = 0.7
    assert rep.evaluate(x, 1) == pytest.approx(P_SCALAR[1] * x * x + 2 * rep.v.v[1, 0] * x)
    assert rep.to_dict()["constant_available"] is False


def test_value_dominance_all_regimes(ex_scalar, care_scalar):
    rng = np.random.default_rng(9)
    cfg = mcsim.SimulationConfig(3000, 10.0, 5e-3, 21, [1.0])
    base = [mcsim.simulate_paths(ex_scalar, care_scalar.strategy, cfg.replace(i0=i)) for i in range(3)]
    found = 0
    while found < 10:
        d = rng.normal(size=care_scalar.theta.shape)
        d *= 0.1 / np.linalg.norm(d)
        pert = care_scalar.theta + d
        if not is_stable(closed_loop_system(ex_scalar, pert)):
            continue
        found += 1
        for i, a in enumerate(base):
            b = mcsim.simulate_paths(ex_scalar, FeedbackStrategy(pert), cfg.replace(i0=i))
            assert a.cost_mean <= b.cost_mean + 3 * math.hypot(a.cost_stderr, b.cost_stderr)


def test_discount_equivalence_mc(ex_disc, care_disc):
    s = undiscount_strategy(care_disc.strategy, ex_disc.discount_r)
    x = np.array([1.0, 0.0])
    for i in range(3):
        cfg = mcsim.SimulationConfig(4000, 15.0, 5e-4, 17, x, i, discount_r=ex_disc.discount_r)
        res = mcsim.simulate_paths(ex_disc, s, cfg)
        exact = x @ care_disc.P.entries[i] @ x
        assert abs(res.cost_mean - exact) <= 3 * res.cost_stderr, (i, res.cost_mean, exact)


def test_shift_argmin_invariance(ex_scalar, care_scalar):
    shifted = shift_problem(ex_scalar, SIGMA_SCALAR)
    sol = solve_care(shifted)
    strat = build_closed_loop(shifted, sol)
    np.testing.assert_allclose(strat.theta + SIGMA_SCALAR, care_scalar.theta, atol=1e-7)
