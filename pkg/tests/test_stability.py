import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mjlq import Generator, LinearSystem, PreconditionError, SingularOperator, mcsim
from mjlq.stability import (SignVerdict, check_l2_stable, closed_loop_system, lyapunov_residual,
                            lyapunov_representation_check, open_loop_system, sign_matrices,
                            sign_screen, solve_coupled_lyapunov, spectral_abscissa)

from conftest import SIGMA_SCALAR, random_generator


def scalar_system(A, C, pi=((0.0,),)):
    L = len(pi)
    return LinearSystem(np.reshape(np.asarray(A, float), (L, 1, 1)),
                        np.reshape(np.asarray(C, float), (L, 1, 1)), Generator(np.array(pi, float)))


def random_system(rng, n, L):
    return LinearSystem(rng.uniform(-2, 2, (L, n, n)), rng.uniform(-2, 2, (L, n, n)),
                        Generator(random_generator(rng, L)))


def test_scalar_lyapunov():
    P = solve_coupled_lyapunov(scalar_system(-1, 0), [[[2.0]]])
    assert P.entries[0, 0, 0] == pytest.approx(1.0, abs=1e-14)


def test_two_regime_lyapunov():
    sys = scalar_system([-1, -2], [0, 0], [[-1, 1], [1, -1]])
    P = solve_coupled_lyapunov(sys, np.ones((2, 1, 1))).entries.ravel()
    np.testing.assert_allclose(P, [3 / 7, 2 / 7], atol=1e-14)


def test_shifted_example_lyapunov(ex_scalar):
    sys = closed_loop_system(ex_scalar, SIGMA_SCALAR)
    np.testing.assert_allclose(sys.Abar.ravel(), [-1, -3, -2])
    np.testing.assert_allclose(sys.Cbar.ravel(), [1, 1, -1])
    P = solve_coupled_lyapunov(sys, np.ones((3, 1, 1)))
    assert np.all(P.entries > 0)
    # oracle: 3x3 linear system written out by hand
    a, c, pi = sys.Abar.ravel(), sys.Cbar.ravel(), ex_scalar.pi
    M = np.diag(2 * a + c ** 2) + pi
    np.testing.assert_allclose(P.entries.ravel(), np.linalg.solve(M, -np.ones(3)), rtol=1e-13)
    assert np.abs(lyapunov_residual(sys, P, np.ones((3, 1, 1)))).max() <= 1e-10


def test_singular_operator():
    with pytest.raises(SingularOperator):
        solve_coupled_lyapunov(scalar_system(0, 0), [[[1.0]]])


def test_open_loop_example_unstable(ex_scalar):
    sys = open_loop_system(ex_scalar)
    cert = check_l2_stable(sys)
    assert not cert.stable and cert.witness_P is None
    assert spectral_abscissa(sys) > 0
    np.testing.assert_allclose(sign_matrices(sys).ravel(), [3, 2, 5])
    assert sign_screen(sys) is SignVerdict.PROVABLY_UNSTABLE
    short = check_l2_stable(sys, shortcut=True)
    assert not short.stable and short.method == "sign-necessary"


def test_shifted_example_stable(ex_scalar):
    sys = closed_loop_system(ex_scalar, SIGMA_SCALAR)
    cert = check_l2_stable(sys)
    assert cert.stable and cert.method == "lyapunov" and cert.min_eig_P > 0
    assert spectral_abscissa(sys) < 0
    np.testing.assert_allclose(sign_matrices(sys).ravel(), [-1, -5, -3])
    assert sign_screen(sys) is SignVerdict.PROVABLY_STABLE


def test_hurwitz_identity_witness():
    rng = np.random.default_rng(0)
    for n, L in [(1, 1), (2, 3), (3, 2)]:
        sys = LinearSystem(np.broadcast_to(-np.eye(n), (L, n, n)), np.zeros((L, n, n)),
                           Generator(random_generator(rng, L)))
        cert = check_l2_stable(sys)
        assert cert.stable
        np.testing.assert_allclose(cert.witness_P.entries, np.broadcast_to(np.eye(n) / 2, (L, n, n)),
                                   atol=1e-14)


def test_scalar_abscissa():
    assert spectral_abscissa(scalar_system(-1, 0)) == pytest.approx(-2.0)


def test_mixed_signs_inconclusive():
    sys = scalar_system([-1, 1], [0, 0], [[-1, 1], [1, -1]])
    assert sign_screen(sys) is SignVerdict.INCONCLUSIVE


def test_near_boundary_no_disagreement():
    # abscissa inside the exclusion band: no cross-check error, stable verdict
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cert = check_l2_stable(scalar_system(-1e-10, 0))
    assert abs(cert.spectral_abscissa) < 1e-8


def test_operators_are_adjoint():
    from mjlq.stability import lyapunov_operator, second_moment_operator
    rng = np.random.default_rng(1)
    sys = random_system(rng, 2, 3)
    np.testing.assert_array_equal(lyapunov_operator(sys).T, second_moment_operator(sys))


def test_lyapunov_spectral_agreement_random():
    rng = np.random.default_rng(2024)
    checked = 0
    for _ in range(150):
        sys = random_system(rng, int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cert = check_l2_stable(sys)
        a = spectral_abscissa(sys)
        if abs(a) < 1e-8:
            continue
        assert cert.stable == (a < 0)
        checked += 1
    assert checked >= 100


def _stable_random_system(rng, n, L):
    # scale the drift down until the system is stable
    sys = random_system(rng, n, L)
    shift = max(spectral_abscissa(sys), 0) / 2 + 0.5
    return LinearSystem(sys.Abar - shift * np.eye(n), sys.Cbar, sys.generator)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 3), st.integers(1, 4))
def test_witness_satisfies_strict_inequality(seed, n, L):
    rng = np.random.default_rng(seed)
    sys = _stable_random_system(rng, n, L)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cert = check_l2_stable(sys)
    if not cert.stable:
        return
    P = cert.witness_P.entries
    lhs = lyapunov_residual(sys, P, np.zeros_like(P))
    scale = 1 + np.abs(P).max()
    for H in lhs:
        assert np.linalg.eigvalsh(H).max() <= -1 + 1e-8 * scale


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 3), st.integers(1, 3))
def test_monotone_in_forcing(seed, n, L):
    rng = np.random.default_rng(seed)
    sys = _stable_random_system(rng, n, L)
    if spectral_abscissa(sys) > -1e-3:
        return
    G = rng.normal(size=(L, n, n))
    Lam = G @ np.swapaxes(G, 1, 2)
    H = rng.normal(size=(L, n, n))
    Lam2 = Lam + H @ np.swapaxes(H, 1, 2)
    P = solve_coupled_lyapunov(sys, Lam).entries
    P2 = solve_coupled_lyapunov(sys, Lam2).entries
    scale = 1 + np.abs(P2).max()
    for D in P2 - P:
        assert np.linalg.eigvalsh(D).min() >= -1e-9 * scale


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 3), st.integers(1, 4))
def test_sign_screen_implies_verdict(seed, n, L):
    rng = np.random.default_rng(seed)
    sys = random_system(rng, n, L)
    v = sign_screen(sys)
    if v is SignVerdict.INCONCLUSIVE:
        return
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cert = check_l2_stable(sys)
    assert cert.stable == (v is SignVerdict.PROVABLY_STABLE)


def test_representation_scalar():
    cfg = mcsim.SimulationConfig(64, 20.0, 1e-2, 7, [1.0])
    chk = lyapunov_representation_check(scalar_system(-1, 0), [[[2.0]]], cfg)
    assert chk.exact[0, 0, 0] == pytest.approx(1.0)
    # deterministic dynamics: the only error is the Euler/left-point bias, O(dt)
    assert chk.estimate[0, 0, 0] == pytest.approx(1.0, abs=2e-2)


def test_representation_shifted_example(ex_scalar):
    sys = closed_loop_system(ex_scalar, SIGMA_SCALAR)
    cfg = mcsim.SimulationConfig(10_000, 15.0, 2e-3, 11, [1.0])
    chk = lyapunov_representation_check(sys, np.ones((3, 1, 1)), cfg)
    assert chk.within(3.0), (chk.estimate.ravel(), chk.exact.ravel(), chk.stderr.ravel())


def test_representation_two_dim():
    rng = np.random.default_rng(5)
    sys = LinearSystem(np.array([[[-1.0, 0.5], [0.0, -1.5]], [[-2.0, 0.0], [0.3, -1.0]]]),
                       0.3 * rng.normal(size=(2, 2, 2)), Generator([[-1.0, 1.0], [0.5, -0.5]]))
    cfg = mcsim.SimulationConfig(3000, 12.0, 2e-3, 3, [0.0, 0.0])
    chk = lyapunov_representation_check(sys, np.broadcast_to(np.eye(2), (2, 2, 2)), cfg)
    assert chk.within(3.5)


def test_representation_unstable_rejected(ex_scalar):
    cfg = mcsim.SimulationConfig(16, 1.0, 1e-2, 1, [1.0])
    with pytest.raises(PreconditionError):
        lyapunov_representation_check(open_loop_system(ex_scalar), np.ones((3, 1, 1)), cfg)
