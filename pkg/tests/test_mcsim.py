import math
import warnings

import numpy as np
import pytest
from scipy.linalg import expm

from mjlq import FeedbackStrategy, Generator, SimulationWarning, load_artifact, mcsim, save_artifact
from mjlq.mcsim import (SimulationConfig, check_decay, occupation_fraction, path_streams,
                        sample_chain_path, second_moment_integral, simulate_paths,
                        stationarity_residual)
from mjlq.riccati import RiccatiCoefficients
from mjlq.stability import check_l2_stable, closed_loop_system

from conftest import P_SCALAR, scalar_problem

BACKENDS = mcsim.available_backends()


def test_constant_chain():
    assert sample_chain_path(Generator([[0.0, 0.0], [0.0, 0.0]]), 1, 100.0, 3) == []


def test_symmetric_chain_occupation():
    path = sample_chain_path(Generator([[-1.0, 1.0], [1.0, -1.0]]), 0, 1e4, 12)
    times = [t for t, _ in path]
    assert times == sorted(times) and times[-1] < 1e4
    assert 0.49 <= occupation_fraction(path, 0, 1e4, 0) <= 0.51


def test_exit_rate(ex_scalar):
    T = 2e4
    path = sample_chain_path(ex_scalar.generator, 0, T, 99)
    t_prev, cur, time_in, exits = 0.0, 0, 0.0, 0
    for t, s in path + [(T, -1)]:
        if cur == 0:
            time_in += t - t_prev
            exits += s >= 0
        t_prev, cur = t, s
    rate = exits / time_in
    assert abs(rate - 0.7) <= 3 * 0.7 / math.sqrt(exits)


def test_chain_marginals(ex_scalar):
    n = 20000
    Pt = expm(ex_scalar.pi)
    for i in range(3):
        counts = np.zeros(3)
        for p in range(n):
            a, _ = path_streams(1000 + i, p)
            path = sample_chain_path(ex_scalar.generator, i, 1.0, a)
            counts[path[-1][1] if path else i] += 1
        freq = counts / n
        se = np.sqrt(Pt[i] * (1 - Pt[i]) / n)
        assert np.all(np.abs(freq - Pt[i]) <= 3 * se), (i, freq, Pt[i])


def test_streams_distinct():
    a0, b0 = path_streams(5, 0)
    a1, _ = path_streams(5, 1)
    x = [g.standard_normal(4) for g in (a0, b0, a1)]
    assert not np.allclose(x[0], x[1]) and not np.allclose(x[0], x[2])


def test_cost_example_short(ex_scalar, care_scalar):
    cfg = SimulationConfig(4000, 15.0, 2e-3, 8, [1.0], 0)
    res = simulate_paths(ex_scalar, care_scalar.strategy, cfg, care=care_scalar)
    assert abs(res.cost_mean - P_SCALAR[0]) <= 3 * res.cost_stderr
    assert not res.diverged and res.cost_reliable and res.n_paths_used == 4000
    assert res.truncation_bias < 1e-6
    assert check_decay(res)
    assert np.all(res.second_moment_trace[:, 1] >= 0) and res.cost_stderr >= 0


def test_zero_state(ex_scalar, care_scalar):
    res = simulate_paths(ex_scalar, care_scalar.strategy, SimulationConfig(100, 5.0, 1e-2, 1, [0.0]),
                         care=care_scalar)
    assert res.cost_mean == 0 and res.cost_stderr == 0
    assert res.stationarity_residual == 0


def test_open_loop_diverges(ex_scalar):
    cfg = SimulationConfig(2000, 20.0, 2e-3, 4, [1.0])
    res = simulate_paths(ex_scalar, FeedbackStrategy.zeros(3, 2, 1), cfg)
    assert res.diverged and not res.cost_reliable
    assert res.overflow_fraction > 0 or res.exploding
    assert not check_decay(res)


def test_deterministic_decay():
    p = scalar_problem(-1, 0, 0, 0, 1, 0, 1)
    res = simulate_paths(p, FeedbackStrategy.zeros(1, 1, 1), SimulationConfig(10, 5.0, 1e-3, 0, [2.0]))
    t, m = res.second_moment_trace[:, 0], res.second_moment_trace[:, 1]
    np.testing.assert_allclose(m, 4 * np.exp(-2 * t), rtol=6e-3)
    assert check_decay(res)
    # left-point cost of 4 e^{-2t}: exact integral 2(1 - e^{-10})
    assert res.cost_mean == pytest.approx(2 * (1 - math.exp(-10)), rel=2e-3)


def test_stationarity_residual(ex_scalar, care_scalar):
    cfg = SimulationConfig(500, 5.0, 1e-2, 2, [1.0])
    res = simulate_paths(ex_scalar, care_scalar.strategy, cfg)
    X = res.checkpoint_states
    r = stationarity_residual(ex_scalar, care_scalar, res)
    assert r <= 1e-9 * (1 + np.abs(X).mean())
    delta = np.full(care_scalar.theta.shape, 0.05)
    pert = FeedbackStrategy(care_scalar.theta + delta)
    res2 = simulate_paths(ex_scalar, pert, cfg)
    r2 = stationarity_residual(ex_scalar, care_scalar, res2)
    N = RiccatiCoefficients(ex_scalar).N(care_scalar.P.entries)
    a, Xs = res2.checkpoint_regimes.ravel(), res2.checkpoint_states.reshape(-1, 1)
    oracle = np.mean([np.linalg.norm(N[k] @ delta[k] @ x) for k, x in zip(a, Xs)])
    assert r2 == pytest.approx(oracle, rel=1e-9) and r2 > 0


def test_fsde_a_priori_bound(ex_scalar, care_scalar):
    p = ex_scalar.replace(b=np.ones((3, 1)), sigma=np.ones((3, 1)), q=np.zeros((3, 1)),
                     rho=np.zeros((3, 2)))
    sysm = closed_loop_system(p, care_scalar.theta)
    cert = check_l2_stable(sysm)
    pn = max(np.linalg.norm(P, 2) for P in cert.witness_P.entries)
    c = max(np.linalg.norm(C, 2) for C in sysm.Cbar)
    K = 2 * max(pn, 4 * pn ** 2, 4 * pn ** 2 * c ** 2 + pn)
    T, x = 10.0, 1.0
    res = simulate_paths(p, care_scalar.strategy, SimulationConfig(2000, T, 2e-3, 6, [x]))
    assert second_moment_integral(res) <= K * (x * x + T * (1.0 + 1.0))


@pytest.mark.parametrize("backend", BACKENDS)
def test_worker_count_invariance(ex_scalar, care_scalar, backend):
    cfg = SimulationConfig(300, 2.0, 1e-2, 77, [1.0], 1, batch_size=64)
    ref = simulate_paths(ex_scalar, care_scalar.strategy, cfg, backend=backend)
    for w in (2, 4):
        assert ref.identical(simulate_paths(ex_scalar, care_scalar.strategy, cfg.replace(workers=w),
                                            backend=backend))


def test_batch_size_invariance(ex_scalar, care_scalar):
    cfg = SimulationConfig(300, 2.0, 1e-2, 77, [1.0], 1)
    a = simulate_paths(ex_scalar, care_scalar.strategy, cfg)
    b = simulate_paths(ex_scalar, care_scalar.strategy, cfg.replace(batch_size=37))
    assert a.identical(b)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernel not built")
def test_backends_bit_identical(ex_scalar, care_scalar):
    for kw in ({"dt": 1e-2}, {"dt": 5e-3, "brownian_dt": 1e-2}):
        cfg = SimulationConfig(400, 3.0, master_seed=5, x0=[1.0], **kw)
        a = simulate_paths(ex_scalar, care_scalar.strategy, cfg, backend="python")
        b = simulate_paths(ex_scalar, care_scalar.strategy, cfg, backend="compiled")
        assert a.identical(b)
    cfg = SimulationConfig(400, 3.0, 1e-2, 5, [1.0])
    a = simulate_paths(ex_scalar, FeedbackStrategy.zeros(3, 2, 1), cfg, backend="python")
    b = simulate_paths(ex_scalar, FeedbackStrategy.zeros(3, 2, 1), cfg, backend="compiled")
    assert a.identical(b)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernel not built")
def test_backends_agree_discounted(ex_disc, care_disc):
    cfg = SimulationConfig(200, 3.0, 1e-2, 5, [1.0, -1.0], 2, discount_r=0.2)
    a = simulate_paths(ex_disc, care_disc.strategy, cfg, backend="python")
    b = simulate_paths(ex_disc, care_disc.strategy, cfg, backend="compiled")
    np.testing.assert_allclose(a.path_costs, b.path_costs, rtol=1e-13)
    np.testing.assert_array_equal(a.checkpoint_states, b.checkpoint_states)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernel not built")
def test_backends_agree_two_dim_inhomogeneous(ex_disc, care_disc):
    p = ex_disc.replace(b=np.ones((3, 2)), sigma=0.5 * np.ones((3, 2)), q=np.ones((3, 2)),
                     rho=np.ones((3, 2)), discount_r=0.0)
    strat = FeedbackStrategy(care_disc.theta, 0.1 * np.ones((3, 2)))
    cfg = SimulationConfig(200, 3.0, 5e-3, 9, [1.0, -1.0], 1, brownian_dt=1e-2)
    a = simulate_paths(p, strat, cfg, backend="python")
    b = simulate_paths(p, strat, cfg, backend="compiled")
    assert a.identical(b)


def test_shared_brownian_paths(ex_scalar, care_scalar):
    # halving dt at fixed brownian_dt keeps the driving noise: path costs stay close
    base = SimulationConfig(500, 5.0, 2e-3, 3, [1.0], brownian_dt=2e-3)
    a = simulate_paths(ex_scalar, care_scalar.strategy, base)
    b = simulate_paths(ex_scalar, care_scalar.strategy, base.replace(dt=1e-3))
    diff = b.path_costs - a.path_costs
    assert np.abs(diff).mean() < 0.05 * np.abs(a.path_costs).mean()


def test_step_warning(ex_scalar, care_scalar):
    with pytest.warns(SimulationWarning):
        simulate_paths(ex_scalar, care_scalar.strategy, SimulationConfig(10, 5.0, 0.5, 1, [1.0]))


def test_config_validation():
    with pytest.raises(ValueError):
        SimulationConfig(10, 1.0, 2.0, 0, [1.0])
    with pytest.raises(ValueError):
        SimulationConfig(10, 1.0, 0.01, -1, [1.0])
    with pytest.raises(ValueError):
        SimulationConfig(10, 1.0, 0.01, 0, [1.0], brownian_dt=0.015)


def test_result_round_trip(tmp_path, ex_scalar, care_scalar):
    res = simulate_paths(ex_scalar, care_scalar.strategy, SimulationConfig(50, 2.0, 1e-2, 1, [1.0]))
    save_artifact(res, tmp_path / "r.json")
    back = load_artifact(tmp_path / "r.json")
    assert back.cost_mean == res.cost_mean and back.digest == res.digest
    np.testing.assert_array_equal(back.second_moment_trace, res.second_moment_trace)
