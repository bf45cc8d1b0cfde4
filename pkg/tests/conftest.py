import pathlib

import numpy as np
import pytest

from mjlq import ProblemSpec, load_problem

DATA = pathlib.Path(__file__).resolve().parents[1] / "data"

# stabilizing gain for the three-regime scalar example, one (m, n) = (2, 1) block per regime
SIGMA_SCALAR = np.array([[[0.0], [2.0]], [[-1.0], [0.0]], [[-2.0], [-2.0]]])
P_SCALAR = np.array([7.44607347, 2.81837045, 19.16846222])
THETA_SCALAR = np.array([[-1.6350, 1.4994], [-1.2202, -0.4055], [-1.7918, -2.4117]])


def scalar_problem(A, B, C, D, Q, S, R, pi=((0.0,),), **kw) -> ProblemSpec:
    """Stacked scalar problem (n = m = 1) from per-regime values."""
    L = len(pi)
    f = lambda v: np.broadcast_to(np.asarray(v, float).reshape(-1, 1, 1), (L, 1, 1))  # noqa: E731
    vec = {k: np.broadcast_to(np.asarray(v, float).reshape(-1, 1), (L, 1)) for k, v in kw.items()
           if k in ("b", "sigma", "q", "rho")}
    return ProblemSpec.from_arrays(np.array(pi, float), f(A), f(B), f(C), f(D), f(Q), f(S), f(R),
                                   **vec, discount_r=kw.get("discount_r", 0.0))


@pytest.fixture(scope="session")
def ex_scalar():
    return load_problem(DATA / "three_regime_scalar.json")


@pytest.fixture(scope="session")
def ex_disc():
    return load_problem(DATA / "three_regime_discounted.json")


@pytest.fixture(scope="session")
def care_scalar(ex_scalar):
    from mjlq import solve_care
    return solve_care(ex_scalar)


@pytest.fixture(scope="session")
def care_disc(ex_disc):
    from mjlq import discount_transform, solve_care
    return solve_care(discount_transform(ex_disc))


def random_generator(rng, L):
    pi = rng.uniform(0, 1, (L, L)) * (rng.uniform(size=(L, L)) < 0.7)
    np.fill_diagonal(pi, 0.0)
    np.fill_diagonal(pi, -pi.sum(axis=1))
    return pi
