"""Closed-loop optimal strategies, value functions and the discounted reduction.

Inhomogeneous problems with regime-constant ``b, sigma, q, rho`` are handled
through a stationary adjoint ``eta(t) = v(alpha_t)`` with zero martingale
part, which turns the adjoint equation into one coupled linear system.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import PreconditionError, SingularN, SingularSystem, UnsupportedInhomogeneous
from .model_io import (CoupledMatrixSet, FeedbackStrategy, ProblemSpec, _dec, _enc,
                       register_artifact)
from .riccati import CareSolution, RiccatiCoefficients, pinv_sym

RANGE_TOL = 1e-9
COND_LIMIT = 1e13


@dataclass(frozen=True, eq=False)
class StationaryAdjoint:
    """Adjoint offsets ``v[i]`` (shape (L, n)); ``zeta`` is identically zero."""

    v: np.ndarray

    def __post_init__(self):
        v = np.array(self.v, dtype=float)
        if v.ndim != 2:
            raise ValueError(f"v must have shape (L, n), got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "v", v)

    @property
    def zeta(self) -> np.ndarray:
        return np.zeros(self.v.shape[1])

    @property
    def z(self) -> np.ndarray:
        """``z[i, j] = v[j] - v[i]``: jump of the adjoint when the chain moves i -> j."""
        return self.v[None, :, :] - self.v[:, None, :]


def _care_P(care) -> np.ndarray:
    P = getattr(care, "P", care)
    return np.asarray(getattr(P, "entries", P), float)


def solve_stationary_adjoint(problem: ProblemSpec, care: CareSolution) -> StationaryAdjoint:
    """Solve ``F_i v_i + sum_j pi_ij v_j + h_i = 0`` for the stationary adjoint.

    With ``K_i = L(P, i) N(P, i)^{-1}``::

        F_i = A_i' - K_i B_i'
        h_i = (C_i' - K_i D_i') P_i sigma_i - K_i rho_i + P_i b_i + q_i

    Raises
    ------
    PreconditionError
        N(P, i) is not positive definite.
    SingularSystem
        The stacked nL x nL system is singular.
    """
    coef = RiccatiCoefficients(problem)
    P = _care_P(care)
    L, n = problem.L, problem.n
    if problem.homogeneous or not problem.has_nonzero_inhomogeneous:
        return StationaryAdjoint(np.zeros((L, n)))
    if coef.n_margins(P).min() <= 0:
        raise PreconditionError("stationary adjoint needs N(P, i) positive definite")
    Lm, Nm = coef.L(P), coef.N(P)
    K = np.swapaxes(np.linalg.solve(Nm, np.swapaxes(Lm, 1, 2)), 1, 2)   # L N^{-1}
    p = problem
    F = np.swapaxes(p.A, 1, 2) - K @ np.swapaxes(p.B, 1, 2)
    G = np.swapaxes(p.C, 1, 2) - K @ np.swapaxes(p.D, 1, 2)
    h = (np.einsum("inm,im->in", G @ P, p.sigma) - np.einsum("inm,im->in", K, p.rho)
         + np.einsum("inm,im->in", P, p.b) + p.q)
    M = np.kron(p.pi, np.eye(n))
    for i in range(L):
        M[i * n:(i + 1) * n, i * n:(i + 1) * n] += F[i]
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularSystem(f"stationary adjoint system is singular (condition number {cond:.3g})")
    v = np.linalg.solve(M, -h.reshape(-1))
    return StationaryAdjoint(v.reshape(L, n))


def offset_forcing(problem: ProblemSpec, P, adjoint: StationaryAdjoint) -> np.ndarray:
    """``rho~_i = B_i' v_i + D_i' P_i sigma_i + rho_i`` (zeta = 0)."""
    P = _care_P(P)
    p = problem
    return (np.einsum("inm,in->im", p.B, adjoint.v)
            + np.einsum("inm,in->im", p.D, np.einsum("inm,im->in", P, p.sigma)) + p.rho)


def build_closed_loop(problem: ProblemSpec, care: CareSolution,
                      adjoint: StationaryAdjoint | None = None) -> FeedbackStrategy:
    """Optimal feedback ``u = Theta(alpha) x + nu(alpha)``.

    Gains come from ``care``; offsets are ``-N^{-1} rho~`` (pseudoinverse when
    N is singular and ``rho~`` lies in its range), zero for homogeneous
    problems.

    Raises
    ------
    SingularN
        N(P, i) is singular and ``rho~_i`` is not in its range.
    """
    theta = np.asarray(care.theta, float)
    if problem.homogeneous or not problem.has_nonzero_inhomogeneous:
        return FeedbackStrategy(theta)
    P = _care_P(care)
    if adjoint is None:
        adjoint = solve_stationary_adjoint(problem, care)
    rt = offset_forcing(problem, P, adjoint)
    Nm = RiccatiCoefficients(problem).N(P)
    nu = np.empty_like(rt)
    for i in range(problem.L):
        Np = pinv_sym(Nm[i])
        resid = rt[i] - Nm[i] @ (Np @ rt[i])
        if np.linalg.norm(resid) > RANGE_TOL * (1 + np.linalg.norm(rt[i])):
            raise SingularN(f"regime {i + 1}: offset forcing is outside the range of N(P, i)")
        nu[i] = -Np @ rt[i]
    return FeedbackStrategy(theta, nu)


def discount_transform(problem: ProblemSpec) -> ProblemSpec:
    """Undiscounted equivalent of a problem with discount rate r: ``A -> A - (r/2) I``.

    Raises
    ------
    UnsupportedInhomogeneous
        r > 0 together with nonzero ``b, sigma, q, rho``.
    """
    r = problem.discount_r
    if r == 0:
        return problem
    if problem.has_nonzero_inhomogeneous:
        raise UnsupportedInhomogeneous(
            "discounting with nonzero b, sigma, q or rho leads to time-varying terms")
    out = problem.replace(A=problem.A - (r / 2) * np.eye(problem.n), discount_r=0.0)
    if not out.homogeneous:
        # all-zero inhomogeneous terms: drop them
        regs = tuple(replace(reg, b=None, sigma=None, q=None, rho=None) for reg in out.regimes)
        out = ProblemSpec(out.n, out.m, out.generator, regs, 0.0)
    return out


def undiscount_strategy(strategy: FeedbackStrategy, r: float) -> FeedbackStrategy:
    """Strategy for the discounted problem from that of the transformed one.

    Gains carry over unchanged; only zero offsets are supported for r > 0.
    """
    if r < 0:
        raise ValueError("discount rate must be nonnegative")
    if r > 0 and np.any(strategy.nu != 0):
        raise UnsupportedInhomogeneous("nonzero offsets become time-varying under discounting")
    return FeedbackStrategy(strategy.theta, None if r > 0 else strategy.nu)


@register_artifact("value_report")
@dataclass(frozen=True, eq=False)
class ValueReport:
    """Value function ``V(x, i) = <P_i x, x> + 2 <v_i, x> (+ constant)``.

    ``constant_term`` is None when it is unavailable (undiscounted problems
    with constant inhomogeneous terms, where it diverges).
    """

    P: CoupledMatrixSet
    v: StationaryAdjoint | None = None
    constant_term: float | None = 0.0

    def evaluate(self, x, i: int) -> float:
        x = np.atleast_1d(np.asarray(x, float))
        val = float(x @ self.P.entries[i] @ x)
        if self.v is not None:
            val += 2.0 * float(self.v.v[i] @ x)
        if self.constant_term:
            val += self.constant_term
        return val

    def to_dict(self) -> dict:
        return {"kind": "value_report", "P": _enc(self.P.entries),
                "v": None if self.v is None else _enc(self.v.v),
                "constant_term": self.constant_term,
                "constant_available": self.constant_term is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "ValueReport":
        v = d.get("v")
        return cls(CoupledMatrixSet(_dec(d["P"])),
                   None if v is None else StationaryAdjoint(_dec(v)), d.get("constant_term"))


def value_function(problem: ProblemSpec, care: CareSolution,
                   adjoint: StationaryAdjoint | None = None) -> ValueReport:
    """Value function report for ``problem`` given its CARE solution."""
    P = CoupledMatrixSet(_care_P(care))
    if problem.homogeneous or not problem.has_nonzero_inhomogeneous:
        return ValueReport(P, None, 0.0)
    if adjoint is None:
        adjoint = solve_stationary_adjoint(problem, care)
    return ValueReport(P, adjoint, None)


__all__ = ["StationaryAdjoint", "ValueReport", "solve_stationary_adjoint", "offset_forcing",
           "build_closed_loop", "discount_transform", "undiscount_strategy", "value_function"]
