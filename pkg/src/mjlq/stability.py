"""Mean-square (L2) stability of regime-switching linear SDEs.

The system ``dX = Abar(a) X dt + Cbar(a) X dW`` with chain generator ``pi`` is
L2-stable iff the coupled Lyapunov equations

    P_i Abar_i + Abar_i' P_i + Cbar_i' P_i Cbar_i + Lambda_i + sum_j pi_ij P_j = 0

have a positive definite solution for Lambda = I. The adjoint of that linear
operator generates the second moments E[X X' 1{a_t = i}], so its spectral
abscissa gives an independent verdict.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (EigenFailure, NumericalAmbiguityWarning, PreconditionError,
                     SingularOperator)
from .model_io import (CoupledMatrixSet, Generator, ProblemSpec, as_matrix_set,
                       register_artifact)

COND_LIMIT = 1e13
BOUNDARY_BAND = 1e-8


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """Uncontrolled system ``[Abar, Cbar]`` driven by a Markov chain."""

    Abar: np.ndarray
    Cbar: np.ndarray
    generator: Generator

    def __post_init__(self):
        A = np.array(self.Abar, dtype=float)
        C = np.array(self.Cbar, dtype=float)
        L = self.generator.L
        if A.ndim != 3 or A.shape != C.shape or A.shape[0] != L or A.shape[1] != A.shape[2]:
            raise ValueError(f"Abar/Cbar must both have shape (L={L}, n, n); got {A.shape}, {C.shape}")
        A.setflags(write=False)
        C.setflags(write=False)
        object.__setattr__(self, "Abar", A)
        object.__setattr__(self, "Cbar", C)

    @property
    def L(self) -> int:
        return self.Abar.shape[0]

    @property
    def n(self) -> int:
        return self.Abar.shape[1]

    @property
    def pi(self) -> np.ndarray:
        return self.generator.pi


def open_loop_system(problem: ProblemSpec) -> LinearSystem:
    return LinearSystem(problem.A, problem.C, problem.generator)


def closed_loop_system(problem: ProblemSpec, theta) -> LinearSystem:
    """System ``[A + B theta, C + D theta]``."""
    theta = getattr(theta, "theta", theta)
    theta = np.asarray(theta, float)
    return LinearSystem(problem.A + problem.B @ theta, problem.C + problem.D @ theta,
                        problem.generator)


def lyapunov_operator(sys: LinearSystem) -> np.ndarray:
    """Matrix of the coupled Lyapunov map acting on row-major ``vec(P)``."""
    n, L = sys.n, sys.L
    I = np.eye(n)
    N = n * n
    M = np.kron(sys.pi, np.eye(N))
    for i in range(L):
        At, Ct = sys.Abar[i].T, sys.Cbar[i].T
        M[i * N:(i + 1) * N, i * N:(i + 1) * N] += np.kron(At, I) + np.kron(I, At) + np.kron(Ct, Ct)
    return M


def second_moment_operator(sys: LinearSystem) -> np.ndarray:
    """Generator of the per-regime second moments ``S_i = E[X X' 1{a=i}]``.

    Block i maps S to ``Abar_i S_i + S_i Abar_i' + Cbar_i S_i Cbar_i' + sum_j pi_ji S_j``.
    It is the transpose of :func:`lyapunov_operator`.
    """
    n, L = sys.n, sys.L
    I = np.eye(n)
    N = n * n
    T = np.kron(sys.pi.T, np.eye(N))
    for i in range(L):
        A, C = sys.Abar[i], sys.Cbar[i]
        T[i * N:(i + 1) * N, i * N:(i + 1) * N] += np.kron(A, I) + np.kron(I, A) + np.kron(C, C)
    return T


def lyapunov_residual(sys: LinearSystem, P, Lambda) -> np.ndarray:
    P = np.asarray(getattr(P, "entries", P), float)
    Lam = np.asarray(getattr(Lambda, "entries", Lambda), float)
    A, C = sys.Abar, sys.Cbar
    At = np.swapaxes(A, 1, 2)
    Ct = np.swapaxes(C, 1, 2)
    return P @ A + At @ P + Ct @ P @ C + Lam + np.einsum("ij,jkl->ikl", sys.pi, P)


def solve_coupled_lyapunov(sys: LinearSystem, Lambda) -> CoupledMatrixSet:
    """Solve the coupled Lyapunov equations for P given the forcing ``Lambda``.

    One dense solve on the stacked n^2 L system followed by one step of
    iterative refinement.

    Raises
    ------
    SingularOperator
        The stacked operator is numerically singular; the system is on the
        stability boundary or the solution is not unique.
    """
    Lam = np.asarray(getattr(Lambda, "entries", Lambda), float)
    if Lam.shape != (sys.L, sys.n, sys.n):
        raise ValueError(f"Lambda has shape {Lam.shape}, expected {(sys.L, sys.n, sys.n)}")
    M = lyapunov_operator(sys)
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularOperator(f"coupled Lyapunov operator is singular (condition number {cond:.3g})")
    rhs = -Lam.reshape(-1)
    x = np.linalg.solve(M, rhs)
    x += np.linalg.solve(M, rhs - M @ x)
    P = x.reshape(sys.L, sys.n, sys.n)
    return CoupledMatrixSet(P)


def spectral_abscissa(sys: LinearSystem) -> float:
    """Largest real part of the spectrum of the second-moment generator."""
    try:
        ev = np.linalg.eigvals(second_moment_operator(sys))
    except np.linalg.LinAlgError as exc:
        raise EigenFailure(str(exc)) from exc
    return float(np.max(ev.real))


class SignVerdict(str, enum.Enum):
    PROVABLY_STABLE = "provably_stable"
    PROVABLY_UNSTABLE = "provably_unstable"
    INCONCLUSIVE = "inconclusive"


def sign_matrices(sys: LinearSystem) -> np.ndarray:
    """``Abar_i + Abar_i' + Cbar_i' Cbar_i`` for every regime."""
    A, C = sys.Abar, sys.Cbar
    return A + np.swapaxes(A, 1, 2) + np.swapaxes(C, 1, 2) @ C


def sign_screen(sys: LinearSystem) -> SignVerdict:
    """Cheap sufficient tests from the definiteness of :func:`sign_matrices`."""
    ev = np.array([np.linalg.eigvalsh(H) for H in sign_matrices(sys)])
    if np.all(ev.max(axis=1) < 0):
        return SignVerdict.PROVABLY_STABLE
    if np.all(ev.min(axis=1) > 0):
        return SignVerdict.PROVABLY_UNSTABLE
    return SignVerdict.INCONCLUSIVE


@register_artifact("stability_certificate")
@dataclass(frozen=True, eq=False)
class StabilityCertificate:
    stable: bool
    method: str
    witness_P: CoupledMatrixSet | None = None
    spectral_abscissa: float | None = None
    min_eig_P: float | None = None
    sign_verdict: str | None = None
    warning: str | None = None

    def to_dict(self) -> dict:
        return {
            "kind": "stability_certificate",
            "stable": bool(self.stable),
            "method": self.method,
            "witness_P": None if self.witness_P is None else self.witness_P.entries.tolist(),
            "spectral_abscissa": self.spectral_abscissa,
            "min_eig_P": self.min_eig_P,
            "sign_verdict": self.sign_verdict,
            "warning": self.warning,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StabilityCertificate":
        W = d.get("witness_P")
        return cls(bool(d["stable"]), d["method"],
                   None if W is None else CoupledMatrixSet(np.array(W, float)),
                   d.get("spectral_abscissa"), d.get("min_eig_P"), d.get("sign_verdict"),
                   d.get("warning"))


def _pd_margin(P: np.ndarray) -> tuple[float, float]:
    """(min eigenvalue over regimes, scale-aware threshold)."""
    lam = min(np.linalg.eigvalsh(Pi)[0] for Pi in P)
    thr = 1e-12 * (1.0 + max(np.linalg.norm(Pi) for Pi in P))
    return float(lam), thr


def check_l2_stable(sys: LinearSystem, shortcut: bool = False) -> StabilityCertificate:
    """Decide L2-stability of ``sys``.

    The verdict comes from the Lyapunov equations with Lambda = I: stable iff
    the solve succeeds and every P_i is positive definite. The spectral
    abscissa of the second-moment generator must agree outside a 1e-8 band
    around zero.

    With ``shortcut=True`` a conclusive :func:`sign_screen` result is returned
    directly (method ``sign-sufficient`` or ``sign-necessary``).
    """
    verdict = sign_screen(sys)
    abscissa = spectral_abscissa(sys)
    if shortcut and verdict is not SignVerdict.INCONCLUSIVE:
        stable = verdict is SignVerdict.PROVABLY_STABLE
        return StabilityCertificate(stable, "sign-sufficient" if stable else "sign-necessary",
                                    spectral_abscissa=abscissa, sign_verdict=verdict.value)
    eye = np.broadcast_to(np.eye(sys.n), (sys.L, sys.n, sys.n))
    note = None
    try:
        P = solve_coupled_lyapunov(sys, eye)
    except SingularOperator as exc:
        stable, P, lam = False, None, None
        note = str(exc)
    else:
        lam, thr = _pd_margin(P.entries)
        stable = lam > thr
        if abs(lam) <= thr:
            note = f"Lyapunov witness is on the definiteness boundary (min eigenvalue {lam:.3g})"
            warnings.warn(note, NumericalAmbiguityWarning, stacklevel=2)
    if abs(abscissa) >= BOUNDARY_BAND and stable != (abscissa < 0):
        raise RuntimeError(
            f"internal error: Lyapunov verdict stable={stable} disagrees with spectral "
            f"abscissa {abscissa:.6g}")
    return StabilityCertificate(stable, "lyapunov", P if stable else None, abscissa, lam,
                                verdict.value, note)


def is_stable(sys: LinearSystem) -> bool:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NumericalAmbiguityWarning)
        return check_l2_stable(sys).stable


@dataclass(frozen=True, eq=False)
class RepresentationCheck:
    """Monte Carlo estimate of the Lyapunov solution next to the exact one."""

    exact: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    rel_error: np.ndarray  # per regime, Frobenius norm relative to exact

    def within(self, n_stderr: float = 3.0) -> bool:
        return bool(np.all(np.abs(self.estimate - self.exact) <= n_stderr * self.stderr + 1e-12))


def lyapunov_representation_check(sys: LinearSystem, Lambda, mc) -> RepresentationCheck:
    """Compare the Lyapunov solution with its path-integral representation.

    ``P_i[k, l]`` equals ``E int_0^inf X_k' Lambda(a) X_l dt`` where ``X_k``
    starts at the k-th unit vector in regime i. Off-diagonal entries are
    recovered by polarization on common random numbers, which is exact
    path-by-path because the dynamics are linear.

    ``mc`` is a :class:`mjlq.mcsim.SimulationConfig`; its ``x0`` and ``i0`` are
    overridden.
    """
    from . import mcsim

    if not is_stable(sys):
        raise PreconditionError("representation check requires an L2-stable system")
    Lam = as_matrix_set(np.asarray(getattr(Lambda, "entries", Lambda), float)).entries
    if np.any([np.linalg.eigvalsh(Li)[0] < -1e-12 for Li in Lam]):
        raise PreconditionError("Lambda must be positive semidefinite")
    exact = solve_coupled_lyapunov(sys, Lam).entries
    n, L = sys.n, sys.L
    data = mcsim.ClosedLoopData.uncontrolled(sys, Lam)
    est = np.zeros((L, n, n))
    err = np.zeros((L, n, n))
    eye = np.eye(n)
    for i in range(L):
        diag = {}
        for k in range(n):
            res = mcsim.simulate_closed_loop(data, mc.replace(x0=eye[k], i0=i))
            diag[k] = res.path_costs
        for k in range(n):
            for l in range(k, n):
                if k == l:
                    vals = diag[k]
                else:
                    both = mcsim.simulate_closed_loop(data, mc.replace(x0=eye[k] + eye[l], i0=i))
                    vals = (both.path_costs - diag[k] - diag[l]) / 2
                vals = vals[np.isfinite(vals)]
                est[i, k, l] = est[i, l, k] = vals.mean()
                err[i, k, l] = err[i, l, k] = vals.std(ddof=1) / np.sqrt(len(vals))
    rel = np.array([np.linalg.norm(est[i] - exact[i]) / max(np.linalg.norm(exact[i]), 1e-300)
                    for i in range(L)])
    return RepresentationCheck(exact, est, err, rel)
