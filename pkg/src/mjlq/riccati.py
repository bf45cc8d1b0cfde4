"""Coupled algebraic Riccati equations (CAREs) for regime-switching LQ problems.

For a coupled family ``P`` the per-regime maps are

    M(P, i) = P_i A_i + A_i' P_i + C_i' P_i C_i + Q_i + sum_j pi_ij P_j
    L(P, i) = P_i B_i + C_i' P_i D_i + S_i'
    N(P, i) = D_i' P_i D_i + R_i

and the CARE residual is ``E_i(P) = M - L N^{-1} L'``. The stabilizing
solution is the limit of the differential Riccati equation swept backward
from a zero terminal value, polished by Newton (Kleinman) steps.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import RK45

from .errors import (Blowup, ConvergenceFailure, HomotopyDiverged, LostStabilityWarning,
                     NBreakdown, NotStabilizable, NotStabilizingSolution,
                     NumericalAmbiguityWarning, PreconditionError, SingularOperator,
                     SolverFailure)
from .model_io import (CoupledMatrixSet, FeedbackStrategy, ProblemSpec, _dec, _enc,
                       as_matrix_set, register_artifact)
from .stability import (check_l2_stable, closed_loop_system, is_stable, open_loop_system,
                        solve_coupled_lyapunov)

N_BREAKDOWN = 1e-10
BLOWUP_NORM = 1e12
PINV_RTOL = 1e-9
ACCEPT_RESIDUAL = 1e-8
ACCEPT_N_MIN = -1e-10


def _T(X: np.ndarray) -> np.ndarray:
    return np.swapaxes(X, -1, -2)


def _entries(P) -> np.ndarray:
    return np.asarray(getattr(P, "entries", P), float)


def pinv_sym(N: np.ndarray, rtol: float = PINV_RTOL) -> np.ndarray:
    """Pseudoinverse of a symmetric matrix via its eigendecomposition.

    Eigenvalues with magnitude below ``rtol * max|eig|`` are treated as zero.
    """
    lam, V = np.linalg.eigh((N + N.T) / 2)
    big = np.abs(lam).max(initial=0.0)
    keep = np.abs(lam) > rtol * big if big > 0 else np.zeros_like(lam, bool)
    inv = np.zeros_like(lam)
    inv[keep] = 1.0 / lam[keep]
    return (V * inv) @ V.T


class RiccatiCoefficients:
    """Evaluates M, L, N and derived quantities of ``problem`` on stacked ``P``."""

    def __init__(self, problem: ProblemSpec):
        self.problem = problem
        self._At = _T(problem.A)
        self._Ct = _T(problem.C)
        self._Dt = _T(problem.D)
        self._St = _T(problem.S)

    def M(self, P) -> np.ndarray:
        p = self.problem
        P = _entries(P)
        M = (P @ p.A + self._At @ P + self._Ct @ P @ p.C + p.Q
             + np.einsum("ij,jkl->ikl", p.pi, P))
        return (M + _T(M)) / 2

    def L(self, P) -> np.ndarray:
        p = self.problem
        P = _entries(P)
        return P @ p.B + self._Ct @ P @ p.D + self._St

    def N(self, P) -> np.ndarray:
        p = self.problem
        P = _entries(P)
        N = self._Dt @ P @ p.D + p.R
        return (N + _T(N)) / 2

    def residual(self, P) -> np.ndarray:
        """``E_i(P) = M - L N^{-1} L'`` (symmetrized)."""
        Lm, Nm = self.L(P), self.N(P)
        E = self.M(P) - Lm @ np.linalg.solve(Nm, _T(Lm))
        return (E + _T(E)) / 2

    def residual_norms(self, P) -> np.ndarray:
        return np.linalg.norm(self.residual(P), axis=(1, 2))

    def gains(self, P) -> np.ndarray:
        """``-N^{-1} L'`` per regime."""
        return -np.linalg.solve(self.N(P), _T(self.L(P)))

    def n_margins(self, P) -> np.ndarray:
        return np.array([np.linalg.eigvalsh(N)[0] for N in self.N(P)])


# --------------------------------------------------------------------------
# reports

@register_artifact("verification_report")
@dataclass(frozen=True, eq=False)
class VerificationReport:
    """Check of the constrained CAREs and the stabilizing property of a candidate P."""

    residuals: np.ndarray          # ||M - L N^+ L'||_F per regime
    range_residuals: np.ndarray    # ||L (I - N N^+)||_F per regime
    n_min_eigs: np.ndarray         # min eig N per regime
    gains: np.ndarray              # K(Pi) = -N^+ L' + (I - N^+ N) Pi
    stabilizing: bool
    accepted: bool
    spectral_abscissa: float | None = None
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "kind": "verification_report",
            "residuals": _enc(self.residuals),
            "range_residuals": _enc(self.range_residuals),
            "n_min_eigs": _enc(self.n_min_eigs),
            "gains": _enc(self.gains),
            "stabilizing": bool(self.stabilizing),
            "accepted": bool(self.accepted),
            "spectral_abscissa": self.spectral_abscissa,
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationReport":
        return cls(_dec(d["residuals"]), _dec(d["range_residuals"]), _dec(d["n_min_eigs"]),
                   _dec(d["gains"]), bool(d["stabilizing"]), bool(d["accepted"]),
                   d.get("spectral_abscissa"), d.get("note", ""))


@register_artifact("care_solution")
@dataclass(frozen=True, eq=False)
class CareSolution:
    """Result of a CARE solve.

    ``strategy`` holds the gains with zero offsets. ``trace`` is a list of
    dicts logging sweep checkpoints, Newton iterations and homotopy legs.
    """

    P: CoupledMatrixSet
    residuals: np.ndarray
    n_margins: np.ndarray
    strategy: FeedbackStrategy
    stabilizing: bool
    trace: list = field(default_factory=list)
    method: str = "sweep+newton"
    stabilizer: FeedbackStrategy | None = None
    verification: VerificationReport | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def theta(self) -> np.ndarray:
        return self.strategy.theta

    @property
    def accepted(self) -> bool:
        if self.verification is not None:
            return self.verification.accepted
        return self.stabilizing

    def to_dict(self) -> dict:
        return {
            "kind": "care_solution",
            "method": self.method,
            "P": _enc(self.P.entries),
            "residuals": _enc(self.residuals),
            "n_margins": _enc(self.n_margins),
            "theta": _enc(self.strategy.theta),
            "nu": _enc(self.strategy.nu),
            "stabilizing": bool(self.stabilizing),
            "accepted": bool(self.accepted),
            "stabilizer": None if self.stabilizer is None else _enc(self.stabilizer.theta),
            "verification": None if self.verification is None else self.verification.to_dict(),
            "trace": self.trace,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CareSolution":
        ver = d.get("verification")
        stab = d.get("stabilizer")
        return cls(CoupledMatrixSet(_dec(d["P"])), _dec(d["residuals"]), _dec(d["n_margins"]),
                   FeedbackStrategy(_dec(d["theta"]), _dec(d["nu"]) if d.get("nu") else None),
                   bool(d["stabilizing"]), list(d.get("trace", [])), d.get("method", ""),
                   None if stab is None else FeedbackStrategy(_dec(stab)),
                   None if ver is None else VerificationReport.from_dict(ver),
                   dict(d.get("metadata", {})))


SolveReport = CareSolution


# --------------------------------------------------------------------------
# differential Riccati sweep

class _Sweep:
    """Adaptive RK45 integration of the Riccati flow in time-to-go.

    With ``s = T - t`` the backward equation becomes the forward ODE
    ``dP/ds = M(P) - L N^{-1} L'``, ``P(0) = G``, so one forward run yields
    ``P(0; T)`` for every horizon T it passes. The state is packed as the
    upper triangles of the P_i, which keeps P symmetric by construction.
    """

    def __init__(self, problem: ProblemSpec, G, rtol: float = 1e-10, atol: float = 1e-10):
        self.coef = RiccatiCoefficients(problem)
        self.L, self.n = problem.L, problem.n
        self.iu = np.triu_indices(self.n)
        self.rtol, self.atol = rtol, atol
        self.s = 0.0
        self.y = self._pack(_entries(G))
        self.h = None
        self.n_steps = 0

    def _pack(self, P: np.ndarray) -> np.ndarray:
        return P[:, self.iu[0], self.iu[1]].reshape(-1)

    def unpack(self, y: np.ndarray) -> np.ndarray:
        P = np.empty((self.L, self.n, self.n))
        v = y.reshape(self.L, -1)
        P[:, self.iu[0], self.iu[1]] = v
        P[:, self.iu[1], self.iu[0]] = v
        return P

    def _rhs(self, s, y):
        P = self.unpack(y)
        Lm, Nm = self.coef.L(P), self.coef.N(P)
        try:
            F = self.coef.M(P) - Lm @ np.linalg.solve(Nm, _T(Lm))
        except np.linalg.LinAlgError:
            raise NBreakdown(f"N(P, i) singular at time-to-go {s:.6g}") from None
        return self._pack(F)

    def advance_to(self, T: float) -> np.ndarray:
        kw = {} if self.h is None else {"first_step": min(self.h, T - self.s)}
        solver = RK45(self._rhs, self.s, self.y, T, rtol=self.rtol, atol=self.atol, **kw)
        while solver.status == "running":
            msg = solver.step()
            if solver.status == "failed":
                raise ConvergenceFailure(f"Riccati sweep failed at time-to-go {solver.t:.6g}: {msg}")
            self.n_steps += 1
            P = self.unpack(solver.y)
            norm = np.linalg.norm(P, axis=(1, 2)).max()
            if not np.isfinite(norm) or norm > BLOWUP_NORM:
                raise Blowup(f"||P||_F exceeded {BLOWUP_NORM:g} at time-to-go {solver.t:.6g}")
            nmin = self.coef.n_margins(P).min()
            if nmin < N_BREAKDOWN:
                raise NBreakdown(
                    f"min eig N(P, i) = {nmin:.3g} < {N_BREAKDOWN:g} at time-to-go {solver.t:.6g}")
            if solver.step_size:
                self.h = solver.step_size
        self.s, self.y = solver.t, solver.y
        return self.unpack(self.y)


def integrate_cdre(problem: ProblemSpec, G, T: float, rtol: float = 1e-10,
                   atol: float = 1e-10) -> CoupledMatrixSet:
    """``P(0; T)`` for the differential Riccati equations with terminal value ``G``.

    Raises
    ------
    NBreakdown
        ``min eig N(P, i)`` dropped below 1e-10 along the sweep.
    Blowup
        ``||P||_F`` exceeded 1e12.
    """
    G = as_matrix_set(G)
    if T < 0:
        raise ValueError("horizon T must be nonnegative")
    sweep = _Sweep(problem, G, rtol, atol)
    return CoupledMatrixSet(sweep.advance_to(float(T)) if T > 0 else G.entries)


def _sweep_until_converged(problem: ProblemSpec, conv_tol: float = 1e-9, t_max: float = 1024.0,
                           rtol: float = 1e-10, atol: float = 1e-10):
    """Sweep from G = 0, checking at T = 1, 2, 4, ... until successive values agree.

    Returns ``(P, trace)``; raises ConvergenceFailure when ``t_max`` is reached,
    with the last iterate attached as ``exc.last``.
    """
    coef = RiccatiCoefficients(problem)
    sweep = _Sweep(problem, np.zeros((problem.L, problem.n, problem.n)), rtol, atol)
    trace = []
    T = 1.0
    prev = sweep.advance_to(T)
    last = None
    while T < t_max:
        T *= 2
        P = sweep.advance_to(T)
        diff = np.linalg.norm(P - prev, axis=(1, 2))
        inc = min(np.linalg.eigvalsh(d)[0] for d in P - prev)
        trace.append({"stage": "sweep", "T": T, "max_change": float(diff.max()),
                      "min_increment_eig": float(inc),
                      "min_n_margin": float(coef.n_margins(P).min()),
                      "max_norm": float(np.linalg.norm(P, axis=(1, 2)).max())})
        if np.all(diff <= conv_tol):
            return P, trace
        # integrator noise floor: the change stopped shrinking at a tiny level
        scale = 1.0 + np.linalg.norm(P, axis=(1, 2))
        if last is not None and np.all(diff <= 100 * conv_tol * scale) and diff.max() >= last / 2:
            trace[-1]["plateau"] = True
            return P, trace
        last = diff.max()
        prev = P
    exc = ConvergenceFailure(
        f"Riccati sweep did not converge by T = {t_max:g} (last change {trace[-1]['max_change']:.3g})")
    exc.last, exc.trace = P, trace
    raise exc


# --------------------------------------------------------------------------
# Newton refinement

def _newton(problem: ProblemSpec, P0, tol: float = 1e-10, max_iter: int = 20):
    coef = RiccatiCoefficients(problem)
    P = _entries(P0).copy()
    if coef.n_margins(P).min() <= 0:
        raise PreconditionError("Newton refinement needs N(P0, i) positive definite")
    r = coef.residual_norms(P).max()
    history = [{"stage": "newton", "iter": 0, "max_residual": float(r)}]
    met = False
    for k in range(1, max_iter + 1):
        # one extra step once tol is met: cheap under quadratic convergence and
        # it matters when P is large and E(P) is poorly conditioned
        if r <= tol:
            if met or r == 0:
                break
            met = True
        sys = closed_loop_system(problem, coef.gains(P))
        if not is_stable(sys):
            if met:
                break
            warnings.warn(f"Newton iterate {k - 1} lost closed-loop stability; "
                          "returning the best iterate", LostStabilityWarning, stacklevel=3)
            break
        try:
            dP = solve_coupled_lyapunov(sys, coef.residual(P)).entries
        except SingularOperator:
            if met:
                break
            warnings.warn("Newton step hit a singular Lyapunov operator; returning the best iterate",
                          LostStabilityWarning, stacklevel=3)
            break
        Pn = P + dP
        if coef.n_margins(Pn).min() <= 0:
            break
        rn = coef.residual_norms(Pn).max()
        history.append({"stage": "newton", "iter": k, "max_residual": float(rn)})
        if not rn < r:
            break
        P, r = Pn, rn
    return CoupledMatrixSet(P), history


def newton_refine(problem: ProblemSpec, P0, tol: float = 1e-10,
                  max_iter: int = 20) -> CoupledMatrixSet:
    """Polish an approximate CARE solution with Lyapunov-based Newton steps.

    Each step solves the coupled Lyapunov equation of the closed loop under
    ``Theta(P) = -N^{-1} L'`` with forcing ``E(P)`` and adds the correction.
    Stops one step after ``max_i ||E_i(P)||_F <= tol`` is first met, after
    ``max_iter`` steps, or when the residual stops decreasing (the best iterate
    is returned).
    """
    return _newton(problem, P0, tol, max_iter)[0]


# --------------------------------------------------------------------------
# stabilizers and shifts

def _as_gains(Sigma) -> np.ndarray:
    return np.asarray(getattr(Sigma, "theta", Sigma), float)


def shift_problem(problem: ProblemSpec, Sigma) -> ProblemSpec:
    """Reparametrize the control as ``u = Sigma x + v``.

    ``A + B Sigma``, ``C + D Sigma``, ``Q + S'Sigma + Sigma'S + Sigma'R Sigma``,
    ``S + R Sigma`` and ``q + Sigma' rho``; the rest is unchanged.
    """
    Sg = _as_gains(Sigma)
    if Sg.shape != (problem.L, problem.m, problem.n):
        raise ValueError(f"Sigma has shape {Sg.shape}, expected {(problem.L, problem.m, problem.n)}")
    p = problem
    SgT = _T(Sg)
    RS = p.R @ Sg
    kw = dict(A=p.A + p.B @ Sg, C=p.C + p.D @ Sg,
              Q=p.Q + _T(p.S) @ Sg + SgT @ p.S + SgT @ RS,
              S=p.S + RS)
    if not p.homogeneous:
        kw["q"] = p.q + np.einsum("imn,im->in", Sg, p.rho)
    return p.replace(**kw)


def synthesize_stabilizer(problem: ProblemSpec, t_max: float = 1024.0) -> FeedbackStrategy:
    """Find a stabilizing gain from the normalized CAREs (Q = I, R = I, S = 0).

    Raises
    ------
    NotStabilizable
        The normalized sweep blew up, or did not settle by ``t_max`` and its
        last gain does not stabilize either.
    """
    p = problem
    L, n, m = p.L, p.n, p.m
    norm = p.replace(Q=np.broadcast_to(np.eye(n), (L, n, n)),
                     R=np.broadcast_to(np.eye(m), (L, m, m)), S=np.zeros((L, m, n)),
                     discount_r=0.0)
    try:
        P, _ = _sweep_until_converged(norm, t_max=t_max)
    except Blowup as exc:
        raise NotStabilizable(f"no stabilizing feedback found: {exc}") from exc
    except ConvergenceFailure as exc:
        # slow settling near the stability margin: any stabilizing gain will do
        P = exc.last
    gamma = RiccatiCoefficients(norm).gains(P)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NumericalAmbiguityWarning)
        cert = check_l2_stable(closed_loop_system(p, gamma))
    if not cert.stable:
        raise NotStabilizable("normalized Riccati gain does not stabilize the system")
    return FeedbackStrategy(gamma)


# --------------------------------------------------------------------------
# solvers

def solve_care(problem: ProblemSpec, *, stabilizer=None, tol: float = 1e-10,
               conv_tol: float = 1e-9, t_max: float = 1024.0, rtol: float = 1e-10,
               atol: float = 1e-10, max_newton: int = 20) -> CareSolution:
    """Stabilizing solution of the CAREs of a uniformly convex problem.

    Pipeline: pick a stabilizer Sigma (zero if the open loop is already
    stable, synthesized otherwise, or ``stabilizer`` if given), sweep the
    Riccati flow of the Sigma-shifted problem with doubling horizons, polish
    with Newton on the original problem and check the closed loop.

    Raises
    ------
    NotStabilizable, NBreakdown, Blowup
        From the stabilizer synthesis or the sweep.
    ConvergenceFailure
        The sweep did not settle by ``t_max`` and Newton from its last
        iterate did not reach ``tol``.
    NotStabilizingSolution
        The converged P does not yield a stabilizing gain.
    """
    if problem.discount_r > 0:
        raise PreconditionError("discounted problem: apply synthesis.discount_transform first")
    t0 = time.perf_counter()
    L, m, n = problem.L, problem.m, problem.n
    if stabilizer is not None:
        Sigma = FeedbackStrategy(_as_gains(stabilizer))
        Sigma.check_against(problem)
        if not is_stable(closed_loop_system(problem, Sigma.theta)):
            raise PreconditionError("supplied stabilizer does not stabilize the system")
    elif is_stable(open_loop_system(problem)):
        Sigma = FeedbackStrategy.zeros(L, m, n)
    else:
        Sigma = synthesize_stabilizer(problem, t_max=t_max)
    shifted = shift_problem(problem, Sigma) if np.any(Sigma.theta) else problem
    try:
        P, trace = _sweep_until_converged(shifted, conv_tol, t_max, rtol, atol)
    except ConvergenceFailure as exc:
        # slow settling: Newton from the last iterate, accepted only if it converges
        try:
            P, hist = _newton(problem, exc.last, tol, max_newton)
        except PreconditionError:
            raise exc from None
        if RiccatiCoefficients(problem).residual_norms(P).max() > tol:
            raise
        trace = exc.trace + hist
    else:
        P, hist = _newton(problem, P, tol, max_newton)
        trace += hist
    return _finish(problem, P, trace, "sweep+newton", Sigma,
                   {"wall_time": time.perf_counter() - t0, "tol": tol, "conv_tol": conv_tol})


def _finish(problem, P, trace, method, Sigma, meta) -> CareSolution:
    coef = RiccatiCoefficients(problem)
    theta = coef.gains(P)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NumericalAmbiguityWarning)
        cert = check_l2_stable(closed_loop_system(problem, theta))
    sol = CareSolution(P, coef.residual_norms(P), coef.n_margins(P), FeedbackStrategy(theta),
                       cert.stable, trace, method, Sigma, None,
                       {**meta, "closed_loop_abscissa": cert.spectral_abscissa})
    if not cert.stable:
        raise NotStabilizingSolution(
            f"converged P gives a closed loop with spectral abscissa {cert.spectral_abscissa:.3g}",
            solution=sol)
    return sol


def verify_care(problem: ProblemSpec, P, Pi=None, rank_rtol: float = PINV_RTOL) -> VerificationReport:
    """Check ``P`` against the constrained CAREs.

    Reports per regime ``||M - L N^+ L'||``, ``||L (I - N N^+)||`` and
    ``min eig N``, and whether ``K(Pi) = -N^+ L' + (I - N^+ N) Pi`` (Pi = 0 by
    default) stabilizes. P is accepted iff both residuals are <= 1e-8,
    ``min eig N >= -1e-10`` and the gain stabilizes.
    """
    coef = RiccatiCoefficients(problem)
    P = _entries(P)
    L, m, n = problem.L, problem.m, problem.n
    Pi = np.zeros((L, m, n)) if Pi is None else _as_gains(Pi)
    Mm, Lm, Nm = coef.M(P), coef.L(P), coef.N(P)
    res, rng, nmin = np.empty(L), np.empty(L), np.empty(L)
    K = np.empty((L, m, n))
    eye = np.eye(m)
    for i in range(L):
        Np = pinv_sym(Nm[i], rank_rtol)
        res[i] = np.linalg.norm(Mm[i] - Lm[i] @ Np @ Lm[i].T)
        rng[i] = np.linalg.norm(Lm[i] @ (eye - Nm[i] @ Np))
        nmin[i] = np.linalg.eigvalsh(Nm[i])[0]
        K[i] = -Np @ Lm[i].T + (eye - Np @ Nm[i]) @ Pi[i]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NumericalAmbiguityWarning)
        cert = check_l2_stable(closed_loop_system(problem, K))
    ok_res = bool(np.all(res <= ACCEPT_RESIDUAL) and np.all(rng <= ACCEPT_RESIDUAL))
    ok_n = bool(np.all(nmin >= ACCEPT_N_MIN))
    notes = []
    if not ok_res:
        notes.append("constrained CARE residuals exceed 1e-8")
    if not ok_n:
        notes.append("N(P, i) is not positive semidefinite")
    if not cert.stable:
        notes.append("stabilizing Pi not found (checked the given Pi only)")
    return VerificationReport(res, rng, nmin, K, cert.stable, ok_res and ok_n and cert.stable,
                              cert.spectral_abscissa, "; ".join(notes))


def solve_care_eps_homotopy(problem: ProblemSpec, eps0: float = 1.0, *, diff_tol: float = 1e-7,
                            eps_min: float = 1e-10, max_norm: float = 1e10,
                            rank_rtol: float = PINV_RTOL, **solve_kw) -> CareSolution:
    """CAREs with a possibly singular control weight via ``R + eps I``, eps -> 0.

    ``eps_k = eps0 / 2**k``; the first leg is a full :func:`solve_care`, later
    legs warm-start Newton from the previous solution (falling back to a full
    solve). Stops when successive solutions differ by at most ``diff_tol`` or
    ``eps < eps_min``. If N is invertible at the limit, a Newton polish on the
    original problem removes the remaining eps bias. Gains use the
    pseudoinverse of N and the candidate is
    checked by :func:`verify_care`; a rejected candidate is returned with
    ``accepted == False``.

    Raises
    ------
    HomotopyDiverged
        ``||P_eps||_F`` exceeded ``max_norm``.
    """
    if eps0 <= 0:
        raise ValueError("eps0 must be positive")
    t0 = time.perf_counter()
    I = np.eye(problem.m)

    def leg(eps):
        return problem.replace(R=problem.R + eps * I)

    eps = float(eps0)
    try:
        first = solve_care(leg(eps), **solve_kw)
    except Blowup as exc:
        raise HomotopyDiverged(f"first homotopy leg diverged: {exc}") from exc
    P = first.P.entries
    trace = list(first.trace) + [{"stage": "homotopy", "eps": eps, "change": None}]
    while True:
        eps_next = eps / 2
        prob = leg(eps_next)
        Pn = None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LostStabilityWarning)
            try:
                cand = newton_refine(prob, P)
                if RiccatiCoefficients(prob).residual_norms(cand).max() <= 1e-9:
                    Pn = cand.entries
            except (PreconditionError, np.linalg.LinAlgError):
                pass
        if Pn is None:
            try:
                Pn = solve_care(prob, **solve_kw).P.entries
            except Blowup as exc:
                raise HomotopyDiverged(f"homotopy leg eps={eps_next:g} diverged: {exc}") from exc
        norm = float(np.linalg.norm(Pn, axis=(1, 2)).max())
        if not np.isfinite(norm) or norm > max_norm:
            raise HomotopyDiverged(f"||P_eps|| = {norm:.3g} at eps = {eps_next:g}")
        change = float(np.linalg.norm(Pn - P, axis=(1, 2)).max())
        trace.append({"stage": "homotopy", "eps": eps_next, "change": change, "max_norm": norm})
        P, eps = Pn, eps_next
        if change <= diff_tol or eps < eps_min:
            break
    coef = RiccatiCoefficients(problem)
    Nmin = coef.n_margins(P)
    Nmax = np.abs(coef.N(P)).max()
    if np.all(Nmin > rank_rtol * max(Nmax, 1.0)):
        # the limit is uniformly convex after all: remove the eps bias
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LostStabilityWarning)
            P, hist = _newton(problem, P)
        P = P.entries
        trace += hist
    report = verify_care(problem, P, rank_rtol=rank_rtol)
    return CareSolution(CoupledMatrixSet(P), report.residuals, coef.n_margins(P),
                        FeedbackStrategy(report.gains), report.stabilizing, trace, "eps-homotopy",
                        first.stabilizer, report,
                        {"wall_time": time.perf_counter() - t0, "eps0": eps0, "eps_final": eps})


__all__ = [
    "RiccatiCoefficients", "CareSolution", "SolveReport", "VerificationReport", "pinv_sym",
    "integrate_cdre", "solve_care", "newton_refine", "synthesize_stabilizer", "shift_problem",
    "solve_care_eps_homotopy", "verify_care", "SolverFailure",
]
