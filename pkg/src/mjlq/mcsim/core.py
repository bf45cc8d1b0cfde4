"""Monte Carlo simulation of closed-loop regime-switching SDEs.

The closed loop under ``u = Theta(a) x + nu(a)`` is the affine SDE

    dX = (Abar X + beta) dt + (Cbar X + gamma) dW

with running cost ``Xt Qbar X + 2 ell'X + c0`` (times ``exp(-r t)``).

Each path owns two counter-based Philox streams keyed by (seed, path): the
first drives the Markov chain (sampled exactly up front) and then one
Brownian increment per cell of width ``brownian_dt``; the second supplies
Brownian-bridge normals for the interior points of a cell (Euler substeps and
jump times). Runs with different ``dt`` but the same ``brownian_dt`` therefore
share their Brownian paths, and results do not depend on scheduling.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import PreconditionError, SimulationWarning
from ..model_io import FeedbackStrategy, Generator, ProblemSpec, _dec, _enc, register_artifact
from . import _fallback

try:
    from . import _kernel
except ImportError:  # extension not built
    _kernel = None

OVERFLOW_NORM = 1e12
OVERFLOW_TRIGGER = 0.01
N_CHECKPOINTS = 10
DEFAULT_BATCH = 4096


def _select_backend() -> str:
    want = os.environ.get("MJLQ_BACKEND", "").strip().lower()
    if want == "python" or _kernel is None:
        return "python"
    return "compiled"


BACKEND = _select_backend()


def available_backends() -> list[str]:
    return ["python"] + (["compiled"] if _kernel is not None else [])


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("MJLQ_THREADS", "1")))
    except ValueError:
        return 1


# --------------------------------------------------------------------------
# configuration and closed-loop data

@dataclass(frozen=True, eq=False)
class SimulationConfig:
    """Monte Carlo settings. ``i0`` is a 0-based regime index.

    ``brownian_dt`` (default ``dt``) is the width of the cells on which
    Brownian increments are drawn; it must be an integer multiple of ``dt``.
    ``workers`` never changes results.
    """

    n_paths: int
    horizon_T: float
    dt: float
    master_seed: int
    x0: np.ndarray
    i0: int = 0
    discount_r: float = 0.0
    brownian_dt: float | None = None
    workers: int = 1
    batch_size: int = DEFAULT_BATCH

    def __post_init__(self):
        x0 = np.atleast_1d(np.array(self.x0, dtype=float))
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        if self.n_paths < 2:
            raise ValueError("n_paths must be at least 2")
        if not (self.dt > 0 and self.horizon_T > 0):
            raise ValueError("dt and horizon_T must be positive")
        if self.dt > self.horizon_T:
            raise ValueError("dt must not exceed horizon_T")
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if self.discount_r < 0:
            raise ValueError("discount_r must be nonnegative")
        if self.workers < 1 or self.batch_size < 1:
            raise ValueError("workers and batch_size must be positive")
        hc = self.cell_width
        k = hc / self.dt
        if abs(k - round(k)) > 1e-9 * k or round(k) < 1:
            raise ValueError("brownian_dt must be an integer multiple of dt")
        if self.n_cells < N_CHECKPOINTS:
            raise ValueError(f"horizon must span at least {N_CHECKPOINTS} Brownian cells")

    @property
    def cell_width(self) -> float:
        return float(self.brownian_dt if self.brownian_dt is not None else self.dt)

    @property
    def substeps(self) -> int:
        return int(round(self.cell_width / self.dt))

    @property
    def n_cells(self) -> int:
        return int(round(self.horizon_T / self.cell_width))

    @property
    def effective_T(self) -> float:
        return self.n_cells * self.cell_width

    def replace(self, **kw) -> "SimulationConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {"n_paths": self.n_paths, "horizon_T": self.horizon_T, "dt": self.dt,
                "master_seed": int(self.master_seed), "x0": _enc(self.x0), "i0": self.i0,
                "discount_r": self.discount_r, "brownian_dt": self.brownian_dt}


@dataclass(frozen=True, eq=False)
class ClosedLoopData:
    """Coefficients of the affine closed-loop SDE and its running cost."""

    Abar: np.ndarray
    Cbar: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    Qbar: np.ndarray
    ell: np.ndarray
    c0: np.ndarray
    generator: Generator

    @property
    def L(self) -> int:
        return self.Abar.shape[0]

    @property
    def n(self) -> int:
        return self.Abar.shape[1]

    @classmethod
    def from_problem(cls, problem: ProblemSpec, strategy: FeedbackStrategy) -> "ClosedLoopData":
        strategy.check_against(problem)
        p = problem
        Th, nu = strategy.theta, strategy.nu
        ThT = np.swapaxes(Th, 1, 2)
        Qbar = p.Q + np.swapaxes(p.S, 1, 2) @ Th + ThT @ p.S + ThT @ p.R @ Th
        Rnu = np.einsum("imk,ik->im", p.R, nu)
        ell = (p.q + np.einsum("imn,im->in", Th, p.rho) + np.einsum("imn,im->in", p.S, nu)
               + np.einsum("imn,im->in", Th, Rnu))
        c0 = np.einsum("im,im->i", nu, Rnu) + 2 * np.einsum("im,im->i", p.rho, nu)
        return cls(p.A + p.B @ Th, p.C + p.D @ Th,
                   np.einsum("inm,im->in", p.B, nu) + p.b,
                   np.einsum("inm,im->in", p.D, nu) + p.sigma,
                   (Qbar + np.swapaxes(Qbar, 1, 2)) / 2, ell, c0, p.generator)

    @classmethod
    def uncontrolled(cls, sys, Lam) -> "ClosedLoopData":
        """Linear system ``[Abar, Cbar]`` with running cost ``X' Lam(a) X``."""
        L, n = sys.L, sys.n
        return cls(sys.Abar, sys.Cbar, np.zeros((L, n)), np.zeros((L, n)), np.asarray(Lam, float),
                   np.zeros((L, n)), np.zeros(L), sys.generator)

    def running_cost(self, X: np.ndarray, reg: np.ndarray) -> np.ndarray:
        """Undiscounted running cost at states ``X`` (..., n) in regimes ``reg``."""
        Qx = np.einsum("...ab,...b->...a", self.Qbar[reg], X)
        return np.einsum("...a,...a->...", X, Qx + 2 * self.ell[reg]) + self.c0[reg]

    def arrays(self):
        c = np.ascontiguousarray
        return (c(self.Abar), c(self.Cbar), c(self.beta), c(self.gamma), c(self.Qbar),
                c(self.ell), c(self.c0))


def _step_warning(data: ClosedLoopData, dt: float) -> None:
    rates = -np.diag(data.generator.pi)
    scale = max(rates[i] + np.linalg.norm(data.Abar[i], 2) + np.linalg.norm(data.Cbar[i], 2) ** 2
                for i in range(data.L))
    if scale > 0 and dt > 0.1 / scale:
        warnings.warn(f"dt = {dt:g} exceeds the recommended 0.1/{scale:.3g} = {0.1 / scale:.3g}",
                      SimulationWarning, stacklevel=3)


# --------------------------------------------------------------------------
# random streams and the Markov chain

def path_streams(seed: int, path: int) -> tuple[np.random.Generator, np.random.Generator]:
    """The two Philox streams of one path (chain then cells; bridge points)."""
    a = np.random.Generator(np.random.Philox(key=int(seed) + ((2 * path) << 64)))
    b = np.random.Generator(np.random.Philox(key=int(seed) + ((2 * path + 1) << 64)))
    return a, b


def _chain(pi: np.ndarray, i0: int, T: float, rng: np.random.Generator):
    times, states = [], []
    i, t = int(i0), 0.0
    L = pi.shape[0]
    while True:
        rate = -pi[i, i]
        if rate <= 0:
            break
        t += rng.standard_exponential() / rate
        if not t < T:
            break
        u = rng.random() * rate
        acc, nxt = 0.0, -1
        for j in range(L):
            if j == i or pi[i, j] <= 0:
                continue
            nxt = j
            acc += pi[i, j]
            if u < acc:
                break
        i = nxt
        times.append(t)
        states.append(i)
    return times, states


def sample_chain_path(generator: Generator, i0: int, T: float, seed) -> list[tuple[float, int]]:
    """Exact path of the chain on [0, T) as sorted ``(jump_time, new_state)`` pairs.

    ``seed`` is an int or a ``numpy.random.Generator``. Holding times in state
    i are exponential with rate ``-pi_ii``; the next state is j with
    probability ``pi_ij / -pi_ii``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pi = generator.pi if isinstance(generator, Generator) else np.asarray(generator, float)
    times, states = _chain(pi, i0, T, rng)
    return list(zip(times, states))


def occupation_fraction(path: list[tuple[float, int]], i0: int, T: float, state: int) -> float:
    """Fraction of [0, T) spent in ``state``."""
    t, cur, total = 0.0, i0, 0.0
    for tj, sj in path + [(T, -1)]:
        if cur == state:
            total += tj - t
        t, cur = tj, sj
    return total / T


# --------------------------------------------------------------------------
# results

@register_artifact("sim_result")
@dataclass(frozen=True, eq=False)
class SimResult:
    """Monte Carlo estimates.

    ``second_moment_trace`` has rows ``(t, mean |X(t)|^2, stderr)`` at t = 0
    and ten evenly spaced checkpoints. Per-path arrays are kept in memory and
    summarized by ``digest`` when serialized.
    """

    cost_mean: float
    cost_stderr: float
    second_moment_trace: np.ndarray
    n_paths: int
    n_paths_used: int
    overflow_fraction: float
    diverged: bool
    exploding: bool
    cost_reliable: bool
    truncation_bias: float
    decay_rate: float
    stationarity_residual: float | None = None
    path_costs: np.ndarray | None = field(default=None, repr=False)
    checkpoint_states: np.ndarray | None = field(default=None, repr=False)
    checkpoint_regimes: np.ndarray | None = field(default=None, repr=False)
    strategy: FeedbackStrategy | None = field(default=None, repr=False)
    config: dict = field(default_factory=dict)
    backend: str = ""
    wall_time: float = 0.0
    digest: str = ""

    @property
    def checkpoint_times(self) -> np.ndarray:
        return self.second_moment_trace[1:, 0]

    def identical(self, other: "SimResult") -> bool:
        """Bit-for-bit equality of all estimates and per-path data."""
        scalars = ("cost_mean", "cost_stderr", "n_paths_used", "overflow_fraction",
                   "truncation_bias", "decay_rate")
        if any(not _same(getattr(self, s), getattr(other, s)) for s in scalars):
            return False
        arrays = ("second_moment_trace", "path_costs", "checkpoint_states", "checkpoint_regimes")
        return all(np.array_equal(getattr(self, a), getattr(other, a), equal_nan=True)
                   for a in arrays) and self.digest == other.digest

    def to_dict(self) -> dict:
        return {
            "kind": "sim_result",
            "cost_mean": _finite(self.cost_mean),
            "cost_stderr": _finite(self.cost_stderr),
            "second_moment_trace": [[_finite(v) for v in row] for row in self.second_moment_trace],
            "n_paths": self.n_paths,
            "n_paths_used": self.n_paths_used,
            "overflow_fraction": self.overflow_fraction,
            "diverged": self.diverged,
            "exploding": self.exploding,
            "cost_reliable": self.cost_reliable,
            "truncation_bias": _finite(self.truncation_bias),
            "decay_rate": _finite(self.decay_rate),
            "stationarity_residual": self.stationarity_residual,
            "config": self.config,
            "digest": self.digest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimResult":
        un = lambda v: math.nan if v is None else v  # noqa: E731
        tr = np.array([[un(v) for v in row] for row in d["second_moment_trace"]], float)
        return cls(un(d["cost_mean"]), un(d["cost_stderr"]), tr, d["n_paths"], d["n_paths_used"],
                   d["overflow_fraction"], d["diverged"], d["exploding"], d["cost_reliable"],
                   un(d["truncation_bias"]), un(d["decay_rate"]), d.get("stationarity_residual"),
                   config=d.get("config", {}), digest=d.get("digest", ""))


def _same(a, b) -> bool:
    return (a == b) or (isinstance(a, float) and isinstance(b, float)
                        and math.isnan(a) and math.isnan(b))


def _finite(v):
    v = float(v)
    return v if math.isfinite(v) else None


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# simulation driver

def _checkpoint_cells(n_cells: int) -> np.ndarray:
    return np.array([round(c * n_cells / N_CHECKPOINTS) - 1 for c in range(1, N_CHECKPOINTS + 1)],
                    dtype=np.int64)


def _run_batch(start: int, stop: int, data: ClosedLoopData, cfg: SimulationConfig, arrays,
               backend: str):
    T = cfg.effective_T
    pi = data.generator.pi
    gens_a, gens_b = [], []
    ptr = [0]
    jt, js = [], []
    for p in range(start, stop):
        a, b = path_streams(cfg.master_seed, p)
        t, s = _chain(pi, cfg.i0, T, a)
        jt += t
        js += s
        ptr.append(len(jt))
        gens_a.append(a)
        gens_b.append(b)
    B = stop - start
    K = N_CHECKPOINTS
    out = (np.zeros(B), np.full((B, K, data.n), np.nan), np.full((B, K), -1, np.int64),
           np.zeros(B, np.uint8))
    args = (gens_a, gens_b, np.array(ptr, np.int64), np.array(jt, float), np.array(js, np.int64),
            np.full(B, cfg.i0, np.int64), np.ascontiguousarray(cfg.x0), *arrays,
            cfg.n_cells, cfg.substeps, cfg.cell_width, float(cfg.discount_r),
            _checkpoint_cells(cfg.n_cells), OVERFLOW_NORM ** 2, *out)
    if backend == "compiled":
        _kernel.run_batch(*args, cfg.workers)
    else:
        _fallback.run_batch(*args)
    return out


def simulate_closed_loop(data: ClosedLoopData, config: SimulationConfig,
                         backend: str | None = None, strategy: FeedbackStrategy | None = None
                         ) -> SimResult:
    """Simulate ``config.n_paths`` paths of the closed loop described by ``data``."""
    t0 = time.perf_counter()
    backend = backend or BACKEND
    if backend not in available_backends():
        raise ValueError(f"backend {backend!r} not available (have {available_backends()})")
    cfg = config
    if cfg.x0.shape != (data.n,):
        raise ValueError(f"x0 has shape {cfg.x0.shape}, expected ({data.n},)")
    if not 0 <= cfg.i0 < data.L:
        raise ValueError(f"i0 must be a regime index in [0, {data.L})")
    _step_warning(data, cfg.dt)
    arrays = data.arrays()
    bounds = [(s, min(s + cfg.batch_size, cfg.n_paths)) for s in range(0, cfg.n_paths, cfg.batch_size)]
    if backend == "python" and cfg.workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            parts = list(ex.map(lambda b: _run_batch(*b, data, cfg, arrays, backend), bounds))
    else:
        parts = [_run_batch(*b, data, cfg, arrays, backend) for b in bounds]
    cost, xck, rck, ovf = (np.concatenate([p[k] for p in parts]) for k in range(4))
    ovf = ovf.astype(bool)
    cost[ovf] = np.nan
    return _summarize(data, cfg, cost, xck, rck, ovf, strategy, backend,
                      time.perf_counter() - t0)


def _summarize(data, cfg, cost, xck, rck, ovf, strategy, backend, wall) -> SimResult:
    ok = ~ovf
    n_used = int(ok.sum())
    c = cost[ok]
    mean = float(c.mean()) if n_used else math.nan
    se = float(c.std(ddof=1) / math.sqrt(n_used)) if n_used > 1 else math.nan
    T = cfg.effective_T
    times = (_checkpoint_cells(cfg.n_cells) + 1) * cfg.cell_width
    m2 = np.sum(xck[ok] ** 2, axis=2)
    rows = [(0.0, float(cfg.x0 @ cfg.x0), 0.0)]
    for k in range(N_CHECKPOINTS):
        col = m2[:, k]
        rows.append((float(times[k]), float(col.mean()) if n_used else math.nan,
                     float(col.std(ddof=1) / math.sqrt(n_used)) if n_used > 1 else math.nan))
    trace = np.array(rows)
    # decay rate of E|X|^2 over the second half of the horizon
    half = N_CHECKPOINTS // 2
    m_half, m_end = trace[half, 1], trace[-1, 1]
    if n_used and m_half > 0 and m_end > 0:
        kappa = -math.log(m_end / m_half) / (trace[-1, 0] - trace[half, 0])
    elif n_used and m_end == 0:
        kappa = math.inf
    else:
        kappa = math.nan
    # tail beyond T from the running cost at T, assuming that decay rate
    if n_used:
        fT = data.running_cost(xck[ok, -1], rck[ok, -1]).mean() * math.exp(-cfg.discount_r * T)
        rate = kappa + cfg.discount_r
        if fT == 0:
            bias = 0.0
        elif rate > 0:
            bias = float(fT / rate)
        else:
            bias = math.inf
    else:
        bias = math.nan
    overflow_fraction = 1.0 - n_used / cfg.n_paths
    exploding = _exploding(trace)
    diverged = overflow_fraction >= OVERFLOW_TRIGGER or exploding
    return SimResult(mean, se, trace, cfg.n_paths, n_used, overflow_fraction, diverged, exploding,
                     not diverged, bias, kappa, None, cost, xck, rck, strategy, cfg.to_dict(),
                     backend, wall, _digest(cost, xck, rck))


def _exploding(trace: np.ndarray) -> bool:
    """Second moment that grows instead of decaying.

    Flags the run when the final checkpoint exceeds the initial second moment
    and is the largest value of the trace, and it either clears the midpoint
    value by two standard errors or exceeds it tenfold (heavy-tailed growth
    inflates the standard error as fast as the mean).
    """
    m, se = trace[:, 1], trace[:, 2]
    if not np.all(np.isfinite(m)):
        return True
    base = max(m[0], 1e-300)
    half = N_CHECKPOINTS // 2
    grows = m[-1] > m[half] + 2 * se[-1] or m[-1] > 10 * max(m[half], base)
    return bool(m[-1] > base and m[-1] >= m[1:].max() and grows)


def simulate_paths(problem: ProblemSpec, strategy: FeedbackStrategy, config: SimulationConfig,
                   care=None, backend: str | None = None) -> SimResult:
    """Simulate ``problem`` under the feedback ``strategy``.

    Passing the CARE solution ``care`` also evaluates the stationarity
    residual on the checkpoint samples.
    """
    data = ClosedLoopData.from_problem(problem, strategy)
    res = simulate_closed_loop(data, config, backend, strategy)
    if care is not None:
        res = dataclasses.replace(res, stationarity_residual=stationarity_residual(problem, care, res))
    return res


# --------------------------------------------------------------------------
# diagnostics

def check_decay(result: SimResult) -> bool:
    """True iff E|X(T)|^2 is below 5% of its maximum and the last three
    checkpoints do not increase (one-sided slack of two standard errors)."""
    m, se = result.second_moment_trace[:, 1], result.second_moment_trace[:, 2]
    if not np.all(np.isfinite(m)):
        return False
    if m[-1] > 0.05 * m.max():
        return False
    a, b, c = m[-3:]
    sa, sb, sc = se[-3:]
    return bool(b <= a + 2 * math.hypot(sa, sb) and c <= b + 2 * math.hypot(sb, sc))


def stationarity_residual(problem: ProblemSpec, care, result: SimResult,
                          strategy: FeedbackStrategy | None = None, adjoint=None) -> float:
    """Mean of ``|N(P,a) u + L(P,a)' X + rho~(a)|`` over checkpoint samples."""
    from ..riccati import RiccatiCoefficients
    from ..synthesis import offset_forcing, solve_stationary_adjoint

    strategy = strategy or result.strategy
    if strategy is None:
        raise PreconditionError("the strategy used for the simulation is required")
    if result.checkpoint_states is None:
        raise PreconditionError("result carries no path samples")
    P = care.P.entries
    coef = RiccatiCoefficients(problem)
    Nm, Lm = coef.N(P), coef.L(P)
    if problem.homogeneous or not problem.has_nonzero_inhomogeneous:
        rt = np.zeros((problem.L, problem.m))
    else:
        adjoint = adjoint or solve_stationary_adjoint(problem, care)
        rt = offset_forcing(problem, P, adjoint)
    ok = result.checkpoint_regimes >= 0
    X = result.checkpoint_states[ok]
    a = result.checkpoint_regimes[ok]
    if len(a) == 0:
        return math.nan
    u = np.einsum("smn,sn->sm", strategy.theta[a], X) + strategy.nu[a]
    r = (np.einsum("smk,sk->sm", Nm[a], u) + np.einsum("snm,sn->sm", Lm[a], X) + rt[a])
    return float(np.linalg.norm(r, axis=1).mean())


def second_moment_integral(result: SimResult) -> float:
    """Trapezoid estimate of the integral of E|X(t)|^2 over the checkpoint grid."""
    t, m = result.second_moment_trace[:, 0], result.second_moment_trace[:, 1]
    return float(np.trapezoid(m, t))
