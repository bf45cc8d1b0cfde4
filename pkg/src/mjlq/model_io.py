"""Problem data model and JSON (de)serialization.

Matrices are written as row-major nested lists of doubles. Python's float
``repr`` is the shortest string that parses back to the same double, so every
artifact round-trips bit-for-bit.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import ArtifactIOError, ParseError, ValidationError

ROW_SUM_TOL = 1e-12
SYMMETRY_TOL = 1e-9
INHOMOGENEOUS_FIELDS = ("b", "sigma", "q", "rho")


def _frozen(a, ndim=None, name="array") -> np.ndarray:
    arr = np.array(a, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _symmetrize(M: np.ndarray, name: str, tol: float = SYMMETRY_TOL) -> np.ndarray:
    asym = np.max(np.abs(M - M.T)) if M.size else 0.0
    if asym > tol:
        raise ValidationError(f"{name} is not symmetric (max asymmetry {asym:.3g} > {tol:g})")
    return (M + M.T) / 2


@dataclass(frozen=True, eq=False)
class Generator:
    """Generator (rate matrix) of a finite continuous-time Markov chain.

    The diagonal is recomputed as minus the off-diagonal row sum, so
    ``pi[i, i] + sum(off-diagonal)`` is exactly zero in floating point.
    Rows whose sum deviates by more than ``ROW_SUM_TOL`` are rejected.
    """

    pi: np.ndarray

    def __post_init__(self):
        pi = np.array(self.pi, dtype=float)
        if pi.ndim != 2 or pi.shape[0] != pi.shape[1] or pi.shape[0] == 0:
            raise ValidationError(f"generator must be a non-empty square matrix, got shape {pi.shape}")
        if not np.all(np.isfinite(pi)):
            raise ValidationError("generator has non-finite entries")
        L = pi.shape[0]
        for i in range(L):
            off = [pi[i, j] for j in range(L) if j != i]
            if any(v < 0 for v in off):
                raise ValidationError(f"generator row {i + 1} has a negative off-diagonal rate")
            s = math.fsum(pi[i])
            if abs(s) > ROW_SUM_TOL:
                raise ValidationError(f"generator row {i + 1} sums to {s:.6g}, not 0")
            pi[i, i] = -sum(off)
        object.__setattr__(self, "pi", _frozen(pi))

    @property
    def L(self) -> int:
        return self.pi.shape[0]

    def exit_rates(self) -> np.ndarray:
        return -np.diag(self.pi)


@dataclass(frozen=True, eq=False)
class RegimeData:
    """Coefficients of one regime. ``S`` is m x n; the vectors are optional."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray
    b: np.ndarray | None = None
    sigma: np.ndarray | None = None
    q: np.ndarray | None = None
    rho: np.ndarray | None = None

    def __post_init__(self):
        for name in ("A", "B", "C", "D", "Q", "S", "R"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 2, name))
        object.__setattr__(self, "Q", _frozen(_symmetrize(self.Q, "Q")))
        object.__setattr__(self, "R", _frozen(_symmetrize(self.R, "R")))
        for name in INHOMOGENEOUS_FIELDS:
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _frozen(v, 1, name))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def check_dims(self, n: int, m: int, label: str = "") -> None:
        shapes = {"A": (n, n), "B": (n, m), "C": (n, n), "D": (n, m),
                  "Q": (n, n), "S": (m, n), "R": (m, m),
                  "b": (n,), "sigma": (n,), "q": (n,), "rho": (m,)}
        for name, shape in shapes.items():
            v = getattr(self, name)
            if v is not None and v.shape != shape:
                raise ValidationError(f"{label}{name} has shape {v.shape}, expected {shape}")
            if v is not None and not np.all(np.isfinite(v)):
                raise ValidationError(f"{label}{name} has non-finite entries")

    def has_inhomogeneous(self) -> list[bool]:
        return [getattr(self, f) is not None for f in INHOMOGENEOUS_FIELDS]


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """A regime-switching LQ problem.

    Stacked copies of the coefficients are exposed as ``A``, ``B``, ... with a
    leading regime axis. Absent inhomogeneous terms stack as zeros.
    """

    n: int
    m: int
    generator: Generator
    regimes: tuple[RegimeData, ...]
    discount_r: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "regimes", tuple(self.regimes))
        if self.n <= 0 or self.m <= 0:
            raise ValidationError("n and m must be positive")
        if len(self.regimes) != self.generator.L:
            raise ValidationError(
                f"{len(self.regimes)} regimes given but the generator has L={self.generator.L}")
        if not (self.discount_r >= 0 and math.isfinite(self.discount_r)):
            raise ValidationError("discount_r must be a finite nonnegative number")
        for i, reg in enumerate(self.regimes):
            reg.check_dims(self.n, self.m, f"regime {i + 1}: ")
        flags = {tuple(reg.has_inhomogeneous()) for reg in self.regimes}
        if flags not in ({(False,) * 4}, {(True,) * 4}):
            raise ValidationError(
                "inhomogeneous terms b, sigma, q, rho must be all absent or present in every regime")
        for name in ("A", "B", "C", "D", "Q", "S", "R"):
            object.__setattr__(self, name, _frozen([getattr(r, name) for r in self.regimes]))
        zeros = {"b": self.n, "sigma": self.n, "q": self.n, "rho": self.m}
        for name, size in zeros.items():
            vals = [getattr(r, name) if getattr(r, name) is not None else np.zeros(size)
                    for r in self.regimes]
            object.__setattr__(self, name, _frozen(vals))

    # set by __post_init__
    A: np.ndarray = field(init=False, repr=False)
    B: np.ndarray = field(init=False, repr=False)
    C: np.ndarray = field(init=False, repr=False)
    D: np.ndarray = field(init=False, repr=False)
    Q: np.ndarray = field(init=False, repr=False)
    S: np.ndarray = field(init=False, repr=False)
    R: np.ndarray = field(init=False, repr=False)
    b: np.ndarray = field(init=False, repr=False)
    sigma: np.ndarray = field(init=False, repr=False)
    q: np.ndarray = field(init=False, repr=False)
    rho: np.ndarray = field(init=False, repr=False)

    @property
    def L(self) -> int:
        return self.generator.L

    @property
    def pi(self) -> np.ndarray:
        return self.generator.pi

    @property
    def homogeneous(self) -> bool:
        return self.regimes[0].b is None

    @property
    def has_nonzero_inhomogeneous(self) -> bool:
        return any(np.any(getattr(self, f) != 0) for f in INHOMOGENEOUS_FIELDS)

    @classmethod
    def from_arrays(cls, pi, A, B, C, D, Q, S, R, b=None, sigma=None, q=None, rho=None,
                    discount_r=0.0) -> "ProblemSpec":
        """Build a problem from stacked per-regime arrays (leading axis = regime)."""
        gen = pi if isinstance(pi, Generator) else Generator(pi)
        A = np.asarray(A, float)
        B = np.asarray(B, float)
        L = gen.L
        if A.ndim != 3 or A.shape[0] != L or B.ndim != 3:
            raise ValidationError("A and B must be stacked as (L, n, n) and (L, n, m)")
        n, m = A.shape[1], B.shape[2]
        inh = [b, sigma, q, rho]
        regs = []
        for i in range(L):
            extra = {k: (None if v is None else np.asarray(v, float)[i])
                     for k, v in zip(INHOMOGENEOUS_FIELDS, inh)}
            regs.append(RegimeData(A[i], B[i], np.asarray(C, float)[i], np.asarray(D, float)[i],
                                   np.asarray(Q, float)[i], np.asarray(S, float)[i],
                                   np.asarray(R, float)[i], **extra))
        return cls(n, m, gen, tuple(regs), float(discount_r))

    def replace(self, **arrays) -> "ProblemSpec":
        """Copy with some stacked arrays (or ``discount_r``) replaced."""
        r = arrays.pop("discount_r", self.discount_r)
        kw = {k: arrays.pop(k, getattr(self, k)) for k in ("A", "B", "C", "D", "Q", "S", "R")}
        if self.homogeneous:
            inh = {k: arrays.pop(k, None) for k in INHOMOGENEOUS_FIELDS}
        else:
            inh = {k: arrays.pop(k, getattr(self, k)) for k in INHOMOGENEOUS_FIELDS}
        if arrays:
            raise TypeError(f"unknown fields {sorted(arrays)}")
        return ProblemSpec.from_arrays(self.generator, **kw, **inh, discount_r=r)


@dataclass(frozen=True, eq=False)
class CoupledMatrixSet:
    """An L-indexed family of symmetric n x n matrices."""

    entries: np.ndarray

    def __post_init__(self):
        E = np.array(self.entries, dtype=float)
        if E.ndim != 3 or E.shape[1] != E.shape[2]:
            raise ValidationError(f"coupled matrix set must have shape (L, n, n), got {E.shape}")
        E = (E + np.swapaxes(E, 1, 2)) / 2
        object.__setattr__(self, "entries", _frozen(E))

    def __len__(self):
        return self.entries.shape[0]

    def __getitem__(self, i):
        return self.entries[i]

    def __iter__(self):
        return iter(self.entries)

    @property
    def n(self) -> int:
        return self.entries.shape[1]

    def min_eigenvalues(self) -> np.ndarray:
        return np.array([np.linalg.eigvalsh(P)[0] for P in self.entries])

    def to_dict(self) -> dict:
        return {"kind": "coupled_matrix_set", "entries": _enc(self.entries)}

    @classmethod
    def from_dict(cls, d: dict) -> "CoupledMatrixSet":
        return cls(_dec(d["entries"]))


@dataclass(frozen=True, eq=False)
class FeedbackStrategy:
    """Regime-dependent state feedback ``u = theta[i] x + nu[i]``."""

    theta: np.ndarray
    nu: np.ndarray | None = None

    def __post_init__(self):
        th = np.array(self.theta, dtype=float)
        if th.ndim != 3:
            raise ValidationError(f"theta must have shape (L, m, n), got {th.shape}")
        nu = np.zeros(th.shape[:2]) if self.nu is None else np.array(self.nu, dtype=float)
        if nu.shape != th.shape[:2]:
            raise ValidationError(f"nu has shape {nu.shape}, expected {th.shape[:2]}")
        object.__setattr__(self, "theta", _frozen(th))
        object.__setattr__(self, "nu", _frozen(nu))

    @property
    def L(self) -> int:
        return self.theta.shape[0]

    @property
    def m(self) -> int:
        return self.theta.shape[1]

    @property
    def n(self) -> int:
        return self.theta.shape[2]

    @classmethod
    def zeros(cls, L: int, m: int, n: int) -> "FeedbackStrategy":
        return cls(np.zeros((L, m, n)))

    def check_against(self, problem: ProblemSpec) -> None:
        if self.theta.shape != (problem.L, problem.m, problem.n):
            raise ValidationError(
                f"strategy gains have shape {self.theta.shape}, problem expects "
                f"{(problem.L, problem.m, problem.n)}")

    def to_dict(self) -> dict:
        return {"kind": "feedback_strategy", "theta": _enc(self.theta), "nu": _enc(self.nu)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeedbackStrategy":
        return cls(_dec(d["theta"]), _dec(d["nu"]) if d.get("nu") is not None else None)


# --------------------------------------------------------------------------
# problem files

def _dec(x) -> np.ndarray:
    return np.array(x, dtype=float)


def _enc(a) -> Any:
    return np.asarray(a, dtype=float).tolist()


def _matrix(d: dict, key: str, shape: tuple, where: str) -> np.ndarray:
    if key not in d:
        raise ParseError(f"{where}: missing field {key!r}")
    try:
        arr = np.array(d[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where}: field {key!r} is not a numeric array") from exc
    if arr.shape != shape:
        raise ValidationError(f"{where}: field {key!r} has shape {arr.shape}, expected {shape}")
    return arr


def problem_from_dict(d: dict) -> ProblemSpec:
    """Validate a parsed problem document and build a :class:`ProblemSpec`."""
    if not isinstance(d, dict):
        raise ParseError("problem document must be a JSON object")
    try:
        n, m, L = int(d["n"]), int(d["m"]), int(d["L"])
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise ParseError("n, m, L must be integers") from exc
    if min(n, m, L) <= 0:
        raise ValidationError("n, m, L must be positive")
    pi = _matrix(d, "generator", (L, L), "problem")
    regs = d.get("regimes")
    if not isinstance(regs, list):
        raise ParseError("problem: 'regimes' must be a list")
    if len(regs) != L:
        raise ValidationError(f"problem: {len(regs)} regimes given, L={L}")
    shapes = {"A": (n, n), "B": (n, m), "C": (n, n), "D": (n, m),
              "Q": (n, n), "S": (m, n), "R": (m, m)}
    vec_shapes = {"b": (n,), "sigma": (n,), "q": (n,), "rho": (m,)}
    built = []
    for i, r in enumerate(regs):
        where = f"regime {i + 1}"
        if not isinstance(r, dict):
            raise ParseError(f"{where}: must be a JSON object")
        mats = {k: _matrix(r, k, s, where) for k, s in shapes.items()}
        vecs = {k: _matrix(r, k, s, where) for k, s in vec_shapes.items() if k in r}
        built.append(RegimeData(**mats, **vecs))
    r = d.get("discount_r", 0.0)
    try:
        r = float(r)
    except (TypeError, ValueError) as exc:
        raise ParseError("discount_r must be a number") from exc
    return ProblemSpec(n, m, Generator(pi), tuple(built), r)


def problem_to_dict(problem: ProblemSpec) -> dict:
    regs = []
    for reg in problem.regimes:
        r = {k: _enc(getattr(reg, k)) for k in ("A", "B", "C", "D", "Q", "S", "R")}
        for k in INHOMOGENEOUS_FIELDS:
            if getattr(reg, k) is not None:
                r[k] = _enc(getattr(reg, k))
        regs.append(r)
    out = {"n": problem.n, "m": problem.m, "L": problem.L,
           "generator": _enc(problem.pi), "regimes": regs}
    if problem.discount_r:
        out["discount_r"] = problem.discount_r
    return out


def _read_json(path) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc


def load_problem(path) -> ProblemSpec:
    """Read and validate a problem file.

    Raises
    ------
    ArtifactIOError
        The file cannot be read.
    ParseError
        The file is not JSON or misses required fields.
    ValidationError
        Dimensions, generator or inhomogeneous terms are inconsistent.
    """
    return problem_from_dict(_read_json(path))


def save_problem(problem: ProblemSpec, path) -> None:
    write_json_atomic(problem_to_dict(problem), path)


# --------------------------------------------------------------------------
# artifacts

_ARTIFACT_KINDS: dict[str, Callable[[dict], Any]] = {
    "coupled_matrix_set": CoupledMatrixSet.from_dict,
    "feedback_strategy": FeedbackStrategy.from_dict,
}


def register_artifact(kind: str):
    """Class decorator registering ``cls.from_dict`` as the loader for ``kind``."""
    def deco(cls):
        _ARTIFACT_KINDS[kind] = cls.from_dict
        return cls
    return deco


def dumps(obj: dict) -> str:
    try:
        return json.dumps(obj, allow_nan=False, indent=1)
    except ValueError as exc:
        raise ValidationError(f"artifact contains non-finite values: {exc}") from exc


def write_json_atomic(doc: dict, path) -> None:
    """Write ``doc`` to ``path`` via a temporary file and an atomic rename."""
    text = dumps(doc)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(prefix=".mjlq-", suffix=".tmp", dir=directory)
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(text)
                fh.write("\n")
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc.strerror or exc}") from exc


def save_artifact(obj, path, metadata: dict | None = None) -> None:
    """Serialize a solver artifact to JSON.

    ``obj`` must provide ``to_dict()``. Extra ``metadata`` is stored under the
    ``"metadata"`` key and ignored on load.
    """
    doc = obj.to_dict()
    if metadata:
        doc = {**doc, "metadata": {**doc.get("metadata", {}), **metadata}}
    write_json_atomic(doc, path)


def artifact_from_dict(doc: dict):
    _load_registered_kinds()
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ParseError("artifact must be a JSON object with a 'kind' field")
    try:
        loader = _ARTIFACT_KINDS[doc["kind"]]
    except KeyError:
        raise ParseError(f"unknown artifact kind {doc['kind']!r}") from None
    try:
        return loader(doc)
    except KeyError as exc:
        raise ParseError(f"artifact is missing field {exc.args[0]!r}") from exc


def load_artifact(path):
    """Load any artifact written by :func:`save_artifact`."""
    return artifact_from_dict(_read_json(path))


def load_strategy(path) -> FeedbackStrategy:
    """Load a strategy file, or the strategy embedded in a solution file."""
    obj = load_artifact(path)
    if isinstance(obj, FeedbackStrategy):
        return obj
    strat = getattr(obj, "strategy", None)
    if isinstance(strat, FeedbackStrategy):
        return strat
    raise ParseError(f"{path} does not contain a feedback strategy")


def _load_registered_kinds():
    # modules register their artifact types on import
    from . import mcsim, riccati, stability, synthesis  # noqa: F401


def as_matrix_set(P: CoupledMatrixSet | np.ndarray | Sequence) -> CoupledMatrixSet:
    return P if isinstance(P, CoupledMatrixSet) else CoupledMatrixSet(np.asarray(P, float))
