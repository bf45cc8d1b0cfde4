"""Exception and warning types raised by mjlq."""


class MJLQError(Exception):
    """Base class for all mjlq errors."""


class ParseError(MJLQError, ValueError):
    """Input file is not valid JSON or does not follow the schema."""


class ValidationError(MJLQError, ValueError):
    """Input parses but violates a model invariant."""


class ArtifactIOError(MJLQError, OSError):
    """Reading or writing a file failed."""


class PreconditionError(MJLQError, ValueError):
    """An operation was called on inputs outside its domain."""


# stability
class SingularOperator(MJLQError):
    """The stacked Lyapunov operator is numerically singular."""


class EigenFailure(MJLQError):
    """Eigenvalue computation did not converge."""


# riccati
class SolverFailure(MJLQError):
    """A Riccati solve failed to produce a solution."""


class NBreakdown(SolverFailure):
    """The control weight N(P, i) lost positive definiteness during a sweep."""


class Blowup(SolverFailure):
    """The Riccati sweep escaped to infinity."""


class ConvergenceFailure(SolverFailure):
    """An iteration reached its budget without meeting its tolerance."""


class NotStabilizable(SolverFailure):
    """No stabilizing feedback could be synthesized."""


class NotStabilizingSolution(SolverFailure):
    """A converged Riccati solution whose feedback does not stabilize."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class HomotopyDiverged(SolverFailure):
    """The regularized solutions grew without bound as the shift vanished."""


# synthesis
class SingularN(MJLQError):
    """N(P, i) is singular and the offset is outside its range."""


class SingularSystem(MJLQError):
    """The stacked stationary adjoint system is singular."""


class UnsupportedInhomogeneous(MJLQError):
    """Inhomogeneous terms combined with discounting are not supported."""


# mcsim
class SimulationOverflow(MJLQError):
    """Too many simulated paths diverged."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class NumericalAmbiguityWarning(UserWarning):
    """A verdict sits on a numerical boundary."""


class LostStabilityWarning(UserWarning):
    """A Newton iterate lost closed-loop stability; best iterate returned."""


class SimulationWarning(UserWarning):
    """Simulation settings are outside the recommended range."""
