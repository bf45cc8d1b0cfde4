"""Infinite-horizon stochastic LQ control of regime-switching linear SDEs.

Modules
-------
model_io   problem data, artifacts and JSON I/O
stability  mean-square stability of the uncontrolled or closed-loop system
riccati    coupled algebraic Riccati equations: sweep, Newton, homotopy, checks
synthesis  optimal feedback, value function, discounted reduction
mcsim      Monte Carlo simulation of the closed loop
cli        ``mjlq`` command line
"""
from .errors import *  # noqa: F401,F403
from .model_io import (CoupledMatrixSet, FeedbackStrategy, Generator, ProblemSpec, RegimeData,
                       load_artifact, load_problem, load_strategy, save_artifact, save_problem)
from .stability import (LinearSystem, StabilityCertificate, check_l2_stable, closed_loop_system,
                        open_loop_system, sign_screen, solve_coupled_lyapunov, spectral_abscissa)
from .riccati import (CareSolution, VerificationReport, newton_refine, solve_care,
                      solve_care_eps_homotopy, synthesize_stabilizer, verify_care)
from .synthesis import (ValueReport, build_closed_loop, discount_transform, solve_stationary_adjoint,
                        value_function)
from .mcsim import SimResult, SimulationConfig, check_decay, simulate_paths

__version__ = "0.1.0"
