"""Monte Carlo validation of closed-loop strategies."""
from .core import (BACKEND, N_CHECKPOINTS, OVERFLOW_NORM, ClosedLoopData, SimResult,
                   SimulationConfig, available_backends, check_decay, default_workers,
                   occupation_fraction, path_streams, sample_chain_path, second_moment_integral,
                   simulate_closed_loop, simulate_paths, stationarity_residual)

__all__ = ["BACKEND", "N_CHECKPOINTS", "OVERFLOW_NORM", "ClosedLoopData", "SimResult",
           "SimulationConfig", "available_backends", "check_decay", "default_workers",
           "occupation_fraction", "path_streams", "sample_chain_path", "second_moment_integral",
           "simulate_closed_loop", "simulate_paths", "stationarity_residual"]
