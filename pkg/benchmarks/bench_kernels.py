"""Compare the compiled and pure-numpy Monte Carlo kernels.

Usage: python benchmarks/bench_kernels.py [--paths N] [--horizon T] [--dt DT] [--repeat R]

Simulates the three-regime scalar example under its optimal feedback with
both backends, reports the best wall time of each and checks that the
results are bit-identical.
"""
import argparse
import pathlib
import time

from mjlq import load_problem, mcsim, solve_care

DATA = pathlib.Path(__file__).resolve().parents[1] / "data" / "three_regime_scalar.json"


def best_time(problem, strategy, cfg, backend, repeat):
    best, res = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        res = mcsim.simulate_paths(problem, strategy, cfg, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best, res


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=2000)
    ap.add_argument("--horizon", type=float, default=5.0)
    ap.add_argument("--dt", type=float, default=1e-3)
    ap.add_argument("--brownian-dt", type=float, default=None)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    problem = load_problem(DATA)
    care = solve_care(problem)
    cfg = mcsim.SimulationConfig(args.paths, args.horizon, args.dt, 12345, [1.0], 0,
                                 brownian_dt=args.brownian_dt)
    steps = args.paths * cfg.n_cells * cfg.substeps
    print(f"{args.paths} paths x {cfg.n_cells * cfg.substeps} steps "
          f"(dt={args.dt:g}, brownian_dt={cfg.cell_width:g})")
    results = {}
    for backend in ("python", "compiled"):
        if backend not in mcsim.available_backends():
            print(f"{backend:>9}: not available")
            continue
        t, res = best_time(problem, care.strategy, cfg, backend, args.repeat)
        results[backend] = (t, res)
        print(f"{backend:>9}: {t:8.3f} s  {1e9 * t / steps:7.1f} ns/step  "
              f"cost {res.cost_mean:.6f} +- {res.cost_stderr:.4f}")
    if len(results) == 2:
        (tp, rp), (tc, rc) = results["python"], results["compiled"]
        print(f"  speedup: {tp / tc:.1f}x, bit-identical: {rp.identical(rc)}")


if __name__ == "__main__":
    main()
