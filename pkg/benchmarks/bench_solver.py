"""Benchmark the compiled ADMM kernel against the pure-numpy fallback.

Run:  python benchmarks/bench_solver.py [n_instances]
"""

import sys
import time

import numpy as np

import adversim.solver as solver_mod
from adversim.solver import Halfspace, InnerProblem, solve


def representative_problems(n):
    """Lane-keeping attack instances at the production horizon."""
    rng = np.random.default_rng(7)
    T = 60
    problems = []
    for _ in range(n):
        v0 = rng.uniform(7.0, 13.0)
        lateral = rng.uniform(0.0, 3.5)
        t_star = int(rng.integers(25, 61))
        hs = tuple(
            Halfspace(step=t, normal=[0.0, 1.0], offset=5.25) for t in range(1, T + 1)
        ) + tuple(
            Halfspace(step=t, normal=[0.0, -1.0], offset=1.75) for t in range(1, T + 1)
        )
        problems.append(InnerProblem(
            horizon=T, dt=0.1, p0=[0.0, 0.0], v0=[v0, 0.0], a0=[0.0, 0.0],
            accel_weight=[11.0, 38.0], accel_target=[0.0, 0.0],
            jerk_weight=[3.3, 9.0], jerk_target=[0.0, 0.0],
            v_max=30.0, a_max=8.0, halfspaces=hs,
            terminal_step=t_star,
            terminal_center=[v0 * 0.1 * t_star + rng.uniform(-2, 6), lateral],
            terminal_radius=1.99,
        ))
    return problems


def bench(backend_name, problems):
    t0 = time.perf_counter()
    iterations = 0
    optimal = 0
    for problem in problems:
        sol = solve(problem)
        iterations += sol.iterations
        optimal += sol.status == "optimal"
    wall = time.perf_counter() - t0
    per = wall / len(problems) * 1e3
    print(f"{backend_name:9s}: {wall:6.2f}s total, {per:7.2f} ms/solve, "
          f"{iterations / len(problems):6.0f} iters/solve, {optimal}/{len(problems)} optimal")
    return wall


def main():
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 40
    problems = representative_problems(n)
    if solver_mod._fastsolve is None:
        print("compiled kernel not available; benchmarking the numpy fallback only")
        bench("numpy", problems)
        return
    compiled = bench("compiled", problems)
    saved = solver_mod._fastsolve
    solver_mod._fastsolve = None
    try:
        fallback = bench("numpy", problems)
    finally:
        solver_mod._fastsolve = saved
    print(f"speedup: {fallback / compiled:.1f}x")


if __name__ == "__main__":
    main()
