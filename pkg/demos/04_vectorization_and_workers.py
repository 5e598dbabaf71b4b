"""Effect of lane width and worker count on solve time.

Runs the dense solver on one spring-mass instance (30 masses, horizon 60)
for scalar and vectorized storage and for one and four workers, then shows
the per-phase split.  The stage-parallel phases benefit from wide lanes;
the sequential recursion over the Schur-complement blocks does not.
"""

import time

from ocpqp.alm import Solver, SolverSettings
from ocpqp.bench import SpringMassConfig, gen_spring_mass

problem = gen_spring_mass(SpringMassConfig(masses=30, horizon=60, seed=0))
print(f"{problem.dims.n} variables over horizon {problem.dims.N}\n")

results = {}
for lanes, workers in ((1, 1), (4, 1), (8, 1), (4, 4)):
    settings = SolverSettings(lane_width=lanes, worker_count=workers, variant="dense")
    with Solver(problem, settings) as solver:
        solver.solve()  # warm-up
        t0 = time.perf_counter()
        _, _, _, report = solver.solve()
        elapsed = time.perf_counter() - t0
    results[(lanes, workers)] = (elapsed, report)
    print(f"d={lanes} workers={workers}: {elapsed * 1e3:7.1f} ms "
          f"({report.inner_iters} Newton iterations)")

base = results[(1, 1)][0]
print("\nspeedups over scalar single-worker:")
for key, (elapsed, _) in results.items():
    print(f"  d={key[0]} workers={key[1]}: {base / elapsed:5.2f}x")

print("\nper-phase split (d=1 vs d=4, single worker):")
for phase in ("assembly", "stage_factor", "psi_factor", "substitution", "line_search"):
    t1 = results[(1, 1)][1].timings[phase]
    t4 = results[(4, 1)][1].timings[phase]
    print(f"  {phase:>14}: {t1 * 1e3:7.1f} ms -> {t4 * 1e3:7.1f} ms")
