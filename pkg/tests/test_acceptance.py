"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines.  Criteria 6 and the speed half of 7 are hardware-dependent trends:
they print WARN instead of failing.
"""

import os
import time

import numpy as np
import pytest

from ocpqp import kkt, model, oracles
from ocpqp.alm import Solver, SolverSettings, solve
from ocpqp.bench import SpringMassConfig, gen_random_ocp, gen_spring_mass, loglog_slope
from ocpqp.compact import (
    CompactBatch,
    pack,
    unpack,
    batch_gemm,
    batch_potrf,
    batch_syrk,
    batch_trsm,
    batch_trtri,
    reference_gemm,
    reference_potrf,
    reference_syrk,
    reference_trsm,
    reference_trtri,
)
from ocpqp.model import OcpDims

EPS = 1e-8
LANES = (1, 2, 4, 8)


def _line(num, ok, detail, soft=False):
    tag = "PASS" if ok else ("WARN" if soft else "FAIL")
    print(f"ACCEPTANCE {num}: {tag} - {detail}")
    return ok


@pytest.fixture(scope="module")
def spring_mass_runs():
    """The 100 seeded criterion-1 solves, shared with criterion 8."""
    runs = []
    settings = SolverSettings(eps_abs=EPS, log_inner=True, lane_width=4)
    for seed in range(100):
        problem = gen_spring_mass(SpringMassConfig(masses=10, horizon=15, seed=seed))
        with Solver(problem, settings) as solver:
            x, y, lam, report = solver.solve()
        resid = max(oracles.kkt_residuals(problem, x, y, lam))
        runs.append((seed, problem, report, resid))
    return runs


class TestCriterion1:
    def test_spring_mass_paper_tolerance(self, spring_mass_runs):
        bad = [
            (seed, rep.status, res)
            for seed, _, rep, res in spring_mass_runs
            if rep.status != "solved" or res > EPS
        ]
        worst = max(res for _, _, _, res in spring_mass_runs)
        ok = not bad
        assert _line(
            1, ok,
            f"100/100 spring-mass (M=10, N=15) solved, max independent KKT residual "
            f"{worst:.2e} <= {EPS:.0e}" if ok else f"failures: {bad[:5]}",
        )


class TestCriterion2:
    def test_enumeration_oracle_match(self):
        rng = np.random.default_rng(2024)
        errs = []
        count = 0
        seed = 0
        while count < 50:
            N = int(rng.integers(1, 5))
            n_x = int(rng.integers(1, 4))
            n_u = int(rng.integers(1, 3))
            n_y = int(rng.integers(0, 3))
            n_yN = int(rng.integers(0, 3))
            if N * n_y + n_yN > 8 or N * n_y + n_yN == 0:
                n_y, n_yN = 1, 1
            problem = gen_random_ocp(
                OcpDims(N, n_x, n_u, n_y, n_yN), seed=seed, feasibility_margin=0.5
            )
            seed += 1
            try:
                x_ref, _, _, _ = oracles.enumerate_active_sets(problem)
            except oracles.OracleIntractable:
                continue
            x, y, lam, report = solve(problem, SolverSettings(eps_abs=EPS))
            assert report.solved, f"instance {seed}: {report.status}"
            errs.append(float(np.max(np.abs(x - x_ref))))
            count += 1
        ok = max(errs) <= 1e-6
        assert _line(
            2, ok,
            f"50 constrained instances vs active-set enumeration: max |x - x*| = "
            f"{max(errs):.2e} <= 1e-6",
        )

    def test_riccati_oracle_match(self):
        errs = []
        for seed in range(20):
            problem = gen_random_ocp(
                OcpDims(4, 3, 2, 0, 0), seed=seed, feasibility_margin=np.inf
            )
            x, y, lam, report = solve(problem, SolverSettings(eps_abs=EPS))
            assert report.solved
            x_ref, _ = oracles.riccati_solve(problem)
            errs.append(float(np.max(np.abs(x - x_ref))))
        ok = max(errs) <= 1e-7
        assert _line(
            2, ok,
            f"20 unconstrained instances vs Riccati recursion: max |x - x*| = "
            f"{max(errs):.2e} <= 1e-7",
        )


class TestCriterion3:
    def test_structured_vs_dense_linear_algebra(self):
        rng = np.random.default_rng(3)
        worst_kkt, worst_psi = 0.0, 0.0
        for trial in range(100):
            N = int(rng.integers(1, 7))
            n_x = int(rng.integers(1, 5))
            n_u = int(rng.integers(1, 3))
            problem = gen_random_ocp(
                OcpDims(N, n_x, n_u, 2, 1), seed=300 + trial, feasibility_margin=1.0,
                d=int(rng.choice((1, 2, 4))),
            )
            x = rng.standard_normal(problem.dims.n)
            sy = problem.dualineq_zeros()
            sy.data[:] = 1.7
            weights = kkt.compute_active_weights(
                problem, sy, problem.dualineq_zeros(), problem.primal_from_flat(x)
            )
            delta = 1e-3
            sxinv = problem.primal_zeros()
            sxinv.data[:] = delta
            work = kkt.StageFactorization.allocate(problem)
            kkt.assemble_H(problem, weights, sxinv, out=work.H, work=work)
            kkt.factor_stages(work.H, problem, work=work)
            kkt.factor_psi(work)

            dq = oracles.assemble_dense(problem)
            sig = problem.dualineq_to_flat(weights.sigma_active)
            Hd = dq.Q + dq.G.T @ np.diag(sig) @ dq.G + delta * np.eye(problem.dims.n)
            psi_dense = dq.M @ np.linalg.solve(Hd, dq.M.T)
            scale = np.max(np.abs(psi_dense))
            for j in range(problem.dims.N + 1):
                r = j * n_x
                err = np.max(np.abs(work.psi_diag[j] - psi_dense[r : r + n_x, r : r + n_x]))
                worst_psi = max(worst_psi, err / scale)
                if j < problem.dims.N:
                    err = np.max(np.abs(
                        work.psi_sub[j] - psi_dense[r + n_x : r + 2 * n_x, r : r + n_x]
                    ))
                    worst_psi = max(worst_psi, err / scale)

            g = rng.standard_normal(problem.dims.n)
            lam = rng.standard_normal(problem.dims.p)
            r_eq = rng.standard_normal(problem.dims.p)
            dx, dlam = kkt.solve_newton(
                work,
                problem.primal_from_flat(g),
                problem.dualeq_from_flat(lam),
                problem.dualeq_from_flat(r_eq),
            )
            dxf = problem.primal_to_flat(dx)
            dlf = problem.dualeq_to_flat(dlam)
            res1 = Hd @ dxf + dq.M.T @ dlf + (g + dq.M.T @ lam)
            res2 = dq.M @ dxf + r_eq
            rhs_norm = max(np.max(np.abs(g + dq.M.T @ lam)), np.max(np.abs(r_eq)), 1.0)
            worst_kkt = max(worst_kkt, max(np.max(np.abs(res1)), np.max(np.abs(res2))) / rhs_norm)
        ok = worst_kkt <= 1e-10 and worst_psi <= 1e-11
        assert _line(
            3, ok,
            f"100 Newton systems: relative KKT residual {worst_kkt:.2e} <= 1e-10, "
            f"Psi vs dense Schur {worst_psi:.2e} <= 1e-11",
        )


def _rel(got, want, floor=0.0):
    # ``floor`` guards the accumulate forms (alpha*AB + beta*C) where the
    # exact result can cancel to ~0: the error is then measured against the
    # operand magnitude, the scale roundoff actually propagates from
    scale = max(np.max(np.abs(want)), floor, 1e-30)
    return float(np.max(np.abs(got - want)) / scale)


class TestCriterion4:
    def test_kernel_reference_sweep(self):
        rng = np.random.default_rng(4)
        cases_per_kernel = {k: 0 for k in ("gemm", "syrk", "potrf", "trsm", "trtri", "pack")}
        worst = 0.0
        while min(cases_per_kernel.values()) < 1000:
            d = int(rng.choice(LANES))
            m, k, n = (int(v) for v in rng.integers(1, 13, 3))
            nstages = int(rng.integers(1, 3 * d + 2))  # ragged tails included
            nblocks = -(-nstages // d)

            # pack / unpack round trip, bit exact
            mats = [rng.standard_normal((m, k)) for _ in range(nstages)]
            batch = pack(mats, d)
            out = unpack(batch, nstages)
            assert all(np.array_equal(a, b) for a, b in zip(mats, out))
            cases_per_kernel["pack"] += 1

            # gemm, all transpose flags
            ta, tb = bool(rng.integers(2)), bool(rng.integers(2))
            amats = [rng.standard_normal((k, m) if ta else (m, k)) for _ in range(nstages)]
            bmats = [rng.standard_normal((n, k) if tb else (k, n)) for _ in range(nstages)]
            cmats = [rng.standard_normal((m, n)) for _ in range(nstages)]
            a, b = pack(amats, d), pack(bmats, d)
            c = pack(cmats, d)
            alpha, beta = float(rng.normal()), float(rng.normal())
            batch_gemm(alpha, a, ta, b, tb, beta, c)
            for j in range(nstages):
                want = reference_gemm(alpha, amats[j], ta, bmats[j], tb, beta, cmats[j])
                floor = (
                    abs(alpha) * np.max(np.abs(amats[j])) * np.max(np.abs(bmats[j])) * k
                    + abs(beta) * np.max(np.abs(cmats[j]))
                )
                worst = max(worst, _rel(c.stage(j), want, floor))
            cases_per_kernel["gemm"] += 1

            # syrk (lower triangle)
            csy = pack([rng.standard_normal((m, m)) for _ in range(nstages)], d)
            before = unpack(csy, nstages)
            asy = pack(amats, d)
            batch_syrk(alpha, asy, ta, beta, csy)
            low = np.tril_indices(m)
            for j in range(nstages):
                want = reference_syrk(alpha, amats[j], ta, beta, before[j])
                floor = (
                    abs(alpha) * np.max(np.abs(amats[j])) ** 2 * k
                    + abs(beta) * np.max(np.abs(before[j]))
                )
                worst = max(worst, _rel(csy.stage(j)[low], want[low], floor))
            cases_per_kernel["syrk"] += 1

            # potrf, trsm, trtri on SPD/triangular lanes (tails filled)
            spd = []
            for _ in range(nblocks * d):
                z = rng.standard_normal((m, m))
                spd.append(z @ z.T + m * np.eye(m))
            cb = pack(spd, d)
            l = batch_potrf(cb)
            for j in range(nstages):
                worst = max(worst, _rel(l.stage(j), reference_potrf(spd[j])))
            cases_per_kernel["potrf"] += 1

            side = "left" if rng.integers(2) else "right"
            trans = bool(rng.integers(2))
            shape = (m, n) if side == "left" else (n, m)
            bt = [rng.standard_normal(shape) for _ in range(nblocks * d)]
            btb = pack(bt, d)
            batch_trsm(l, btb, side=side, trans=trans)
            for j in range(nstages):
                lj = l.stage(j)
                want = reference_trsm(lj, bt[j], side=side, trans=trans)
                worst = max(worst, _rel(btb.stage(j), want))
            cases_per_kernel["trsm"] += 1

            inv = batch_trtri(l)
            for j in range(nstages):
                worst = max(worst, _rel(inv.stage(j), reference_trtri(l.stage(j))))
            cases_per_kernel["trtri"] += 1

        total = sum(cases_per_kernel.values())
        ok = worst <= 1e-13
        assert _line(
            4, ok,
            f"{total} kernel cases ({min(cases_per_kernel.values())}+ per kernel, lanes "
            f"{LANES}, ragged tails): worst relative error {worst:.2e} <= 1e-13; "
            f"pack/unpack round-trips bit-exact",
        )


class TestCriterion5:
    def test_configuration_invariance(self):
        problem = gen_spring_mass(SpringMassConfig(masses=10, horizon=15, seed=5))
        # thread count is an invariance axis: 4 is meaningful on any host
        max_workers = max(4, min(8, os.cpu_count() or 1))
        configs = ((1, 1), (4, 1), (4, max_workers))
        resids = {}
        for lanes, workers in configs:
            with Solver(problem, SolverSettings(
                eps_abs=EPS, lane_width=lanes, worker_count=workers, variant="dense"
            )) as solver:
                x, y, lam, report = solver.solve()
            assert report.solved
            resids[(lanes, workers)] = max(oracles.kkt_residuals(problem, x, y, lam))
        ok = all(v <= EPS for v in resids.values())

        # bit-identical stage factorization across worker counts at fixed d
        p4 = model.pad_horizon(problem, 4)
        sy = p4.dualineq_zeros()
        sy.data[:] = 2.0
        weights = kkt.compute_active_weights(
            p4, sy, p4.dualineq_zeros(), p4.primal_zeros()
        )
        sxinv = p4.primal_zeros()
        sxinv.data[:] = 1e-7
        outs = []
        for workers in (1, max_workers):
            pool = kkt.WorkerPool(workers) if workers > 1 else None
            work = kkt.StageFactorization.allocate(p4)
            kkt.assemble_H(p4, weights, sxinv, out=work.H, work=work)
            kkt.factor_stages(work.H, p4, work=work, pool=pool)
            if pool:
                pool.shutdown()
            outs.append(work)
        bit_identical = all(
            np.array_equal(getattr(outs[0], name), getattr(outs[1], name))
            for name in ("l_lm", "vwt_lm", "p_lm", "psi_diag", "psi_sub")
        )
        ok = ok and bit_identical
        assert _line(
            5, ok,
            f"(d=1,1w), (d=4,1w), (d=4,{max_workers}w) all meet 1e-8 "
            f"(residuals {', '.join(f'{v:.1e}' for v in resids.values())}); "
            f"factorization bit-identical across worker counts: {bit_identical}",
        )


def _timed_solve(problem, **kw):
    with Solver(problem, SolverSettings(variant=kw.pop("variant", "dense"), **kw)) as s:
        s.solve()
        t0 = time.perf_counter()
        _, _, _, report = s.solve()
        return time.perf_counter() - t0, report


class TestCriterion6:
    def test_performance_trends_soft(self):
        # (a) vectorization speedup at M=30, N=60
        p60 = gen_spring_mass(SpringMassConfig(masses=30, horizon=60, seed=0))
        t_d1, _ = _timed_solve(p60, lane_width=1)
        t_d4, _ = _timed_solve(p60, lane_width=4)
        speedup = t_d1 / t_d4
        _line(6, speedup >= 1.3,
              f"(a) d=4 vs d=1 at M=30, N=60: {speedup:.2f}x (target >= 1.3x)",
              soft=True)

        # (b) multi-worker overhead at N = 120
        p120 = gen_spring_mass(SpringMassConfig(masses=30, horizon=120, seed=0))
        t_1w, _ = _timed_solve(p120, lane_width=4, worker_count=1)
        workers = max(4, min(8, os.cpu_count() or 1))
        t_mw, _ = _timed_solve(p120, lane_width=4, worker_count=workers)
        ratio = t_mw / t_1w
        _line(6, ratio <= 1.10,
              f"(b) {workers} workers vs 1 at N=120: ratio {ratio:.2f} (target <= 1.10)",
              soft=True)

        # (c) subquadratic growth in N
        horizons = [15, 30, 60, 120]
        times = []
        for N in horizons:
            p = gen_spring_mass(SpringMassConfig(masses=30, horizon=N, seed=0))
            t, _ = _timed_solve(p, lane_width=4)
            times.append(t)
        slope = loglog_slope(horizons, times)
        _line(6, slope <= 1.5,
              f"(c) wall-time growth over N={horizons}: log-log slope {slope:.2f} "
              f"(target <= 1.5)", soft=True)


class TestCriterion7:
    def test_diagonal_variant(self):
        problem = gen_spring_mass(SpringMassConfig(masses=10, horizon=15, seed=7))
        p = model.pad_horizon(problem, 4)
        sy = p.dualineq_zeros()
        sy.data[:] = 3.0
        rng = np.random.default_rng(7)
        x = p.primal_from_flat(0.5 * rng.standard_normal(p.dims.n))
        weights = kkt.compute_active_weights(p, sy, p.dualineq_zeros(), x)
        sxinv = p.primal_zeros()
        sxinv.data[:] = 1e-7
        works = {}
        for variant in ("dense", "diagonal"):
            w = kkt.StageFactorization.allocate(p, variant)
            kkt.assemble_H(p, weights, sxinv, out=w.H, work=w)
            kkt.factor_stages(w.H, p, work=w, variant=variant)
            kkt.factor_psi(w)
            works[variant] = w
        g = p.primal_from_flat(rng.standard_normal(p.dims.n))
        r = p.dualeq_from_flat(rng.standard_normal(p.dims.p))
        dxs = {}
        for variant, w in works.items():
            dx, dlam = kkt.solve_newton(w, g, p.dualeq_zeros(), r)
            dxs[variant] = np.concatenate(
                [p.primal_to_flat(dx), p.dualeq_to_flat(dlam)]
            )
        scale = 1.0 + np.max(np.abs(dxs["dense"]))
        err = float(np.max(np.abs(dxs["dense"] - dxs["diagonal"]))) / scale
        ok = err <= 1e-12
        assert _line(
            7, ok,
            f"diagonal vs dense Newton direction on spring-mass: relative "
            f"difference {err:.2e} <= 1e-12",
        )

        p30 = gen_spring_mass(SpringMassConfig(masses=30, horizon=30, seed=7))
        t_dense, _ = _timed_solve(p30, lane_width=4, variant="dense")
        t_diag, _ = _timed_solve(p30, lane_width=4, variant="diagonal")
        _line(7, t_diag < t_dense,
              f"diagonal path speed at M=30: {t_dense / t_diag:.2f}x faster "
              f"({t_diag * 1e3:.0f}ms vs {t_dense * 1e3:.0f}ms)", soft=True)


class TestCriterion8:
    def test_inner_loop_properties(self, spring_mass_runs):
        checked = 0
        mono_bad, feas_bad = 0, 0
        for seed, problem, report, _ in spring_mass_runs:
            b = np.concatenate([problem.x_init, np.zeros(problem.dims.p - problem.dims.n_x)])
            gate = 1e-11 * (1.0 + float(np.max(np.abs(b))))
            by_outer = {}
            for rec in report.inner_log:
                by_outer.setdefault(rec.outer_iter, []).append(rec)
            for recs in by_outer.values():
                for prev, cur in zip(recs, recs[1:]):
                    checked += 1
                    if cur.phi > prev.phi + 1e-9 * (1.0 + abs(prev.phi)):
                        mono_bad += 1
                    if cur.eq_norm > gate:
                        feas_bad += 1
                # every iterate after the unit step is equality-feasible
                for rec in recs:
                    if not rec.unit_step and rec.eq_norm > gate:
                        feas_bad += 1
        ok = mono_bad == 0 and feas_bad == 0
        assert _line(
            8, ok,
            f"{checked} logged inner steps across the criterion-1 runs: monotone "
            f"phi decrease and post-step ||Mx-b|| <= 1e-11(1+||b||) "
            f"({mono_bad} monotonicity, {feas_bad} feasibility violations)",
        )
