"""Augmented-Lagrangian outer loop with a semismooth Newton inner solver.

The inequality constraints are relaxed into a piecewise-quadratic penalty;
each outer iteration minimizes

    phi(x) = 1/2 x'Qx + q'x
             + 1/2 || z - proj(z) ||^2_{Sigma_y},   z = Gx + Sigma_y^{-1} y
             + 1/2 || x - x_center ||^2_{Sigma_x^{-1}}

subject to Mx = b, by Newton steps on the generalized Hessian
Q + G' Sigma_y^J G + Sigma_x^{-1} (the proximal diagonal keeps it positive
definite even for semidefinite cost).  The first Newton step of each inner
solve is a unit step, which restores Mx = b exactly; later steps use an
exact line search over the piecewise-quadratic merit.  Outer iterations
update the inequality multipliers, grow penalties on rows whose violation
stalls, and move the proximal center.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import kkt, model
from .compact import NonPositivePivot
from .kkt import StructureMismatch, WorkerPool

SIGMA_MIN = 1e-9
SIGMA_MAX = 1e9

SOLVED = "solved"
MAX_ITER = "max_iter"
NUMERICAL_ERROR = "numerical_error"

PHASES = ("assembly", "stage_factor", "psi_factor", "substitution", "line_search")


class NonDescentDirection(Exception):
    """The directional derivative at step 0 is nonnegative."""


class _PivotEscalationFailed(Exception):
    pass


@dataclass
class SolverSettings:
    """Tolerances and algorithm knobs.

    ``variant`` picks the stage-factorization path: 'dense', 'diagonal', or
    'auto' (diagonal when the problem structure allows it).  ``worker_count``
    workers share the stage-parallel phases; the OCPQP_WORKERS environment
    variable overrides it when set.
    """

    eps_abs: float = 1e-8
    eps_rel: float = 0.0
    max_outer: int = 50
    max_inner: int = 100
    penalty_update_factor: float = 10.0
    penalty_trigger: float = 0.25
    initial_sigma: float | None = None
    proximal_weight: float = 1e-7
    worker_count: int = 1
    lane_width: int = 4
    variant: str = "auto"
    log_inner: bool = False
    max_pivot_escalations: int = 3

    def __post_init__(self):
        if not (self.eps_abs > 0.0 or self.eps_rel > 0.0):
            raise ValueError("at least one of eps_abs, eps_rel must be positive")
        if self.penalty_update_factor <= 1.0:
            raise ValueError("penalty_update_factor must exceed 1")
        if not 0.0 < self.penalty_trigger < 1.0:
            raise ValueError("penalty_trigger must lie in (0, 1)")
        if self.lane_width not in (1, 2, 4, 8):
            raise ValueError("lane_width must be one of 1, 2, 4, 8")
        if self.variant not in ("dense", "diagonal", "auto"):
            raise ValueError("variant must be 'dense', 'diagonal' or 'auto'")


@dataclass
class AlmState:
    """Current iterates and weights of the outer loop.

    ``x`` is the running primal iterate; ``x_center`` snapshots it at the
    top of each outer iteration and serves as the proximal center.
    """

    x: object
    y: object
    lam: object
    sigma_y: object
    sigma_x_inv: object
    x_center: object
    outer_iter: int = 0
    inner_iter: int = 0


@dataclass
class InnerRecord:
    outer_iter: int
    inner_iter: int
    phi: float
    eq_norm: float
    step: float
    unit_step: bool


@dataclass
class SolveReport:
    status: str
    outer_iters: int
    inner_iters: int
    dual_res: float
    eq_res: float
    primal_res: float
    timings: dict
    solve_time: float
    inner_log: list = field(default_factory=list)

    @property
    def solved(self):
        return self.status == SOLVED


def _flat_dot(a, b):
    return float(a @ b)


def eval_phi(problem, state, x):
    """Inner objective value at ``x`` for the weights and center in ``state``."""
    z = model.mul_G(problem, x)
    z.data += state.y.data / state.sigma_y.data
    dist = z.zeros_like()
    np.clip(z.data, problem.bl.data, problem.bu.data, out=dist.data)
    np.subtract(z.data, dist.data, out=dist.data)
    xf = problem.primal_to_flat(x)
    qxf = problem.primal_to_flat(model.mul_Q(problem, x))
    val = 0.5 * _flat_dot(xf, qxf) + _flat_dot(xf, problem.flat_lin())
    distf = problem.dualineq_to_flat(dist)
    sigf = problem.dualineq_to_flat(state.sigma_y)
    val += 0.5 * _flat_dot(distf, sigf * distf)
    dc = xf - problem.primal_to_flat(state.x_center)
    sxf = problem.primal_to_flat(state.sigma_x_inv)
    val += 0.5 * _flat_dot(dc, sxf * dc)
    return val


def eval_grad_phi(problem, state, x, out=None, z=None):
    """Gradient of the inner objective:
    Qx + q + G' Sigma_y (z - proj(z)) + Sigma_x^{-1} (x - x_center)."""
    if z is None:
        z = model.mul_G(problem, x)
        z.data += state.y.data / state.sigma_y.data
    scaled = z.zeros_like()
    np.clip(z.data, problem.bl.data, problem.bu.data, out=scaled.data)
    np.subtract(z.data, scaled.data, out=scaled.data)
    scaled.data *= state.sigma_y.data
    grad = model.mul_GT(problem, scaled, out=out)
    grad.data += model.mul_Q(problem, x).data
    grad.data += problem.lin.data
    grad.data += state.sigma_x_inv.data * (x.data - state.x_center.data)
    return grad


def exact_line_search(problem, state, x, dx, z=None, grad=None):
    """Global minimizer of tau -> phi(x + tau dx) on a feasible direction.

    The directional derivative is piecewise linear and nondecreasing; its
    breakpoints are the steps at which a shifted constraint value crosses
    one of its bounds.  Events are sorted once and scanned cumulatively.
    Raises NonDescentDirection when the slope at 0 is nonnegative.
    """
    if z is None:
        z = model.mul_G(problem, x)
        z.data += state.y.data / state.sigma_y.data
    if grad is None:
        grad = eval_grad_phi(problem, state, x, z=z)
    dxf = problem.primal_to_flat(dx)
    c0 = _flat_dot(dxf, problem.primal_to_flat(grad))
    if c0 >= 0.0:
        raise NonDescentDirection(f"directional derivative {c0:.3e} at step 0")

    qdx = problem.primal_to_flat(model.mul_Q(problem, dx))
    sxf = problem.primal_to_flat(state.sigma_x_inv)
    eta = _flat_dot(dxf, qdx) + _flat_dot(dxf, sxf * dxf)
    delta = problem.dualineq_to_flat(model.mul_G(problem, dx))
    z0 = problem.dualineq_to_flat(z)
    blf, buf = problem.flat_bounds()
    sig = problem.dualineq_to_flat(state.sigma_y)

    moving = delta != 0.0
    above = (z0 > buf) | ((z0 == buf) & (delta > 0.0))
    below = (z0 < blf) | ((z0 == blf) & (delta < 0.0))
    curv = sig * delta * delta
    s0 = eta + float(np.sum(curv[above | below]))

    taus, d_s, d_c = [], [], []

    def add_events(mask, bound, sign):
        idx = np.nonzero(mask)[0]
        if idx.size:
            taus.append((bound[idx] - z0[idx]) / delta[idx])
            d_s.append(sign * curv[idx])
            d_c.append(sign * sig[idx] * delta[idx] * (z0[idx] - bound[idx]))

    up, down = moving & (delta > 0.0), moving & (delta < 0.0)
    add_events(up & np.isfinite(buf) & (z0 < buf), buf, +1.0)   # enters above
    add_events(up & (z0 < blf), blf, -1.0)                      # leaves below
    add_events(down & np.isfinite(blf) & (z0 > blf), blf, +1.0) # enters below
    add_events(down & (z0 > buf), buf, -1.0)                    # leaves above

    if taus:
        taus = np.concatenate(taus)
        d_s = np.concatenate(d_s)
        d_c = np.concatenate(d_c)
        order = np.argsort(taus, kind="stable")
        taus, d_s, d_c = taus[order], d_s[order], d_c[order]
        s_pref = s0 + np.concatenate([[0.0], np.cumsum(d_s)[:-1]])
        c_pref = c0 + np.concatenate([[0.0], np.cumsum(d_c)[:-1]])
        vals = c_pref + s_pref * taus
        hit = np.nonzero(vals >= 0.0)[0]
        if hit.size:
            k = hit[0]
            return float(-c_pref[k] / s_pref[k])
        s_end = s0 + float(np.sum(d_s))
        c_end = c0 + float(np.sum(d_c))
        return float(-c_end / s_end)
    return float(-c0 / s0)


def initial_penalty(problem, x):
    """Scale-matched uniform initial penalty, clamped to [1e-4, 1e4]."""
    xf = problem.primal_to_flat(x)
    qxf = problem.primal_to_flat(model.mul_Q(problem, x))
    cost = abs(0.5 * _flat_dot(xf, qxf) + _flat_dot(xf, problem.flat_lin()))
    gxf = problem.dualineq_to_flat(model.mul_G(problem, x))
    gnorm = 0.5 * _flat_dot(gxf, gxf)
    return float(np.clip(20.0 * max(1.0, cost) / max(1.0, gnorm), 1e-4, 1e4))


class Solver:
    """One problem, one set of workspaces, repeated solves.

    ``setup`` work (validation, repacking to the configured lane width,
    workspace allocation) happens in the constructor; :meth:`solve` reuses
    everything.  ``update_bounds`` / ``update_gradient`` /
    ``update_initial_state`` support model-predictive-control loops where
    only vectors change between solves.
    """

    def __init__(self, problem, settings=None):
        self.settings = settings or SolverSettings()
        report = model.validate(problem)
        if not report.ok:
            raise ValueError("invalid problem: " + "; ".join(report.issues))
        if problem.dims.d != self.settings.lane_width:
            problem = model.pad_horizon(problem, self.settings.lane_width)
        self.problem = problem
        if self.settings.variant == "auto":
            self.variant = "diagonal" if problem.is_diagonal() else "dense"
        else:
            self.variant = self.settings.variant
            if self.variant == "diagonal" and not problem.is_diagonal():
                raise StructureMismatch(
                    "diagonal variant requested for a non-diagonal problem"
                )
        env_workers = os.environ.get("OCPQP_WORKERS")
        workers = int(env_workers) if env_workers else self.settings.worker_count
        self.worker_count = max(1, workers)
        self.pool = WorkerPool(self.worker_count) if self.worker_count > 1 else None
        self.work = kkt.StageFactorization.allocate(problem, self.variant)
        self._grad = problem.primal_zeros()
        self._b = problem.b_dualeq()

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- data updates for repeated solves -----------------------------------

    def update_bounds(self, bl, bu, bl_N=None, bu_N=None):
        """Replace the stage bounds (naive (N, n_y) arrays, optionally the
        terminal pair); the constraint matrices are unchanged."""
        d = self.problem.dims
        bl = np.broadcast_to(np.asarray(bl, dtype=np.float64), (d.N, d.n_y))
        bu = np.broadcast_to(np.asarray(bu, dtype=np.float64), (d.N, d.n_y))
        lo = self.problem.bl.to_stack()
        hi = self.problem.bu.to_stack()
        lo[: d.N, : d.n_y, 0] = bl
        hi[: d.N, : d.n_y, 0] = bu
        if bl_N is not None:
            lo[d.N, : d.n_yN, 0] = np.asarray(bl_N, dtype=np.float64)
        if bu_N is not None:
            hi[d.N, : d.n_yN, 0] = np.asarray(bu_N, dtype=np.float64)
        if np.any(lo > hi):
            raise ValueError("bound crossing in updated bounds")
        self.problem.bl.data[:] = model.CompactBatch.from_stack(lo, d.d).data
        self.problem.bu.data[:] = model.CompactBatch.from_stack(hi, d.d).data

    def update_gradient(self, q, r, q_N=None):
        """Replace the linear cost vectors (naive (N, n_x), (N, n_u))."""
        d = self.problem.dims
        q = np.broadcast_to(np.asarray(q, dtype=np.float64), (d.N, d.n_x))
        r = np.broadcast_to(np.asarray(r, dtype=np.float64), (d.N, d.n_u))
        st = self.problem.lin.to_stack()
        st[: d.N, : d.n_x, 0] = q
        st[: d.N, d.n_x :, 0] = r
        if q_N is not None:
            st[d.N, : d.n_x, 0] = np.asarray(q_N, dtype=np.float64)
        self.problem.lin.data[:] = model.CompactBatch.from_stack(st, d.d).data

    def update_initial_state(self, x_init):
        x_init = np.asarray(x_init, dtype=np.float64)
        if x_init.shape != (self.problem.dims.n_x,):
            raise ValueError("x_init has the wrong shape")
        self.problem.x_init[:] = x_init
        self.problem._b = None
        self._b = self.problem.b_dualeq()

    # -- solve ---------------------------------------------------------------

    def _init_state(self, warm_start):
        p = self.problem
        if warm_start is not None:
            x0, y0, lam0 = warm_start
            x = p.primal_from_flat(x0)
            y = p.dualineq_from_flat(y0)
            lam = p.dualeq_from_flat(lam0)
        else:
            x, y, lam = p.primal_zeros(), p.dualineq_zeros(), p.dualeq_zeros()
        sigma0 = self.settings.initial_sigma
        if sigma0 is None:
            sigma0 = initial_penalty(p, x)
        logical = p.dualineq_from_flat(np.ones(p.dims.m)).data > 0.0
        sigma_y = p.dualineq_zeros()
        # padded rows keep a benign positive weight so z = Gx + y/sigma stays finite
        sigma_y.data[:] = np.where(
            logical, float(np.clip(sigma0, SIGMA_MIN, SIGMA_MAX)), 1.0
        )
        sigma_x_inv = p.primal_zeros()
        sigma_x_inv.data[:] = float(
            np.clip(self.settings.proximal_weight, SIGMA_MIN, SIGMA_MAX)
        )
        center = x.copy()
        return AlmState(x, y, lam, sigma_y, sigma_x_inv, center)

    def _factor(self, state, weights, prox_scale, timings):
        """Assemble and factor at the current active set, escalating the
        proximal diagonal on pivot failures (at most the configured count)."""
        p, w = self.problem, self.work
        scale = prox_scale
        for attempt in range(self.settings.max_pivot_escalations + 1):
            sx = state.sigma_x_inv
            if scale != 1.0:
                sx = sx.copy()
                sx.data *= scale
            t0 = time.perf_counter()
            run = self.pool.run if self.pool is not None else (lambda fn, nb: fn(range(nb)))
            run(
                lambda ch: kkt.assemble_H(
                    p, weights, sx, out=w.H, blocks=ch, work=w
                ),
                w.H.nblocks,
            )
            t1 = time.perf_counter()
            timings["assembly"] += t1 - t0
            try:
                kkt.factor_stages(w.H, p, work=w, pool=self.pool, variant=self.variant)
                t2 = time.perf_counter()
                timings["stage_factor"] += t2 - t1
                kkt.factor_psi(w)
                timings["psi_factor"] += time.perf_counter() - t2
                return scale
            except NonPositivePivot:
                timings["stage_factor"] += time.perf_counter() - t1
                scale = (scale if scale > 1.0 else 1.0) * 10.0
        raise _PivotEscalationFailed()

    def _inner_solve(self, state, inner_tol, timings, log):
        """Newton iterations on the current inner problem.

        Returns (converged, iterations, prox_scale).  The first step is a
        unit step; later steps use the exact line search.  The stage
        factorization is redone only when the active set changes.
        """
        p, settings = self.problem, self.settings
        prox_scale = 1.0
        prev_weights = None
        iterations = 0
        converged = False
        for it in range(settings.max_inner):
            z = model.mul_G(p, state.x)
            z.data += state.y.data / state.sigma_y.data
            sx_eff = state.sigma_x_inv
            if prox_scale != 1.0:
                sx_eff = sx_eff.copy()
                sx_eff.data *= prox_scale
            eff_state = AlmState(
                state.x, state.y, state.lam, state.sigma_y, sx_eff, state.x_center
            )
            grad = eval_grad_phi(p, eff_state, state.x, out=self._grad, z=z)
            stationarity = model.mul_MT(p, state.lam)
            stationarity.data += grad.data
            eq = model.mul_M(p, state.x)
            eq.data -= self._b.data
            if (
                np.max(np.abs(stationarity.data)) <= inner_tol
                and np.max(np.abs(eq.data)) <= inner_tol
            ):
                converged = True
                break

            weights = kkt.weights_from_shifted(p, state.sigma_y, z)
            if prev_weights is None or not weights.same_active_set(prev_weights):
                prox_scale = self._factor(state, weights, prox_scale, timings)
                prev_weights = weights

            t0 = time.perf_counter()
            dx, dlam = kkt.solve_newton(self.work, grad, state.lam, eq)
            timings["substitution"] += time.perf_counter() - t0

            if it == 0:
                tau = 1.0
            else:
                t0 = time.perf_counter()
                try:
                    tau = exact_line_search(p, eff_state, state.x, dx, z=z, grad=grad)
                except NonDescentDirection:
                    timings["line_search"] += time.perf_counter() - t0
                    break
                timings["line_search"] += time.perf_counter() - t0
            state.x.data += tau * dx.data
            state.lam.data += dlam.data
            iterations += 1
            state.inner_iter += 1
            if log is not None:
                eq_now = model.mul_M(p, state.x)
                eq_now.data -= self._b.data
                log.append(
                    InnerRecord(
                        outer_iter=state.outer_iter,
                        inner_iter=iterations,
                        phi=eval_phi(p, eff_state, state.x),
                        eq_norm=float(np.max(np.abs(eq_now.data))),
                        step=tau,
                        unit_step=(it == 0),
                    )
                )
        return converged, iterations, prox_scale

    def solve(self, warm_start=None):
        """Run the outer loop; returns (x, y, lam, report) with flat arrays."""
        p, settings = self.problem, self.settings
        state = self._init_state(warm_start)
        timings = {k: 0.0 for k in PHASES}
        log = [] if settings.log_inner else None
        inner_tol = 1.0
        status = MAX_ITER
        total_inner = 0
        dual_res = eq_res = primal_res = float("inf")
        prev_viol = None
        t_start = time.perf_counter()
        outer_done = 0
        for k in range(settings.max_outer):
            state.outer_iter = k + 1
            outer_done = k + 1
            np.copyto(state.x_center.data, state.x.data)
            try:
                _, inner_iters, _ = self._inner_solve(state, inner_tol, timings, log)
            except _PivotEscalationFailed:
                status = NUMERICAL_ERROR
                break
            total_inner += inner_iters

            z = model.mul_G(p, state.x)
            gx = z.copy()
            z.data += state.y.data / state.sigma_y.data
            proj = np.clip(z.data, p.bl.data, p.bu.data)
            y_new = state.y.zeros_like()
            y_new.data[:] = state.sigma_y.data * (z.data - proj)

            dual_vec = model.mul_Q(p, state.x)
            dual_vec.data += p.lin.data
            dual_vec.data += model.mul_MT(p, state.lam).data
            dual_vec.data += model.mul_GT(p, y_new).data
            dual_res = float(np.max(np.abs(dual_vec.data)))
            eq_vec = model.mul_M(p, state.x)
            eq_vec.data -= self._b.data
            eq_res = float(np.max(np.abs(eq_vec.data)))
            viol = np.maximum(
                np.maximum(p.bl.data - gx.data, gx.data - p.bu.data), 0.0
            )
            primal_res = float(np.max(viol)) if viol.size else 0.0
            # termination drives |Gx - proj(z)| per row: on violated rows this
            # is the bound violation, on rows held by a positive multiplier it
            # is the complementarity slack (y_new is supported on proj(z)'s
            # active faces, so passing this makes (x, y_new) a KKT certificate)
            comp = np.abs(gx.data - proj)
            primal_term = float(np.max(comp)) if comp.size else 0.0

            if settings.eps_rel > 0.0:
                dscale = max(
                    float(np.max(np.abs(model.mul_Q(p, state.x).data))),
                    float(np.max(np.abs(p.lin.data))),
                    float(np.max(np.abs(model.mul_MT(p, state.lam).data))),
                    float(np.max(np.abs(model.mul_GT(p, y_new).data))),
                )
                finite = np.isfinite(p.bl.data) | np.isfinite(p.bu.data)
                pscale = max(
                    float(np.max(np.abs(gx.data))) if gx.data.size else 0.0,
                    float(
                        np.max(
                            np.abs(
                                np.where(
                                    np.isfinite(p.bl.data), p.bl.data, 0.0
                                )
                            )
                        )
                    ) if finite.any() else 0.0,
                    float(
                        np.max(
                            np.abs(
                                np.where(
                                    np.isfinite(p.bu.data), p.bu.data, 0.0
                                )
                            )
                        )
                    ) if finite.any() else 0.0,
                )
            else:
                dscale = pscale = 0.0

            state.y = y_new
            if (
                dual_res <= settings.eps_abs + settings.eps_rel * dscale
                and primal_term <= settings.eps_abs + settings.eps_rel * pscale
                and eq_res <= settings.eps_abs
            ):
                status = SOLVED
                break

            if prev_viol is not None:
                grow = comp > settings.penalty_trigger * prev_viol
                if grow.any():
                    state.sigma_y.data[grow] = np.minimum(
                        state.sigma_y.data[grow] * settings.penalty_update_factor,
                        SIGMA_MAX,
                    )
            prev_viol = comp
            inner_tol = max(0.1 * inner_tol, 0.1 * settings.eps_abs)

        solve_time = time.perf_counter() - t_start
        report = SolveReport(
            status=status,
            outer_iters=outer_done,
            inner_iters=total_inner,
            dual_res=dual_res,
            eq_res=eq_res,
            primal_res=primal_res,
            timings=timings,
            solve_time=solve_time,
            inner_log=log or [],
        )
        return (
            p.primal_to_flat(state.x),
            p.dualineq_to_flat(state.y),
            p.dualeq_to_flat(state.lam),
            report,
        )


def solve(problem, settings=None, warm_start=None):
    """One-shot convenience wrapper around :class:`Solver`."""
    solver = Solver(problem, settings)
    try:
        return solver.solve(warm_start)
    finally:
        solver.close()
