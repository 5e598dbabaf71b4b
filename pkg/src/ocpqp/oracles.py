"""Independent verification paths for solver output.

Everything here deliberately avoids the structured solve code: dense
assembly of the standard-form matrices, a Riccati recursion for the
unconstrained case, and a brute-force enumeration of active sets for tiny
constrained problems.  These are the oracles the tests and the benchmark
harness check against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from . import model


class OracleIntractable(Exception):
    """The requested oracle would enumerate too many candidates."""


def _norm_inf(v):
    return float(np.max(np.abs(v))) if v.size else 0.0


@dataclass
class DenseQp:
    """Explicit standard-form data: 1/2 x'Qx + q'x, Mx = b, bl <= Gx <= bu."""

    Q: np.ndarray
    q: np.ndarray
    M: np.ndarray
    b: np.ndarray
    G: np.ndarray
    bl: np.ndarray
    bu: np.ndarray


@dataclass
class VerificationReport:
    ok: bool
    method: str
    details: dict = field(default_factory=dict)

    def __bool__(self):
        return self.ok


def assemble_dense(problem):
    """Assemble the dense standard-form matrices of a problem."""
    d = problem.dims
    n, p, m = d.n, d.p, d.m
    Q = np.zeros((n, n))
    q = np.zeros(n)
    M = np.zeros((p, n))
    b = np.zeros(p)
    G = np.zeros((m, n))
    bl = np.full(m, -np.inf)
    bu = np.full(m, np.inf)

    def col(j):
        return j * d.n_xu

    for j in range(d.N):
        c0 = col(j)
        blk = np.zeros((d.n_xu, d.n_xu))
        blk[: d.n_x, : d.n_x] = problem.Q(j)
        blk[: d.n_x, d.n_x :] = problem.S(j).T
        blk[d.n_x :, : d.n_x] = problem.S(j)
        blk[d.n_x :, d.n_x :] = problem.R(j)
        Q[c0 : c0 + d.n_xu, c0 : c0 + d.n_xu] = blk
        q[c0 : c0 + d.n_x] = problem.q(j)
        q[c0 + d.n_x : c0 + d.n_xu] = problem.r(j)
    cN = col(d.N)
    Q[cN : cN + d.n_x, cN : cN + d.n_x] = problem.Q(d.N)
    q[cN : cN + d.n_x] = problem.q(d.N)

    M[: d.n_x, : d.n_x] = np.eye(d.n_x)
    b[: d.n_x] = problem.x_init
    for j in range(d.N):
        r0 = (j + 1) * d.n_x
        c0 = col(j)
        M[r0 : r0 + d.n_x, c0 : c0 + d.n_x] = -problem.A(j)
        M[r0 : r0 + d.n_x, c0 + d.n_x : c0 + d.n_xu] = -problem.B(j)
        M[r0 : r0 + d.n_x, col(j + 1) : col(j + 1) + d.n_x] = np.eye(d.n_x)
        b[r0 : r0 + d.n_x] = problem.c(j)

    for j in range(d.N):
        r0 = j * d.n_y
        c0 = col(j)
        G[r0 : r0 + d.n_y, c0 : c0 + d.n_x] = problem.C(j)
        G[r0 : r0 + d.n_y, c0 + d.n_x : c0 + d.n_xu] = problem.D(j)
        bl[r0 : r0 + d.n_y], bu[r0 : r0 + d.n_y] = problem.bounds(j)
    if d.n_yN:
        r0 = d.N * d.n_y
        G[r0:, cN : cN + d.n_x] = problem.C(d.N)
        bl[r0:], bu[r0:] = problem.bounds(d.N)

    return DenseQp(Q, q, M, b, G, bl, bu)


def kkt_residuals(problem, x, y, lam):
    """Residuals of a candidate solution, recomputed from structured products.

    Returns (dual, eq, primal) max-norms for flat (x, y, lam):
    dual   = ||Qx + q + M'lam + G'y||_inf
    eq     = ||Mx - b||_inf
    primal = ||dist(Gx, [bl, bu])||_inf
    """
    xb = problem.primal_from_flat(x)
    yb = problem.dualineq_from_flat(y)
    lb = problem.dualeq_from_flat(lam)
    qflat = problem.flat_lin()
    dual_vec = (
        problem.primal_to_flat(model.mul_Q(problem, xb))
        + qflat
        + problem.primal_to_flat(model.mul_MT(problem, lb))
        + problem.primal_to_flat(model.mul_GT(problem, yb))
    )
    eq_vec = problem.dualeq_to_flat(model.mul_M(problem, xb)) - problem.dualeq_to_flat(
        problem.b_dualeq()
    )
    gx = problem.dualineq_to_flat(model.mul_G(problem, xb))
    blf, buf = problem.flat_bounds()
    viol = np.maximum(np.maximum(blf - gx, gx - buf), 0.0)
    return _norm_inf(dual_vec), _norm_inf(eq_vec), _norm_inf(viol)


def riccati_solve(problem):
    """Exact solution of the unconstrained problem by backward recursion.

    Returns flat (x, lam).  Only valid when every inequality bound is
    infinite (raises ValueError otherwise).
    """
    d = problem.dims
    blf, buf = problem.flat_bounds()
    if np.any(np.isfinite(blf)) or np.any(np.isfinite(buf)):
        raise ValueError("Riccati recursion only applies to unconstrained problems")
    N = d.N
    Ps = [None] * (N + 1)
    ps = [None] * (N + 1)
    Ks = [None] * N
    ks = [None] * N
    Ps[N], ps[N] = problem.Q(N), problem.q(N)
    for j in range(N - 1, -1, -1):
        Aj, Bj, cj = problem.A(j), problem.B(j), problem.c(j)
        P1, p1 = Ps[j + 1], ps[j + 1]
        F = problem.Q(j) + Aj.T @ P1 @ Aj
        Hm = problem.S(j) + Bj.T @ P1 @ Aj
        Gm = problem.R(j) + Bj.T @ P1 @ Bj
        gv = problem.r(j) + Bj.T @ (p1 + P1 @ cj)
        Ks[j] = -np.linalg.solve(Gm, Hm)
        ks[j] = -np.linalg.solve(Gm, gv)
        Pj = F + Hm.T @ Ks[j]
        Ps[j] = 0.5 * (Pj + Pj.T)
        ps[j] = problem.q(j) + Aj.T @ (p1 + P1 @ cj) + Hm.T @ ks[j]

    x = problem.x_init
    flat, lams = [], []
    for j in range(N):
        u = Ks[j] @ x + ks[j]
        lams.append(-(Ps[j] @ x + ps[j]))
        flat.extend([x, u])
        x = problem.A(j) @ x + problem.B(j) @ u + problem.c(j)
    lams.append(-(Ps[N] @ x + ps[N]))
    flat.append(x)
    return np.concatenate(flat), np.concatenate(lams)


def _solve_equality_qp(dense, active_rows, sides):
    """Solve the QP with the listed inequality rows pinned at their bounds.

    Returns (x, lam, y_active) or None when the KKT system is singular.
    """
    n = dense.Q.shape[0]
    p = dense.M.shape[0]
    Ga = dense.G[active_rows]
    targets = np.where(np.array(sides) > 0, dense.bu[active_rows], dense.bl[active_rows])
    na = len(active_rows)
    kkt = np.zeros((n + p + na, n + p + na))
    kkt[:n, :n] = dense.Q
    kkt[:n, n : n + p] = dense.M.T
    kkt[n : n + p, :n] = dense.M
    if na:
        kkt[:n, n + p :] = Ga.T
        kkt[n + p :, :n] = Ga
    rhs = np.concatenate([-dense.q, dense.b, targets])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)):
        return None
    resid = kkt @ sol - rhs
    if np.max(np.abs(resid)) > 1e-8 * (1.0 + np.max(np.abs(rhs))):
        return None
    return sol[:n], sol[n : n + p], sol[n + p :]


def enumerate_active_sets(problem, max_candidates=200_000, tol=1e-9):
    """Globally solve a tiny problem by enumerating active sets.

    Every inequality row is tried inactive, at its lower bound, or at its
    upper bound (infinite bounds prune the respective choice); candidates
    with more active rows than remaining degrees of freedom are skipped.
    Raises OracleIntractable when the candidate count exceeds the cap.
    """
    dense = assemble_dense(problem)
    m = dense.G.shape[0]
    dof = dense.Q.shape[0] - dense.M.shape[0]
    options = []
    for i in range(m):
        opts = [(0, 0.0)]
        if np.isfinite(dense.bl[i]):
            opts.append((-1, dense.bl[i]))
        if np.isfinite(dense.bu[i]):
            opts.append((+1, dense.bu[i]))
        options.append(opts)
    total = 1
    for opts in options:
        total *= len(opts)
        if total > max_candidates:
            raise OracleIntractable(
                f"active-set enumeration needs more than {max_candidates} candidates"
            )

    best = None
    for combo in product(*options):
        rows = [i for i, (s, _) in enumerate(combo) if s != 0]
        if len(rows) > dof:
            continue
        sides = [combo[i][0] for i in rows]
        sol = _solve_equality_qp(dense, rows, sides)
        if sol is None:
            continue
        x, lam, ya = sol
        gx = dense.G @ x
        scale = 1.0 + max(
            np.max(np.abs(gx)) if m else 0.0,
            np.max(np.abs(dense.bl[np.isfinite(dense.bl)])) if np.any(np.isfinite(dense.bl)) else 0.0,
            np.max(np.abs(dense.bu[np.isfinite(dense.bu)])) if np.any(np.isfinite(dense.bu)) else 0.0,
        )
        if np.any(gx < dense.bl - tol * scale) or np.any(gx > dense.bu + tol * scale):
            continue
        ok = True
        for ridx, side, yv in zip(rows, sides, ya):
            if side > 0 and yv < -tol * scale:
                ok = False
            if side < 0 and yv > tol * scale:
                ok = False
        if not ok:
            continue
        y = np.zeros(m)
        y[rows] = ya
        obj = 0.5 * x @ dense.Q @ x + dense.q @ x
        if best is None or obj < best[0] - 1e-12 * (1.0 + abs(obj)):
            best = (obj, x, y, lam)
    if best is None:
        raise OracleIntractable("no KKT-consistent active set found (infeasible problem?)")
    obj, x, y, lam = best
    return x, y, lam, obj


def dense_newton_solve(H, M, rhs_dual, rhs_eq):
    """Dense factorization of the full saddle-point system.

    Solves [[H, M'], [M, 0]] [dx; dlam] = -[rhs_dual; rhs_eq].
    """
    n, p = H.shape[0], M.shape[0]
    kkt = np.zeros((n + p, n + p))
    kkt[:n, :n] = H
    kkt[:n, n:] = M.T
    kkt[n:, :n] = M
    sol = np.linalg.solve(kkt, -np.concatenate([rhs_dual, rhs_eq]))
    return sol[:n], sol[n:]


def verify_against_oracle(problem, solution, oracle="auto", eps=1e-8, max_candidates=200_000):
    """Check a candidate (x, y, lam) triple against an oracle.

    ``oracle`` is 'residual', 'riccati', 'enumerate' or 'auto' (which picks
    the strongest applicable one).  Residual checks use ``eps`` as the
    KKT tolerance; solution-matching oracles use looser, documented gates.
    """
    x, y, lam = solution
    d = problem.dims
    blf, buf = problem.flat_bounds()
    has_finite = bool(np.any(np.isfinite(blf)) or np.any(np.isfinite(buf)))
    if oracle == "auto":
        if not has_finite:
            oracle = "riccati"
        elif d.n <= 60 and d.m <= 14:
            oracle = "enumerate"
        else:
            oracle = "residual"

    dual, eq, primal = kkt_residuals(problem, x, y, lam)
    details = {"dual": dual, "eq": eq, "primal": primal, "oracle": oracle}
    residual_ok = max(dual, eq, primal) <= eps

    if oracle == "residual":
        return VerificationReport(residual_ok, "residual", details)
    if oracle == "riccati":
        x_ref, _ = riccati_solve(problem)
        err = float(np.max(np.abs(x - x_ref)))
        details["x_err"] = err
        return VerificationReport(residual_ok and err <= 1e-7, "riccati", details)
    if oracle == "enumerate":
        x_ref, _, _, obj = enumerate_active_sets(problem, max_candidates=max_candidates)
        err = float(np.max(np.abs(x - x_ref)))
        details["x_err"] = err
        details["objective"] = obj
        return VerificationReport(residual_ok and err <= 1e-6, "enumerate", details)
    raise ValueError(f"unknown oracle {oracle!r}")
