"""Independent reference solvers used to check the main code paths.

* :func:`enumerate_qp` solves a small convex QP by trying every subset of
  inequality rows as the active set.
* :func:`brute_force_oracle` finds a KKT point of a small NLP by a penalized
  grid search, local refinement with SciPy's SLSQP and a final polish with
  the exact SQP iteration.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .driver import baseline_sqp
from .errors import OracleError, RegularityError
from .kkt_residuals import eval_F
from .nlp_model import AssumptionReport, PrimalDualPoint, check_assumption_diagnostics
from .qp import solve_eq_qp

ORACLE_MAX_DIM = 6


@dataclass
class EnumeratedQP:
    s: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    active_set: tuple
    objective: float
    candidates: int


def enumerate_qp(qp, tol=1e-9):
    """Exhaustive active-set search for a strictly convex QP.

    Every subset ``W`` of inequality rows is treated as equalities; the
    candidate is kept if it is primal feasible and its multipliers on ``W``
    are non-negative. Subsets with dependent rows are skipped. Returns
    ``None`` for an infeasible QP.
    """
    m_in = qp.m_in
    best = None
    count = 0
    scale = 1.0 + np.max(np.abs(qp.q), initial=0.0)
    for r in range(min(m_in, qp.n - qp.m_eq) + 1):
        for W in itertools.combinations(range(m_in), r):
            W = list(W)
            A = np.vstack([qp.A_eq, qp.A_in[W]])
            b = np.concatenate([qp.b_eq, qp.b_in[W]])
            try:
                s, lam = solve_eq_qp(qp.H, qp.q, A, b)
            except RegularityError:
                continue
            mu_w = lam[qp.m_eq:]
            if np.any(mu_w < -tol * scale):
                continue
            if m_in and np.any(qp.A_in @ s + qp.b_in > tol * (1.0 + np.max(np.abs(qp.b_in)))):
                continue
            count += 1
            obj = qp.objective(s)
            if best is None or obj < best.objective:
                mu = np.zeros(m_in)
                mu[W] = np.maximum(mu_w, 0.0)
                best = EnumeratedQP(s, lam[:qp.m_eq], mu, tuple(W), obj, 0)
    if best is not None:
        best.candidates = count
    return best


@dataclass
class OracleResult:
    point: PrimalDualPoint
    objective: float
    F_norm: float
    active_sets: list
    inactive_sets: list
    diagnostics: AssumptionReport
    candidates: list = field(default_factory=list)


def _penalty(problem, xv, weight):
    xs = problem.split(xv)
    viol = np.sum(problem.coupling_residual(xs) ** 2)
    for sub, xi in zip(problem.subsystems, xs):
        viol += np.sum(sub.eval_g(xi) ** 2) + np.sum(np.maximum(sub.eval_h(xi), 0.0) ** 2)
    return problem.objective(xs) + weight * viol


def _slsqp(problem, x0):
    subs = problem.subsystems

    def eq(xv):
        xs = problem.split(xv)
        return np.concatenate([*(s.eval_g(x) for s, x in zip(subs, xs)), problem.coupling_residual(xs)])

    def ineq(xv):  # SLSQP wants c(x) >= 0
        xs = problem.split(xv)
        return -np.concatenate([s.eval_h(x) for s, x in zip(subs, xs)])

    def obj(xv):
        return problem.objective(problem.split(xv))

    cons = []
    if eq(x0).size:
        cons.append({"type": "eq", "fun": eq})
    if ineq(x0).size:
        cons.append({"type": "ineq", "fun": ineq})
    res = scipy.optimize.minimize(obj, x0, method="SLSQP", constraints=cons,
                                  options={"ftol": 1e-12, "maxiter": 500})
    return res.x


def _multiplier_estimate(problem, xs, tol):
    """Least-squares ``(nu, mu_active, lambda)`` from the stationarity rows."""
    subs = problem.subsystems
    n, n_c = problem.n, problem.n_c
    cols, grad = [], []
    blocks = []
    offset = 0
    for sub, xi in zip(subs, xs):
        grad.append(np.asarray(sub.grad_f(xi), dtype=float))
        blocks.append((offset, sub))
        offset += sub.n
    grad = np.concatenate(grad)
    layout = []
    for off, sub in blocks:
        xi = xs[sub.index]
        Jg = sub.eval_jac_g(xi)
        for j in range(sub.n_g):
            col = np.zeros(n)
            col[off:off + sub.n] = Jg[j]
            cols.append(col)
            layout.append(("nu", sub.index, j))
        h = sub.eval_h(xi)
        Jh = sub.eval_jac_h(xi)
        for j in np.flatnonzero(np.abs(h) <= tol):
            col = np.zeros(n)
            col[off:off + sub.n] = Jh[j]
            cols.append(col)
            layout.append(("mu", sub.index, int(j)))
    E = problem.E
    for r in range(n_c):
        cols.append(E[r])
        layout.append(("lam", None, r))
    A = np.column_stack(cols) if cols else np.zeros((n, 0))
    coef = np.linalg.lstsq(A, -grad, rcond=None)[0] if cols else np.zeros(0)
    nu = [np.zeros(s.n_g) for s in subs]
    mu = [np.zeros(s.n_h) for s in subs]
    lam = np.zeros(n_c)
    for (kind, i, j), v in zip(layout, coef):
        if kind == "nu":
            nu[i][j] = v
        elif kind == "mu":
            mu[i][j] = max(v, 0.0)
        else:
            lam[j] = v
    return PrimalDualPoint.from_lambda(problem, xs, nu, mu, lam)


def brute_force_oracle(problem, reference=None, grid_points=5, radius=2.0, n_starts=8,
                       penalty=100.0, tol=1e-8, tie_tol=1e-9):
    """Approximate global KKT point of a problem with at most six variables.

    Parameters
    ----------
    problem : PartitionedNLP
    reference : list of ndarray, optional
        Primal point used to break ties between minimizers whose objective
        values agree within ``tie_tol``: the closest one wins.
    grid_points, radius
        The grid covers ``[-radius, radius]^n`` with ``grid_points`` values
        per axis.
    n_starts : int
        Number of best grid points refined locally.

    Raises
    ------
    OracleError
        If no start polishes to a point with ``||F||_inf <= tol``.
    """
    n = problem.n
    if n > ORACLE_MAX_DIM:
        raise OracleError(f"brute-force oracle supports at most {ORACLE_MAX_DIM} variables, got {n}")
    axis = np.linspace(-radius, radius, grid_points)
    grid = np.array(list(itertools.product(axis, repeat=n)))
    values = np.array([_penalty(problem, xv, penalty) for xv in grid])
    order = np.argsort(values, kind="stable")[:n_starts]

    found = []
    for idx in order:
        xv = _slsqp(problem, grid[idx])
        if not np.all(np.isfinite(xv)):
            continue
        p0 = _multiplier_estimate(problem, problem.split(xv), 1e-6)
        res = baseline_sqp(problem, p0, eps=tol * 1e-3, k_max=60)
        p = res.point
        try:
            F_norm = eval_F(problem, p).norm()
        except Exception:
            continue
        if not F_norm <= tol:
            continue
        found.append((problem.objective(p.x), p, F_norm))
    if not found:
        raise OracleError("no stationary point found within the search budget")

    best_obj = min(obj for obj, _, _ in found)
    ties = [c for c in found if c[0] <= best_obj + tie_tol * (1.0 + abs(best_obj))]
    if reference is not None:
        ref = np.concatenate([np.asarray(r, float) for r in reference])
        ties.sort(key=lambda c: float(np.max(np.abs(c[1].x_vector - ref))))
    obj, p, F_norm = ties[0]

    active, inactive = [], []
    for sub, xi in zip(problem.subsystems, p.x):
        h = sub.eval_h(xi)
        act = [j for j in range(sub.n_h) if abs(h[j]) <= 1e-7]
        active.append(act)
        inactive.append([j for j in range(sub.n_h) if j not in act])
    diag = check_assumption_diagnostics(problem, p)
    return OracleResult(p, obj, F_norm, active, inactive, diag, [(o, q.x_vector) for o, q, _ in found])
