"""Dense convex QP solver (primal active-set).

Problems have the form::

    minimize    1/2 s^T H s + q^T s
    subject to  A_eq s + b_eq  = 0
                A_in s + b_in <= 0

``H`` only needs to be positive definite on the null space of the
equality rows. The working set always contains the equality rows plus a
linearly independent subset of the inequality rows, so every reduced
Hessian the method meets is positive definite as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import RegularityError

SOLVED = "solved"
INFEASIBLE = "infeasible"
ITERATION_LIMIT = "iteration-limit"

WEAK_ACTIVE_TOL = 1e-9
PHASE_ONE_DELTA = 1e-6


def _as_rows(A, n):
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return np.zeros((0, n))
    return A.reshape(-1, n)


@dataclass(eq=False)
class DenseQP:
    H: np.ndarray
    q: np.ndarray
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None
    A_in: np.ndarray = None
    b_in: np.ndarray = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = self.H.shape[0]
        self.q = np.asarray(self.q, dtype=float).reshape(n)
        self.A_eq = _as_rows(self.A_eq if self.A_eq is not None else [], n)
        self.b_eq = np.asarray(self.b_eq if self.b_eq is not None else [], dtype=float).reshape(-1)
        self.A_in = _as_rows(self.A_in if self.A_in is not None else [], n)
        self.b_in = np.asarray(self.b_in if self.b_in is not None else [], dtype=float).reshape(-1)
        if self.b_eq.size != self.A_eq.shape[0] or self.b_in.size != self.A_in.shape[0]:
            raise ValueError("constraint matrix and offset sizes differ")

    @property
    def n(self):
        return self.H.shape[0]

    @property
    def m_eq(self):
        return self.A_eq.shape[0]

    @property
    def m_in(self):
        return self.A_in.shape[0]

    def objective(self, s):
        return float(0.5 * s @ self.H @ s + self.q @ s)


@dataclass
class QPSolution:
    s: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    active_set: tuple
    status: str
    iterations: int = 0
    degenerate: bool = False
    objective: float = float("nan")
    working_set: tuple = field(default=())

    @property
    def ok(self):
        return self.status == SOLVED


def kkt_residuals(qp, s, nu, mu):
    """Infinity-norm KKT residuals of a QP candidate solution."""
    r_in = qp.A_in @ s + qp.b_in
    stat = qp.H @ s + qp.q + qp.A_eq.T @ nu + qp.A_in.T @ mu
    return {
        "stationarity": float(np.max(np.abs(stat), initial=0.0)),
        "primal_eq": float(np.max(np.abs(qp.A_eq @ s + qp.b_eq), initial=0.0)),
        "primal_in": float(np.max(r_in, initial=0.0)),
        "dual": float(max(0.0, -np.min(mu, initial=0.0))),
        "complementarity": float(np.max(np.abs(mu * r_in), initial=0.0)),
    }


def solve_eq_qp(H, q, A_eq, b_eq):
    """Solve the equality-constrained QP through its saddle-point system.

    Returns ``(s, nu)`` with ``H s + q + A_eq^T nu = 0`` and
    ``A_eq s + b_eq = 0``.

    Raises
    ------
    RegularityError
        If the KKT matrix is singular.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n = H.shape[0]
    q = np.asarray(q, dtype=float).reshape(n)
    A = _as_rows(A_eq, n)
    b = np.asarray(b_eq, dtype=float).reshape(-1)
    m = A.shape[0]
    if m == 0:
        try:
            s = np.linalg.solve(H, -q)
        except np.linalg.LinAlgError as exc:
            raise RegularityError("singular Hessian in unconstrained QP") from exc
        if not np.all(np.isfinite(s)):
            raise RegularityError("singular Hessian in unconstrained QP")
        return s, np.zeros(0)
    K = np.zeros((n + m, n + m))
    K[:n, :n] = H
    K[:n, n:] = A.T
    K[n:, :n] = A
    rhs = np.concatenate([-q, -b])
    try:
        sol = np.linalg.solve(K, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
        # one step of iterative refinement
        sol = sol + np.linalg.solve(K, rhs - K @ sol)
    except np.linalg.LinAlgError as exc:
        raise RegularityError("singular KKT matrix") from exc
    res = np.max(np.abs(K @ sol - rhs))
    scale = 1.0 + np.max(np.abs(rhs)) + np.max(np.abs(K)) * np.max(np.abs(sol))
    if not np.isfinite(res) or res > 1e-8 * scale:
        raise RegularityError(f"KKT system is numerically singular (residual {res:.2e})")
    return sol[:n], sol[n:]


def _independent_rows(A_fixed, A_in, idx):
    """Greedy subset of ``idx`` whose rows stay independent of ``A_fixed``."""
    keep = []
    base = A_fixed
    rank = np.linalg.matrix_rank(base) if base.shape[0] else 0
    for j in idx:
        trial = np.vstack([base, A_in[j:j + 1]])
        r = np.linalg.matrix_rank(trial)
        if r > rank:
            keep.append(int(j))
            base, rank = trial, r
    return keep


class _Engine:
    """Working-set iterations on one QP; holds scratch state for a single solve."""

    def __init__(self, qp, kkt_tol):
        self.qp = qp
        self.tol = kkt_tol
        self.feas_tol = kkt_tol * (1.0 + np.max(np.abs(qp.b_in), initial=0.0))
        self.changes = 0

    def eqp(self, W):
        qp = self.qp
        if W:
            A = np.vstack([qp.A_eq, qp.A_in[W]])
            b = np.concatenate([qp.b_eq, qp.b_in[W]])
        else:
            A, b = qp.A_eq, qp.b_eq
        s, lam = solve_eq_qp(qp.H, qp.q, A, b)
        return s, lam[:qp.m_eq], lam[qp.m_eq:]

    def feasible(self, s):
        if self.qp.m_in == 0:
            return True
        return bool(np.max(self.qp.A_in @ s + self.qp.b_in) <= self.feas_tol)

    def iterate(self, x, W, max_changes):
        """Primal active-set loop from a feasible ``x``; returns ``(x, nu, mu_W, W, status)``."""
        qp = self.qp
        W = list(W)
        while True:
            x_hat, nu, mu_w = self.eqp(W)
            p = x_hat - x
            if np.max(np.abs(p), initial=0.0) <= 1e-12 * (1.0 + np.max(np.abs(x), initial=0.0)):
                x = x_hat
                if not W or np.min(mu_w) >= -self.tol:
                    return x, nu, mu_w, W, SOLVED
                if self.changes >= max_changes:
                    return x, nu, mu_w, W, ITERATION_LIMIT
                # drop the most negative multiplier, lowest index on ties
                worst = min(range(len(W)), key=lambda k: (mu_w[k], W[k]))
                W.pop(worst)
                self.changes += 1
                continue
            Ap = qp.A_in @ p
            slack = np.maximum(-(qp.A_in @ x + qp.b_in), 0.0)
            alpha, block = 1.0, -1
            pnorm = np.linalg.norm(p)
            for j in range(qp.m_in):
                if j in W:
                    continue
                if Ap[j] > 1e-12 * pnorm * max(1.0, np.linalg.norm(qp.A_in[j])):
                    a = slack[j] / Ap[j]
                    if a < alpha:
                        alpha, block = a, j
            x = x + alpha * p
            if block >= 0:
                if self.changes >= max_changes:
                    return x, nu, mu_w, W, ITERATION_LIMIT
                W.append(block)
                self.changes += 1

    def phase_one(self):
        """Feasible point and initial working set, or ``None`` if infeasible.

        Solves the elastic problem
        ``min d/2 |s - s_ref|^2 + t^2/2 + t  s.t. A_eq s + b_eq = 0,
        A_in s + b_in <= t, t >= 0`` starting from the trivially feasible
        ``(s_ref, max violation)``.
        """
        qp = self.qp
        n, mi = qp.n, qp.m_in
        if qp.m_eq:
            s_ref, *_ = np.linalg.lstsq(qp.A_eq, -qp.b_eq, rcond=None)
            if np.max(np.abs(qp.A_eq @ s_ref + qp.b_eq)) > 1e3 * self.feas_tol:
                return None
        else:
            s_ref = np.zeros(n)
        viol = qp.A_in @ s_ref + qp.b_in
        if np.max(viol) <= self.feas_tol:
            return s_ref, []
        t0 = float(np.max(viol))
        H1 = np.diag(np.r_[np.full(n, PHASE_ONE_DELTA), 1.0])
        q1 = np.r_[-PHASE_ONE_DELTA * s_ref, 1.0]
        A_eq1 = np.hstack([qp.A_eq, np.zeros((qp.m_eq, 1))])
        A_in1 = np.vstack([np.hstack([qp.A_in, -np.ones((mi, 1))]), np.r_[np.zeros(n), -1.0][None, :]])
        b_in1 = np.r_[qp.b_in, 0.0]
        aux = DenseQP(H1, q1, A_eq1, qp.b_eq, A_in1, b_in1)
        eng = _Engine(aux, self.tol)
        W0 = [int(np.argmax(viol))]
        z, _, _, W1, status = eng.iterate(np.r_[s_ref, t0], W0, 50 * (n + 1 + mi + 1))
        self.changes += eng.changes
        if status != SOLVED or z[-1] > self.feas_tol:
            return None
        s0 = z[:n]
        if not self.feasible(s0):
            return None
        W = _independent_rows(qp.A_eq, qp.A_in, sorted(j for j in W1 if j < mi))
        return s0, W


def solve_qp(qp, warm_start=None, kkt_tol=1e-10, max_changes=None):
    """Solve a convex dense QP.

    Parameters
    ----------
    qp : DenseQP
    warm_start : sequence of int, optional
        Guess of the optimal active set. It is tried first; if it does not
        certify as optimal the solver restarts from a cold start.
    kkt_tol : float
        Tolerance for primal feasibility and multiplier signs.
    max_changes : int, optional
        Working-set change budget, default ``50 * (n + m_in)``.

    Returns
    -------
    QPSolution
        ``status`` is ``"solved"``, ``"infeasible"`` or ``"iteration-limit"``.
    """
    n, mi = qp.n, qp.m_in
    if max_changes is None:
        max_changes = 50 * (n + mi)
    eng = _Engine(qp, kkt_tol)

    candidates = []
    if warm_start is not None:
        ws = sorted({int(j) for j in warm_start if 0 <= int(j) < mi})
        candidates.append(_independent_rows(qp.A_eq, qp.A_in, ws) if ws else [])
    if not candidates or candidates[0]:
        candidates.append([])
    for W in candidates:
        try:
            s, nu, mu_w = eng.eqp(W)
        except RegularityError:
            if W:
                continue
            raise
        if eng.feasible(s) and (not W or np.min(mu_w) >= -kkt_tol):
            return _finish(qp, s, nu, mu_w, W, SOLVED, eng.changes, kkt_tol)

    start = eng.phase_one()
    if start is None:
        return QPSolution(np.zeros(n), np.zeros(qp.m_eq), np.zeros(mi), (), INFEASIBLE, eng.changes)
    s0, W0 = start
    s, nu, mu_w, W, status = eng.iterate(s0, W0, max_changes)
    return _finish(qp, s, nu, mu_w, W, status, eng.changes, kkt_tol)


def _finish(qp, s, nu, mu_w, W, status, changes, kkt_tol):
    mu = np.zeros(qp.m_in)
    if W:
        mu[W] = np.maximum(mu_w, 0.0)
    r_in = qp.A_in @ s + qp.b_in
    active = sorted(set(W) | {int(j) for j in np.flatnonzero(np.abs(r_in) <= WEAK_ACTIVE_TOL)})
    degenerate = any(mu[j] <= kkt_tol for j in active)
    return QPSolution(
        s=s,
        nu=nu,
        mu=mu,
        active_set=tuple(active),
        status=status,
        iterations=changes,
        degenerate=degenerate,
        objective=qp.objective(s),
        working_set=tuple(sorted(W)),
    )
