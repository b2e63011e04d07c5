"""Benchmark problem library.

``P1``
    Two subsystems in the plane, one nonconvex circle equality, one shared
    coordinate.
``P2``
    Four subsystems on a ring. Each owns a scalar state ``a_i`` with a
    double-well quartic cost, an auxiliary ``b_i = sin(a_i)`` with an upper
    bound, and a copy of its left neighbour's state.
``net3``
    Three-bus AC power-flow-style dispatch on a triangle network. Every bus
    keeps copies of its neighbours' voltage magnitude and angle.

:func:`load_problem` returns ``(problem, p0)`` where ``p0`` is the default
starting point: the given primal start with zero multipliers. For ``net3``
this is the power-systems flat start (unit magnitudes, zero elsewhere).

The module also holds the small generators used by the tests: random dense
QPs, a single-block convex QP posed as an NLP, and an infeasible toy.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .errors import ConfigError
from .nlp_model import PartitionedNLP, PrimalDualPoint, SubsystemModel
from .qp import DenseQP

PROBLEM_IDS = ("P1", "P2", "net3")

# ADMM penalty used by the CLI and the tests when none is given. P1 keeps the
# value reported for the power-system study; the other two have Hessians of
# order one, where 1e3 slows ADMM down by two orders of magnitude.
RECOMMENDED_RHO = {"P1": 1e3, "P2": 10.0, "net3": 10.0}


def _rows(n_c, n, entries):
    E = np.zeros((n_c, n))
    for row, col, val in entries:
        E[row, col] = val
    return E


# ---------------------------------------------------------------------------
# P1


def make_p1():
    """Circle-constrained subsystem coupled to a bounded quadratic.

    Subsystem 0 minimizes ``x0 + x1`` on the unit circle with ``x1 >= 0``,
    subsystem 1 minimizes ``(y0 - 1/2)^2 + y1^2`` with ``y1 <= 0.3`` and
    ``x0 = y0`` links them.

    The objective ties at three points, ``x = (1, 0), (0, 1), (-1, 0)``. The
    default start ``x = (1, 0.5), y = (1, 0)`` lies in the basin of
    ``x = (1, 0)``, the only one of the three where the exact method
    converges quadratically (at ``(0, 1)`` the Hessian correction stays
    active and the rate drops to linear).
    """
    sub0 = SubsystemModel(
        index=0,
        n=2,
        f=lambda x: x[0] + x[1],
        grad_f=lambda x: np.array([1.0, 1.0]),
        hess_f=lambda x: np.zeros((2, 2)),
        E=np.array([[1.0, 0.0]]),
        n_g=1,
        g=lambda x: np.array([x[0] ** 2 + x[1] ** 2 - 1.0]),
        jac_g=lambda x: np.array([[2.0 * x[0], 2.0 * x[1]]]),
        hess_g=lambda x, nu: 2.0 * nu[0] * np.eye(2),
        n_h=1,
        h=lambda x: np.array([-x[1]]),
        jac_h=lambda x: np.array([[0.0, -1.0]]),
        hess_h=lambda x, mu: np.zeros((2, 2)),
        name="circle",
    )
    sub1 = SubsystemModel(
        index=1,
        n=2,
        f=lambda y: (y[0] - 0.5) ** 2 + y[1] ** 2,
        grad_f=lambda y: np.array([2.0 * (y[0] - 0.5), 2.0 * y[1]]),
        hess_f=lambda y: 2.0 * np.eye(2),
        E=np.array([[-1.0, 0.0]]),
        n_h=1,
        h=lambda y: np.array([y[1] - 0.3]),
        jac_h=lambda y: np.array([[0.0, 1.0]]),
        hess_h=lambda y, mu: np.zeros((2, 2)),
        name="quadratic",
    )
    problem = PartitionedNLP([sub0, sub1], c=np.zeros(1), name="P1")
    x0 = [np.array([1.0, 0.5]), np.array([1.0, 0.0])]
    return problem, x0


# ---------------------------------------------------------------------------
# P2

P2_TILT = (0.3, -0.2, 0.1, -0.1)
P2_BOUND = (0.8, 0.9, 0.75, 1.0)
P2_WEIGHT = 0.5
P2_TARGET = 1.0


def _p2_subsystem(i, S):
    tau, u, w, beta = P2_TILT[i], P2_BOUND[i], P2_WEIGHT, P2_TARGET
    # x = (a, b, c): own state, its sine, copy of the left neighbour's state
    left = (i - 1) % S
    # row r ties a_r (owned by r) to its copy held by r + 1
    entries = [(i, 0, 1.0), (left, 2, -1.0)]

    def f(x):
        a, b, c = x
        return 0.25 * a**4 - 0.5 * a**2 + tau * a + 0.5 * w * (a - c) ** 2 + 0.5 * (b - beta) ** 2

    def grad_f(x):
        a, b, c = x
        return np.array([a**3 - a + tau + w * (a - c), b - beta, -w * (a - c)])

    def hess_f(x):
        a = x[0]
        return np.array([
            [3.0 * a**2 - 1.0 + w, 0.0, -w],
            [0.0, 1.0, 0.0],
            [-w, 0.0, w],
        ])

    def hess_g(x, nu):
        H = np.zeros((3, 3))
        H[0, 0] = nu[0] * np.sin(x[0])
        return H

    return SubsystemModel(
        index=i,
        n=3,
        f=f,
        grad_f=grad_f,
        hess_f=hess_f,
        E=_rows(S, 3, entries),
        n_g=1,
        g=lambda x: np.array([x[1] - np.sin(x[0])]),
        jac_g=lambda x: np.array([[-np.cos(x[0]), 1.0, 0.0]]),
        hess_g=hess_g,
        n_h=1,
        h=lambda x: np.array([x[1] - u]),
        jac_h=lambda x: np.array([[0.0, 1.0, 0.0]]),
        hess_h=lambda x, mu: np.zeros((3, 3)),
        name=f"ring{i}",
    )


def make_p2():
    """Four double-well subsystems on a ring, ``n_c = 4``.

    Default start: every state and every copy at 1, auxiliaries at 0, which
    satisfies the coupling rows.
    """
    S = 4
    subs = [_p2_subsystem(i, S) for i in range(S)]
    problem = PartitionedNLP(subs, c=np.zeros(S), name="P2")
    x0 = [np.array([1.0, 0.0, 1.0]) for _ in range(S)]
    return problem, x0


# ---------------------------------------------------------------------------
# net3

NET3_G = 1.0
NET3_B = -5.0
NET3_PD = (0.0, 0.5, 1.0)
NET3_QD = (0.0, 0.2, 0.4)
NET3_PMAX = (1.0, 0.6, 0.5)
NET3_QMAX = 0.5
NET3_VMIN, NET3_VMAX = 0.95, 1.05
NET3_C2 = (0.1, 0.2, 0.3)
NET3_C1 = (1.0, 2.0, 3.0)
NET3_CQ = 0.01
NET3_WV = 20.0
NET3_WT = 20.0


def _trig_term(vk, tk, vj, tj, alpha, beta):
    """``vk vj (alpha cos(tk - tj) + beta sin(tk - tj))`` with derivatives.

    Variables are ordered ``(vk, tk, vj, tj)``.
    """
    t = tk - tj
    A = alpha * np.cos(t) + beta * np.sin(t)
    B = -alpha * np.sin(t) + beta * np.cos(t)  # dA/dt
    val = vk * vj * A
    grad = np.array([vj * A, vk * vj * B, vk * A, -vk * vj * B])
    H = np.zeros((4, 4))
    H[0, 2] = H[2, 0] = A
    H[0, 1] = H[1, 0] = vj * B
    H[0, 3] = H[3, 0] = -vj * B
    H[2, 1] = H[1, 2] = vk * B
    H[2, 3] = H[3, 2] = -vk * B
    H[1, 1] = H[3, 3] = -vk * vj * A
    H[1, 3] = H[3, 1] = vk * vj * A
    return val, grad, H


def _net3_balance(x):
    """Active and reactive balance of one bus with derivatives.

    ``x = (v, th, p, q, v_a, th_a, v_b, th_b)``. Line flows leaving the bus
    over a series admittance ``g + j b`` are::

        P = g v^2 - v v_j (g cos t + b sin t)
        Q = -b v^2 - v v_j (g sin t - b cos t),   t = th - th_j
    """
    g, b = NET3_G, NET3_B
    v = x[0]
    vals = np.zeros(2)
    jac = np.zeros((2, 8))
    hess = np.zeros((2, 8, 8))
    # generation and the quadratic self terms
    vals[0] = x[2] - 2.0 * g * v**2
    vals[1] = x[3] + 2.0 * b * v**2
    jac[0, 0], jac[0, 2] = -4.0 * g * v, 1.0
    jac[1, 0], jac[1, 3] = 4.0 * b * v, 1.0
    hess[0, 0, 0] = -4.0 * g
    hess[1, 0, 0] = 4.0 * b
    for off in (4, 6):
        idx = [0, 1, off, off + 1]
        # P: + v v_j (g cos + b sin);  Q: + v v_j (-b cos + g sin)
        for row, (al, be) in enumerate(((g, b), (-b, g))):
            val, gr, H = _trig_term(x[0], x[1], x[off], x[off + 1], al, be)
            vals[row] += val
            jac[row, idx] += gr
            hess[row][np.ix_(idx, idx)] += H
    return vals, jac, hess


def _net3_bus(k):
    others = [j for j in range(3) if j != k]
    c2, c1, cq = NET3_C2[k], NET3_C1[k], NET3_CQ
    pd, qd = NET3_PD[k], NET3_QD[k]
    slack = k == 0
    n_g = 3 if slack else 2

    # deviation weights on magnitudes (from 1) and angles (from the reference),
    # own values and copies alike
    wdiag = np.array([NET3_WV, NET3_WT, 0.0, 0.0, NET3_WV, NET3_WT, NET3_WV, NET3_WT])
    center = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0])

    def f(x):
        dev = x - center
        return c2 * x[2] ** 2 + c1 * x[2] + cq * x[3] ** 2 + 0.5 * dev @ (wdiag * dev)

    def grad_f(x):
        out = wdiag * (x - center)
        out[2] = 2.0 * c2 * x[2] + c1
        out[3] = 2.0 * cq * x[3]
        return out

    def hess_f(x):
        H = np.diag(wdiag)
        H[2, 2] = 2.0 * c2
        H[3, 3] = 2.0 * cq
        return H

    def g_fun(x):
        vals = _net3_balance(x)[0] - np.array([pd, qd])
        return np.append(vals, x[1]) if slack else vals

    def jac_g(x):
        J = _net3_balance(x)[1]
        if slack:
            J = np.vstack([J, np.eye(8)[1]])
        return J

    def hess_g(x, nu):
        H = _net3_balance(x)[2]
        return nu[0] * H[0] + nu[1] * H[1]

    # bounds: v <= vmax, vmin <= v, p <= pmax, 0 <= p, q <= qmax, -qmax <= q
    A_in = np.zeros((6, 8))
    A_in[0, 0], A_in[1, 0] = 1.0, -1.0
    A_in[2, 2], A_in[3, 2] = 1.0, -1.0
    A_in[4, 3], A_in[5, 3] = 1.0, -1.0
    b_in = np.array([-NET3_VMAX, NET3_VMIN, -NET3_PMAX[k], 0.0, -NET3_QMAX, -NET3_QMAX])

    return SubsystemModel(
        index=k,
        n=8,
        f=f,
        grad_f=grad_f,
        hess_f=hess_f,
        E=np.zeros((0, 8)),  # filled in by make_net3
        n_g=n_g,
        g=g_fun,
        jac_g=jac_g,
        hess_g=hess_g,
        n_h=6,
        h=lambda x: A_in @ x + b_in,
        jac_h=lambda x: A_in,
        hess_h=lambda x, mu: np.zeros((8, 8)),
        name=f"bus{k}",
    ), others


def make_net3():
    """Three-bus dispatch on a triangle with duplicated neighbour voltages.

    Each bus ``k`` owns ``(v_k, th_k, p_k, q_k)`` and copies ``(v_j, th_j)``
    of the two other buses, in increasing bus order. Bus 0 is the angle
    reference. Coupling rows (12 of them) tie each owned magnitude and angle
    to both of its copies.
    """
    built = [_net3_bus(k) for k in range(3)]
    entries = {k: [] for k in range(3)}
    row = 0
    for owner in range(3):
        for var in (0, 1):
            for copier, (_, others) in enumerate(built):
                if copier == owner:
                    continue
                slot = 4 + 2 * others.index(owner) + var
                entries[owner].append((row, var, 1.0))
                entries[copier].append((row, slot, -1.0))
                row += 1
    subs = []
    for k, (model, _) in enumerate(built):
        subs.append(replace(model, E=_rows(row, 8, entries[k])))
    problem = PartitionedNLP(subs, c=np.zeros(row), name="net3")
    x0 = [np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]) for _ in range(3)]
    return problem, x0


_FACTORIES = {"P1": make_p1, "P2": make_p2, "net3": make_net3}


def load_problem(problem_id):
    """Library instance and its default starting point.

    Returns
    -------
    problem : PartitionedNLP
    p0 : PrimalDualPoint
        Default primal start with all multipliers zero.
    """
    try:
        factory = _FACTORIES[problem_id]
    except KeyError:
        raise ConfigError(f"unknown problem id {problem_id!r}; expected one of {PROBLEM_IDS}") from None
    problem, x0 = factory()
    return problem, PrimalDualPoint.zeros_like(problem, x0)


# ---------------------------------------------------------------------------
# generators for tests


def random_qp(seed, n=None, m_eq=None, m_in=None, feasible=True):
    """Seed-fixed strictly convex QP.

    Inequalities are built around a random point so the instance is
    feasible when ``feasible`` is true.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9)) if n is None else n
    m_eq = int(rng.integers(0, min(3, n - 1) + 1)) if m_eq is None else m_eq
    m_in = int(rng.integers(0, 7)) if m_in is None else m_in
    M = rng.standard_normal((n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    q = rng.standard_normal(n)
    A_eq = rng.standard_normal((m_eq, n))
    A_in = rng.standard_normal((m_in, n))
    z = rng.standard_normal(n)
    b_eq = -A_eq @ z
    slack = rng.uniform(0.0, 1.0, m_in)
    b_in = -A_in @ z - slack
    if not feasible and m_in:
        A_in = np.vstack([A_in, -A_in[:1]])
        b_in = np.append(b_in, -b_in[0] + 1.0)
    return DenseQP(H, q, A_eq, b_eq, A_in, b_in)


def qp_as_problem(qp, name="qp"):
    """A single-subsystem NLP with the data of a :class:`DenseQP`."""
    H, q = qp.H, qp.q
    A_eq, b_eq, A_in, b_in = qp.A_eq, qp.b_eq, qp.A_in, qp.b_in
    n = qp.n
    sub = SubsystemModel(
        index=0,
        n=n,
        f=lambda x: 0.5 * x @ H @ x + q @ x,
        grad_f=lambda x: H @ x + q,
        hess_f=lambda x: H,
        E=np.zeros((0, n)),
        n_g=A_eq.shape[0],
        g=lambda x: A_eq @ x + b_eq,
        jac_g=lambda x: A_eq,
        hess_g=lambda x, nu: np.zeros((n, n)),
        n_h=A_in.shape[0],
        h=lambda x: A_in @ x + b_in,
        jac_h=lambda x: A_in,
        hess_h=lambda x, mu: np.zeros((n, n)),
        name=name,
    )
    return PartitionedNLP([sub], c=np.zeros(0), name=name)


def make_infeasible_toy():
    """``min x^2`` subject to ``x^2 + 1 = 0``: no real feasible point."""
    sub = SubsystemModel(
        index=0,
        n=1,
        f=lambda x: float(x[0] ** 2),
        grad_f=lambda x: np.array([2.0 * x[0]]),
        hess_f=lambda x: np.array([[2.0]]),
        E=np.zeros((0, 1)),
        n_g=1,
        g=lambda x: np.array([x[0] ** 2 + 1.0]),
        jac_g=lambda x: np.array([[2.0 * x[0]]]),
        hess_g=lambda x, nu: np.array([[2.0 * nu[0]]]),
        name="infeasible",
    )
    return PartitionedNLP([sub], c=np.zeros(0), name="infeasible-toy")
