"""ADMM on the copy-split SQP subproblem.

Each outer iteration hands this module the local quadratic models. ADMM
alternates three updates:

* local step: every subsystem solves its own QP with the proximal term
  ``rho/2 |s_i - s_bar_i|^2`` and the multiplier ``gamma_i``;
* coupling step: the copies ``s_bar`` are projected onto the coupling
  constraints (a neighbor averaging in consensus form, a small equality QP
  otherwise);
* dual step: ``gamma_i += rho (s_i - s_bar_i)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CoordinationInfeasibleError,
    DsqpError,
    InnerInfeasibleError,
    InnerStallError,
    NotConsensusError,
    RegularityError,
)
from .qp import INFEASIBLE, DenseQP, solve_eq_qp, solve_qp

_log = logging.getLogger(__name__)

L_MAX_DEFAULT = 10_000


@dataclass
class AdmmState:
    l: int
    s: list
    s_bar: list
    gamma: list
    nu_qp: list
    mu_qp: list
    active_sets: list
    rho: float


@dataclass
class LocalQpParams:
    s_bar: np.ndarray
    gamma: np.ndarray


@dataclass
class InnerRecord:
    l: int
    criteria: list
    flags: list
    primal_residual: float
    dual_residual: float
    active_set_changes: int
    floats: int = 0


def local_step(block, params, rho, warm=None, kkt_tol=1e-10):
    """Solve the local QP of one subsystem.

    Minimizes ``1/2 s^T (H + rho I) s + (grad f + gamma - rho s_bar)^T s``
    over the linearized local constraints.

    Raises
    ------
    InnerInfeasibleError
        If the linearized constraints are inconsistent.
    """
    n = block.n
    qp = DenseQP(
        H=block.hess + rho * np.eye(n),
        q=block.grad_f + params.gamma - rho * params.s_bar,
        A_eq=block.jac_g,
        b_eq=block.g,
        A_in=block.jac_h,
        b_in=block.h,
    )
    sol = solve_qp(qp, warm_start=warm, kkt_tol=kkt_tol)
    if sol.status == INFEASIBLE:
        raise InnerInfeasibleError(block.index)
    if not sol.ok:
        raise DsqpError(f"local QP of subsystem {block.index}: {sol.status}")
    return sol


def consensus_groups(problem):
    """Sets of coordinates tied together by consensus rows.

    Each group is a sorted tuple of ``(subsystem, coordinate)`` pairs; rows
    that share a coordinate end up in the same group, so the projection onto
    the consensus set is the group mean.
    """
    if not problem.is_consensus:
        raise NotConsensusError("problem has no consensus metadata; use coordination_step")
    parent = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for pair in problem.consensus:
        a, b = (pair.owner, pair.owner_coord), (pair.copier, pair.copier_coord)
        parent.setdefault(a, a)
        parent.setdefault(b, b)
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups = {}
    for node in parent:
        groups.setdefault(find(node), []).append(node)
    return [tuple(sorted(g)) for _, g in sorted(groups.items())]


def group_mean(values):
    """Correctly rounded mean; independent of summation order."""
    return math.fsum(values) / len(values)


def averaging_step(problem, s, x, groups=None):
    """Consensus projection of the copies.

    Paired coordinates of ``x + s`` are replaced by their group mean and
    shifted back by ``x``; unpaired coordinates copy ``s``. The result
    satisfies ``sum_i E_i (x_i + s_bar_i) = c`` up to round-off even when
    ``x`` itself is not consensus-feasible.
    """
    if groups is None:
        groups = consensus_groups(problem)
    s_bar = [np.array(si, dtype=float) for si in s]
    for grp in groups:
        m = group_mean([x[i][j] + s[i][j] for i, j in grp])
        for i, j in grp:
            s_bar[i][j] = m - x[i][j]
    return s_bar


def coordination_step(problem, s, gamma, rho, x):
    """Minimize ``sum_i rho/2 |s_i - s_bar_i|^2 - gamma_i^T s_bar_i`` subject to coupling.

    Solved as one equality QP over all copies. With ``n_c = 0`` the answer is
    ``s + gamma / rho``.
    """
    sizes = [sub.n for sub in problem.subsystems]
    s_vec = np.concatenate(s)
    g_vec = np.concatenate(gamma)
    n = s_vec.size
    if problem.n_c == 0:
        return problem.split(s_vec + g_vec / rho, sizes)
    E = problem.E
    b = E @ np.concatenate(x) - problem.c
    try:
        s_bar, _ = solve_eq_qp(rho * np.eye(n), -(rho * s_vec + g_vec), E, b)
    except RegularityError as exc:
        z, *_ = np.linalg.lstsq(E, -b, rcond=None)
        if np.max(np.abs(E @ z + b)) > 1e-9 * (1 + np.max(np.abs(b))):
            raise CoordinationInfeasibleError("coupling rows are inconsistent") from exc
        raise
    return problem.split(s_bar, sizes)


def dual_step(gamma, s, s_bar, rho):
    """``gamma + rho (s - s_bar)``, applied blockwise for lists."""
    if isinstance(gamma, (list, tuple)):
        return [g + rho * (si - sbi) for g, si, sbi in zip(gamma, s, s_bar)]
    return gamma + rho * (np.asarray(s) - np.asarray(s_bar))


def in_consensus_range(problem, gamma, tol=1e-9):
    """Whether ``gamma`` lies in the range of ``E^T`` for a consensus problem.

    Such vectors vanish on unpaired coordinates and sum to zero over every
    consensus group. The tolerance is relative to ``1 + max|gamma|``; dual
    steps with a large ``rho`` accumulate round-off of order 1e-12 in the
    group sums, which must not switch the coupling update.
    """
    groups = consensus_groups(problem)
    paired = {node for grp in groups for node in grp}
    scale = 1.0 + max((np.max(np.abs(g), initial=0.0) for g in gamma), default=0.0)
    for i, g in enumerate(gamma):
        for j in range(g.size):
            if (i, j) not in paired and abs(g[j]) > tol * scale:
                return False
    return all(abs(math.fsum(gamma[i][j] for i, j in grp)) <= tol * scale for grp in groups)


def _toggles(prev, cur):
    if prev is None:
        return 0
    return sum(len(set(a) ^ set(b)) for a, b in zip(prev, cur))


def run_inner(
    problem,
    pack,
    x,
    gamma_init,
    rho,
    stop,
    l_max=L_MAX_DEFAULT,
    s_bar_init=None,
    warm_sets=None,
    prev_active=None,
    coupling="auto",
    comm=None,
    kkt_tol=1e-10,
    min_iter=1,
):
    """ADMM loop for one outer iteration.

    Parameters
    ----------
    problem : PartitionedNLP
    pack : list of SensitivityBlock
        Local models at the common linearization point ``x``.
    x : list of ndarray
    gamma_init : list of ndarray
        Starting multipliers ``gamma_i^0``.
    rho : float
    stop : callable
        ``stop(state) -> list`` of per-subsystem results, each either a bool
        or an object with a ``passed`` attribute. Called after every
        iteration.
    l_max : int
    s_bar_init : list of ndarray, optional
        Starting copies, zero by default.
    warm_sets : list, optional
        Active-set guesses for the first local solves.
    prev_active : list, optional
        Active sets of the previous inner iteration (for toggle counting
        across outer iterations).
    coupling : {"auto", "averaging", "coordination"}
    comm : CommLayer, optional
        Routes the averaging and the flag reduction through the simulated
        network and accounts the traffic.

    Returns
    -------
    state : AdmmState
    trace : list of InnerRecord

    Raises
    ------
    InnerStallError
        When ``l_max`` iterations pass without the stopping test holding.
    """
    S = problem.S
    if coupling == "auto":
        use_avg = problem.is_consensus and in_consensus_range(problem, gamma_init)
    elif coupling == "averaging":
        if not problem.is_consensus:
            raise NotConsensusError("averaging requested for a non-consensus problem")
        use_avg = True
    elif coupling == "coordination":
        use_avg = False
    else:
        raise ValueError(f"unknown coupling mode {coupling!r}")
    if comm is not None and not use_avg:
        comm.mark_centralized()
    groups = consensus_groups(problem) if use_avg else None

    s_bar = [np.zeros(b.n) for b in pack] if s_bar_init is None else [np.array(v, dtype=float) for v in s_bar_init]
    gamma = [np.array(g, dtype=float) for g in gamma_init]
    warm = list(warm_sets) if warm_sets is not None else [None] * S
    prev = prev_active
    trace = []
    state = AdmmState(0, [np.zeros(b.n) for b in pack], s_bar, gamma,
                      [np.zeros(b.jac_g.shape[0]) for b in pack],
                      [np.zeros(b.jac_h.shape[0]) for b in pack],
                      [tuple() for _ in pack], rho)
    for l in range(1, l_max + 1):
        sols = [local_step(blk, LocalQpParams(s_bar[i], gamma[i]), rho, warm[i], kkt_tol)
                for i, blk in enumerate(pack)]
        s = [sol.s for sol in sols]
        floats = 0
        if use_avg:
            if comm is not None:
                s_bar_new, delta = comm.exchange_and_average(s, x)
                floats = delta.floats_sent_total
            else:
                s_bar_new = averaging_step(problem, s, x, groups)
        else:
            s_bar_new = coordination_step(problem, s, gamma, rho, x)
        gamma_new = dual_step(gamma, s, s_bar_new, rho)
        active = [sol.active_set for sol in sols]
        dual_res = max((np.max(np.abs(a - b), initial=0.0) for a, b in zip(gamma_new, gamma)), default=0.0)
        primal_res = max((np.max(np.abs(a - b), initial=0.0) for a, b in zip(s, s_bar_new)), default=0.0)
        toggles = _toggles(prev, active)
        s_bar, gamma, prev = s_bar_new, gamma_new, active
        warm = [sol.working_set for sol in sols]
        state = AdmmState(l, s, s_bar, gamma, [sol.nu for sol in sols], [sol.mu for sol in sols], active, rho)
        results = stop(state)
        flags = [bool(getattr(r, "passed", r)) for r in results]
        done = comm.allreduce_flags(flags)[0] if comm is not None else all(flags)
        trace.append(InnerRecord(
            l=l,
            criteria=[float(getattr(r, "lhs", float("nan"))) for r in results],
            flags=flags,
            primal_residual=float(primal_res),
            dual_residual=float(dual_res),
            active_set_changes=toggles,
            floats=floats,
        ))
        if done and l >= min_iter:
            return state, trace
    raise InnerStallError(state, trace)
