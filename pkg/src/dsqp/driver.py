"""Outer SQP loops: decentralized (ADMM inner solves) and exact baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.linalg

from .admm_inner import L_MAX_DEFAULT, run_inner
from .comm_sim import CommLayer, CommStats
from .errors import (
    ConfigError,
    DsqpError,
    EvaluationError,
    InnerStallError,
    QPInfeasibleError,
    RegularityError,
)
from .kkt_residuals import Direction, eval_F, eval_Ftilde_blocks, local_modified_criterion
from .nlp_model import evaluate_all, regularize_block
from .qp import DenseQP, solve_qp

_log = logging.getLogger(__name__)

CONVERGED = "converged"
OUTER_LIMIT = "outer-limit"
INNER_STALL = "inner-stall"
EVALUATION_FAILURE = "evaluation-failure"
LINEARIZATION_FAILURE = "linearization-failure"

SCHEDULES = ("constant", "geometric", "residual")
ETA_FLOOR = 1e-12
ETA_CEIL = 1.0 - 1e-6


@dataclass
class SqpConfig:
    """Settings of one d-SQP run.

    ``schedule_param`` is the decay factor for ``"geometric"`` and the
    scale ``a`` in ``eta = min(eta0, a ||F~||)`` for ``"residual"``; it is
    ignored for ``"constant"``. ``inner_abs_tol`` is an absolute floor for
    the inner test (``None`` means ``eps / 100``); it only matters once the
    relative threshold drops below what round-off lets ADMM reach.
    """

    eps: float = 1e-8
    eta0: float = 0.8
    schedule: str = "geometric"
    schedule_param: float = 0.9
    rho: float = 1e3
    delta: float = 1e-4
    k_max: int = 100
    l_max: int = L_MAX_DEFAULT
    admm_init: str = "paper"
    stall_policy: str = "abort"
    inner_abs_tol: float = None
    coupling: str = "auto"
    kkt_tol: float = 1e-10

    def validate(self):
        if not 0.0 < self.eta0 < 1.0:
            raise ConfigError("eta0 out of (0,1)")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.schedule == "geometric" and not 0.0 < self.schedule_param < 1.0:
            raise ConfigError("geometric factor out of (0,1)")
        if self.schedule == "residual" and not self.schedule_param > 0.0:
            raise ConfigError("residual scale must be positive")
        for name in ("rho", "delta", "eps"):
            if not getattr(self, name) > 0.0:
                raise ConfigError(f"{name} must be positive")
        if self.k_max < 0 or self.l_max < 1:
            raise ConfigError("iteration caps must be positive")
        if self.admm_init not in ("paper", "warm"):
            raise ConfigError("admm_init must be 'paper' or 'warm'")
        if self.stall_policy not in ("abort", "accept"):
            raise ConfigError("stall_policy must be 'abort' or 'accept'")
        if self.coupling not in ("auto", "averaging", "coordination"):
            raise ConfigError("coupling must be auto, averaging or coordination")
        return self

    @property
    def abs_tol(self):
        return self.eps / 100 if self.inner_abs_tol is None else self.inner_abs_tol

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def update_eta(eta, schedule, ftilde_norm, eta0=0.8, param=0.9):
    """Next forcing term.

    ``constant`` keeps ``eta``; ``geometric`` multiplies by ``param`` (floored
    at 1e-12); ``residual`` returns ``min(eta0, param * ||F~||)`` clamped to
    ``[1e-12, 1 - 1e-6]``.
    """
    if schedule == "constant":
        return eta
    if schedule == "geometric":
        return max(param * eta, ETA_FLOOR)
    if schedule == "residual":
        return min(max(min(eta0, param * ftilde_norm), ETA_FLOOR), ETA_CEIL)
    raise ConfigError(f"unknown schedule {schedule!r}")


@dataclass
class OuterRecord:
    k: int
    F_norm: float
    Ftilde_norm: float
    eta: float
    inner_iterations: int
    active_set_changes: int
    cumulative_floats: int
    cumulative_inner: int
    stalled: bool = False


@dataclass
class SolveResult:
    point: object
    status: str
    trace: list = field(default_factory=list)
    inner_trace: list = field(default_factory=list)
    comm: CommStats = field(default_factory=CommStats)
    iterates: list = field(default_factory=list)
    message: str = ""

    @property
    def converged(self):
        return self.status == CONVERGED

    @property
    def outer_iterations(self):
        """Accepted steps; ``iterates`` and ``trace`` also hold the starting point."""
        return max(len(self.iterates) - 1, 0)

    @property
    def inner_iterations(self):
        return sum(len(t) for t in self.inner_trace)

    @property
    def final_residual(self):
        return self.trace[-1].F_norm if self.trace else float("nan")


def _converged(F, eps):
    return F.norm() <= eps


def run_dsqp(problem, p0, config=None):
    """Decentralized SQP with ADMM inner iterations and the inexact stopping test.

    Parameters
    ----------
    problem : PartitionedNLP
    p0 : PrimalDualPoint
    config : SqpConfig, optional

    Returns
    -------
    SolveResult
        ``status`` is one of ``converged``, ``outer-limit``, ``inner-stall``,
        ``evaluation-failure`` or ``linearization-failure``. Failed runs carry
        the partial trace and the last iterate.
    """
    config = (config or SqpConfig()).validate()
    p0.check_dims(problem)
    p = p0.copy()
    comm = CommLayer(problem)
    S = problem.S
    result = SolveResult(point=p, status=OUTER_LIMIT, comm=comm.stats)
    eta = config.eta0
    prev_active = None
    warm_sets = None
    last_step = None
    inner_total = 0

    for k in range(config.k_max + 1):
        try:
            F = eval_F(problem, p)
        except EvaluationError as exc:
            result.status, result.message = EVALUATION_FAILURE, str(exc)
            break
        local_ok = [F.subsystem_norm(i) <= config.eps for i in range(S)]
        cpl_ok = float(np.max(np.abs(F.cpl), initial=0.0)) <= config.eps
        done, _ = comm.allreduce_flags([ok and cpl_ok for ok in local_ok])
        result.iterates.append(p.copy())
        row = OuterRecord(k, F.norm(), F.tilde_norm(), float("nan"), 0, 0, comm.stats.floats_sent_total, inner_total)
        result.trace.append(row)
        if done:
            result.status = CONVERGED
            break
        if k == config.k_max:
            result.status = OUTER_LIMIT
            break

        try:
            pack = [regularize_block(b, config.delta) for b in evaluate_all(problem, p)]
        except (EvaluationError, RegularityError) as exc:
            result.status, result.message = EVALUATION_FAILURE, str(exc)
            break
        fblocks = eval_Ftilde_blocks(pack, p)
        ft_norm = max(max(fb.norm for fb in fblocks), float(np.max(np.abs(F.cpl), initial=0.0)))
        if config.schedule == "residual":
            eta = update_eta(eta, "residual", ft_norm, config.eta0, config.schedule_param)
        elif k > 0:
            eta = update_eta(eta, config.schedule, ft_norm, config.eta0, config.schedule_param)
        row.eta = eta

        def stop(state, fblocks=fblocks, eta=eta, p=p):
            return [
                local_modified_criterion(
                    fblocks[i],
                    Direction.from_iterates(state.s_bar[i], state.nu_qp[i], state.mu_qp[i], state.gamma[i], p, i),
                    eta,
                    config.abs_tol,
                )
                for i in range(S)
            ]

        s_bar0 = last_step if (config.admm_init == "warm" and last_step is not None) else None
        try:
            state, inner = run_inner(
                problem, pack, p.x, p.gamma, config.rho, stop,
                l_max=config.l_max, s_bar_init=s_bar0, warm_sets=warm_sets,
                prev_active=prev_active, coupling=config.coupling, comm=comm,
                kkt_tol=config.kkt_tol,
            )
        except InnerStallError as exc:
            state, inner = exc.state, exc.trace
            row.stalled = True
            if config.stall_policy == "abort":
                result.inner_trace.append(inner)
                _fill_row(row, inner, comm, inner_total)
                result.status, result.message = INNER_STALL, f"outer iteration {k}: {exc}"
                break
        except QPInfeasibleError as exc:
            result.status, result.message = LINEARIZATION_FAILURE, f"outer iteration {k}: {exc}"
            break
        except RegularityError as exc:
            result.status, result.message = LINEARIZATION_FAILURE, f"outer iteration {k}: {exc}"
            break
        result.inner_trace.append(inner)
        inner_total += len(inner)
        _fill_row(row, inner, comm, inner_total)

        p = p.copy()
        for i in range(S):
            p.x[i] = p.x[i] + state.s_bar[i]
            p.nu[i] = state.nu_qp[i].copy()
            p.mu[i] = state.mu_qp[i].copy()
            p.gamma[i] = state.gamma[i].copy()
        result.point = p
        prev_active = state.active_sets
        warm_sets = state.active_sets
        last_step = [v.copy() for v in state.s_bar]

    result.point = p
    return result


def _fill_row(row, inner, comm, inner_total):
    row.inner_iterations = len(inner)
    row.active_set_changes = sum(r.active_set_changes for r in inner)
    row.cumulative_floats = comm.stats.floats_sent_total
    row.cumulative_inner = inner_total


def coupled_qp(problem, pack, p):
    """Monolithic SQP subproblem over all subsystems.

    Equality rows are the stacked local equalities followed by the coupling
    rows, so the multipliers split into ``(nu_1, ..., nu_S, lambda)``.
    """
    H = scipy.linalg.block_diag(*[b.hess for b in pack])
    q = np.concatenate([b.grad_f for b in pack])
    Jg = scipy.linalg.block_diag(*[b.jac_g for b in pack]) if any(b.jac_g.size for b in pack) else np.zeros((0, problem.n))
    Jg = Jg.reshape(-1, problem.n)
    Jh = scipy.linalg.block_diag(*[b.jac_h for b in pack]).reshape(-1, problem.n)
    A_eq = np.vstack([Jg, problem.E])
    b_eq = np.concatenate([*[b.g for b in pack], problem.coupling_residual(p.x)])
    return DenseQP(H, q, A_eq, b_eq, Jh, np.concatenate([b.h for b in pack]))


def split_coupled_solution(problem, sol):
    """``(s, nu, mu, lam)`` per subsystem from a :func:`coupled_qp` solution."""
    subs = problem.subsystems
    s = problem.split(sol.s)
    ng = sum(sub.n_g for sub in subs)
    nu = problem.split(sol.nu[:ng], [sub.n_g for sub in subs])
    mu = problem.split(sol.mu, [sub.n_h for sub in subs])
    return s, nu, mu, sol.nu[ng:]


def baseline_sqp(problem, p0, eps=1e-8, k_max=100, delta=1e-4, kkt_tol=1e-10):
    """Exact SQP: every subproblem solved monolithically by the dense QP solver.

    Returns a :class:`SolveResult` whose ``iterates`` hold every outer point.
    An infeasible subproblem ends the run with ``linearization-failure``.
    """
    p = p0.copy()
    result = SolveResult(point=p, status=OUTER_LIMIT)
    warm = None
    for k in range(k_max + 1):
        try:
            F = eval_F(problem, p)
        except EvaluationError as exc:
            result.status, result.message = EVALUATION_FAILURE, str(exc)
            break
        result.iterates.append(p.copy())
        result.trace.append(OuterRecord(k, F.norm(), F.tilde_norm(), 0.0, 0, 0, 0, 0))
        if _converged(F, eps):
            result.status = CONVERGED
            break
        if k == k_max:
            break
        try:
            pack = [regularize_block(b, delta) for b in evaluate_all(problem, p)]
            sol = solve_qp(coupled_qp(problem, pack, p), warm_start=warm, kkt_tol=kkt_tol)
        except (EvaluationError, RegularityError) as exc:
            result.status, result.message = LINEARIZATION_FAILURE, f"iteration {k}: {exc}"
            break
        if not sol.ok:
            result.status, result.message = LINEARIZATION_FAILURE, f"iteration {k}: QP {sol.status}"
            break
        if k:
            result.trace[-1].active_set_changes = len(set(sol.active_set) ^ set(prev_set))
        prev_set = sol.active_set
        warm = sol.working_set
        s, nu, mu, lam = split_coupled_solution(problem, sol)
        p = p.copy()
        for i, sub in enumerate(problem.subsystems):
            p.x[i] = p.x[i] + s[i]
            p.nu[i] = nu[i]
            p.mu[i] = mu[i]
            p.gamma[i] = sub.E.T @ lam
    result.point = p
    return result


def error_sequence(iterates, p_star):
    ref = p_star.as_vector()
    return [float(np.max(np.abs(q.as_vector() - ref), initial=0.0)) for q in iterates]


@dataclass
class RateReport:
    errors: list
    linear_ratios: list
    quadratic_factors: list
    slope: float
    classification: str
    usable: int

    @property
    def sufficient(self):
        return self.classification != "insufficient-data"

    def tail(self, values, n=3):
        return values[-n:]


def estimate_rate(errors, floor=1e-12, tail=3):
    """Classify the convergence of an error sequence.

    Only the prefix of errors above ``floor`` is used. Ratios
    ``e_{k+1}/e_k`` and ``e_{k+1}/e_k^2`` are reported for every usable
    pair, and the slope of ``log e_{k+1}`` against ``log e_k`` is fitted
    over the last ``tail + 1`` pairs.

    Classification (heuristic): ``q-quadratic`` when the tail ratios fall
    below 0.1 and the tail quadratic factors lie in ``[1e-3, 1e3]``;
    ``q-superlinear`` when the ratios fall below 0.1 otherwise; ``q-linear``
    when the tail ratios stay at or below 0.9; ``unclassified`` else.
    """
    usable = []
    for e in errors:
        if not e > floor:
            break
        usable.append(float(e))
    if len(usable) < 4:
        return RateReport(usable, [], [], float("nan"), "insufficient-data", len(usable))
    ratios = [b / a for a, b in zip(usable, usable[1:])]
    quad = [b / a**2 for a, b in zip(usable, usable[1:])]
    m = min(len(ratios), tail + 1)
    xs = np.log(usable[-m - 1:-1])
    ys = np.log(usable[-m:])
    slope = float(np.polyfit(xs, ys, 1)[0]) if m >= 2 else float("nan")
    tr, tq = ratios[-tail:], quad[-tail:]
    decreasing = all(b <= a for a, b in zip(tr, tr[1:]))
    if tr[-1] < 0.1 and decreasing:
        cls = "q-quadratic" if all(1e-3 <= v <= 1e3 for v in tq) else "q-superlinear"
    elif max(tr) <= 0.9:
        cls = "q-linear"
    else:
        cls = "unclassified"
    return RateReport(usable, ratios, quad, slope, cls, len(usable))
