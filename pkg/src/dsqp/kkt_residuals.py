"""KKT residual maps, their linearizations, and the inexact-Newton stopping tests.

Two residual maps are used. The full map ``F`` stacks, per subsystem,
stationarity, equality values and the complementarity rows
``min(-h_i, mu_i)``, plus the global coupling residual. The reduced map
``F~`` drops the complementarity rows, which makes it differentiable
everywhere and lets every subsystem evaluate its share of the stopping
test on its own.

All norms are infinity norms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

COUPLING_DEBUG_TOL = 1e-10


def _inf(v):
    return float(np.max(np.abs(v), initial=0.0))


@dataclass
class ResidualBlocks:
    stat: list
    eq: list
    comp: list
    cpl: np.ndarray

    def subsystem_norm(self, i, full=True):
        parts = [_inf(self.stat[i]), _inf(self.eq[i])]
        if full:
            parts.append(_inf(self.comp[i]))
        return max(parts)

    def norm(self):
        """``||F||_inf`` over every block, coupling row included."""
        local = max((self.subsystem_norm(i) for i in range(len(self.stat))), default=0.0)
        return max(local, _inf(self.cpl))

    def tilde_norm(self):
        """``||F~||_inf``: the same blocks without the complementarity rows."""
        local = max((self.subsystem_norm(i, full=False) for i in range(len(self.stat))), default=0.0)
        return max(local, _inf(self.cpl))

    def as_vector(self, full=True):
        parts = []
        for i in range(len(self.stat)):
            parts += [self.stat[i], self.eq[i]]
            if full:
                parts.append(self.comp[i])
        parts.append(self.cpl)
        return np.concatenate(parts)


def stationarity(model, x, nu, mu, gamma):
    return (
        np.asarray(model.grad_f(x), dtype=float).reshape(model.n)
        + model.eval_jac_g(x).T @ nu
        + model.eval_jac_h(x).T @ mu
        + gamma
    )


def eval_F(problem, p):
    """Evaluate the full KKT residual map at ``p``."""
    stat, eq, comp = [], [], []
    for i, sub in enumerate(problem.subsystems):
        x = p.x[i]
        stat.append(stationarity(sub, x, p.nu[i], p.mu[i], p.gamma[i]))
        eq.append(sub.eval_g(x))
        comp.append(np.minimum(-sub.eval_h(x), p.mu[i]))
    return ResidualBlocks(stat, eq, comp, problem.coupling_residual(p.x))


@dataclass
class FtildeBlock:
    """Local residual ``F~_i = (stat_i, g_i)`` and the pieces of its Jacobian.

    The Jacobian with respect to ``(x_i, nu_i, mu_i)`` is::

        [ H_i   J_g^T  J_h^T ]
        [ J_g   0      0     ]

    and the coupling multiplier enters the stationarity rows through
    ``gamma_i`` with an identity block.
    """

    index: int
    stat: np.ndarray
    eq: np.ndarray
    hess: np.ndarray
    jac_g: np.ndarray
    jac_h: np.ndarray
    E: np.ndarray = None

    @property
    def value(self):
        return np.concatenate([self.stat, self.eq])

    @property
    def norm(self):
        return _inf(self.value)

    def jacobian(self):
        """Dense ``dF~_i / d(x_i, nu_i, mu_i, gamma_i)``."""
        n, mg, mh = self.hess.shape[0], self.jac_g.shape[0], self.jac_h.shape[0]
        J = np.zeros((n + mg, n + mg + mh + n))
        J[:n, :n] = self.hess
        J[:n, n:n + mg] = self.jac_g.T
        J[:n, n + mg:n + mg + mh] = self.jac_h.T
        J[:n, n + mg + mh:] = np.eye(n)
        J[n:, :n] = self.jac_g
        return J

    def linearized(self, d):
        """``F~_i + dF~_i d_i`` with the coupling term entering as ``d.dgamma``."""
        r_stat = self.stat + self.hess @ d.s + self.jac_g.T @ d.dnu + self.jac_h.T @ d.dmu + d.dgamma
        r_eq = self.eq + self.jac_g @ d.s
        return np.concatenate([r_stat, r_eq])


def eval_Ftilde_blocks(pack, p):
    """Build ``F~_i`` and its Jacobian blocks for every subsystem.

    ``pack`` is the list of sensitivity blocks evaluated at ``p.x``. The
    Hessian in the Jacobian is whatever the pack carries, so a regularized
    pack yields the Jacobian of the regularized model.
    """
    out = []
    for blk in pack:
        i = blk.index
        stat = blk.grad_f + blk.jac_g.T @ p.nu[i] + blk.jac_h.T @ p.mu[i] + p.gamma[i]
        out.append(FtildeBlock(i, stat, blk.g.copy(), blk.hess, blk.jac_g, blk.jac_h))
    return out


@dataclass
class Direction:
    """Per-subsystem step ``(s_i, dnu_i, dmu_i)`` plus ``dgamma_i = E_i^T dlambda``."""

    s: np.ndarray
    dnu: np.ndarray
    dmu: np.ndarray
    dgamma: np.ndarray

    @classmethod
    def from_iterates(cls, s, nu_new, mu_new, gamma_new, p, i):
        return cls(
            np.asarray(s, dtype=float),
            np.asarray(nu_new, dtype=float) - p.nu[i],
            np.asarray(mu_new, dtype=float) - p.mu[i],
            np.asarray(gamma_new, dtype=float) - p.gamma[i],
        )

    @classmethod
    def zero(cls, n, n_g, n_h):
        return cls(np.zeros(n), np.zeros(n_g), np.zeros(n_h), np.zeros(n))


@dataclass
class CriterionValue:
    passed: bool
    lhs: float
    ftilde_norm: float
    eta: float


def check_eta(eta):
    if not 0.0 < eta < 1.0:
        raise ConfigError(f"eta {eta} out of (0,1)")


def local_modified_criterion(fblock, d, eta, abs_tol=0.0):
    """Subsystem share of ``||F~ + dF~ d|| <= eta ||F~||``.

    Valid as a decomposition of the global test only while the coupled
    copies are feasible, ``sum_i E_i (x_i + s_i) = c``; the coupling row of
    the linearization then vanishes.

    ``abs_tol`` accepts a residual below an absolute floor; with the
    default of zero the test is exactly the relative one.
    """
    check_eta(eta)
    lhs = _inf(fblock.linearized(d))
    ref = fblock.norm
    return CriterionValue(lhs <= max(eta * ref, abs_tol), lhs, ref, eta)


def global_modified_residual(problem, fblocks, directions, p, check_coupling=False):
    """Monolithic ``||F~ + dF~ d||_inf`` including the coupling row."""
    parts = [fb.linearized(d) for fb, d in zip(fblocks, directions)]
    cpl = problem.coupling_residual([xi + d.s for xi, d in zip(p.x, directions)])
    if check_coupling and _inf(cpl) >= COUPLING_DEBUG_TOL:
        raise AssertionError(f"coupling residual {_inf(cpl):.3e} of the step is not zero")
    parts.append(cpl)
    return _inf(np.concatenate(parts)) if parts else 0.0


def full_newton_residual(problem, p, fblocks, directions, active_sets):
    """``F + dF d`` with complementarity-row derivatives picked by active set.

    For ``j`` in the active set the row ``min(-h_j, mu_j)`` is differentiated
    as ``-h_j``; otherwise as ``mu_j``.
    """
    F = eval_F(problem, p)
    parts = []
    for i, (fb, d) in enumerate(zip(fblocks, directions)):
        parts.append(fb.linearized(d))
        comp = F.comp[i].copy()
        act = set(active_sets[i])
        for j in range(comp.size):
            if j in act:
                comp[j] -= fb.jac_h[j] @ d.s
            else:
                comp[j] += d.dmu[j]
        parts.append(comp)
    parts.append(problem.coupling_residual([xi + d.s for xi, d in zip(p.x, directions)]))
    return np.concatenate(parts), F


@dataclass
class ImplicationReport:
    active_set_ok: bool
    violations: list = field(default_factory=list)
    modified_lhs: float = float("nan")
    modified_rhs: float = float("nan")
    full_lhs: float = float("nan")
    full_rhs: float = float("nan")
    modified_passed: bool = False
    full_passed: bool = False
    ftilde_norm: float = float("nan")
    f_norm: float = float("nan")

    @property
    def implication_holds(self):
        """True unless the modified test passed while the full one failed."""
        if not self.active_set_ok:
            return None
        return (not self.modified_passed) or self.full_passed


def check_lemma2_implication(problem, p, pack, directions, active_sets, eta, tol=1e-9):
    """Check that the reduced stopping test implies the full one.

    Parameters
    ----------
    problem, p
        Problem and the current outer iterate.
    pack
        Sensitivities at ``p.x``.
    directions : list of Direction
        Step built from an (inexact) subproblem solution.
    active_sets : list of sequences
        Oracle active sets at the solution.
    eta : float
        Forcing term.

    The step must reproduce the oracle active set: active rows linearized
    to zero and inactive multipliers zero. When it does not, the report
    records the offending ``(i, j, kind)`` triples and the implication is
    not asserted.
    """
    viol = []
    for i, (blk, d) in enumerate(zip(pack, directions)):
        act = set(active_sets[i])
        lin_h = blk.h + blk.jac_h @ d.s
        mu_new = p.mu[i] + d.dmu
        for j in range(blk.h.size):
            if j in act and abs(lin_h[j]) > tol:
                viol.append((i, j, "active row not tight"))
            if j not in act and abs(mu_new[j]) > tol:
                viol.append((i, j, "inactive multiplier nonzero"))
    fblocks = eval_Ftilde_blocks(pack, p)
    mod_lhs = global_modified_residual(problem, fblocks, directions, p)
    Ft = eval_F(problem, p)
    ft_norm = Ft.tilde_norm()
    full_vec, F = full_newton_residual(problem, p, fblocks, directions, active_sets)
    f_norm = F.norm()
    full_lhs = _inf(full_vec)
    return ImplicationReport(
        active_set_ok=not viol,
        violations=viol,
        modified_lhs=mod_lhs,
        modified_rhs=eta * ft_norm,
        full_lhs=full_lhs,
        full_rhs=eta * f_norm,
        modified_passed=mod_lhs <= eta * ft_norm,
        full_passed=full_lhs <= eta * f_norm,
        ftilde_norm=ft_norm,
        f_norm=f_norm,
    )
