"""Partitioned nonlinear programs and per-subsystem sensitivities.

A problem is a list of subsystems, each owning a private variable block
``x_i`` with objective ``f_i``, equalities ``g_i(x_i) = 0`` and inequalities
``h_i(x_i) <= 0``. The blocks are linked only through the linear coupling
``sum_i E_i x_i = c``.

Jacobians are stored row-wise: ``jac_g(x)`` has shape ``(n_g, n)`` and is the
transpose of the gradient matrix ``grad g(x)``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse

from .errors import EvaluationError, RegularityError

_log = logging.getLogger(__name__)

ArrayFn = Callable[[np.ndarray], np.ndarray]

HESS_SYM_WARN = 1e-8


def _empty_vec(x):
    return np.zeros(0)


@dataclass(frozen=True, eq=False)
class SubsystemModel:
    """One subsystem of a partitioned NLP.

    ``hess_g(x, nu)`` and ``hess_h(x, mu)`` return the multiplier-weighted sums
    of constraint Hessians, so the Lagrangian Hessian is
    ``hess_f(x) + hess_g(x, nu) + hess_h(x, mu)``. The coupling term is linear
    in ``x`` and never contributes.
    """

    index: int
    n: int
    f: Callable[[np.ndarray], float]
    grad_f: ArrayFn
    hess_f: ArrayFn
    E: np.ndarray
    n_g: int = 0
    g: Optional[ArrayFn] = None
    jac_g: Optional[ArrayFn] = None
    hess_g: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    n_h: int = 0
    h: Optional[ArrayFn] = None
    jac_h: Optional[ArrayFn] = None
    hess_h: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    name: str = ""

    def __post_init__(self):
        E = self.E
        if scipy.sparse.issparse(E):
            E = E.toarray()
        E = np.atleast_2d(np.asarray(E, dtype=float))
        if E.size == 0:
            E = E.reshape(-1, self.n)
        if E.shape[1] != self.n:
            raise ValueError(f"E of subsystem {self.index} has {E.shape[1]} columns, expected {self.n}")
        object.__setattr__(self, "E", E)
        for name, count in (("g", self.n_g), ("h", self.n_h)):
            if count and (getattr(self, name) is None or getattr(self, "jac_" + name) is None):
                raise ValueError(f"subsystem {self.index}: n_{name}={count} but {name}/jac_{name} missing")

    @property
    def n_c(self):
        return self.E.shape[0]

    def eval_g(self, x):
        return np.asarray(self.g(x), dtype=float).reshape(-1) if self.n_g else np.zeros(0)

    def eval_h(self, x):
        return np.asarray(self.h(x), dtype=float).reshape(-1) if self.n_h else np.zeros(0)

    def eval_jac_g(self, x):
        if not self.n_g:
            return np.zeros((0, self.n))
        return np.asarray(self.jac_g(x), dtype=float).reshape(self.n_g, self.n)

    def eval_jac_h(self, x):
        if not self.n_h:
            return np.zeros((0, self.n))
        return np.asarray(self.jac_h(x), dtype=float).reshape(self.n_h, self.n)

    def hessian_lagrangian(self, x, nu, mu):
        H = np.array(self.hess_f(x), dtype=float).reshape(self.n, self.n)
        if self.n_g and self.hess_g is not None:
            H = H + np.asarray(self.hess_g(x, nu), dtype=float).reshape(self.n, self.n)
        if self.n_h and self.hess_h is not None:
            H = H + np.asarray(self.hess_h(x, mu), dtype=float).reshape(self.n, self.n)
        return H


@dataclass(frozen=True)
class ConsensusPair:
    """Coupling row ``x[owner][owner_coord] - x[copier][copier_coord] = 0``."""

    row: int
    owner: int
    owner_coord: int
    copier: int
    copier_coord: int


@dataclass(eq=False)
class PartitionedNLP:
    subsystems: list
    c: np.ndarray
    consensus: Optional[list] = None
    name: str = ""

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        for i, sub in enumerate(self.subsystems):
            if sub.index != i:
                raise ValueError(f"subsystem at position {i} has index {sub.index}")
            if sub.n_c != self.c.size:
                raise ValueError(f"E of subsystem {i} has {sub.n_c} rows, c has {self.c.size}")
        if self.consensus is None:
            self.consensus = detect_consensus(self.subsystems, self.c)
        else:
            _validate_consensus(self.subsystems, self.c, self.consensus)

    @property
    def S(self):
        return len(self.subsystems)

    @property
    def n_c(self):
        return self.c.size

    @property
    def n(self):
        return sum(sub.n for sub in self.subsystems)

    @property
    def is_consensus(self):
        return self.consensus is not None

    @property
    def E(self):
        """Stacked coupling matrix ``[E_1 ... E_S]``."""
        return np.hstack([sub.E for sub in self.subsystems])

    def coupling_residual(self, x):
        """``sum_i E_i x_i - c`` for a per-subsystem list ``x``."""
        r = -self.c.copy()
        for sub, xi in zip(self.subsystems, x):
            r = r + sub.E @ xi
        return r

    def split(self, v, sizes=None):
        sizes = [sub.n for sub in self.subsystems] if sizes is None else sizes
        return [np.array(part) for part in np.split(np.asarray(v, dtype=float), np.cumsum(sizes)[:-1])]

    def objective(self, x):
        return float(sum(sub.f(xi) for sub, xi in zip(self.subsystems, x)))


def detect_consensus(subsystems, c):
    """Return consensus pairs if every coupling row is a +1/-1 pair with c = 0.

    The subsystem holding the +1 entry is the owner of the variable.
    """
    n_c = c.size
    if n_c == 0:
        return []
    if np.any(c != 0):
        return None
    pairs = []
    for r in range(n_c):
        plus, minus = [], []
        for sub in subsystems:
            row = sub.E[r]
            nz = np.flatnonzero(row)
            for j in nz:
                if row[j] == 1.0:
                    plus.append((sub.index, int(j)))
                elif row[j] == -1.0:
                    minus.append((sub.index, int(j)))
                else:
                    return None
        if len(plus) != 1 or len(minus) != 1:
            return None
        pairs.append(ConsensusPair(r, plus[0][0], plus[0][1], minus[0][0], minus[0][1]))
    return pairs


def _validate_consensus(subsystems, c, pairs):
    detected = detect_consensus(subsystems, c)
    if detected is None or len(detected) != len(pairs):
        raise ValueError("consensus metadata given but coupling rows are not +1/-1 pairs with c = 0")
    for got, want in zip(sorted(pairs, key=lambda p: p.row), detected):
        same = {(got.owner, got.owner_coord), (got.copier, got.copier_coord)} == {
            (want.owner, want.owner_coord),
            (want.copier, want.copier_coord),
        }
        if got.row != want.row or not same:
            raise ValueError(f"consensus metadata for row {got.row} does not match E")


@dataclass
class PrimalDualPoint:
    """Iterate ``(x, nu, mu, gamma)`` stored per subsystem.

    ``gamma[i]`` plays the role of ``E_i^T lambda``; the coupling multiplier
    itself is never needed by the decentralized method.
    """

    x: list
    nu: list
    mu: list
    gamma: list

    @classmethod
    def zeros_like(cls, problem, x):
        subs = problem.subsystems
        return cls(
            x=[np.asarray(xi, dtype=float).copy() for xi in x],
            nu=[np.zeros(s.n_g) for s in subs],
            mu=[np.zeros(s.n_h) for s in subs],
            gamma=[np.zeros(s.n) for s in subs],
        )

    @classmethod
    def from_lambda(cls, problem, x, nu, mu, lam):
        lam = np.asarray(lam, dtype=float)
        gamma = [sub.E.T @ lam for sub in problem.subsystems]
        return cls([np.asarray(v, float).copy() for v in x], [np.asarray(v, float).copy() for v in nu],
                   [np.asarray(v, float).copy() for v in mu], gamma)

    def copy(self):
        return PrimalDualPoint(
            [v.copy() for v in self.x],
            [v.copy() for v in self.nu],
            [v.copy() for v in self.mu],
            [v.copy() for v in self.gamma],
        )

    def as_vector(self):
        parts = [*self.x, *self.nu, *self.mu, *self.gamma]
        return np.concatenate(parts) if parts else np.zeros(0)

    @property
    def x_vector(self):
        return np.concatenate(self.x) if self.x else np.zeros(0)

    def check_dims(self, problem):
        for sub, xi, ni, mi, gi in zip(problem.subsystems, self.x, self.nu, self.mu, self.gamma):
            if (xi.size, ni.size, mi.size, gi.size) != (sub.n, sub.n_g, sub.n_h, sub.n):
                raise ValueError(f"point block {sub.index} has wrong dimensions")


@dataclass
class SensitivityBlock:
    """Derivatives of one subsystem at a linearization point."""

    index: int
    x: np.ndarray
    grad_f: np.ndarray
    g: np.ndarray
    h: np.ndarray
    jac_g: np.ndarray
    jac_h: np.ndarray
    hess: np.ndarray
    regularized: bool = False

    @property
    def n(self):
        return self.x.size


def _check_finite(index, name, value):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(index, name, "non-finite entries")
    return arr


def symmetrize(H, index=None):
    """Return ``(H + H^T) / 2``, warning when the asymmetry is not round-off."""
    H = np.asarray(H, dtype=float)
    asym = np.max(np.abs(H - H.T)) if H.size else 0.0
    scale = max(1.0, np.max(np.abs(H))) if H.size else 1.0
    if asym > HESS_SYM_WARN * scale:
        warnings.warn(f"Hessian of subsystem {index} asymmetric by {asym:.3e}", RuntimeWarning, stacklevel=3)
    return 0.5 * (H + H.T)


def evaluate_sensitivities(model, x, nu, mu):
    """Evaluate gradients, Jacobians and the Lagrangian Hessian of one subsystem.

    Parameters
    ----------
    model : SubsystemModel
    x, nu, mu : ndarray
        Linearization point and local multipliers.

    Returns
    -------
    SensitivityBlock
        Exact derivatives; no regularization is applied here.

    Raises
    ------
    EvaluationError
        If any evaluator produces NaN or Inf, naming the offending component.
    """
    i = model.index
    x = np.asarray(x, dtype=float)
    nu = np.asarray(nu, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if x.size != model.n or nu.size != model.n_g or mu.size != model.n_h:
        raise ValueError(f"subsystem {i}: point dimensions do not match the model")
    grad_f = _check_finite(i, "grad_f", model.grad_f(x)).reshape(model.n)
    g = _check_finite(i, "g", model.eval_g(x))
    h = _check_finite(i, "h", model.eval_h(x))
    jac_g = _check_finite(i, "jac_g", model.eval_jac_g(x))
    jac_h = _check_finite(i, "jac_h", model.eval_jac_h(x))
    hess = _check_finite(i, "hessian", model.hessian_lagrangian(x, nu, mu))
    hess = symmetrize(hess, i)
    return SensitivityBlock(i, x.copy(), grad_f, g, h, jac_g, jac_h, hess)


def evaluate_all(problem, p):
    return [
        evaluate_sensitivities(sub, p.x[i], p.nu[i], p.mu[i])
        for i, sub in enumerate(problem.subsystems)
    ]


def null_space_basis(G, n):
    """Orthonormal basis of ``null(G)`` from an SVD of ``G``.

    Raises ``RegularityError`` when ``G`` does not have full row rank.
    """
    G = np.asarray(G, dtype=float).reshape(-1, n)
    m = G.shape[0]
    if m == 0:
        return np.eye(n)
    U, sv, Vt = np.linalg.svd(G)
    tol = max(m, n) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    rank = int(np.sum(sv > tol))
    if rank < m:
        raise RegularityError(f"equality Jacobian has rank {rank} < {m} (LICQ violated)")
    return Vt[rank:].T.copy()


def regularize_reduced_hessian(H, G, delta=1e-4):
    """Lift the reduced Hessian ``Z^T H Z`` to have eigenvalues at least ``delta``.

    Eigenvalues of the reduced Hessian below ``delta`` are raised to
    ``delta`` and the correction is mapped back through the null-space basis
    ``Z`` of ``G``. Directions in the row space of ``G`` are untouched.

    Parameters
    ----------
    H : ndarray, shape (n, n)
        Symmetric Lagrangian Hessian.
    G : ndarray, shape (m, n)
        Equality-constraint Jacobian.
    delta : float

    Returns
    -------
    ndarray
        ``H`` itself (same object) when no correction is needed.
    """
    H = np.asarray(H, dtype=float)
    n = H.shape[0]
    Z = null_space_basis(G, n)
    if Z.shape[1] == 0:
        return H
    R = Z.T @ H @ Z
    R = 0.5 * (R + R.T)
    w, V = np.linalg.eigh(R)
    shift = np.maximum(delta - w, 0.0)
    if not np.any(shift > 0):
        return H
    ZV = Z @ V
    H_reg = H + (ZV * shift) @ ZV.T
    return 0.5 * (H_reg + H_reg.T)


def regularize_block(block, delta):
    H = regularize_reduced_hessian(block.hess, block.jac_g, delta)
    if H is block.hess:
        return block
    return replace(block, hess=H, regularized=True)


def stacked_active_jacobian(problem, x, active):
    """Matrix whose full row rank is the LICQ condition at ``x``."""
    n_tot = problem.n
    rows = []
    col = 0
    for sub, xi, act in zip(problem.subsystems, x, active):
        Jg = sub.eval_jac_g(xi)
        Jh = sub.eval_jac_h(xi)[list(act)] if len(act) else np.zeros((0, sub.n))
        for block in (Jg, Jh):
            padded = np.zeros((block.shape[0], n_tot))
            padded[:, col:col + sub.n] = block
            rows.append(padded)
        col += sub.n
    rows.append(problem.E)
    return np.vstack(rows) if rows else np.zeros((0, n_tot))


@dataclass
class AssumptionReport:
    active_sets: list
    sigma_min: float
    licq_ok: bool
    complementarity_margin: float
    sc_violations: list = field(default_factory=list)
    reduced_hessian_min_eig: list = field(default_factory=list)
    second_order_ok: bool = True

    @property
    def ok(self):
        return self.licq_ok and not self.sc_violations and self.second_order_ok


def check_assumption_diagnostics(problem, p, tol=1e-8):
    """Report LICQ, strict complementarity and reduced-Hessian positivity at ``p``.

    Violations are flagged in the report; nothing is raised. The
    second-order check uses the null space of the local equality Jacobian
    only (active inequalities and coupling rows are not removed).
    """
    active = []
    sc_viol = []
    margin = np.inf
    for sub, xi, mui in zip(problem.subsystems, p.x, p.mu):
        h = sub.eval_h(xi)
        act = [int(j) for j in np.flatnonzero(np.abs(h) < tol)]
        active.append(act)
        for j in range(h.size):
            if abs(h[j]) < tol and abs(mui[j]) < tol:
                sc_viol.append((sub.index, j))
        if act:
            margin = min(margin, float(np.min(np.abs(h[act]) + mui[act])))
    A = stacked_active_jacobian(problem, p.x, active)
    if A.shape[0] == 0:
        sigma_min = np.inf
    elif A.shape[0] > A.shape[1]:
        sigma_min = 0.0
    else:
        sigma_min = float(np.linalg.svd(A, compute_uv=False)[-1])
    licq_ok = sigma_min > max(tol, 1e-10)

    eigs = []
    for sub, xi, nui, mui in zip(problem.subsystems, p.x, p.nu, p.mu):
        H = symmetrize(sub.hessian_lagrangian(xi, nui, mui), sub.index)
        try:
            Z = null_space_basis(sub.eval_jac_g(xi), sub.n)
        except RegularityError:
            eigs.append(float("nan"))
            continue
        if Z.shape[1] == 0:
            eigs.append(np.inf)
        else:
            eigs.append(float(np.linalg.eigvalsh(Z.T @ H @ Z)[0]))
    second_order_ok = all(np.isfinite(e) and e > 0 or e == np.inf for e in eigs)
    return AssumptionReport(active, sigma_min, licq_ok, margin, sc_viol, eigs, second_order_ok)


def finite_difference_jacobian(fun, x, step=1e-6):
    """Central-difference Jacobian of ``fun`` at ``x`` (test-time fallback only)."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(np.asarray(fun(x), dtype=float))
    J = np.zeros((f0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        J[:, j] = (np.atleast_1d(fun(x + e)) - np.atleast_1d(fun(x - e))) / (2 * step)
    return J


def relative_error(analytic, approx):
    """``max|a - b| / max(1, max|a|)``; the floor of 1 guards vanishing derivatives."""
    analytic = np.asarray(analytic, dtype=float)
    approx = np.asarray(approx, dtype=float)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - approx)) / max(1.0, np.max(np.abs(analytic))))


def derivative_errors(model, x, step=1e-6):
    """Relative errors of the analytic first derivatives against central differences."""
    out = {"grad_f": relative_error(model.grad_f(x), finite_difference_jacobian(model.f, x, step)[0])}
    if model.n_g:
        out["jac_g"] = relative_error(model.eval_jac_g(x), finite_difference_jacobian(model.eval_g, x, step))
    if model.n_h:
        out["jac_h"] = relative_error(model.eval_jac_h(x), finite_difference_jacobian(model.eval_h, x, step))
    return out
