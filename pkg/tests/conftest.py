import numpy as np
import pytest

from dsqp.driver import SqpConfig, baseline_sqp, run_dsqp
from dsqp.nlp_model import PrimalDualPoint, evaluate_all, regularize_block
from dsqp.oracles import brute_force_oracle
from dsqp.problems import RECOMMENDED_RHO, load_problem


@pytest.fixture(scope="session")
def p1():
    return load_problem("P1")


@pytest.fixture(scope="session")
def p2():
    return load_problem("P2")


@pytest.fixture(scope="session")
def net3():
    return load_problem("net3")


@pytest.fixture(scope="session")
def p1_oracle(p1):
    """Brute-force KKT point of P1; ties broken towards the default start."""
    problem, p0 = p1
    return brute_force_oracle(problem, reference=p0.x)


@pytest.fixture(scope="session")
def p1_star(p1_oracle):
    return p1_oracle.point


@pytest.fixture(scope="session")
def p1_runs(p1):
    """d-SQP on P1 with the three forcing schedules, default settings otherwise."""
    problem, p0 = p1
    out = {}
    for name, param in (("constant", 0.9), ("geometric", 0.9), ("residual", 1.0)):
        cfg = SqpConfig(schedule=name, schedule_param=param, rho=RECOMMENDED_RHO["P1"])
        out[name] = run_dsqp(problem, p0, cfg)
    return out


def perturbed_point(problem, p_star, radius, rng):
    """Point within ``radius`` (infinity norm) of ``p_star``.

    The coupling multiplier is perturbed through ``lambda`` so ``gamma``
    stays in the range of ``E^T``; the primal perturbation keeps the
    coupling rows satisfied by moving paired coordinates together.
    """
    q = p_star.copy()
    dx = [rng.uniform(-radius, radius, xi.size) for xi in q.x]
    for pair in problem.consensus:
        dx[pair.copier][pair.copier_coord] = dx[pair.owner][pair.owner_coord]
    q.x = [xi + d for xi, d in zip(q.x, dx)]
    q.nu = [v + rng.uniform(-radius, radius, v.size) for v in q.nu]
    q.mu = [np.maximum(v + rng.uniform(-radius, radius, v.size), 0.0) for v in q.mu]
    dlam = rng.uniform(-radius, radius, problem.n_c)
    # each E_i^T has entries +-1, so the gamma perturbation stays within radius
    q.gamma = [g + sub.E.T @ dlam for g, sub in zip(q.gamma, problem.subsystems)]
    return q


def regularized_pack(problem, p, delta=1e-4):
    return [regularize_block(b, delta) for b in evaluate_all(problem, p)]


def zero_start(problem, x):
    return PrimalDualPoint.zeros_like(problem, x)
