import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsqp.driver import (
    CONVERGED,
    INNER_STALL,
    LINEARIZATION_FAILURE,
    SqpConfig,
    baseline_sqp,
    error_sequence,
    estimate_rate,
    run_dsqp,
    update_eta,
)
from dsqp.errors import ConfigError
from dsqp.nlp_model import PartitionedNLP, PrimalDualPoint, SubsystemModel
from dsqp.problems import RECOMMENDED_RHO, make_infeasible_toy

from conftest import perturbed_point


def _equality_qp_problem():
    """Two quadratic blocks with linear equalities and one coupling row."""
    H0, H1 = np.diag([2.0, 1.0]), np.array([[1.0, 0.2], [0.2, 3.0]])
    q0, q1 = np.array([1.0, -1.0]), np.array([0.0, 2.0])

    def sub(index, H, q, A, b, E):
        return SubsystemModel(
            index=index, n=2,
            f=lambda x: 0.5 * x @ H @ x + q @ x, grad_f=lambda x: H @ x + q, hess_f=lambda x: H,
            E=np.array(E), n_g=1, g=lambda x: A @ x - b, jac_g=lambda x: A,
            hess_g=lambda x, nu: np.zeros((2, 2)),
        )

    return PartitionedNLP(
        [sub(0, H0, q0, np.array([[1.0, 1.0]]), np.array([1.0]), [[1.0, 0.0]]),
         sub(1, H1, q1, np.array([[1.0, -2.0]]), np.array([0.5]), [[-1.0, 0.0]])],
        np.zeros(1),
    )


# ---- update_eta


def test_update_eta_examples():
    assert update_eta(0.8, "geometric", 1.0, 0.8, 0.9) == pytest.approx(0.72)
    eta = 0.5
    for _ in range(10):
        eta = update_eta(eta, "constant", 1.0)
    assert eta == 0.5
    assert update_eta(0.8, "residual", 1e-4, 0.8, 1.0) == pytest.approx(1e-4)


def test_update_eta_clamps():
    assert update_eta(1e-12, "geometric", 1.0, 0.8, 0.5) == 1e-12
    assert update_eta(0.8, "residual", 0.0, 0.8, 1.0) == 1e-12
    assert update_eta(0.999999999, "residual", 10.0, 0.999999999, 1.0) == 1.0 - 1e-6


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 0.99), st.floats(0.0, 1e3), st.floats(1e-3, 10.0))
def test_residual_schedule_below_eta0(eta0, fnorm, a):
    eta = update_eta(eta0, "residual", fnorm, eta0, a)
    assert 0.0 < eta <= eta0


# ---- estimate_rate


def test_rate_geometric_sequence():
    rep = estimate_rate([0.5**k for k in range(12)])
    assert rep.classification == "q-linear"
    np.testing.assert_allclose(rep.linear_ratios, 0.5)


def test_rate_quadratic_sequence():
    rep = estimate_rate([0.5 ** (2**k) for k in range(6)])
    assert rep.classification == "q-quadratic"
    assert rep.slope == pytest.approx(2.0, abs=1e-9)


def test_rate_insufficient_data():
    assert estimate_rate([1.0, 0.1, 1e-13]).classification == "insufficient-data"


def test_rate_superlinear_sequence():
    # e_{k+1} = e_k / (k + 2)^3: ratios vanish, quadratic factors blow up
    e = [1.0]
    for k in range(8):
        e.append(e[-1] / (k + 2) ** 3)
    e = [v * 1e-2 for v in e]
    assert estimate_rate(e).classification == "q-superlinear"


def test_baseline_p1_quadratic(p1, p1_star):
    problem, p0 = p1
    res = baseline_sqp(problem, p0, eps=1e-12)
    assert res.converged
    rep = estimate_rate(error_sequence(res.iterates, p1_star))
    assert rep.classification in ("q-quadratic", "q-superlinear")


# ---- baseline


def test_baseline_equality_qp_one_step():
    problem = _equality_qp_problem()
    p0 = PrimalDualPoint.zeros_like(problem, [np.array([0.3, -0.1]), np.array([0.3, 2.0])])
    res = baseline_sqp(problem, p0)
    assert res.converged and res.outer_iterations == 1


def test_baseline_infeasible_linearization():
    problem = make_infeasible_toy()
    # at x = 0 the linearized equality reads 0 * s + 1 = 0
    res = baseline_sqp(problem, PrimalDualPoint.zeros_like(problem, [np.zeros(1)]))
    assert res.status == LINEARIZATION_FAILURE


# ---- run_dsqp


def test_zero_iterations_at_solution(p1, p1_star):
    problem, _ = p1
    res = run_dsqp(problem, p1_star, SqpConfig())
    assert res.converged and res.outer_iterations == 0
    assert res.inner_iterations == 0


def test_p1_geometric_reaches_oracle(p1_runs, p1_star):
    res = p1_runs["geometric"]
    assert res.converged and res.outer_iterations <= 30
    err = max(np.max(np.abs(a - b)) for a, b in zip(res.point.x, p1_star.x))
    assert err <= 1e-6


def test_converged_status_certifies_eps(p1_runs):
    for res in p1_runs.values():
        assert res.status == CONVERGED
        assert res.final_residual <= 1e-8


def test_p1_residual_schedule_quadratic_tail(p1_runs, p1_star):
    rep = estimate_rate(error_sequence(p1_runs["residual"].iterates, p1_star))
    assert all(1e-3 <= q <= 1e3 for q in rep.quadratic_factors[-3:])


def test_rate_ordering(p1_runs):
    n = {k: r.outer_iterations for k, r in p1_runs.items()}
    assert n["constant"] >= n["geometric"] >= n["residual"]


def test_eta_monotone(p1_runs):
    geo = [r.eta for r in p1_runs["geometric"].trace if not math.isnan(r.eta)]
    assert all(b < a for a, b in zip(geo, geo[1:]))
    res = [r.eta for r in p1_runs["residual"].trace if not math.isnan(r.eta)]
    assert all(e <= 0.8 for e in res)


def test_active_sets_frozen_near_solution(p1_runs):
    for res in p1_runs.values():
        k0 = next(r.k for r in res.trace if r.F_norm <= 1e-3)
        assert all(r.active_set_changes == 0 for r in res.trace[k0:])


@pytest.mark.parametrize("pid", ["P1", "P2"])
def test_coupling_feasibility_maintained(pid, p1_runs):
    from dsqp.problems import load_problem

    if pid == "P1":
        problem, _ = load_problem("P1")
        res = p1_runs["geometric"]
    else:
        problem, p0 = load_problem("P2")
        res = run_dsqp(problem, p0, SqpConfig(rho=RECOMMENDED_RHO["P2"]))
    for q in res.iterates[1:]:
        assert not np.any(problem.coupling_residual(q.x))


def test_exactness_recovery(p1):
    problem, p0 = p1
    base = baseline_sqp(problem, p0)
    cfg = SqpConfig(eta0=1e-10, schedule="constant", rho=10.0, l_max=100_000)
    res = run_dsqp(problem, p0, cfg)
    assert res.converged and len(res.iterates) == len(base.iterates)
    for a, b in zip(res.iterates, base.iterates):
        assert np.max(np.abs(a.as_vector() - b.as_vector())) <= 1e-6


def test_dsqp_agrees_with_baseline_on_p2(p2):
    problem, p0 = p2
    res = run_dsqp(problem, p0, SqpConfig(schedule="residual", schedule_param=1.0, rho=RECOMMENDED_RHO["P2"]))
    base = baseline_sqp(problem, p0, eps=1e-12)
    diff = max(np.max(np.abs(a - b)) for a, b in zip(res.point.x, base.point.x))
    assert res.converged and diff <= 1e-6


def test_warm_init_also_converges(p1):
    problem, p0 = p1
    res = run_dsqp(problem, p0, SqpConfig(admm_init="warm"))
    assert res.converged


def test_inner_stall_keeps_partial_trace(p1):
    problem, p0 = p1
    res = run_dsqp(problem, p0, SqpConfig(l_max=3))
    assert res.status == INNER_STALL
    assert res.trace[-1].stalled and res.trace[-1].inner_iterations == 3
    assert "outer iteration 0" in res.message


def test_accept_policy_continues_after_stall(p1):
    problem, p0 = p1
    res = run_dsqp(problem, p0, SqpConfig(l_max=3, stall_policy="accept", k_max=2))
    assert res.status != INNER_STALL
    assert any(r.stalled for r in res.trace)


def test_near_solution_start_keeps_active_sets(p1, p1_star):
    problem, _ = p1
    p = perturbed_point(problem, p1_star, 1e-2, np.random.default_rng(0))
    # a small penalty lets the first proximal step reach the active bound
    res = run_dsqp(problem, p, SqpConfig(rho=10.0))
    assert res.converged
    assert all(r.active_set_changes == 0 for t in res.inner_trace for r in t)


@pytest.mark.parametrize(
    "kwargs",
    [dict(eta0=1.5), dict(eta0=0.0), dict(schedule="fast"), dict(rho=0.0),
     dict(schedule="geometric", schedule_param=1.2), dict(admm_init="cold"), dict(coupling="magic")],
)
def test_config_validation(p1, kwargs):
    problem, p0 = p1
    with pytest.raises(ConfigError):
        run_dsqp(problem, p0, SqpConfig(**kwargs))
