import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsqp.admm_inner import averaging_step, run_inner
from dsqp.driver import coupled_qp, split_coupled_solution
from dsqp.errors import ConfigError
from dsqp.kkt_residuals import (
    Direction,
    eval_F,
    eval_Ftilde_blocks,
    global_modified_residual,
    local_modified_criterion,
    check_lemma2_implication,
    stationarity,
)
from dsqp.nlp_model import (
    PartitionedNLP,
    PrimalDualPoint,
    SubsystemModel,
    evaluate_sensitivities,
    finite_difference_jacobian,
    relative_error,
)
from dsqp.qp import solve_qp

from conftest import perturbed_point, regularized_pack


def _unconstrained():
    sub = SubsystemModel(
        index=0, n=2,
        f=lambda x: 0.5 * x @ x,
        grad_f=lambda x: x.copy(),
        hess_f=lambda x: np.eye(2),
        E=np.zeros((0, 2)),
    )
    return PartitionedNLP([sub], np.zeros(0))


def _quadratic_subsystem():
    H = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.2], [0.0, 0.2, 3.0]])
    A = np.array([[1.0, -1.0, 2.0]])
    b = np.array([0.3])
    C = np.array([[0.0, 1.0, 1.0], [1.0, 0.0, 0.0]])
    return SubsystemModel(
        index=0, n=3,
        f=lambda x: 0.5 * x @ H @ x,
        grad_f=lambda x: H @ x,
        hess_f=lambda x: H,
        E=np.zeros((0, 3)),
        n_g=1, g=lambda x: A @ x + b, jac_g=lambda x: A, hess_g=lambda x, nu: np.zeros((3, 3)),
        n_h=2, h=lambda x: C @ x - 1.0, jac_h=lambda x: C, hess_h=lambda x, mu: np.zeros((3, 3)),
    )


def _ftilde_fun(model):
    n, mg, mh = model.n, model.n_g, model.n_h

    def fun(z):
        x, nu, mu, gamma = np.split(z, [n, n + mg, n + mg + mh])
        return np.concatenate([stationarity(model, x, nu, mu, gamma), model.eval_g(x)])

    return fun


def _ftilde_fd_error(model, x, nu, mu, gamma):
    blk = evaluate_sensitivities(model, x, nu, mu)
    # blocks are looked up by subsystem index; earlier slots are never read
    pad = [None] * model.index
    p = PrimalDualPoint(pad + [x], pad + [nu], pad + [mu], pad + [gamma])
    fb = eval_Ftilde_blocks([blk], p)[0]
    z = np.concatenate([x, nu, mu, gamma])
    return relative_error(fb.jacobian(), finite_difference_jacobian(_ftilde_fun(model), z))


# ---- eval_F


def test_F_vanishes_at_p1_solution(p1, p1_star):
    problem, _ = p1
    assert eval_F(problem, p1_star).norm() <= 1e-8


def test_F_zero_at_unconstrained_minimizer():
    problem = _unconstrained()
    p = PrimalDualPoint([np.zeros(2)], [np.zeros(0)], [np.zeros(0)], [np.zeros(2)])
    F = eval_F(problem, p)
    assert F.norm() == 0.0
    assert not np.any(F.as_vector())


def test_complementarity_row_is_elementwise_min():
    sub = SubsystemModel(
        index=0, n=1, f=lambda x: 0.0, grad_f=lambda x: np.zeros(1), hess_f=lambda x: np.zeros((1, 1)),
        E=np.zeros((0, 1)), n_h=1, h=lambda x: np.array([-3.0]), jac_h=lambda x: np.zeros((1, 1)),
    )
    problem = PartitionedNLP([sub], np.zeros(0))
    p = PrimalDualPoint([np.zeros(1)], [np.zeros(0)], [np.array([2.0])], [np.zeros(1)])
    assert eval_F(problem, p).comp[0][0] == 2.0


# ---- F~ and its Jacobian


def test_ftilde_jacobian_of_quadratic_subsystem():
    model = _quadratic_subsystem()
    rng = np.random.default_rng(0)
    err = _ftilde_fd_error(model, rng.standard_normal(3), rng.standard_normal(1),
                           rng.uniform(0, 1, 2), rng.standard_normal(3))
    assert err <= 1e-6


def test_ftilde_without_inequalities_has_no_mu_columns():
    problem = _unconstrained()
    p = PrimalDualPoint([np.ones(2)], [np.zeros(0)], [np.zeros(0)], [np.zeros(2)])
    blk = evaluate_sensitivities(problem.subsystems[0], p.x[0], p.nu[0], p.mu[0])
    fb = eval_Ftilde_blocks([blk], p)[0]
    # columns: x (2) and gamma (2); rows: stationarity only
    assert fb.jacobian().shape == (2, 4)
    d = Direction(-np.ones(2), np.zeros(0), np.zeros(0), np.zeros(2))
    assert not np.any(fb.linearized(d))


def test_null_step_leaves_ftilde_at_solution(p1, p1_star):
    problem, _ = p1
    pack = regularized_pack(problem, p1_star)
    for fb, sub in zip(eval_Ftilde_blocks(pack, p1_star), problem.subsystems):
        d = Direction.zero(sub.n, sub.n_g, sub.n_h)
        np.testing.assert_array_equal(fb.linearized(d), fb.value)
        assert fb.norm <= 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["P1", "P2"]))
def test_ftilde_jacobian_finite_differences(seed, pid):
    from dsqp.problems import load_problem

    problem, p0 = load_problem(pid)
    rng = np.random.default_rng(seed)
    for sub, x in zip(problem.subsystems, p0.x):
        err = _ftilde_fd_error(sub, x + rng.uniform(-0.5, 0.5, sub.n), rng.standard_normal(sub.n_g),
                               rng.uniform(0, 1, sub.n_h), rng.standard_normal(sub.n))
        assert err <= 1e-5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["P1", "P2", "net3"]))
def test_subset_norm_inequality(seed, pid):
    from dsqp.problems import load_problem

    problem, p0 = load_problem(pid)
    rng = np.random.default_rng(seed)
    p = PrimalDualPoint(
        [x + rng.standard_normal(x.size) for x in p0.x],
        [rng.standard_normal(v.size) for v in p0.nu],
        [rng.standard_normal(v.size) for v in p0.mu],
        [rng.standard_normal(v.size) for v in p0.gamma],
    )
    F = eval_F(problem, p)
    assert F.tilde_norm() <= F.norm()


# ---- local criterion


def _exact_direction(problem, p):
    pack = regularized_pack(problem, p)
    sol = solve_qp(coupled_qp(problem, pack, p))
    s, nu, mu, lam = split_coupled_solution(problem, sol)
    dirs = [
        Direction.from_iterates(s[i], nu[i], mu[i], sub.E.T @ lam, p, i)
        for i, sub in enumerate(problem.subsystems)
    ]
    return pack, sol, dirs


def test_exact_step_passes_any_eta(p1, p1_star):
    problem, _ = p1
    p = perturbed_point(problem, p1_star, 1e-3, np.random.default_rng(1))
    pack, sol, dirs = _exact_direction(problem, p)
    for fb, d in zip(eval_Ftilde_blocks(pack, p), dirs):
        res = local_modified_criterion(fb, d, 1e-6)
        # the linearization is solved up to the QP tolerance
        assert res.lhs <= 1e-9
        assert local_modified_criterion(fb, d, 0.8).passed


def test_null_step_never_accepted(p1):
    problem, p0 = p1
    pack = regularized_pack(problem, p0)
    for fb, sub in zip(eval_Ftilde_blocks(pack, p0), problem.subsystems):
        res = local_modified_criterion(fb, Direction.zero(sub.n, sub.n_g, sub.n_h), 0.8)
        assert fb.norm > 0 and not res.passed
        assert res.lhs == fb.norm


@pytest.mark.parametrize("eta", [0.0, 1.0, 1.5, -0.1])
def test_eta_outside_unit_interval_rejected(p1, eta):
    problem, p0 = p1
    pack = regularized_pack(problem, p0)
    fb = eval_Ftilde_blocks(pack, p0)[0]
    with pytest.raises(ConfigError):
        local_modified_criterion(fb, Direction.zero(2, 1, 1), eta)


def test_p1_first_outer_criterion_crosses_threshold(p1):
    problem, p0 = p1
    pack = regularized_pack(problem, p0)
    fblocks = eval_Ftilde_blocks(pack, p0)

    def stop(state):
        return [
            local_modified_criterion(
                fblocks[i], Direction.from_iterates(state.s_bar[i], state.nu_qp[i], state.mu_qp[i],
                                                    state.gamma[i], p0, i), 0.8)
            for i in range(problem.S)
        ]

    state, trace = run_inner(problem, pack, p0.x, p0.gamma, 1e3, stop)
    assert all(trace[-1].flags)
    assert not all(trace[0].flags) or len(trace) == 1
    final = max(trace[-1].criteria)
    assert final <= 0.8 * max(fb.norm for fb in fblocks)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_decomposition_exactness(seed):
    from dsqp.problems import load_problem

    problem, p0 = load_problem("P2")
    rng = np.random.default_rng(seed)
    p = p0.copy()
    p.nu = [rng.standard_normal(v.size) for v in p.nu]
    p.mu = [rng.uniform(0, 1, v.size) for v in p.mu]
    pack = regularized_pack(problem, p)
    fblocks = eval_Ftilde_blocks(pack, p)
    s = [rng.standard_normal(sub.n) for sub in problem.subsystems]
    s_bar = averaging_step(problem, s, p.x)
    dirs = [Direction(s_bar[i], rng.standard_normal(sub.n_g), rng.standard_normal(sub.n_h),
                      rng.standard_normal(sub.n)) for i, sub in enumerate(problem.subsystems)]
    local = max(local_modified_criterion(fb, d, 0.5).lhs for fb, d in zip(fblocks, dirs))
    glob = global_modified_residual(problem, fblocks, dirs, p, check_coupling=True)
    assert local == glob


def test_coupling_debug_mode_fails_loudly(p1):
    problem, p0 = p1
    pack = regularized_pack(problem, p0)
    fblocks = eval_Ftilde_blocks(pack, p0)
    dirs = [Direction(np.array([0.1, 0.0]), np.zeros(1), np.zeros(1), np.zeros(2)),
            Direction(np.zeros(2), np.zeros(0), np.zeros(1), np.zeros(2))]
    with pytest.raises(AssertionError):
        global_modified_residual(problem, fblocks, dirs, p0, check_coupling=True)


# ---- modified test implies the full one


def test_reduced_test_implies_full_for_exact_step(p1, p1_star, p1_oracle):
    problem, _ = p1
    p = perturbed_point(problem, p1_star, 1e-3, np.random.default_rng(3))
    pack, sol, dirs = _exact_direction(problem, p)
    rep = check_lemma2_implication(problem, p, pack, dirs, p1_oracle.active_sets, 0.5)
    assert rep.active_set_ok
    assert rep.modified_passed and rep.full_passed
    assert rep.implication_holds


def test_implication_check_flags_active_set_mismatch(p1, p1_star, p1_oracle):
    problem, _ = p1
    p = perturbed_point(problem, p1_star, 1e-3, np.random.default_rng(4))
    pack, sol, dirs = _exact_direction(problem, p)
    # flip the multiplier of the inactive bound of subsystem 1 to nonzero
    dirs[1].dmu = dirs[1].dmu + 0.5
    rep = check_lemma2_implication(problem, p, pack, dirs, p1_oracle.active_sets, 0.5)
    assert not rep.active_set_ok
    assert (1, 0, "inactive multiplier nonzero") in rep.violations
    assert rep.implication_holds is None
    assert rep.ftilde_norm <= rep.f_norm
