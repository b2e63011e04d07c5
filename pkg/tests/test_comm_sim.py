import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsqp.admm_inner import averaging_step
from dsqp.comm_sim import CommLayer, allreduce_flags, build_graph, exchange_and_average
from dsqp.errors import NotConsensusError
from dsqp.nlp_model import PartitionedNLP, SubsystemModel


def _sub(index, n, E):
    return SubsystemModel(
        index=index, n=n,
        f=lambda x: 0.5 * x @ x,
        grad_f=lambda x: x.copy(),
        hess_f=lambda x: np.eye(n),
        E=np.asarray(E, float),
    )


def _ring(S=4, shared=2):
    """Subsystem i owns ``shared`` coordinates and copies those of i - 1."""
    n = 2 * shared
    n_c = S * shared
    Es = [np.zeros((n_c, n)) for _ in range(S)]
    for i in range(S):
        nxt = (i + 1) % S
        for k in range(shared):
            row = i * shared + k
            Es[i][row, k] = 1.0
            Es[nxt][row, shared + k] = -1.0
    return PartitionedNLP([_sub(i, n, Es[i]) for i in range(S)], np.zeros(n_c), name="ring")


def test_two_subsystems_single_edge():
    problem = PartitionedNLP([_sub(0, 1, [[1.0]]), _sub(1, 1, [[-1.0]])], np.zeros(1))
    graph = build_graph(problem)
    assert list(graph.edges) == [(0, 1)]
    assert graph.payload_size(0, 1) == 1


def test_ring_topology():
    graph = build_graph(_ring())
    assert sorted(graph.edges) == [(0, 1), (0, 3), (1, 2), (2, 3)]
    assert all(graph.payload_size(a, b) == 2 for a, b in graph.edges)
    assert graph.neighbors(0) == [1, 3]


def test_p1_graph(p1):
    problem, _ = p1
    graph = build_graph(problem)
    assert list(graph.edges) == [(0, 1)]
    (pair,) = graph.edges[(0, 1)]
    assert pair.row == 0 and pair.owner_coord == 0 and pair.copier_coord == 0


def test_build_graph_rejects_non_consensus():
    problem = PartitionedNLP([_sub(0, 1, [[2.0]]), _sub(1, 1, [[-1.0]])], np.zeros(1))
    with pytest.raises(NotConsensusError):
        build_graph(problem)


def test_identical_values_still_counted():
    problem = _ring()
    s = [np.ones(4) for _ in range(4)]
    x = [np.zeros(4) for _ in range(4)]
    s_bar, stats = exchange_and_average(build_graph(problem), s, x)
    for a, b in zip(s, s_bar):
        np.testing.assert_array_equal(a, b)
    assert stats.floats_sent_total == 2 * problem.n_c


def test_volume_law_26_pairs():
    problem = PartitionedNLP(
        [_sub(0, 26, np.eye(26)), _sub(1, 26, -np.eye(26))], np.zeros(26)
    )
    rng = np.random.default_rng(0)
    _, stats = exchange_and_average(build_graph(problem), [rng.standard_normal(26)] * 2, [np.zeros(26)] * 2)
    assert stats.floats_sent_total == 52


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["ring", "P2", "net3"]))
def test_volume_law_and_transparency(seed, which):
    from dsqp.problems import load_problem

    problem = _ring() if which == "ring" else load_problem(which)[0]
    rng = np.random.default_rng(seed)
    s = [rng.standard_normal(sub.n) for sub in problem.subsystems]
    x = [rng.standard_normal(sub.n) for sub in problem.subsystems]
    s_bar, stats = exchange_and_average(build_graph(problem), s, x)
    assert stats.floats_per_inner_iteration == [2 * problem.n_c]
    ref = averaging_step(problem, s, x)
    for a, b in zip(s_bar, ref):
        assert a.tobytes() == b.tobytes()


def test_no_hidden_channels(p2):
    """Changing unpaired entries of one subsystem never reaches another."""
    problem, _ = p2
    graph = build_graph(problem)
    rng = np.random.default_rng(3)
    s = [rng.standard_normal(3) for _ in range(4)]
    x = [rng.standard_normal(3) for _ in range(4)]
    base, _ = exchange_and_average(graph, s, x)
    paired = {(p.owner, p.owner_coord) for p in problem.consensus}
    paired |= {(p.copier, p.copier_coord) for p in problem.consensus}
    for j in range(4):
        for c in range(3):
            if (j, c) in paired:
                continue
            s2 = [v.copy() for v in s]
            x2 = [v.copy() for v in x]
            s2[j][c] += 10.0
            x2[j][c] -= 7.0
            out, _ = exchange_and_average(graph, s2, x2)
            for i in range(4):
                if i != j:
                    assert out[i].tobytes() == base[i].tobytes()


def test_messages_only_carry_paired_rows(p2, monkeypatch):
    from dsqp import comm_sim

    problem, _ = p2
    sent = []
    orig = comm_sim._deliver

    def spy(messages, stats):
        sent.extend(messages)
        return orig(messages, stats)

    monkeypatch.setattr(comm_sim, "_deliver", spy)
    exchange_and_average(build_graph(problem), [np.zeros(3)] * 4, [np.zeros(3)] * 4)
    rows = {p.row: p for p in problem.consensus}
    for msg in sent:
        for row, _ in msg.payload:
            assert {msg.src, msg.dst} == {rows[row].owner, rows[row].copier}


def test_allreduce_flags():
    assert allreduce_flags([True, True, True])[0]
    ok, stats = allreduce_flags([True, False, True])
    assert not ok and stats.flags_sent == 3


def test_comm_layer_accumulates(p1):
    problem, _ = p1
    layer = CommLayer(problem)
    for _ in range(3):
        layer.exchange_and_average([np.zeros(2)] * 2, [np.zeros(2)] * 2)
        layer.allreduce_flags([True, False])
    assert layer.stats.floats_sent_total == 3 * 2 * problem.n_c
    assert layer.stats.flags_sent == 6
    assert layer.stats.messages_sent == 6


def test_p1_run_counters(p1, p1_runs):
    problem, _ = p1
    res = p1_runs["geometric"]
    inner = res.inner_iterations
    assert res.comm.floats_sent_total == 2 * problem.n_c * inner
    # one flag round per inner iteration and one per outer convergence check
    assert res.comm.flags_sent == problem.S * (inner + len(res.trace))
    assert not res.comm.centralized
