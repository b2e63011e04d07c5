"""Simulated neighbor-to-neighbor communication.

Subsystems talk only through :class:`Message` objects carrying the values
of paired coordinates or convergence flags. Rounds are synchronous. The
layer keeps exact counts of floats, flags and messages so the traffic of a
run can be audited against its trace.

The averaging uses two rounds per consensus group: every copier sends its
proposed value to the owner of the variable, the owner forms the group mean
and sends it back. That is one float per coupling row in each direction.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .admm_inner import consensus_groups, group_mean
from .errors import NotConsensusError


@dataclass(frozen=True)
class Message:
    src: int
    dst: int
    payload: tuple  # ((row, value), ...)


@dataclass
class CouplingGraph:
    S: int
    edges: dict  # (i, j) with i < j -> tuple of ConsensusPair
    groups: list
    n_c: int

    def neighbors(self, i):
        return sorted({b if a == i else a for a, b in self.edges if i in (a, b)})

    def payload_size(self, i, j):
        return len(self.edges[(min(i, j), max(i, j))])


@dataclass
class CommStats:
    floats_sent_total: int = 0
    flags_sent: int = 0
    messages_sent: int = 0
    floats_per_inner_iteration: list = field(default_factory=list)
    per_edge: dict = field(default_factory=dict)
    centralized: bool = False

    def add(self, other):
        self.floats_sent_total += other.floats_sent_total
        self.flags_sent += other.flags_sent
        self.messages_sent += other.messages_sent
        self.floats_per_inner_iteration.extend(other.floats_per_inner_iteration)
        for k, v in other.per_edge.items():
            self.per_edge[k] = self.per_edge.get(k, 0) + v
        self.centralized = self.centralized or other.centralized

    def to_dict(self):
        per_inner = self.floats_per_inner_iteration
        return {
            "floats_sent_total": self.floats_sent_total,
            "flags_sent": self.flags_sent,
            "messages_sent": self.messages_sent,
            "inner_rounds": len(per_inner),
            "floats_per_inner_iteration": sorted(set(per_inner)),
            "per_edge": {f"{a}-{b}": v for (a, b), v in sorted(self.per_edge.items())},
            "centralized": self.centralized,
        }


def build_graph(problem):
    """Coupling graph of a consensus problem: one edge per neighboring pair."""
    if not problem.is_consensus:
        raise NotConsensusError("coupling graph needs consensus metadata")
    edges = defaultdict(list)
    for pair in problem.consensus:
        key = (min(pair.owner, pair.copier), max(pair.owner, pair.copier))
        edges[key].append(pair)
    groups = consensus_groups(problem)
    copied = defaultdict(int)
    owners = {(p.owner, p.owner_coord) for p in problem.consensus}
    for p in problem.consensus:
        copied[(p.copier, p.copier_coord)] += 1
    if any(v > 1 for v in copied.values()) or owners & set(copied):
        raise NotConsensusError("consensus groups must be stars: a copy may not be copied again")
    return CouplingGraph(problem.S, {k: tuple(v) for k, v in sorted(edges.items())}, groups, problem.n_c)


def _deliver(messages, stats):
    inbox = defaultdict(list)
    for msg in messages:
        inbox[msg.dst].append(msg)
        stats.messages_sent += 1
        stats.floats_sent_total += len(msg.payload)
        key = (min(msg.src, msg.dst), max(msg.src, msg.dst))
        stats.per_edge[key] = stats.per_edge.get(key, 0) + len(msg.payload)
    return inbox


def exchange_and_average(graph, s, x):
    """Neighbor averaging of the paired coordinates of ``x + s``.

    Each subsystem only reads its own ``s_i``, ``x_i`` and its inbox.
    Returns ``(s_bar, stats_delta)``; the result equals
    :func:`dsqp.admm_inner.averaging_step` bit for bit.
    """
    S = graph.S
    stats = CommStats()
    s_bar = [np.array(si, dtype=float) for si in s]

    # round 1: copier -> owner
    outgoing = defaultdict(list)
    for (a, b), pairs in graph.edges.items():
        for p in pairs:
            value = x[p.copier][p.copier_coord] + s[p.copier][p.copier_coord]
            outgoing[(p.copier, p.owner)].append((p.row, float(value)))
    inbox = _deliver([Message(src, dst, tuple(pl)) for (src, dst), pl in sorted(outgoing.items())], stats)

    row_pair = {p.row: p for pairs in graph.edges.values() for p in pairs}
    means = {}
    for owner in range(S):
        received = defaultdict(list)
        for msg in inbox.get(owner, []):
            for row, value in msg.payload:
                received[row_pair[row].owner_coord].append((row, value))
        for coord, items in sorted(received.items()):
            own = x[owner][coord] + s[owner][coord]
            m = group_mean([own] + [v for _, v in items])
            s_bar[owner][coord] = m - x[owner][coord]
            for row, _ in items:
                means[row] = m

    # round 2: owner -> copier
    outgoing = defaultdict(list)
    for row in sorted(means):
        p = row_pair[row]
        outgoing[(p.owner, p.copier)].append((row, means[row]))
    inbox = _deliver([Message(src, dst, tuple(pl)) for (src, dst), pl in sorted(outgoing.items())], stats)
    for copier in range(S):
        for msg in inbox.get(copier, []):
            for row, value in msg.payload:
                coord = row_pair[row].copier_coord
                s_bar[copier][coord] = value - x[copier][coord]

    stats.floats_per_inner_iteration.append(stats.floats_sent_total)
    return s_bar, stats


def allreduce_flags(flags):
    """Logical AND of one flag per subsystem; costs one flag per subsystem."""
    stats = CommStats(flags_sent=len(flags))
    return all(bool(f) for f in flags), stats


class CommLayer:
    """Stateful wrapper accumulating :class:`CommStats` over a run."""

    def __init__(self, problem):
        self.problem = problem
        self.graph = build_graph(problem) if problem.is_consensus else None
        self.stats = CommStats()

    def exchange_and_average(self, s, x):
        if self.graph is None:
            raise NotConsensusError("no coupling graph for a non-consensus problem")
        s_bar, delta = exchange_and_average(self.graph, s, x)
        self.stats.add(delta)
        return s_bar, delta

    def allreduce_flags(self, flags):
        result, delta = allreduce_flags(flags)
        self.stats.add(delta)
        return result, delta

    def mark_centralized(self):
        self.stats.centralized = True
