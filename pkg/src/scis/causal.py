"""Exact causal machinery on small discrete structural causal models.

d-separation, backdoor-path enumeration, and observational vs.
interventional distributions by full joint enumeration. Everything here
is an exact oracle: no sampling, no approximation. State spaces are
assumed small (the intended regime is a joint space of a few thousand
states), so brute-force enumeration is both cheap and audit-friendly.

All operations are pure functions on immutable inputs.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

PROB_TOL = 1e-12


class GraphError(ValueError):
    """Malformed graph or unknown node."""


class UndefinedConditionalError(ValueError):
    """Conditioning on a zero-probability event."""


@dataclass(frozen=True)
class Dag:
    """Directed acyclic graph over named nodes."""

    nodes: tuple
    edges: tuple

    def __init__(self, nodes, edges):
        object.__setattr__(self, "nodes", tuple(nodes))
        object.__setattr__(self, "edges", tuple((p, c) for p, c in edges))
        known = set(self.nodes)
        if len(known) != len(self.nodes):
            raise GraphError("duplicate node names")
        seen = set()
        for p, c in self.edges:
            if p not in known or c not in known:
                raise GraphError(f"edge ({p}, {c}) references unknown node")
            if (p, c) in seen:
                raise GraphError(f"duplicate edge ({p}, {c})")
            seen.add((p, c))
        self.topological_order()  # raises on cycles

    def parents(self, node: str) -> tuple:
        self._check(node)
        return tuple(p for p, c in self.edges if c == node)

    def children(self, node: str) -> tuple:
        self._check(node)
        return tuple(c for p, c in self.edges if p == node)

    def descendants(self, node: str) -> set:
        self._check(node)
        out, frontier = set(), [node]
        while frontier:
            n = frontier.pop()
            for c in self.children(n):
                if c not in out:
                    out.add(c)
                    frontier.append(c)
        return out

    def topological_order(self) -> list:
        indeg = {n: 0 for n in self.nodes}
        for _, c in self.edges:
            indeg[c] += 1
        ready = [n for n in self.nodes if indeg[n] == 0]
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for c in self.children(n):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != len(self.nodes):
            raise GraphError("graph contains a cycle")
        return order

    def _check(self, node: str):
        if node not in self.nodes:
            raise GraphError(f"unknown node {node!r}")


def _undirected_simple_paths(g: Dag, start: str, goal: str):
    """All simple paths start..goal ignoring edge direction.

    Yields lists [n0, d0, n1, d1, ..., nk] where di is '->' if the edge
    runs n_i -> n_{i+1} and '<-' otherwise.
    """
    neighbors = {n: [] for n in g.nodes}
    for p, c in g.edges:
        neighbors[p].append((c, "->"))
        neighbors[c].append((p, "<-"))

    def walk(node, visited, acc):
        if node == goal:
            yield list(acc)
            return
        for nxt, direction in neighbors[node]:
            if nxt in visited:
                continue
            visited.add(nxt)
            acc.extend([direction, nxt])
            yield from walk(nxt, visited, acc)
            acc.pop()
            acc.pop()
            visited.discard(nxt)

    yield from walk(start, {start}, [start])


def _path_blocked(g: Dag, path: list, z: set) -> bool:
    """Standard d-separation blocking test for one node/arrow path."""
    nodes = path[0::2]
    dirs = path[1::2]
    for i in range(1, len(nodes) - 1):
        into = dirs[i - 1] == "->"
        out_of = dirs[i] == "->"
        mid = nodes[i]
        if into and not out_of:
            # collider: blocked unless it or a descendant is conditioned on
            if mid not in z and not (g.descendants(mid) & z):
                return True
        else:
            # chain or fork: blocked when the middle node is conditioned on
            if mid in z:
                return True
    return False


def d_separated(g: Dag, x, y, z) -> bool:
    """True iff every undirected path between x and y is blocked by z."""
    x, y, z = set(x), set(y), set(z)
    for n in x | y | z:
        g._check(n)
    if x & y or x & z or y & z:
        raise GraphError("d-separation query sets must be disjoint")
    for a in sorted(x):
        for b in sorted(y):
            for path in _undirected_simple_paths(g, a, b):
                if not _path_blocked(g, path, z):
                    return False
    return True


def backdoor_paths(g: Dag, s: str, y: str) -> list:
    """All simple paths from s to y whose first edge points into s.

    Paths are alternating node/arrow sequences in lexicographic order.
    """
    g._check(s)
    g._check(y)
    if s == y:
        raise GraphError("treatment and outcome must differ")
    found = [p for p in _undirected_simple_paths(g, s, y) if p[1] == "<-"]
    return sorted(found, key=tuple)


def satisfies_backdoor(g: Dag, s: str, y: str, z) -> bool:
    """Backdoor criterion: z has no descendant of s and blocks all backdoor paths."""
    z = set(z)
    for n in z:
        g._check(n)
    if z & g.descendants(s) or s in z or y in z:
        return False
    return all(_path_blocked(g, p, z) for p in backdoor_paths(g, s, y))


@dataclass(frozen=True)
class Distribution:
    """Probability vector over one variable's states."""

    variable: str
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        if abs(p.sum() - 1.0) > PROB_TOL or (p < -PROB_TOL).any() or (p > 1 + PROB_TOL).any():
            raise ValueError(f"invalid distribution for {self.variable}: {p}")

    def __getitem__(self, state: int) -> float:
        return float(self.probs[state])


class DiscreteScm:
    """A DAG plus per-node conditional probability tables.

    CPT convention: for a node with parents (p1, ..., pm) ordered by their
    position in ``graph.nodes``, ``cpts[node]`` has one row per parent
    assignment, enumerated in mixed radix with the *last* parent varying
    fastest; each row is a distribution over the node's states.
    """

    def __init__(self, graph: Dag, cardinalities: dict, cpts: dict):
        self.graph = graph
        self.cards = dict(cardinalities)
        for n in graph.nodes:
            if self.cards.get(n, 0) < 2:
                raise ValueError(f"node {n!r} needs cardinality >= 2")
        self.cpts = {}
        order = {n: i for i, n in enumerate(graph.nodes)}
        self._parents = {
            n: tuple(sorted(graph.parents(n), key=order.get)) for n in graph.nodes
        }
        for n in graph.nodes:
            table = np.asarray(cpts[n], dtype=np.float64)
            expected_rows = int(np.prod([self.cards[p] for p in self._parents[n]], dtype=np.int64)) if self._parents[n] else 1
            if table.shape != (expected_rows, self.cards[n]):
                raise ValueError(
                    f"CPT for {n!r} has shape {table.shape}, expected ({expected_rows}, {self.cards[n]})")
            if (table < 0).any() or np.abs(table.sum(axis=1) - 1.0).max() > PROB_TOL:
                raise ValueError(f"CPT rows for {n!r} are not distributions")
            self.cpts[n] = table

    def parents(self, node: str) -> tuple:
        return self._parents[node]

    def joint_size(self) -> int:
        return int(np.prod([self.cards[n] for n in self.graph.nodes], dtype=np.int64))

    def _row_index(self, node: str, assignment: dict) -> int:
        idx = 0
        for p in self._parents[node]:
            idx = idx * self.cards[p] + assignment[p]
        return idx

    def _assignments(self, fixed: dict):
        free = [n for n in self.graph.nodes if n not in fixed]
        for states in itertools.product(*(range(self.cards[n]) for n in free)):
            a = dict(fixed)
            a.update(zip(free, states))
            yield a

    def joint_probability(self, assignment: dict, skip_factors=()) -> float:
        p = 1.0
        for n in self.graph.nodes:
            if n in skip_factors:
                continue
            p *= self.cpts[n][self._row_index(n, assignment), assignment[n]]
        return p

    def _validate_states(self, states: dict):
        for n, s in states.items():
            self.graph._check(n)
            if not 0 <= s < self.cards[n]:
                raise ValueError(f"state {s} out of range for {n!r}")


def observational(scm: DiscreteScm, y: str, given: dict | None = None) -> Distribution:
    """Exact P(y | given) by full joint enumeration."""
    given = dict(given or {})
    scm.graph._check(y)
    scm._validate_states(given)
    if y in given:
        raise ValueError(f"query node {y!r} appears in the conditioning set")
    probs = np.zeros(scm.cards[y])
    for state in range(scm.cards[y]):
        fixed = dict(given)
        fixed[y] = state
        probs[state] = sum(scm.joint_probability(a) for a in scm._assignments(fixed))
    total = probs.sum()
    if total <= 0.0:
        raise UndefinedConditionalError(
            f"conditioning event {given} has zero probability")
    return Distribution(y, probs / total)


def interventional(scm: DiscreteScm, y: str, do: dict) -> Distribution:
    """Exact P(y | do(...)) by truncated factorization.

    Incoming edges of do-nodes are severed by clamping their states and
    dropping their CPT factors from the mutilated joint.
    """
    do = dict(do)
    scm.graph._check(y)
    scm._validate_states(do)
    if y in do:
        raise ValueError(f"query node {y!r} appears in the do-set")
    skip = frozenset(do)
    probs = np.zeros(scm.cards[y])
    for state in range(scm.cards[y]):
        fixed = dict(do)
        fixed[y] = state
        probs[state] = sum(
            scm.joint_probability(a, skip_factors=skip) for a in scm._assignments(fixed))
    return Distribution(y, probs / probs.sum())


def backdoor_adjustment(scm: DiscreteScm, y: str, s: str, s_state: int, z_nodes) -> Distribution:
    """Sum-over-z adjustment estimate of P(y | do(s)) from observational terms.

    Computes sum_z P(y | s, z) P(z). Valid (equal to ``interventional``)
    exactly when z_nodes satisfies the backdoor criterion for (s, y).
    """
    z_nodes = tuple(z_nodes)
    scm._validate_states({s: s_state})
    probs = np.zeros(scm.cards[y])
    for z_states in itertools.product(*(range(scm.cards[z]) for z in z_nodes)):
        z_assign = dict(zip(z_nodes, z_states))
        pz = sum(scm.joint_probability(a) for a in scm._assignments(z_assign))
        if pz == 0.0:
            continue
        cond = observational(scm, y, {s: s_state, **z_assign})
        probs += pz * cond.probs
    return Distribution(y, probs / probs.sum())


def build_vad_scm() -> Dag:
    """Fixed causal graph of a sequential vectorized-driving pipeline.

    Image I feeds a BEV grid B, which produces object (O) and map (M)
    queries; O and M drive agent motion A; A and M drive the ego plan E;
    O and M feed classification outputs Y_o, Y_m, each confounded by a
    latent co-occurrence context (Z_o, Z_m).
    """
    nodes = ["I", "B", "O", "M", "A", "E", "Y_o", "Y_m", "Z_o", "Z_m"]
    edges = [
        ("I", "B"), ("B", "O"), ("B", "M"),
        ("O", "A"), ("M", "A"), ("A", "E"), ("M", "E"),
        ("O", "Y_o"), ("M", "Y_m"),
        ("Z_o", "O"), ("Z_o", "Y_o"),
        ("Z_m", "M"), ("Z_m", "Y_m"),
    ]
    return Dag(nodes, edges)


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def scm_to_json(scm: DiscreteScm) -> dict:
    return {
        "nodes": [{"name": n, "card": scm.cards[n]} for n in scm.graph.nodes],
        "edges": [[p, c] for p, c in scm.graph.edges],
        "cpts": {n: scm.cpts[n].tolist() for n in scm.graph.nodes},
    }


def scm_from_json(obj: dict) -> DiscreteScm:
    nodes = [d["name"] for d in obj["nodes"]]
    cards = {d["name"]: int(d["card"]) for d in obj["nodes"]}
    graph = Dag(nodes, [tuple(e) for e in obj["edges"]])
    return DiscreteScm(graph, cards, obj["cpts"])


def load_scm(path: str) -> DiscreteScm:
    with open(path) as fh:
        return scm_from_json(json.load(fh))


def save_scm(scm: DiscreteScm, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(scm_to_json(scm), fh, indent=1)
        fh.write("\n")
