import itertools

import numpy as np
import pytest

from scis import causal as cg


def three_node_scm():
    """Binary confounder fixture: Z -> S, Z -> Y, S -> Y."""
    g = cg.Dag(["Z", "S", "Y"], [("Z", "S"), ("Z", "Y"), ("S", "Y")])
    return cg.DiscreteScm(g, {"Z": 2, "S": 2, "Y": 2}, {
        "Z": [[0.5, 0.5]],
        "S": [[0.9, 0.1], [0.1, 0.9]],
        # rows ordered (z, s) with s varying fastest; P(Y=1) = 0.7 s + 0.2 z
        "Y": [[1.0, 0.0], [0.3, 0.7], [0.8, 0.2], [0.1, 0.9]],
    })


def random_scm(rng, max_joint=4096):
    """Random small DAG with Dirichlet-ish CPT rows."""
    n = int(rng.integers(3, 6))
    names = [f"N{i}" for i in range(n)]
    order = list(rng.permutation(names))
    edges = []
    for i, child in enumerate(order):
        for parent in order[:i]:
            if rng.uniform() < 0.45:
                edges.append((parent, child))
    cards = {}
    joint = 1
    for name in names:
        c = int(rng.integers(2, 4))
        if joint * c > max_joint:
            c = 2
        cards[name] = c
        joint *= c
    g = cg.Dag(names, edges)
    cpts = {}
    for name in names:
        parents = sorted(g.parents(name), key=names.index)
        rows = int(np.prod([cards[p] for p in parents])) if parents else 1
        table = rng.uniform(0.05, 1.0, size=(rows, cards[name]))
        cpts[name] = table / table.sum(axis=1, keepdims=True)
    return cg.DiscreteScm(g, cards, cpts)


class TestDag:
    def test_cycle_rejected(self):
        with pytest.raises(cg.GraphError, match="cycle"):
            cg.Dag(["A", "B"], [("A", "B"), ("B", "A")])

    def test_duplicate_edge_rejected(self):
        with pytest.raises(cg.GraphError):
            cg.Dag(["A", "B"], [("A", "B"), ("A", "B")])

    def test_unknown_endpoint_rejected(self):
        with pytest.raises(cg.GraphError):
            cg.Dag(["A"], [("A", "B")])

    def test_descendants(self):
        g = cg.Dag(["A", "B", "C"], [("A", "B"), ("B", "C")])
        assert g.descendants("A") == {"B", "C"}


class TestDSeparation:
    def test_chain_blocked_by_middle(self):
        g = cg.Dag(["A", "B", "C"], [("A", "B"), ("B", "C")])
        assert cg.d_separated(g, {"A"}, {"C"}, {"B"})
        assert not cg.d_separated(g, {"A"}, {"C"}, set())

    def test_fork_open_without_conditioning(self):
        g = cg.Dag(["A", "Z", "C"], [("Z", "A"), ("Z", "C")])
        assert not cg.d_separated(g, {"A"}, {"C"}, set())
        assert cg.d_separated(g, {"A"}, {"C"}, {"Z"})

    def test_collider(self):
        g = cg.Dag(["A", "B", "C"], [("A", "B"), ("C", "B")])
        assert cg.d_separated(g, {"A"}, {"C"}, set())
        assert not cg.d_separated(g, {"A"}, {"C"}, {"B"})

    def test_collider_descendant_opens_path(self):
        g = cg.Dag(["A", "B", "C", "D"],
                   [("A", "B"), ("C", "B"), ("B", "D")])
        assert not cg.d_separated(g, {"A"}, {"C"}, {"D"})

    def test_unknown_node_raises(self):
        g = cg.Dag(["A", "B"], [("A", "B")])
        with pytest.raises(cg.GraphError):
            cg.d_separated(g, {"A"}, {"X"}, set())

    def test_dsep_implies_conditional_independence(self):
        """P(Y|X,Z) == P(Y|Z) whenever the graph says so, by enumeration."""
        rng = np.random.default_rng(7)
        checked = 0
        for _ in range(20):
            scm = random_scm(rng)
            names = list(scm.graph.nodes)
            x, y = rng.choice(names, size=2, replace=False)
            rest = [n for n in names if n not in (x, y)]
            z = [n for n in rest if rng.uniform() < 0.5]
            if not cg.d_separated(scm.graph, {x}, {y}, set(z)):
                continue
            for z_states in itertools.product(*(range(scm.cards[n]) for n in z)):
                given_z = dict(zip(z, z_states))
                try:
                    p_y_z = cg.observational(scm, y, given_z)
                except cg.UndefinedConditionalError:
                    continue
                for xs in range(scm.cards[x]):
                    try:
                        p_y_xz = cg.observational(scm, y, {**given_z, x: xs})
                    except cg.UndefinedConditionalError:
                        continue
                    assert np.allclose(p_y_xz.probs, p_y_z.probs, atol=1e-10)
                    checked += 1
        assert checked > 0


class TestBackdoorPaths:
    def test_no_incoming_edge_means_no_backdoor(self):
        g = cg.Dag(["S", "Y"], [("S", "Y")])
        assert cg.backdoor_paths(g, "S", "Y") == []

    def test_confounder_path_found(self):
        g = cg.Dag(["S", "Z", "Y"], [("Z", "S"), ("Z", "Y"), ("S", "Y")])
        assert cg.backdoor_paths(g, "S", "Y") == [["S", "<-", "Z", "->", "Y"]]

    def test_lexicographic_and_permutation_stable(self):
        edges = [("Z", "S"), ("Z", "Y"), ("W", "S"), ("W", "Y"), ("S", "Y")]
        g1 = cg.Dag(["S", "Z", "Y", "W"], edges)
        g2 = cg.Dag(["W", "Y", "Z", "S"], edges)
        assert cg.backdoor_paths(g1, "S", "Y") == cg.backdoor_paths(g2, "S", "Y")

    def test_same_node_rejected(self):
        g = cg.Dag(["S"], [])
        with pytest.raises(cg.GraphError):
            cg.backdoor_paths(g, "S", "S")


class TestVadGraph:
    def test_acyclic(self):
        g = cg.build_vad_scm()
        assert len(g.topological_order()) == 10

    def test_named_backdoor_paths_present(self):
        g = cg.build_vad_scm()
        assert ["O", "<-", "Z_o", "->", "Y_o"] in cg.backdoor_paths(g, "O", "Y_o")
        assert ["M", "<-", "Z_m", "->", "Y_m"] in cg.backdoor_paths(g, "M", "Y_m")
        assert ["O", "<-", "B", "->", "M", "->", "A"] in cg.backdoor_paths(g, "O", "A")
        assert ["M", "<-", "B", "->", "O", "->", "A"] in cg.backdoor_paths(g, "M", "A")


class TestInference:
    def test_observational_fixture(self):
        scm = three_node_scm()
        assert abs(cg.observational(scm, "Y", {"S": 1})[1] - 0.880) < 1e-12
        # recomputed with the same enumeration oracle
        assert abs(cg.observational(scm, "Y", {"S": 0})[1] - 0.020) < 1e-12

    def test_interventional_fixture(self):
        scm = three_node_scm()
        assert abs(cg.interventional(scm, "Y", {"S": 1})[1] - 0.800) < 1e-12

    def test_independent_y_ignores_conditioning(self):
        g = cg.Dag(["S", "Y"], [])
        scm = cg.DiscreteScm(g, {"S": 2, "Y": 2},
                             {"S": [[0.3, 0.7]], "Y": [[0.6, 0.4]]})
        assert np.allclose(cg.observational(scm, "Y", {"S": 1}).probs,
                           cg.observational(scm, "Y").probs)

    def test_do_equals_see_without_backdoor(self):
        g = cg.Dag(["S", "Y", "Z"], [("S", "Y"), ("Z", "Y")])
        rng = np.random.default_rng(3)
        t = rng.uniform(0.1, 1.0, size=(4, 2))
        scm = cg.DiscreteScm(g, {"S": 2, "Y": 2, "Z": 2}, {
            "S": [[0.4, 0.6]], "Z": [[0.7, 0.3]],
            "Y": t / t.sum(axis=1, keepdims=True)})
        assert np.allclose(cg.interventional(scm, "Y", {"S": 1}).probs,
                           cg.observational(scm, "Y", {"S": 1}).probs, atol=1e-12)

    def test_do_on_root_equals_conditioning(self):
        scm = three_node_scm()
        assert np.allclose(cg.interventional(scm, "Y", {"Z": 1}).probs,
                           cg.observational(scm, "Y", {"Z": 1}).probs, atol=1e-12)

    def test_zero_probability_conditioning_raises(self):
        g = cg.Dag(["S", "Y"], [("S", "Y")])
        scm = cg.DiscreteScm(g, {"S": 2, "Y": 2},
                             {"S": [[1.0, 0.0]], "Y": [[0.5, 0.5], [0.2, 0.8]]})
        with pytest.raises(cg.UndefinedConditionalError):
            cg.observational(scm, "Y", {"S": 1})

    def test_truncated_factorization_matches_adjustment(self):
        """Random SCMs: do() equals the sum-over-z formula under the criterion."""
        rng = np.random.default_rng(11)
        checked = 0
        for _ in range(60):
            scm = random_scm(rng)
            names = list(scm.graph.nodes)
            s, y = rng.choice(names, size=2, replace=False)
            if s in scm.graph.descendants(y):
                s, y = y, s
            candidates = [n for n in names
                          if n not in (s, y) and n not in scm.graph.descendants(s)]
            z = tuple(candidates)
            if not cg.satisfies_backdoor(scm.graph, s, y, z):
                continue
            for s_state in range(scm.cards[s]):
                do = cg.interventional(scm, y, {s: s_state})
                adj = cg.backdoor_adjustment(scm, y, s, s_state, z)
                assert np.max(np.abs(do.probs - adj.probs)) < 1e-12
                checked += 1
        assert checked >= 20


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        scm = three_node_scm()
        path = tmp_path / "scm.json"
        cg.save_scm(scm, str(path))
        back = cg.load_scm(str(path))
        assert back.graph.nodes == scm.graph.nodes
        assert back.graph.edges == scm.graph.edges
        for n in scm.graph.nodes:
            assert np.array_equal(back.cpts[n], scm.cpts[n])

    def test_bad_cpt_rejected(self):
        g = cg.Dag(["A"], [])
        with pytest.raises(ValueError):
            cg.DiscreteScm(g, {"A": 2}, {"A": [[0.5, 0.6]]})

    def test_cardinality_lower_bound(self):
        g = cg.Dag(["A"], [])
        with pytest.raises(ValueError):
            cg.DiscreteScm(g, {"A": 1}, {"A": [[1.0]]})
