"""Graph primitives: d-separation, c-components, ancestral sets."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transbound import (
    CausalDiagram,
    InputError,
    SelectionDiagram,
    ancestral_set,
    c_components,
    d_separated,
    transportable_from,
)
from transbound.fixtures import fixture


# ---------------------------------------------------------------------------
# independent oracle: enumerate every simple path and test blocking directly


def _expanded_edges(diagram):
    edges = list(diagram.directed_edges)
    for k, e in enumerate(sorted(map(sorted, diagram.bidirected_edges))):
        latent = f"L{k}"
        edges.append((latent, e[0]))
        edges.append((latent, e[1]))
    return edges


def _ancestors_of(edges, targets):
    parents = {}
    for a, b in edges:
        parents.setdefault(b, set()).add(a)
    out = set(targets)
    frontier = list(targets)
    while frontier:
        v = frontier.pop()
        for p in parents.get(v, ()):
            if p not in out:
                out.add(p)
                frontier.append(p)
    return out


def oracle_d_separated(diagram, x, y, z):
    """Path-by-path d-separation check on the latent expansion."""
    edges = _expanded_edges(diagram)
    edge_set = set(edges)
    adjacent = {}
    for a, b in edges:
        adjacent.setdefault(a, set()).add(b)
        adjacent.setdefault(b, set()).add(a)
    z = set(z)
    anc_z = _ancestors_of(edges, z)

    def connects(path):
        for i in range(1, len(path) - 1):
            v = path[i]
            into_left = (path[i - 1], v) in edge_set
            into_right = (path[i + 1], v) in edge_set
            if into_left and into_right:  # collider
                if v not in anc_z:
                    return False
            elif v in z:
                return False
        return True

    def dfs(path):
        v = path[-1]
        if v == y:
            return connects(path)
        for nxt in adjacent.get(v, ()):
            if nxt not in path and (nxt == y or True):
                if dfs(path + [nxt]):
                    return True
        return False

    return not dfs([x])


def _random_diagram(rng):
    n = int(rng.integers(3, 9))
    nodes = [f"V{i}" for i in range(n)]
    directed = [
        (nodes[i], nodes[j])
        for i in range(n)
        for j in range(i + 1, n)
        if rng.random() < 0.25
    ]
    bidirected = [
        (nodes[i], nodes[j])
        for i in range(n)
        for j in range(i + 1, n)
        if rng.random() < 0.12
    ]
    return CausalDiagram(nodes, directed, bidirected)


def test_d_separation_matches_path_oracle_on_random_graphs():
    rng = np.random.default_rng(20240817)
    checked = 0
    for _ in range(1000):
        diagram = _random_diagram(rng)
        nodes = list(diagram.nodes)
        x, y = rng.choice(nodes, size=2, replace=False)
        rest = [v for v in nodes if v not in (x, y)]
        k = int(rng.integers(0, min(3, len(rest)) + 1))
        z = list(rng.choice(rest, size=k, replace=False)) if k else []
        assert d_separated(diagram, x, y, z) == oracle_d_separated(diagram, x, y, z)
        checked += 1
    assert checked == 1000


# ---------------------------------------------------------------------------
# structural properties


@st.composite
def diagrams(draw):
    n = draw(st.integers(min_value=2, max_value=6))
    nodes = [f"V{i}" for i in range(n)]
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    directed = [
        (nodes[i], nodes[j]) for i, j in pairs if draw(st.booleans())
    ]
    bidirected = [
        (nodes[i], nodes[j]) for i, j in pairs if draw(st.sampled_from([0, 0, 1]))
    ]
    return CausalDiagram(nodes, directed, bidirected)


@settings(max_examples=60, deadline=None)
@given(diagrams(), st.data())
def test_d_separation_is_symmetric(diagram, data):
    nodes = list(diagram.nodes)
    x = data.draw(st.sampled_from(nodes))
    y = data.draw(st.sampled_from([v for v in nodes if v != x]))
    rest = [v for v in nodes if v not in (x, y)]
    z = [v for v in rest if data.draw(st.booleans())]
    assert d_separated(diagram, x, y, z) == d_separated(diagram, y, x, z)


@settings(max_examples=60, deadline=None)
@given(diagrams())
def test_c_components_partition_the_nodes(diagram):
    blocks = c_components(diagram)
    seen = [v for blk in blocks for v in blk]
    assert sorted(seen) == sorted(diagram.nodes)
    for a, b in itertools.combinations(blocks, 2):
        assert not (a & b)


@settings(max_examples=60, deadline=None)
@given(diagrams(), st.data())
def test_ancestral_set_idempotent_and_monotone(diagram, data):
    nodes = list(diagram.nodes)
    w = [v for v in nodes if data.draw(st.booleans())] or [nodes[0]]
    a = ancestral_set(diagram, w)
    assert ancestral_set(diagram, tuple(a)) == a
    extra = data.draw(st.sampled_from(nodes))
    assert a <= ancestral_set(diagram, list(set(w) | {extra}))


def test_bidirected_edge_connects_without_directed_path():
    diagram = CausalDiagram(("A", "B"), [], [("A", "B")])
    assert not d_separated(diagram, "A", "B", [])
    assert c_components(diagram) == (frozenset({"A", "B"}),)


def test_collider_opens_when_conditioned():
    diagram = CausalDiagram(("A", "B", "C"), [("A", "C"), ("B", "C")])
    assert d_separated(diagram, "A", "B", [])
    assert not d_separated(diagram, "A", "B", ["C"])


def test_disjointness_is_enforced():
    diagram = CausalDiagram(("A", "B"), [("A", "B")])
    with pytest.raises(InputError):
        d_separated(diagram, "A", "A", [])


# ---------------------------------------------------------------------------
# selection diagrams


def test_selection_node_separation_on_the_two_domain_chain_fixture():
    sel = fixture("neural_tr").sel
    graph = sel.with_s_nodes()
    assert d_separated(graph, sel.s_node("2"), ["Y", "W3"], ["C2", "W2"])
    assert not d_separated(graph, sel.s_node("1"), ["Y"], [])


def test_transportability_reads_the_discrepancy_sets():
    diagram = CausalDiagram(("X", "Y"), [("X", "Y")])
    sel = SelectionDiagram.from_target_deltas(diagram, {"1": {"X"}})
    assert transportable_from(sel, {"Y"}, "1")
    assert not transportable_from(sel, {"X"}, "1")
    assert sel.delta("1", "*") == frozenset({"X"})
