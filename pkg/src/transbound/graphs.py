"""Causal and selection diagrams with d-separation and c-component queries.

A causal diagram has directed edges (causation) and bidirected edges
(unobserved confounding).  A selection diagram adds, per pair of domains, a
discrepancy set: the variables whose mechanism or exogenous law may differ
between the two domains.  Selection nodes are derived from the discrepancy
sets rather than stored.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import networkx as nx

from .errors import InputError

TARGET = "*"


def _as_tuple(names) -> tuple[str, ...]:
    if isinstance(names, str):
        return (names,)
    return tuple(names)


@dataclass(frozen=True)
class CausalDiagram:
    """Acyclic directed graph plus bidirected confounding edges."""

    nodes: tuple[str, ...]
    directed_edges: frozenset[tuple[str, str]]
    bidirected_edges: frozenset[frozenset[str]]
    _parents: dict = field(init=False, repr=False, compare=False)

    def __init__(self, nodes, directed_edges=(), bidirected_edges=()):
        object.__setattr__(self, "nodes", tuple(nodes))
        if len(set(self.nodes)) != len(self.nodes):
            raise InputError("duplicate node names")
        dir_edges = frozenset((a, b) for a, b in directed_edges)
        bi_edges = frozenset(frozenset(e) for e in bidirected_edges)
        node_set = set(self.nodes)
        for a, b in dir_edges:
            if a == b:
                raise InputError(f"self-loop on {a!r}")
            if a not in node_set or b not in node_set:
                raise InputError(f"edge endpoint not declared: {a!r} -> {b!r}")
        for e in bi_edges:
            if len(e) != 2:
                raise InputError("bidirected self-loop")
            if not e <= node_set:
                raise InputError(f"bidirected endpoint not declared: {sorted(e)}")
        object.__setattr__(self, "directed_edges", dir_edges)
        object.__setattr__(self, "bidirected_edges", bi_edges)
        parents: dict[str, tuple[str, ...]] = {v: () for v in self.nodes}
        for v in self.nodes:
            parents[v] = tuple(a for a in self.nodes if (a, v) in dir_edges)
        object.__setattr__(self, "_parents", parents)
        self.topological_order()  # raises on cycles

    def parents(self, node: str) -> tuple[str, ...]:
        self._check_nodes([node])
        return self._parents[node]

    def children(self, node: str) -> tuple[str, ...]:
        self._check_nodes([node])
        return tuple(b for b in self.nodes if (node, b) in self.directed_edges)

    def topological_order(self) -> tuple[str, ...]:
        """Node order respecting directed edges; stable w.r.t. declaration order."""
        indeg = {v: len(self._parents[v]) for v in self.nodes}
        order, ready = [], [v for v in self.nodes if indeg[v] == 0]
        while ready:
            v = ready.pop(0)
            order.append(v)
            for c in self.children(v):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != len(self.nodes):
            raise InputError("directed part of the diagram is cyclic")
        return tuple(order)

    def _check_nodes(self, names) -> None:
        unknown = set(names) - set(self.nodes)
        if unknown:
            raise InputError(f"unknown node(s): {sorted(unknown)}")

    def latent_expansion(self) -> nx.DiGraph:
        """Directed graph with each bidirected edge replaced by a fresh latent parent."""
        g = nx.DiGraph()
        g.add_nodes_from(self.nodes)
        g.add_edges_from(self.directed_edges)
        for k, e in enumerate(sorted(map(sorted, self.bidirected_edges))):
            latent = f"__latent_{k}"
            g.add_edge(latent, e[0])
            g.add_edge(latent, e[1])
        return g


def d_separated(diagram: CausalDiagram, x, y, z=()) -> bool:
    """True iff every path between x and y is blocked by z.

    Bidirected edges act as paths through a latent common cause.
    """
    x, y, z = set(_as_tuple(x)), set(_as_tuple(y)), set(_as_tuple(z))
    diagram._check_nodes(x | y | z)
    if (x & y) or (x & z) or (y & z):
        raise InputError("x, y, z must be disjoint")
    return nx.is_d_separator(diagram.latent_expansion(), x, y, z)


def ancestral_set(diagram: CausalDiagram, w) -> frozenset[str]:
    """w plus all its directed ancestors."""
    w = _as_tuple(w)
    diagram._check_nodes(w)
    out = set(w)
    frontier = list(w)
    while frontier:
        v = frontier.pop()
        for p in diagram.parents(v):
            if p not in out:
                out.add(p)
                frontier.append(p)
    return frozenset(out)


def c_components(diagram: CausalDiagram, subset=None) -> tuple[frozenset[str], ...]:
    """Partition of subset by bidirected connectivity within the induced subgraph.

    Blocks are returned in the diagram's node order of their first member.
    """
    members = diagram.nodes if subset is None else _as_tuple(subset)
    diagram._check_nodes(members)
    member_set = set(members)
    parent = {v: v for v in members}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for e in diagram.bidirected_edges:
        a, b = tuple(e)
        if a in member_set and b in member_set:
            parent[find(a)] = find(b)
    blocks: dict[str, set[str]] = {}
    for v in diagram.nodes:
        if v in member_set:
            blocks.setdefault(find(v), set()).add(v)
    ordered = sorted(blocks.values(), key=lambda b: min(diagram.nodes.index(v) for v in b))
    return tuple(frozenset(b) for b in ordered)


@dataclass(frozen=True)
class SelectionDiagram:
    """Causal diagram plus pairwise domain discrepancy sets.

    ``domains`` always contains the reserved target label ``"*"``.  The
    discrepancy map is keyed by unordered domain pairs; missing pairs default
    to the empty set.  Triangle consistency across pairs is not assumed.
    """

    base: CausalDiagram
    domains: tuple[str, ...]
    discrepancy: dict

    def __init__(self, base, domains, discrepancy):
        object.__setattr__(self, "base", base)
        doms = tuple(domains)
        if TARGET not in doms:
            doms = doms + (TARGET,)
        if len(set(doms)) != len(doms):
            raise InputError("duplicate domain labels")
        object.__setattr__(self, "domains", doms)
        store: dict[frozenset, frozenset] = {}
        for key, nodes in discrepancy.items():
            pair = frozenset(_as_tuple(key) if not isinstance(key, frozenset) else key)
            if len(pair) != 2 or not pair <= set(doms):
                raise InputError(f"bad domain pair: {sorted(pair)}")
            base._check_nodes(nodes)
            store[pair] = frozenset(nodes)
        object.__setattr__(self, "discrepancy", store)

    @classmethod
    def from_target_deltas(cls, base, deltas: dict) -> "SelectionDiagram":
        """Build from per-source Δ_i only; Δ_ij defaults to Δ_i ∪ Δ_j."""
        doms = tuple(deltas) + (TARGET,)
        disc = {}
        for i in deltas:
            disc[frozenset({i, TARGET})] = frozenset(_as_tuple(deltas[i]))
        for i, j in itertools.combinations(deltas, 2):
            disc[frozenset({i, j})] = frozenset(_as_tuple(deltas[i])) | frozenset(
                _as_tuple(deltas[j])
            )
        return cls(base, doms, disc)

    @property
    def sources(self) -> tuple[str, ...]:
        return tuple(d for d in self.domains if d != TARGET)

    def delta(self, i: str, j: str) -> frozenset[str]:
        if i not in self.domains or j not in self.domains:
            raise InputError(f"unknown domain: {i!r} or {j!r}")
        if i == j:
            return frozenset()
        return self.discrepancy.get(frozenset({i, j}), frozenset())

    def s_node(self, domain: str) -> str:
        return f"S_{domain}"

    def with_s_nodes(self, domains=None) -> CausalDiagram:
        """Base diagram plus derived selection nodes S_i -> Δ_{i*}."""
        doms = self.sources if domains is None else _as_tuple(domains)
        nodes = list(self.base.nodes)
        edges = set(self.base.directed_edges)
        for d in doms:
            if d == TARGET:
                continue
            s = self.s_node(d)
            nodes.append(s)
            for v in sorted(self.delta(d, TARGET)):
                edges.add((s, v))
        return CausalDiagram(nodes, edges, self.base.bidirected_edges)


def transportable_from(sel: SelectionDiagram, block, domain: str) -> bool:
    """True iff the block avoids Δ_{*,domain}, licensing c-factor reuse."""
    if domain not in sel.domains or domain == TARGET:
        raise InputError(f"unknown source domain: {domain!r}")
    block = frozenset(_as_tuple(block))
    sel.base._check_nodes(block)
    return not (block & sel.delta(TARGET, domain))


def parse_diagram(text: str):
    """Parse the diagram text format.

    Lines: ``node <name> <cardinality>``, ``edge <a> -> <b>``,
    ``conf <a> <-> <b>``, ``delta <dom_i> <dom_j> <name>...``.  ``#`` starts a
    comment.  Returns ``(SelectionDiagram, cardinalities)``.
    """
    nodes: list[str] = []
    cards: dict[str, int] = {}
    dir_edges, bi_edges = [], []
    deltas: dict[frozenset, set] = {}
    domains: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0]
        try:
            if kind == "node":
                name, card = parts[1], int(parts[2])
                if card < 2:
                    raise InputError(f"line {lineno}: cardinality must be >= 2")
                nodes.append(name)
                cards[name] = card
            elif kind == "edge":
                if parts[2] != "->":
                    raise InputError(f"line {lineno}: expected '->'")
                dir_edges.append((parts[1], parts[3]))
            elif kind == "conf":
                if parts[2] != "<->":
                    raise InputError(f"line {lineno}: expected '<->'")
                bi_edges.append((parts[1], parts[3]))
            elif kind == "delta":
                i, j, names = parts[1], parts[2], parts[3:]
                for d in (i, j):
                    if d != TARGET and d not in domains:
                        domains.append(d)
                deltas.setdefault(frozenset({i, j}), set()).update(names)
            else:
                raise InputError(f"line {lineno}: unknown directive {kind!r}")
        except (IndexError, ValueError) as exc:
            raise InputError(f"line {lineno}: malformed line {raw!r}") from exc
    base = CausalDiagram(nodes, dir_edges, bi_edges)
    sel = SelectionDiagram(base, tuple(domains), deltas)
    return sel, cards


def serialize_diagram(sel: SelectionDiagram, cards: dict) -> str:
    """Inverse of parse_diagram."""
    lines = [f"node {v} {cards[v]}" for v in sel.base.nodes]
    lines += [f"edge {a} -> {b}" for a, b in sorted(sel.base.directed_edges)]
    lines += [f"conf {a} <-> {b}" for a, b in sorted(map(sorted, sel.base.bidirected_edges))]
    for pair in sorted(sel.discrepancy, key=lambda p: sorted(p)):
        names = sorted(sel.discrepancy[pair])
        if names:
            i, j = sorted(pair)
            lines.append(f"delta {i} {j} " + " ".join(names))
    return "\n".join(lines) + "\n"
