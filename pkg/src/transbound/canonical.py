"""Response-function models over discrete causal diagrams.

Every discrete SCM is equivalent to a model in which each variable V carries a
discrete exogenous index R_V selecting one of the m_V functions from parent
values to supp_V, with the R indices correlated only within c-components.
These models form the search space of the bound optimizer and the parameter
geometry of the Gibbs sampler.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, InputError
from .graphs import CausalDiagram, c_components
from .scm import DiscreteSCM, JointTable

RESPONSE_CARD_LIMIT = 2**20
DEFAULT_BLOCK_BUDGET = 2**20


def response_card(node: str, supports: dict, parents) -> int:
    """m_V = |supp_V| ^ (number of parent value combinations)."""
    combos = 1
    for p in parents:
        combos *= len(supports[p])
    card = len(supports[node]) ** combos
    return card


def response_support(node: str, supports: dict, parents):
    """Enumerate the m_V functions supp_pa -> supp_V in the frozen order.

    Each function is a tuple of output value indices, one per parent
    combination (combinations enumerated lexicographically over parent value
    indices in parent order).  Constant functions come first, in support
    order, followed by the remaining functions lexicographically by output
    tuple.  For a binary node with one binary parent this yields
    [const-0, const-1, identity, negation].
    """
    parents = tuple(parents)
    card = response_card(node, supports, parents)
    if card > RESPONSE_CARD_LIMIT:
        raise BudgetError(
            f"{card} response functions for {node!r} exceed the {RESPONSE_CARD_LIMIT} limit"
        )
    combos = 1
    for p in parents:
        combos *= len(supports[p])
    k = len(supports[node])
    constants = [tuple([v] * combos) for v in range(k)]
    rest = [
        f for f in itertools.product(range(k), repeat=combos) if len(set(f)) > 1
    ]
    return constants + rest


@dataclass(frozen=True)
class CanonicalModel:
    """Joint law over response indices, factored per c-component block."""

    diagram: CausalDiagram
    supports: dict
    blocks: tuple[tuple[str, ...], ...]
    block_tables: dict = field(compare=False)

    def __init__(self, diagram, supports, block_tables, budget: int = DEFAULT_BLOCK_BUDGET):
        supports = {v: tuple(supports[v]) for v in diagram.nodes}
        blocks = tuple(
            tuple(v for v in diagram.nodes if v in blk) for blk in c_components(diagram)
        )
        tables = {}
        for blk in blocks:
            key = frozenset(blk)
            if key not in block_tables and blk not in block_tables:
                raise InputError(f"missing probability table for block {blk}")
            raw = block_tables.get(key, block_tables.get(blk))
            table = np.asarray(raw, dtype=float)
            shape = tuple(response_card(v, supports, diagram.parents(v)) for v in blk)
            if int(np.prod(shape)) > budget:
                raise BudgetError(f"block {blk} has {int(np.prod(shape))} cells > budget {budget}")
            if table.shape != shape:
                raise InputError(f"block {blk} table shape {table.shape} != {shape}")
            if np.any(table < -1e-12) or abs(float(table.sum()) - 1.0) > 1e-9:
                raise InputError(f"block {blk} table is not a distribution")
            tables[blk] = np.clip(table, 0.0, None)
        object.__setattr__(self, "diagram", diagram)
        object.__setattr__(self, "supports", supports)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "block_tables", tables)

    @property
    def response_cards(self) -> dict:
        return {
            v: response_card(v, self.supports, self.diagram.parents(v))
            for v in self.diagram.nodes
        }

    def block_of(self, node: str) -> tuple[str, ...]:
        for blk in self.blocks:
            if node in blk:
                return blk
        raise InputError(f"unknown node {node!r}")

    def response_marginal(self, node: str) -> np.ndarray:
        """P(r_V), summed out of V's block table."""
        blk = self.block_of(node)
        axes = tuple(i for i, v in enumerate(blk) if v != node)
        return self.block_tables[blk].sum(axis=axes) if axes else self.block_tables[blk]

    def entailed_distribution(self) -> JointTable:
        """Exact P(v): product over blocks of Σ_r 1{v = evaluate(r)} P(r)."""
        scope = self.diagram.nodes
        probs = np.ones(tuple(len(self.supports[v]) for v in scope))
        for blk in self.blocks:
            emit = block_emission(self.diagram, self.supports, blk, scope)
            flat = emit.reshape(probs.size, -1) @ self.block_tables[blk].reshape(-1)
            probs = probs * flat.reshape(probs.shape)
        return JointTable(scope, self.supports, probs)


def evaluation_table(diagram: CausalDiagram, supports: dict, node: str) -> np.ndarray:
    """Array [r_V, pa_combo] -> output value index, combos in lexicographic order."""
    funcs = response_support(node, supports, diagram.parents(node))
    return np.asarray(funcs, dtype=np.int64)


def block_emission(diagram: CausalDiagram, supports: dict, block, scope) -> np.ndarray:
    """Indicator array over (scope values..., block response indices...).

    Entry is 1 iff every block variable's selected function maps its parents'
    values (read off the scope assignment) to its own value in the assignment.
    The scope must contain the block and all its parents.
    """
    block = tuple(v for v in diagram.nodes if v in set(block))
    scope = tuple(scope)
    needed = set(block)
    for v in block:
        needed |= set(diagram.parents(v))
    if not needed <= set(scope):
        raise InputError("scope must contain the block and its parents")
    shape = tuple(len(supports[v]) for v in scope)
    grids = np.meshgrid(*[np.arange(s) for s in shape], indexing="ij", sparse=False)
    value_idx = {v: grids[i] for i, v in enumerate(scope)}
    out = np.ones(shape + tuple(response_card(v, supports, diagram.parents(v)) for v in block))
    for k, v in enumerate(block):
        ev = evaluation_table(diagram, supports, v)
        combo = np.zeros(shape, dtype=np.int64)
        for p in diagram.parents(v):
            combo = combo * len(supports[p]) + value_idx[p]
        produced = ev[:, combo.reshape(-1)].reshape((ev.shape[0],) + shape)
        compat = np.moveaxis((produced == value_idx[v][None]).astype(float), 0, -1)
        out = out * compat.reshape(shape + (1,) * k + (ev.shape[0],) + (1,) * (len(block) - 1 - k))
    return out


def from_scm(scm: DiscreteSCM, budget: int = DEFAULT_BLOCK_BUDGET) -> CanonicalModel:
    """Convert a discrete SCM by accumulating induced response profiles."""
    diagram = scm.diagram
    supports = scm.supports
    blocks = tuple(tuple(v for v in diagram.nodes if v in blk) for blk in c_components(diagram))
    func_index: dict[str, dict] = {}
    for v in diagram.nodes:
        funcs = response_support(v, supports, diagram.parents(v))
        func_index[v] = {f: i for i, f in enumerate(funcs)}
    shapes = {
        blk: tuple(response_card(v, supports, diagram.parents(v)) for v in blk)
        for blk in blocks
    }
    for blk, shape in shapes.items():
        if int(np.prod(shape)) > budget:
            raise BudgetError(f"block {blk} table would have {int(np.prod(shape))} cells")
    tables = {blk: np.zeros(shapes[blk]) for blk in blocks}
    names = [u.name for u in scm.exo_vars]
    val_idx = {v: {val: i for i, val in enumerate(supports[v])} for v in diagram.nodes}
    for combo in itertools.product(*(u.support for u in scm.exo_vars)):
        weight = 1.0
        for u, val in zip(scm.exo_vars, combo):
            weight *= u.probs[u.support.index(val)]
        if weight == 0.0:
            continue
        exo = dict(zip(names, combo))
        profile: dict[str, int] = {}
        for v in diagram.nodes:
            mech = scm.mechanisms[v]
            ex_vals = tuple(exo[u] for u in mech.exo_order)
            outputs = []
            for pa_vals in itertools.product(*(supports[p] for p in mech.parent_order)):
                outputs.append(val_idx[v][mech(pa_vals, ex_vals)])
            profile[v] = func_index[v][tuple(outputs)]
        for blk in blocks:
            tables[blk][tuple(profile[v] for v in blk)] += weight
    return CanonicalModel(diagram, supports, tables, budget=budget)


@dataclass(frozen=True)
class ConstraintSet:
    """Cross-domain marginal ties plus per-source data matches."""

    marginal_ties: tuple  # (domain_i, domain_j, node)
    data_matches: tuple  # (domain, JointTable)

    @classmethod
    def from_selection(cls, sel, data: dict, nodes=None) -> "ConstraintSet":
        """All pairwise ties licensed by the discrepancy sets, plus data matches.

        ``nodes`` restricts which variables are tied (defaults to every node).
        """
        allowed = set(sel.base.nodes if nodes is None else nodes)
        ties = []
        for i, j in itertools.combinations(sel.domains, 2):
            for v in sel.base.nodes:
                if v in allowed and v not in sel.delta(i, j):
                    ties.append((i, j, v))
        matches = tuple((dom, data[dom]) for dom in sorted(data))
        for dom, _ in matches:
            if dom not in sel.domains or dom == "*":
                raise InputError(f"data match for non-source domain {dom!r}")
        return cls(tuple(ties), matches)


@dataclass(frozen=True)
class ConstraintReport:
    """Per-constraint residuals from check_constraints."""

    entries: tuple  # (kind, detail, residual)

    @property
    def max_residual(self) -> float:
        return max((r for _, _, r in self.entries), default=0.0)

    def ok(self, tol: float) -> bool:
        return self.max_residual <= tol

    def violations(self, tol: float):
        return tuple(e for e in self.entries if e[2] > tol)


def check_constraints(models: dict, cs: ConstraintSet, tol: float = 1e-4) -> ConstraintReport:
    """Residuals: max-abs marginal gap per tie, total variation per data match."""
    entries = []
    for i, j, v in cs.marginal_ties:
        if i not in models or j not in models:
            continue
        gap = float(
            np.abs(models[i].response_marginal(v) - models[j].response_marginal(v)).max()
        )
        entries.append(("tie", f"{i}~{j}:{v}", gap))
    entailed_cache: dict = {}
    for dom, table in cs.data_matches:
        if dom not in models:
            continue
        if dom not in entailed_cache:
            entailed_cache[dom] = models[dom].entailed_distribution()
        tv = entailed_cache[dom].marginal(table.scope).total_variation(table)
        entries.append(("data", dom, tv))
    return ConstraintReport(tuple(entries))


def serialize_canonical(model: CanonicalModel) -> str:
    """Key-value text format with block signatures for validation."""
    lines = []
    for blk in model.blocks:
        cards = [str(response_card(v, model.supports, model.diagram.parents(v))) for v in blk]
        lines.append("block " + ",".join(blk) + " " + ",".join(cards))
        flat = model.block_tables[blk].reshape(-1)
        lines.append("probs " + " ".join(repr(float(x)) for x in flat))
    return "\n".join(lines) + "\n"


def parse_canonical(text: str, diagram: CausalDiagram, supports: dict) -> CanonicalModel:
    """Inverse of serialize_canonical; validates block signatures."""
    tables = {}
    pending = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "block":
            blk = tuple(parts[1].split(","))
            cards = tuple(int(c) for c in parts[2].split(","))
            expected = tuple(response_card(v, supports, diagram.parents(v)) for v in blk)
            if cards != expected:
                raise InputError(f"line {lineno}: block signature {cards} != {expected}")
            pending = blk
        elif parts[0] == "probs":
            if pending is None:
                raise InputError(f"line {lineno}: probs before block header")
            shape = tuple(response_card(v, supports, diagram.parents(v)) for v in pending)
            vals = np.asarray([float(t) for t in parts[1:]])
            tables[pending] = vals.reshape(shape)
            pending = None
        else:
            raise InputError(f"line {lineno}: unknown directive {parts[0]!r}")
    return CanonicalModel(diagram, supports, tables)
