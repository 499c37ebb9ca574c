"""Discrete structural causal models: exact evaluation, sampling, risk.

All endogenous and exogenous supports are finite, so entailed distributions
are computed exactly by summing exogenous configurations through the
mechanism tables.  Probabilities are 64-bit floats with explicit
renormalization after marginalization.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, InputError
from .graphs import CausalDiagram

DEFAULT_EXO_BUDGET = 2**24


def _index_maps(supports: dict) -> dict:
    return {v: {val: k for k, val in enumerate(vals)} for v, vals in supports.items()}


@dataclass(frozen=True)
class JointTable:
    """Exact joint distribution over an ordered scope of discrete variables."""

    scope: tuple[str, ...]
    supports: dict
    probs: np.ndarray = field(compare=False)

    def __init__(self, scope, supports, probs):
        scope = tuple(scope)
        supports = {v: tuple(supports[v]) for v in scope}
        probs = np.asarray(probs, dtype=float)
        expected = tuple(len(supports[v]) for v in scope)
        if probs.shape != expected:
            raise InputError(f"probability table shape {probs.shape} != {expected}")
        if np.any(probs < -1e-12):
            raise InputError("negative probability entry")
        total = float(probs.sum())
        if abs(total - 1.0) > 1e-9:
            raise InputError(f"probabilities sum to {total}, not 1")
        object.__setattr__(self, "scope", scope)
        object.__setattr__(self, "supports", supports)
        object.__setattr__(self, "probs", np.clip(probs, 0.0, None))

    def marginal(self, nodes) -> "JointTable":
        """Marginal over nodes, returned in the requested order."""
        nodes = tuple(nodes)
        missing = set(nodes) - set(self.scope)
        if missing:
            raise InputError(f"nodes outside scope: {sorted(missing)}")
        drop = tuple(i for i, v in enumerate(self.scope) if v not in nodes)
        reduced = self.probs.sum(axis=drop) if drop else self.probs
        kept = tuple(v for v in self.scope if v in nodes)
        perm = tuple(kept.index(v) for v in nodes)
        table = np.transpose(reduced, perm)
        table = table / table.sum()
        return JointTable(nodes, {v: self.supports[v] for v in nodes}, table)

    def prob(self, assignment: dict) -> float:
        idx = tuple(
            self.supports[v].index(assignment[v]) for v in self.scope
        )
        return float(self.probs[idx])

    def conditional(self, nodes, given) -> np.ndarray:
        """P(nodes | given) as an array with axes (given..., nodes...).

        Zero-probability conditioning cells yield uniform slices.
        """
        nodes, given = tuple(nodes), tuple(given)
        joint = self.marginal(given + nodes).probs
        denom = joint.sum(axis=tuple(range(len(given), len(given) + len(nodes))), keepdims=True)
        k = int(np.prod([len(self.supports[v]) for v in nodes])) if nodes else 1
        out = np.where(denom > 0, joint / np.where(denom > 0, denom, 1.0), 1.0 / k)
        return out

    def total_variation(self, other: "JointTable") -> float:
        if other.scope != self.scope:
            other = other.marginal(self.scope)
        return 0.5 * float(np.abs(self.probs - other.probs).sum())


@dataclass(frozen=True)
class FunctionalTable:
    """Real-valued function of a discrete variable subset, materialized."""

    scope: tuple[str, ...]
    supports: dict
    values: np.ndarray = field(compare=False)

    def __init__(self, scope, supports, values):
        scope = tuple(scope)
        supports = {v: tuple(supports[v]) for v in scope}
        values = np.asarray(values, dtype=float)
        expected = tuple(len(supports[v]) for v in scope)
        if values.shape != expected:
            raise InputError(f"functional table shape {values.shape} != {expected}")
        object.__setattr__(self, "scope", scope)
        object.__setattr__(self, "supports", supports)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value: float) -> "FunctionalTable":
        return cls((), {}, np.asarray(value, dtype=float))


def expectation(p: JointTable, psi: FunctionalTable) -> float:
    """Σ_w ψ(w)·P(w) for ψ over a subset of p's scope."""
    if not set(psi.scope) <= set(p.scope):
        raise InputError("psi scope not contained in distribution scope")
    if not psi.scope:
        return float(psi.values)
    marg = p.marginal(psi.scope)
    for v in psi.scope:
        if marg.supports[v] != psi.supports[v]:
            raise InputError(f"support mismatch for {v!r}")
    return float((marg.probs * psi.values).sum())


@dataclass(frozen=True)
class TabularClassifier:
    """Deterministic map from a feature subset's support to a label support."""

    input_scope: tuple[str, ...]
    label: str
    supports: dict
    table: dict

    def __init__(self, input_scope, label, supports, table):
        input_scope = tuple(input_scope)
        supports = {v: tuple(supports[v]) for v in input_scope + (label,)}
        table = dict(table)
        label_support = set(supports[label])
        for combo in itertools.product(*(supports[v] for v in input_scope)):
            if combo not in table:
                raise InputError(f"classifier table missing input {combo}")
            if table[combo] not in label_support:
                raise InputError(f"classifier output {table[combo]!r} outside label support")
        object.__setattr__(self, "input_scope", input_scope)
        object.__setattr__(self, "label", label)
        object.__setattr__(self, "supports", supports)
        object.__setattr__(self, "table", table)

    def predict(self, assignment: dict):
        return self.table[tuple(assignment[v] for v in self.input_scope)]

    def loss_table(self, loss: np.ndarray) -> FunctionalTable:
        """ψ(x, y) = loss[y, h(x)] over input_scope + (label,)."""
        scope = self.input_scope + (self.label,)
        label_vals = self.supports[self.label]
        shape = tuple(len(self.supports[v]) for v in scope)
        values = np.zeros(shape)
        for combo in itertools.product(*(self.supports[v] for v in self.input_scope)):
            pred = label_vals.index(self.table[combo])
            idx = tuple(self.supports[v].index(c) for v, c in zip(self.input_scope, combo))
            for yi in range(len(label_vals)):
                values[idx + (yi,)] = loss[yi, pred]
        return FunctionalTable(scope, self.supports, values)


def conditional_mean(p: JointTable, scope, label: str) -> FunctionalTable:
    """E_P[label | scope] as a real-valued table; label support must be numeric."""
    scope = tuple(scope)
    vals = np.asarray(p.supports[label], dtype=float)
    if scope:
        cond = p.conditional((label,), scope)
        return FunctionalTable(scope, p.supports, cond @ vals)
    marg = p.marginal((label,))
    return FunctionalTable((), {}, float(marg.probs @ vals))


def squared_error(predictor: FunctionalTable, supports, label: str) -> FunctionalTable:
    """ψ(x, y) = (y − predictor(x))² over the predictor's scope plus the label."""
    scope = predictor.scope + (label,)
    merged = dict(predictor.supports)
    merged[label] = tuple(supports[label])
    y = np.asarray(merged[label], dtype=float)
    values = (y.reshape((1,) * predictor.values.ndim + (-1,))
              - predictor.values[..., None]) ** 2
    return FunctionalTable(scope, merged, values)


def zero_one_loss(label_support) -> np.ndarray:
    k = len(label_support)
    return 1.0 - np.eye(k)


def risk(p: JointTable, h: TabularClassifier, loss: np.ndarray | None = None) -> float:
    """E_P[loss(Y, h(X))], exact summation."""
    if loss is None:
        loss = zero_one_loss(h.supports[h.label])
    return expectation(p, h.loss_table(np.asarray(loss, dtype=float)))


@dataclass(frozen=True)
class ExoVar:
    """Exogenous variable with a finite support and probability vector."""

    name: str
    support: tuple
    probs: tuple[float, ...]

    def __init__(self, name, support, probs):
        support, probs = tuple(support), tuple(float(p) for p in probs)
        if len(support) != len(probs):
            raise InputError(f"exogenous {name!r}: support/probability length mismatch")
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-12:
            raise InputError(f"exogenous {name!r}: invalid probability vector")
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def bernoulli(cls, name: str, p: float) -> "ExoVar":
        return cls(name, (0, 1), (1.0 - p, p))


@dataclass(frozen=True)
class Mechanism:
    """Total lookup table (parent values × exogenous values) → node value."""

    node: str
    parent_order: tuple[str, ...]
    exo_order: tuple[str, ...]
    table: dict

    def __call__(self, pa_vals: tuple, exo_vals: tuple):
        return self.table[pa_vals + exo_vals]


class DiscreteSCM:
    """Finite-support SCM with mutually independent exogenous variables."""

    def __init__(self, diagram: CausalDiagram, supports: dict, exo_vars, exo_scope: dict,
                 mechanisms: dict):
        self.diagram = diagram
        self.supports = {v: tuple(supports[v]) for v in diagram.nodes}
        self.exo_vars = tuple(exo_vars)
        self.exo_by_name = {u.name: u for u in self.exo_vars}
        self.exo_scope = {u.name: frozenset(exo_scope.get(u.name, ())) for u in self.exo_vars}
        for name, scope in self.exo_scope.items():
            diagram._check_nodes(scope)
        self.mechanisms = dict(mechanisms)
        self._validate()

    def _validate(self) -> None:
        for v in self.diagram.nodes:
            if v not in self.mechanisms:
                raise InputError(f"missing mechanism for {v!r}")
            mech = self.mechanisms[v]
            if tuple(mech.parent_order) != self.diagram.parents(v):
                raise InputError(f"mechanism for {v!r} disagrees with diagram parents")
            expected_exo = self.exo_parents(v)
            if tuple(mech.exo_order) != expected_exo:
                raise InputError(f"mechanism for {v!r} disagrees with exogenous scope")
            spaces = [self.supports[p] for p in mech.parent_order]
            spaces += [self.exo_by_name[u].support for u in mech.exo_order]
            support = set(self.supports[v])
            for combo in itertools.product(*spaces):
                if combo not in mech.table:
                    raise InputError(f"mechanism for {v!r} not total: missing {combo}")
                if mech.table[combo] not in support:
                    raise InputError(f"mechanism for {v!r} outputs outside support")

    def exo_parents(self, node: str) -> tuple[str, ...]:
        """Exogenous inputs of node, in declaration order."""
        return tuple(u.name for u in self.exo_vars if node in self.exo_scope[u.name])

    def exo_config_count(self) -> int:
        n = 1
        for u in self.exo_vars:
            n *= len(u.support)
        return n

    def evaluate(self, exo_assignment: dict) -> dict:
        """Endogenous values entailed by one exogenous configuration."""
        out: dict = {}
        for v in self.diagram.topological_order():
            mech = self.mechanisms[v]
            pa = tuple(out[p] for p in mech.parent_order)
            ex = tuple(exo_assignment[u] for u in mech.exo_order)
            out[v] = mech(pa, ex)
        return out

    def entailed_distribution(self, budget: int = DEFAULT_EXO_BUDGET) -> JointTable:
        """Exact P(v) by summing exogenous configuration probabilities."""
        if self.exo_config_count() > budget:
            raise BudgetError(
                f"{self.exo_config_count()} exogenous configurations exceed budget "
                f"{budget}; draw samples instead"
            )
        scope = self.diagram.nodes
        idx = _index_maps(self.supports)
        shape = tuple(len(self.supports[v]) for v in scope)
        probs = np.zeros(shape)
        names = [u.name for u in self.exo_vars]
        for combo in itertools.product(*(u.support for u in self.exo_vars)):
            weight = 1.0
            for u, val in zip(self.exo_vars, combo):
                weight *= u.probs[u.support.index(val)]
            if weight == 0.0:
                continue
            vals = self.evaluate(dict(zip(names, combo)))
            probs[tuple(idx[v][vals[v]] for v in scope)] += weight
        return JointTable(scope, self.supports, probs)

    def sample(self, n: int, seed: int, domain: str = "") -> "Dataset":
        """n i.i.d. endogenous rows; deterministic given seed."""
        if n < 0:
            raise InputError("sample size must be >= 0")
        rng = np.random.default_rng(seed)
        scope = self.diagram.nodes
        idx = _index_maps(self.supports)
        draws = {
            u.name: rng.choice(len(u.support), size=n, p=np.asarray(u.probs))
            for u in self.exo_vars
        }
        rows = np.empty((n, len(scope)), dtype=np.int64)
        for i in range(n):
            exo = {u.name: u.support[draws[u.name][i]] for u in self.exo_vars}
            vals = self.evaluate(exo)
            rows[i] = [idx[v][vals[v]] for v in scope]
        return Dataset(domain, scope, self.supports, rows)


@dataclass(frozen=True)
class Dataset:
    """Rows of full endogenous assignments from one domain, stored as indices."""

    domain: str
    scope: tuple[str, ...]
    supports: dict
    rows: np.ndarray = field(compare=False)

    def __init__(self, domain, scope, supports, rows):
        scope = tuple(scope)
        supports = {v: tuple(supports[v]) for v in scope}
        rows = np.asarray(rows, dtype=np.int64).reshape(-1, len(scope))
        for j, v in enumerate(scope):
            if rows.size and (rows[:, j].min() < 0 or rows[:, j].max() >= len(supports[v])):
                raise InputError(f"row value outside support of {v!r}")
        object.__setattr__(self, "domain", domain)
        object.__setattr__(self, "scope", scope)
        object.__setattr__(self, "supports", supports)
        object.__setattr__(self, "rows", rows)

    def __len__(self) -> int:
        return self.rows.shape[0]

    def empirical_joint(self, smoothing: float = 0.0) -> JointTable:
        """Plug-in joint with optional add-λ smoothing."""
        shape = tuple(len(self.supports[v]) for v in self.scope)
        counts = np.full(shape, float(smoothing))
        if len(self):
            np.add.at(counts, tuple(self.rows[:, j] for j in range(len(self.scope))), 1.0)
        total = counts.sum()
        if total == 0:
            raise InputError("empty dataset with no smoothing has no joint")
        return JointTable(self.scope, self.supports, counts / total)

    def values(self, node: str) -> np.ndarray:
        j = self.scope.index(node)
        support = np.asarray(self.supports[node], dtype=object)
        return support[self.rows[:, j]]


def datasets_to_csv(datasets) -> str:
    """Serialize datasets as CSV with node columns plus a domain column."""
    datasets = list(datasets)
    if not datasets:
        raise InputError("no datasets to serialize")
    scope = datasets[0].scope
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(list(scope) + ["domain"])
    for ds in datasets:
        if ds.scope != scope:
            raise InputError("datasets disagree on scope")
        for i in range(len(ds)):
            writer.writerow(
                [ds.supports[v][ds.rows[i, j]] for j, v in enumerate(scope)] + [ds.domain]
            )
    return buf.getvalue()


def datasets_from_csv(text: str, supports: dict) -> list[Dataset]:
    """Parse the CSV dataset format into one Dataset per domain."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration as exc:
        raise InputError("empty dataset file") from exc
    if not header or header[-1] != "domain":
        raise InputError("dataset CSV must end with a 'domain' column")
    scope = tuple(header[:-1])
    for v in scope:
        if v not in supports:
            raise InputError(f"dataset column {v!r} has no declared support")
    idx = {v: {str(val): k for k, val in enumerate(supports[v])} for v in scope}
    by_domain: dict[str, list] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(scope) + 1:
            raise InputError(f"dataset line {lineno}: wrong column count")
        try:
            vals = [idx[v][row[j]] for j, v in enumerate(scope)]
        except KeyError as exc:
            raise InputError(f"dataset line {lineno}: value outside support") from exc
        by_domain.setdefault(row[-1], []).append(vals)
    return [
        Dataset(dom, scope, {v: supports[v] for v in scope}, np.asarray(rows))
        for dom, rows in by_domain.items()
    ]


def parse_scm(text: str, diagram: CausalDiagram) -> DiscreteSCM:
    """Parse the SCM text format against a known diagram.

    Sections: ``var <name> <values...>``, ``exo <name> vals <v...> probs <p...>``,
    ``scope <exo> <endo...>``, ``mech <node>`` followed by ``row <inputs...> <out>``
    lines covering parent values then exogenous values in declaration order.
    """

    def parse_val(tok: str):
        try:
            return int(tok)
        except ValueError:
            try:
                return float(tok)
            except ValueError:
                raise InputError(f"non-numeric value {tok!r}") from None

    supports: dict = {}
    exo_vars: list[ExoVar] = []
    exo_scope: dict = {}
    mech_rows: dict[str, list] = {}
    current_mech: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0]
        try:
            if kind == "var":
                supports[parts[1]] = tuple(parse_val(t) for t in parts[2:])
                current_mech = None
            elif kind == "exo":
                if parts[2] != "vals" or "probs" not in parts:
                    raise InputError(f"line {lineno}: expected 'exo <name> vals ... probs ...'")
                split = parts.index("probs")
                vals = tuple(parse_val(t) for t in parts[3:split])
                probs = tuple(float(t) for t in parts[split + 1:])
                exo_vars.append(ExoVar(parts[1], vals, probs))
                current_mech = None
            elif kind == "scope":
                exo_scope[parts[1]] = frozenset(parts[2:])
                current_mech = None
            elif kind == "mech":
                current_mech = parts[1]
                mech_rows.setdefault(current_mech, [])
            elif kind == "row":
                if current_mech is None:
                    raise InputError(f"line {lineno}: 'row' outside a mech section")
                vals = [parse_val(t) for t in parts[1:]]
                mech_rows[current_mech].append((tuple(vals[:-1]), vals[-1]))
            else:
                raise InputError(f"line {lineno}: unknown directive {kind!r}")
        except IndexError as exc:
            raise InputError(f"line {lineno}: malformed line {raw!r}") from exc
    missing = set(diagram.nodes) - set(supports)
    if missing:
        raise InputError(f"missing var declarations: {sorted(missing)}")
    exo_names = [u.name for u in exo_vars]
    mechanisms = {}
    for v in diagram.nodes:
        if v not in mech_rows:
            raise InputError(f"missing mechanism section for {v!r}")
        pa = diagram.parents(v)
        ex = tuple(u for u in exo_names if v in exo_scope.get(u, ()))
        mechanisms[v] = Mechanism(v, pa, ex, dict(mech_rows[v]))
    return DiscreteSCM(diagram, supports, exo_vars, exo_scope, mechanisms)


def serialize_scm(scm: DiscreteSCM) -> str:
    """Inverse of parse_scm."""
    lines = []
    for v in scm.diagram.nodes:
        lines.append("var " + v + " " + " ".join(map(str, scm.supports[v])))
    for u in scm.exo_vars:
        lines.append(
            f"exo {u.name} vals " + " ".join(map(str, u.support))
            + " probs " + " ".join(repr(p) for p in u.probs)
        )
        if scm.exo_scope[u.name]:
            lines.append(f"scope {u.name} " + " ".join(sorted(scm.exo_scope[u.name])))
    for v in scm.diagram.nodes:
        mech = scm.mechanisms[v]
        lines.append(f"mech {v}")
        spaces = [scm.supports[p] for p in mech.parent_order]
        spaces += [scm.exo_by_name[u].support for u in mech.exo_order]
        for combo in itertools.product(*spaces):
            lines.append(
                "row " + " ".join(map(str, combo)) + " " + str(mech.table[combo])
            )
    return "\n".join(lines) + "\n"


def tabulate_mechanism(node, parents, exos, supports, exo_supports, fn) -> Mechanism:
    """Materialize fn(pa_dict, exo_dict) into a total Mechanism table."""
    parents, exos = tuple(parents), tuple(exos)
    table = {}
    spaces = [supports[p] for p in parents] + [exo_supports[u] for u in exos]
    for combo in itertools.product(*spaces):
        pa = dict(zip(parents, combo[: len(parents)]))
        ex = dict(zip(exos, combo[len(parents):]))
        table[combo] = fn(pa, ex)
    return Mechanism(node, parents, exos, table)
