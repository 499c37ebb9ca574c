"""Built-in multi-domain ground-truth models used by tests and the CLI.

Each fixture bundles the selection diagram with one discrete SCM per domain
(including the target ``"*"`` when a concrete target is defined).  Normal
exogenous draws appearing inside threshold mechanisms are discretized by
8-point quantile binning: the bin values are the mid-quantile points
Φ^{-1}((k + 0.5)/8) with equal mass 1/8, which preserves every
threshold-crossing probability used by the mechanisms to well under 0.01.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import InputError
from .graphs import CausalDiagram, SelectionDiagram
from .scm import DiscreteSCM, ExoVar, JointTable, TabularClassifier, tabulate_mechanism

FIXTURE_NAMES = ("bow", "anti_causal", "lung_cancer", "alzheimer", "covariate_shift")
DIAGRAM_FIXTURE_NAMES = ("simplify", "complex", "neural_tr")


@dataclass(frozen=True)
class FixtureBundle:
    """Selection diagram plus per-domain SCMs and the prediction label."""

    name: str
    sel: SelectionDiagram
    scms: dict = field(default_factory=dict)
    label: str | None = None

    @property
    def supports(self) -> dict:
        if self.scms:
            return next(iter(self.scms.values())).supports
        return {v: (0, 1) for v in self.sel.base.nodes}


def normal_bins(k: int = 8) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Mid-quantile discretization of N(0,1): values and equal probabilities."""
    values = tuple(float(norm.ppf((i + 0.5) / k)) for i in range(k))
    return values, tuple([1.0 / k] * k)


def _xor(*args) -> int:
    out = 0
    for a in args:
        out ^= int(a)
    return out


def _bow_scm(diagram, u_x: float, or_mechanism: bool) -> DiscreteSCM:
    supports = {"X": (0, 1), "Y": (0, 1)}
    exo = [
        ExoVar.bernoulli("U_X", u_x),
        ExoVar.bernoulli("U_Y", 0.05),
        ExoVar.bernoulli("U_XY", 0.95),
    ]
    exo_scope = {"U_X": {"X"}, "U_Y": {"Y"}, "U_XY": {"X", "Y"}}
    exo_supports = {u.name: u.support for u in exo}

    def f_x(pa, ex):
        return _xor(ex["U_X"], ex["U_XY"])

    def f_y(pa, ex):
        base = _xor(pa["X"], ex["U_XY"])
        return int(base or ex["U_Y"]) if or_mechanism else _xor(base, ex["U_Y"])

    mechs = {
        "X": tabulate_mechanism("X", (), ("U_X", "U_XY"), supports, exo_supports, f_x),
        "Y": tabulate_mechanism("Y", ("X",), ("U_Y", "U_XY"), supports, exo_supports, f_y),
    }
    return DiscreteSCM(diagram, supports, exo, exo_scope, mechs)


def _bow() -> FixtureBundle:
    diagram = CausalDiagram(("X", "Y"), [("X", "Y")], [("X", "Y")])
    sel = SelectionDiagram.from_target_deltas(diagram, {"1": {"X"}, "2": {"Y"}})
    scms = {
        "1": _bow_scm(diagram, 0.2, or_mechanism=False),
        "2": _bow_scm(diagram, 0.9, or_mechanism=True),
        # Target: X side pinned by invariance with domain 2, Y side with domain 1.
        "*": _bow_scm(diagram, 0.9, or_mechanism=False),
    }
    return FixtureBundle("bow", sel, scms, "Y")


def _anti_causal_scm(diagram, p_c: float, p_w: float) -> DiscreteSCM:
    c_nodes = tuple(f"C{j}" for j in range(1, 11))
    supports = {v: (0, 1) for v in diagram.nodes}
    exo = [ExoVar.bernoulli(f"U_{c}", p_c) for c in c_nodes]
    exo += [
        ExoVar.bernoulli("U_YW", 0.2),
        ExoVar.bernoulli("U_W", p_w),
        ExoVar.bernoulli("U_Z", 0.9),
    ]
    exo_scope = {f"U_{c}": {c} for c in c_nodes}
    exo_scope.update({"U_YW": {"Y", "W"}, "U_W": {"W"}, "U_Z": {"Z"}})
    exo_supports = {u.name: u.support for u in exo}
    mechs = {}
    for c in c_nodes:
        mechs[c] = tabulate_mechanism(
            c, (), (f"U_{c}",), supports, exo_supports, lambda pa, ex, c=c: ex[f"U_{c}"]
        )
    mechs["W"] = tabulate_mechanism(
        "W", (), ("U_YW", "U_W"), supports, exo_supports,
        lambda pa, ex: _xor(ex["U_YW"], ex["U_W"]),
    )
    mechs["Y"] = tabulate_mechanism(
        "Y", c_nodes, ("U_YW",), supports, exo_supports,
        lambda pa, ex: _xor(ex["U_YW"], *pa.values()),
    )
    mechs["Z"] = tabulate_mechanism(
        "Z", ("W", "Y"), ("U_Z",), supports, exo_supports,
        lambda pa, ex: pa["Y"] * ex["U_Z"] + pa["W"] * (1 - ex["U_Z"]),
    )
    return DiscreteSCM(diagram, supports, exo, exo_scope, mechs)


def _anti_causal() -> FixtureBundle:
    c_nodes = tuple(f"C{j}" for j in range(1, 11))
    nodes = c_nodes + ("W", "Y", "Z")
    directed = [(c, "Y") for c in c_nodes] + [("W", "Z"), ("Y", "Z")]
    diagram = CausalDiagram(nodes, directed, [("Y", "W")])
    delta = set(c_nodes) | {"W"}
    sel = SelectionDiagram.from_target_deltas(diagram, {"1": delta, "2": delta})
    scms = {
        "1": _anti_causal_scm(diagram, 0.1, 0.01),
        "2": _anti_causal_scm(diagram, 0.5, 0.02),
        "*": _anti_causal_scm(diagram, 0.7, 0.5),
    }
    return FixtureBundle("anti_causal", sel, scms, "Y")


def _lung_cancer_scm(diagram, target: bool, d: int = 2) -> DiscreteSCM:
    w_nodes = tuple(f"W{j}" for j in range(1, d + 1))
    bins, bin_probs = normal_bins(8)
    supports = {w: bins for w in w_nodes}
    supports.update({"S": (0, 1), "T": (0, 1), "C": (0, 1)})
    exo = [ExoVar(f"U_{w}", bins, bin_probs) for w in w_nodes]
    exo += [
        ExoVar.bernoulli("U_S", 0.5),
        ExoVar.bernoulli("U_T", 0.5),
        ExoVar.bernoulli("U_SC", 0.5),
    ]
    exo_scope = {f"U_{w}": {w} for w in w_nodes}
    exo_scope.update({"U_S": {"S"}, "U_T": {"T"}, "U_SC": {"S", "C"}})
    exo_supports = {u.name: u.support for u in exo}
    mechs = {}
    for w in w_nodes:
        mechs[w] = tabulate_mechanism(
            w, (), (f"U_{w}",), supports, exo_supports, lambda pa, ex, w=w: ex[f"U_{w}"]
        )

    def f_s(pa, ex):
        wsum = sum(pa[w] for w in w_nodes) / d
        if target:
            return int(wsum + ex["U_SC"] + ex["U_S"] - 2 > 0)
        return int(wsum + ex["U_SC"] + 1.5 * ex["U_S"] - 1 > 0)

    def f_t(pa, ex):
        # Closed threshold: tar occurs in half of the smokers.  With a strict
        # inequality the mechanism would be constant zero and the fixture
        # degenerate (no predictor could be moved off its source risk).
        return int(pa["S"] - 0.5 * ex["U_T"] - 1 >= 0)

    def f_c(pa, ex):
        wsum = sum(pa[w] for w in w_nodes) / d
        return int(pa["T"] - wsum + ex["U_SC"] - 1 > 0)

    mechs["S"] = tabulate_mechanism("S", w_nodes, ("U_S", "U_SC"), supports, exo_supports, f_s)
    mechs["T"] = tabulate_mechanism("T", ("S",), ("U_T",), supports, exo_supports, f_t)
    mechs["C"] = tabulate_mechanism(
        "C", w_nodes + ("T",), ("U_SC",), supports, exo_supports, f_c
    )
    return DiscreteSCM(diagram, supports, exo, exo_scope, mechs)


def _lung_cancer() -> FixtureBundle:
    d = 2
    w_nodes = tuple(f"W{j}" for j in range(1, d + 1))
    nodes = w_nodes + ("S", "T", "C")
    directed = [(w, "S") for w in w_nodes] + [(w, "C") for w in w_nodes]
    directed += [("S", "T"), ("T", "C")]
    diagram = CausalDiagram(nodes, directed, [("S", "C")])
    sel = SelectionDiagram.from_target_deltas(diagram, {"1": {"S"}})
    scms = {
        "1": _lung_cancer_scm(diagram, target=False, d=d),
        "*": _lung_cancer_scm(diagram, target=True, d=d),
    }
    return FixtureBundle("lung_cancer", sel, scms, "C")


def _alzheimer_scm(diagram, target: bool) -> DiscreteSCM:
    bins, bin_probs = normal_bins(8)
    supports = {v: (0, 1) for v in diagram.nodes}
    names = ("U_WY", "U_X2", "U_W", "U_X1X2", "U_Z")
    exo = [ExoVar(n, bins, bin_probs) for n in names]
    exo_scope = {
        "U_WY": {"W", "Y"},
        "U_X2": {"X2"},
        "U_W": {"W"},
        "U_X1X2": {"X1", "X2"},
        "U_Z": {"Z"},
    }
    exo_supports = {u.name: u.support for u in exo}

    def f_w(pa, ex):
        if target:
            return int(pa["X1"] + ex["U_WY"] + 1.5 * ex["U_W"] - 1 > 0)
        return int(pa["X1"] + ex["U_WY"] - ex["U_W"] + 1 > 0)

    mechs = {
        "X1": tabulate_mechanism(
            "X1", (), ("U_X1X2",), supports, exo_supports,
            lambda pa, ex: int(ex["U_X1X2"] > 0),
        ),
        "X2": tabulate_mechanism(
            "X2", (), ("U_X2", "U_X1X2"), supports, exo_supports,
            lambda pa, ex: int(ex["U_X1X2"] + ex["U_X2"] > 0),
        ),
        "W": tabulate_mechanism("W", ("X1",), ("U_WY", "U_W"), supports, exo_supports, f_w),
        "Y": tabulate_mechanism(
            "Y", ("X1", "W"), ("U_WY",), supports, exo_supports,
            lambda pa, ex: int(pa["W"] - ex["U_WY"] + 0.1 * pa["X1"] - 1 > 0),
        ),
        "Z": tabulate_mechanism(
            "Z", ("Y",), ("U_Z",), supports, exo_supports,
            lambda pa, ex: int(pa["Y"] + ex["U_Z"] > 0.5),
        ),
    }
    return DiscreteSCM(diagram, supports, exo, exo_scope, mechs)


def _alzheimer() -> FixtureBundle:
    nodes = ("X1", "X2", "W", "Y", "Z")
    directed = [("X1", "W"), ("X1", "Y"), ("W", "Y"), ("Y", "Z")]
    diagram = CausalDiagram(nodes, directed, [("X1", "X2"), ("W", "Y")])
    sel = SelectionDiagram.from_target_deltas(diagram, {"1": {"W"}})
    scms = {
        "1": _alzheimer_scm(diagram, target=False),
        "*": _alzheimer_scm(diagram, target=True),
    }
    return FixtureBundle("alzheimer", sel, scms, "Y")


def _covariate_shift_scm(diagram, p_x: float) -> DiscreteSCM:
    supports = {"X": (0, 1), "Y": (0, 1)}
    exo = [ExoVar.bernoulli("U_X", p_x), ExoVar.bernoulli("U_Y", 0.1)]
    exo_scope = {"U_X": {"X"}, "U_Y": {"Y"}}
    exo_supports = {u.name: u.support for u in exo}
    mechs = {
        "X": tabulate_mechanism(
            "X", (), ("U_X",), supports, exo_supports, lambda pa, ex: ex["U_X"]
        ),
        "Y": tabulate_mechanism(
            "Y", ("X",), ("U_Y",), supports, exo_supports,
            lambda pa, ex: _xor(pa["X"], ex["U_Y"]),
        ),
    }
    return DiscreteSCM(diagram, supports, exo, exo_scope, mechs)


def _covariate_shift() -> FixtureBundle:
    diagram = CausalDiagram(("X", "Y"), [("X", "Y")], [])
    sel = SelectionDiagram.from_target_deltas(diagram, {"1": {"X"}})
    scms = {
        "1": _covariate_shift_scm(diagram, 0.3),
        "*": _covariate_shift_scm(diagram, 0.7),
    }
    return FixtureBundle("covariate_shift", sel, scms, "Y")


def _simplify_scm(diagram, u_c: float, u_y: float, u_z: float, y_or: bool) -> DiscreteSCM:
    supports = {v: (0, 1) for v in diagram.nodes}
    exo = [
        ExoVar("U_CY", (0, 1, 2, 3), (0.4, 0.1, 0.3, 0.2)),
        ExoVar.bernoulli("U_C", u_c),
        ExoVar.bernoulli("U_Y", u_y),
        ExoVar.bernoulli("U_Z", u_z),
        ExoVar.bernoulli("U_W", 0.1),
    ]
    exo_scope = {"U_CY": {"C", "Y"}, "U_C": {"C"}, "U_Y": {"Y"}, "U_Z": {"Z"}, "U_W": {"W"}}
    exo_supports = {u.name: u.support for u in exo}

    def f_y(pa, ex):
        hidden = int(ex["U_CY"] >= 2)
        base = int(pa["C"] or hidden) if y_or else _xor(pa["C"], hidden)
        return _xor(base, ex["U_Y"])

    mechs = {
        "C": tabulate_mechanism(
            "C", (), ("U_CY", "U_C"), supports, exo_supports,
            lambda pa, ex: _xor(int(ex["U_CY"] in (1, 3)), ex["U_C"]),
        ),
        "Y": tabulate_mechanism("Y", ("C",), ("U_CY", "U_Y"), supports, exo_supports, f_y),
        "Z": tabulate_mechanism(
            "Z", ("Y",), ("U_Z",), supports, exo_supports,
            lambda pa, ex: _xor(pa["Y"], ex["U_Z"]),
        ),
        "W": tabulate_mechanism(
            "W", ("Z",), ("U_W",), supports, exo_supports,
            lambda pa, ex: _xor(pa["Z"], ex["U_W"]),
        ),
    }
    return DiscreteSCM(diagram, supports, exo, exo_scope, mechs)


def _simplify() -> FixtureBundle:
    diagram = CausalDiagram(
        ("C", "Y", "Z", "W"), [("C", "Y"), ("Y", "Z"), ("Z", "W")], [("C", "Y")]
    )
    sel = SelectionDiagram.from_target_deltas(diagram, {"1": {"C", "Z"}, "2": {"Y"}})
    scms = {
        "1": _simplify_scm(diagram, u_c=0.6, u_y=0.1, u_z=0.25, y_or=False),
        "2": _simplify_scm(diagram, u_c=0.3, u_y=0.3, u_z=0.15, y_or=True),
        # Target: C and Z sides invariant with domain 2, Y side with domain 1.
        "*": _simplify_scm(diagram, u_c=0.3, u_y=0.1, u_z=0.15, y_or=False),
    }
    return FixtureBundle("simplify", sel, scms, "Y")


def _complex() -> FixtureBundle:
    nodes = tuple(f"X{j}" for j in range(1, 10)) + ("Y",)
    directed = [
        ("X2", "X1"), ("Y", "X1"), ("X1", "X3"), ("X5", "Y"), ("X4", "Y"),
        ("X6", "X4"), ("X7", "X6"), ("X8", "X7"), ("X9", "X8"),
    ]
    bidirected = [
        ("X1", "X2"), ("X4", "Y"), ("Y", "X5"),
        ("X6", "X7"), ("X7", "X8"), ("X8", "X9"),
    ]
    diagram = CausalDiagram(nodes, directed, bidirected)
    sel = SelectionDiagram.from_target_deltas(diagram, {"1": {"X2"}, "2": {"X1"}})
    return FixtureBundle("complex", sel, {}, None)


def _neural_tr() -> FixtureBundle:
    nodes = ("C1", "C2", "W1", "W2", "Y", "W3", "Z1", "Z2", "W4", "W5")
    directed = [("C2", "Y"), ("W2", "W3"), ("Y", "Z1"), ("W3", "Z2")]
    bidirected = [
        ("C1", "C2"), ("C2", "W1"), ("W1", "W2"), ("Y", "W3"),
        ("Z1", "Z2"), ("Z2", "W4"), ("W4", "W5"),
    ]
    diagram = CausalDiagram(nodes, directed, bidirected)
    sel = SelectionDiagram.from_target_deltas(
        diagram, {"1": {"Y", "Z1"}, "2": {"C1", "W4"}}
    )
    return FixtureBundle("neural_tr", sel, {}, "Y")


_BUILDERS = {
    "bow": _bow,
    "anti_causal": _anti_causal,
    "lung_cancer": _lung_cancer,
    "alzheimer": _alzheimer,
    "covariate_shift": _covariate_shift,
    "simplify": _simplify,
    "complex": _complex,
    "neural_tr": _neural_tr,
}


def fixture(name: str) -> FixtureBundle:
    """Return a built-in fixture by name."""
    if name not in _BUILDERS:
        raise InputError(
            f"unknown fixture {name!r}; available: {sorted(_BUILDERS)}"
        )
    return _BUILDERS[name]()


def bayes_classifier(p: JointTable, scope, label: str) -> TabularClassifier:
    """Most probable label per feature cell; ties broken by the lowest label."""
    scope = tuple(scope)
    cond = p.conditional((label,), scope)
    supports = {v: p.supports[v] for v in scope + (label,)}
    table = {}
    for combo in itertools.product(*(supports[v] for v in scope)):
        idx = tuple(supports[v].index(c) for v, c in zip(scope, combo))
        table[combo] = supports[label][int(np.argmax(cond[idx]))]
    return TabularClassifier(scope, label, supports, table)


def builtin_classifier(bundle: FixtureBundle, name: str) -> TabularClassifier:
    """Named classifiers reproducing the baselines tied to each fixture."""
    supports = bundle.supports
    if name == "bayes":
        source = bundle.scms[bundle.sel.sources[0]]
        scope = tuple(v for v in bundle.sel.base.nodes if v != bundle.label)
        return bayes_classifier(source.entailed_distribution(), scope, bundle.label)
    if bundle.name == "bow" and name == "notx":
        return TabularClassifier(("X",), "Y", supports, {(0,): 1, (1,): 0})
    if bundle.name == "anti_causal":
        c_nodes = tuple(f"C{j}" for j in range(1, 11))
        if name == "h1":
            scope = c_nodes + ("W",)
            table = {c: _xor(*c) for c in itertools.product((0, 1), repeat=11)}
            return TabularClassifier(scope, "Y", supports, table)
        if name == "h2":
            table = {c: _xor(*c) for c in itertools.product((0, 1), repeat=10)}
            return TabularClassifier(c_nodes, "Y", supports, table)
        if name == "h3":
            return TabularClassifier(("Z",), "Y", supports, {(0,): 0, (1,): 1})
    if bundle.name == "lung_cancer" and name in ("h1", "h2", "h3"):
        scope = {"h1": ("W1", "W2", "S", "T"), "h2": ("W1", "W2", "T"), "h3": ("W1", "W2")}[name]
        source = bundle.scms["1"].entailed_distribution()
        return bayes_classifier(source, scope, "C")
    if bundle.name == "alzheimer" and name in ("h1", "h2", "h3"):
        scope = {"h1": ("X1", "X2", "W"), "h2": ("W",), "h3": ("Z",)}[name]
        source = bundle.scms["1"].entailed_distribution()
        return bayes_classifier(source, scope, "Y")
    raise InputError(f"classifier {name!r} is not defined for fixture {bundle.name!r}")
